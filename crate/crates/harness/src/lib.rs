//! Data generators, Monte Carlo studies and the command line for `pmest`.

pub mod cli;
pub mod config;
pub mod dgp;
pub mod experiments;
pub mod io;
