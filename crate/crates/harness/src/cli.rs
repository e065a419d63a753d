//! Command line front end. Exit codes: 0 success, 1 usage, 2 data error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pmest::basis::{check_local_basis, Basis};
use pmest::inference::{
    default_method, level_band, marginal_effect_band, simulate_band, simulate_band_brownian_bridge,
};
use pmest::partition::{Domain, Partition};
use pmest::{
    fit, BasisKind, BasisSpec, BoxRadius, EvalGrid, KnotRule, Link, LossModel, SandwichSet,
    SimMethod, SimOptions, SolverOptions,
};

use crate::config::{ExperimentConfig, Transform};
use crate::dgp::{DgpName, DgpSpec};
use crate::experiments::{run, Study};
use crate::io::{self, IoError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "pmest",
    version,
    about = "Partitioning-based M-estimation with uniform inference"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the coefficient process on a CSV data set.
    Fit(FitArgs),
    /// Uniform confidence band from a saved fit.
    Band(BandArgs),
    /// Report local-basis constants for a partition.
    CheckBasis(CheckBasisArgs),
    /// Monte Carlo studies driven by a JSON config.
    Mc {
        #[arg(value_enum)]
        study: StudyArg,
        #[arg(long)]
        config: PathBuf,
        /// Report path; defaults to the config's `output`, then stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a data set from a built-in generator.
    Simulate {
        #[arg(long)]
        dgp: DgpName,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        rep: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the version.
    Version,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StudyArg {
    Coverage,
    Rates,
    Bahadur,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BasisArg {
    Bspline,
    PiecewisePoly,
}

impl From<BasisArg> for BasisKind {
    fn from(b: BasisArg) -> Self {
        match b {
            BasisArg::Bspline => BasisKind::Bspline,
            BasisArg::PiecewisePoly => BasisKind::PiecewisePoly,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Auto,
    Generic,
    Bridge,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TransformArg {
    Index,
    Level,
    MarginalEffect,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// quantile | distribution | logistic | huber | tukey | lp:<p>
    #[arg(long)]
    pub loss: String,
    /// identity | logit | cloglog | scaled:<a>:<link>
    #[arg(long, default_value = "identity")]
    pub link: String,
    #[arg(long, value_enum, default_value = "bspline")]
    pub basis: BasisArg,
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    /// Cells per coordinate: one value for all, or one per coordinate.
    #[arg(long, value_delimiter = ',', required = true)]
    pub cells: Vec<usize>,
    /// Place knots at empirical quantiles of the covariates.
    #[arg(long)]
    pub quantile_knots: bool,
    /// Loss index grid; defaults to the loss's natural value.
    #[arg(long, value_delimiter = ',')]
    pub q: Vec<f64>,
    /// auto | off | <radius>
    #[arg(long, default_value = "auto")]
    pub box_radius: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BandArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// Subset of the fitted q grid; defaults to all of it.
    #[arg(long, value_delimiter = ',')]
    pub q: Vec<f64>,
    /// Derivative multi-index; defaults to zeros.
    #[arg(long, value_delimiter = ',')]
    pub v: Vec<usize>,
    #[arg(long, value_enum, default_value = "index")]
    pub transform: TransformArg,
    #[arg(long, value_enum, default_value = "auto")]
    pub method: MethodArg,
    /// Evaluation points per cell and coordinate.
    #[arg(long, default_value_t = 10)]
    pub per_cell: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 20_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Band output; `.json` writes the full result, anything else CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckBasisArgs {
    #[arg(long, value_enum, default_value = "bspline")]
    pub basis: BasisArg,
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    #[arg(long)]
    pub cells: usize,
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n_mc: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Failure classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<pmest::Error> for CliError {
    fn from(e: pmest::Error) -> Self {
        let msg = format!("[{}] {e}", e.module());
        if e.is_numerical() {
            CliError::Numerical(msg)
        } else {
            CliError::Data(msg)
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Model(e) => e.into(),
            other => CliError::Data(format!("[io] {other}")),
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(stderr, "{e}")
            } else {
                write!(stdout, "{e}")
            };
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message());
            e.code()
        }
    }
}

fn execute(cmd: Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Fit(a) => cmd_fit(a, stdout),
        Command::Band(a) => cmd_band(a, stdout),
        Command::CheckBasis(a) => cmd_check_basis(a, stdout),
        Command::Mc { study, config, out } => cmd_mc(study, &config, out, stdout),
        Command::Simulate {
            dgp,
            n,
            seed,
            rep,
            out,
        } => {
            let data = DgpSpec::new(dgp, n, seed).generate(rep)?;
            io::write_data(&out, &data)?;
            Ok(())
        }
        Command::Version => writeln!(stdout, "pmest {}", env!("CARGO_PKG_VERSION"))
            .map_err(|e| CliError::Data(e.to_string())),
    }
}

fn default_q(key: &str) -> f64 {
    match key {
        "quantile" => 0.5,
        "huber" => 1.345,
        "tukey" => 4.685,
        _ => 0.0,
    }
}

/// Loss model whose index domain covers `q`.
pub fn parse_loss(key: &str, link: &str, q: &[f64]) -> Result<LossModel, CliError> {
    let link: Link = link.parse().map_err(usage)?;
    let range = match key {
        "quantile" | "distribution" | "huber" | "tukey" if !q.is_empty() => Some(
            q.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                }),
        ),
        _ => None,
    };
    LossModel::from_key(key, link, range).map_err(|e| match e {
        pmest::Error::InvalidInput(m) => CliError::Usage(m),
        other => other.into(),
    })
}

fn parse_box(s: &str) -> Result<BoxRadius, CliError> {
    match s {
        "auto" => Ok(BoxRadius::Auto),
        "off" => Ok(BoxRadius::Off),
        v => v
            .parse::<f64>()
            .ok()
            .filter(|r| *r > 0.0 && r.is_finite())
            .map(BoxRadius::Fixed)
            .ok_or_else(|| usage(format!("invalid box radius {v:?}"))),
    }
}

fn cmd_fit(a: FitArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let data = io::read_data(&a.data)?;
    let d = data.dim();
    let cells = match a.cells.len() {
        1 => vec![a.cells[0]; d],
        k if k == d => a.cells.clone(),
        k => return Err(usage(format!("--cells has {k} values for {d} covariates"))),
    };
    let q = if a.q.is_empty() {
        vec![default_q(&a.loss)]
    } else {
        a.q.clone()
    };
    let loss = parse_loss(&a.loss, &a.link, &q)?;
    let opts = SolverOptions {
        box_radius: parse_box(&a.box_radius)?,
        ..SolverOptions::default()
    };
    let (lower, upper) = bounding_box(&data);
    let rule = if a.quantile_knots {
        KnotRule::Quantile(data.x())
    } else {
        KnotRule::Uniform
    };
    let part = Partition::build(Domain::new(lower, upper)?, &cells, rule)?;
    let basis = Basis::build(part, BasisSpec::new(a.basis.into(), a.order))?;
    let f = fit(&data, &basis, &loss, &q, &opts)?;
    io::write_fit(&a.out, &f, &data)?;
    let bad: Vec<f64> = f
        .q_grid
        .iter()
        .zip(&f.converged)
        .filter(|(_, c)| !**c)
        .map(|(q, _)| *q)
        .collect();
    let _ = writeln!(
        stdout,
        "fitted {} coefficients at {} q values (K = {})",
        f.basis.len(),
        q.len(),
        f.basis.len()
    );
    if !bad.is_empty() {
        let _ = writeln!(
            stdout,
            "warning: solver did not reach tolerance at q = {bad:?}"
        );
    }
    Ok(())
}

/// Covariate bounding box, widened where a coordinate is constant.
fn bounding_box(data: &pmest::Dataset) -> (Vec<f64>, Vec<f64>) {
    let d = data.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in 0..data.n() {
        for (j, &v) in data.row(i).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    for j in 0..d {
        if hi[j] <= lo[j] {
            lo[j] -= 0.5;
            hi[j] += 0.5;
        }
    }
    (lo, hi)
}

fn cmd_band(a: BandArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let (f, data) = io::read_fit(&a.fit)?;
    let q = if a.q.is_empty() {
        f.q_grid.clone()
    } else {
        a.q.clone()
    };
    let transform = match a.transform {
        TransformArg::Index => Transform::Index,
        TransformArg::Level => Transform::Level,
        TransformArg::MarginalEffect => Transform::MarginalEffect,
    };
    let v = if !a.v.is_empty() {
        a.v.clone()
    } else {
        let mut v = vec![0; data.dim()];
        if transform == Transform::MarginalEffect {
            v[0] = 1;
        }
        v
    };
    if a.per_cell == 0 {
        return Err(usage("--per-cell must be positive"));
    }
    let xs = EvalGrid::cell_points(f.basis.partition(), a.per_cell);
    let grid = EvalGrid::new(xs, q, v)?;
    let opts = SimOptions {
        alpha: a.alpha,
        n_draws: a.draws,
        seed: a.seed,
    };
    opts.validate().map_err(usage)?;
    let sand = SandwichSet::build(&f, &data)?;
    let band = match transform {
        Transform::Index => {
            let method = match a.method {
                MethodArg::Auto => default_method(&f.loss),
                MethodArg::Generic => SimMethod::Generic,
                MethodArg::Bridge => SimMethod::BrownianBridge,
            };
            match method {
                SimMethod::Generic => simulate_band(&sand, &grid, &opts)?,
                SimMethod::BrownianBridge => simulate_band_brownian_bridge(&sand, &grid, &opts)?,
            }
        }
        Transform::Level => level_band(&sand, &grid, &opts)?,
        Transform::MarginalEffect => marginal_effect_band(&sand, &grid, &opts)?,
    };
    if a.out.extension().is_some_and(|e| e == "json") {
        io::write_json(&a.out, &band)?;
    } else {
        io::write_band(&a.out, &band)?;
    }
    let _ = writeln!(
        stdout,
        "critical value {:.6} over {} grid points",
        band.crit,
        band.grid.len()
    );
    Ok(())
}

fn cmd_check_basis(a: CheckBasisArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    if a.dim == 0 {
        return Err(usage("--dim must be positive"));
    }
    let part = Partition::build(
        Domain::<f64>::unit(a.dim)?,
        &vec![a.cells; a.dim],
        KnotRule::Uniform,
    )?;
    let basis = Basis::build(part, BasisSpec::new(a.basis.into(), a.order))?;
    let report = check_local_basis(&basis, a.n_mc, a.seed)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    let _ = writeln!(stdout, "{text}");
    Ok(())
}

fn cmd_mc(
    study: StudyArg,
    config: &Path,
    out: Option<PathBuf>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| CliError::Data(format!("[io] {}: {e}", config.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("[config] {}: {e}", config.display())))?;
    let out = out.or_else(|| cfg.output.clone());
    let study = match study {
        StudyArg::Coverage => Study::Coverage,
        StudyArg::Rates => Study::Rates,
        StudyArg::Bahadur => Study::Bahadur,
    };
    let report = run(study, cfg)?;
    match out {
        Some(p) => io::write_json(&p, &report)?,
        None => {
            let text =
                serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
            let _ = writeln!(stdout, "{text}");
        }
    }
    Ok(())
}
