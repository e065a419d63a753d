//! Built-in data generating processes with closed-form truth.
//!
//! Every design draws `x ~ U[0,1]^d` and uses `g(x) = sin(2 pi x_1)`.
//!
//! * `qr1d`: `y = g(x) + s(x) e`, `s(x) = (1 + 0.2 x) / sqrt(3)`, `e ~ t_3`.
//!   Conditional `q`-quantile `g(x) + s(x) F_3^{-1}(q)`; the noise density is
//!   bounded and `g` is smooth, so the quantile process is smooth in `(x, q)`.
//! * `dr1d`: `y = g(x) + e`, `e ~ N(0, 1)`, distribution regression with the
//!   logit link; index `logit(Phi(q - g(x)))`.
//! * `lp1d`: `y = g(x) + e`, `e ~ Laplace(0, 0.5)`; symmetric noise puts the
//!   `L_p` location at `g(x)` for every `p > 1`.
//! * `logit1d` / `logit2d`: `P(y = 1 | x) = logistic(g(x) [+ 0.5 cos(pi x_2)])`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use pmest::loss::{logistic, Link, LossModel};
use pmest::rng::{substream, tags};
use pmest::{Dataset, Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

pub const LAPLACE_SCALE: f64 = 0.5;
const T3_SCALE: f64 = 0.577_350_269_189_625_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DgpName {
    Qr1d,
    Dr1d,
    Lp1d,
    Logit1d,
    Logit2d,
}

impl FromStr for DgpName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qr1d" => Ok(Self::Qr1d),
            "dr1d" => Ok(Self::Dr1d),
            "lp1d" => Ok(Self::Lp1d),
            "logit1d" => Ok(Self::Logit1d),
            "logit2d" => Ok(Self::Logit2d),
            _ => Err(Error::InvalidInput(format!(
                "unknown DGP {s:?} (qr1d|dr1d|lp1d|logit1d|logit2d)"
            ))),
        }
    }
}

impl fmt::Display for DgpName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Qr1d => "qr1d",
            Self::Dr1d => "dr1d",
            Self::Lp1d => "lp1d",
            Self::Logit1d => "logit1d",
            Self::Logit2d => "logit2d",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub name: DgpName,
    pub n: usize,
    pub seed: u64,
    /// Power of the `L_p` loss fitted to `lp1d`.
    #[serde(default = "default_power")]
    pub p: f64,
}

fn default_power() -> f64 {
    2.0
}

impl DgpSpec {
    pub fn new(name: DgpName, n: usize, seed: u64) -> Self {
        Self {
            name,
            n,
            seed,
            p: 2.0,
        }
    }

    pub fn dim(&self) -> usize {
        match self.name {
            DgpName::Logit2d => 2,
            _ => 1,
        }
    }

    /// The loss model matching the design.
    pub fn loss(&self) -> Result<LossModel> {
        match self.name {
            DgpName::Qr1d => LossModel::quantile(Link::Identity, 0.05),
            DgpName::Dr1d => LossModel::distribution(Link::Logit, 2.5),
            DgpName::Lp1d => LossModel::lp(self.p, Link::Identity),
            DgpName::Logit1d | DgpName::Logit2d => Ok(LossModel::logistic()),
        }
    }

    /// Default loss-index grid.
    pub fn default_q_grid(&self) -> Vec<f64> {
        match self.name {
            DgpName::Qr1d => (0..25).map(|j| 0.1 + 0.8 * j as f64 / 24.0).collect(),
            DgpName::Dr1d => (0..9).map(|j| -1.0 + 0.25 * j as f64).collect(),
            _ => vec![0.0],
        }
    }

    /// Draws replicate `rep`; each replicate owns a counter-based stream.
    pub fn generate(&self, rep: u64) -> Result<Dataset> {
        if self.n == 0 {
            return Err(Error::InvalidInput(
                "DGP sample size must be positive".into(),
            ));
        }
        let d = self.dim();
        let mut rng = substream(self.seed, tags::DATA, rep);
        let mut x = Vec::with_capacity(self.n * d);
        let mut y = Vec::with_capacity(self.n);
        let t3 = StudentT::new(3.0).expect("valid degrees of freedom");
        for _ in 0..self.n {
            let xi: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let g = signal(&xi);
            let yi = match self.name {
                DgpName::Qr1d => g + qr_scale(xi[0]) * t3.sample(&mut rng),
                DgpName::Dr1d => g + rng.sample::<f64, _>(StandardNormal),
                DgpName::Lp1d => {
                    let u: f64 = rng.random::<f64>() - 0.5;
                    g - LAPLACE_SCALE * u.signum() * (1.0 - 2.0 * u.abs()).ln()
                }
                DgpName::Logit1d | DgpName::Logit2d => {
                    if rng.random::<f64>() < logistic(g) {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            x.extend(xi);
            y.push(yi);
        }
        Dataset::new(d, x, y)
    }

    /// True index `mu_0^(v)(x, q)` for `|v| <= 1`.
    pub fn mu0(&self, x: &[f64], v: &[usize], q: f64) -> Result<f64> {
        let order: usize = v.iter().sum();
        if order > 1 {
            return Err(Error::InvalidInput(
                "truth is implemented for derivatives of order at most one".into(),
            ));
        }
        let dir = v.iter().position(|&e| e == 1);
        let g = signal(x);
        let dg = dir.map(|j| signal_grad(x, j));
        Ok(match self.name {
            DgpName::Qr1d => {
                let z = t3_quantile(q);
                match dir {
                    None => g + qr_scale(x[0]) * z,
                    Some(_) => dg.unwrap() + 0.2 * T3_SCALE * z,
                }
            }
            DgpName::Dr1d => {
                let n01 = Normal::standard();
                let f = n01.cdf(q - g);
                let logit = (f / (1.0 - f)).ln();
                match dir {
                    None => logit,
                    // d/dx logit(Phi(q - g)) = -phi g' / (F (1 - F)).
                    Some(_) => -n01.pdf(q - g) * dg.unwrap() / (f * (1.0 - f)),
                }
            }
            DgpName::Lp1d | DgpName::Logit1d | DgpName::Logit2d => dg.unwrap_or(g),
        })
    }

    /// `Psi_1(x, eta(mu_0(x, q)); q)`, the derivative of the conditional score mean.
    pub fn psi1(&self, x: &[f64], q: f64) -> Result<f64> {
        Ok(match self.name {
            DgpName::Qr1d => t3_pdf(t3_quantile(q)) / qr_scale(x[0]),
            DgpName::Dr1d => 2.0,
            DgpName::Lp1d => {
                let p = self.p;
                if (p - 2.0).abs() < 1e-15 {
                    2.0
                } else {
                    p * (p - 1.0)
                        * statrs::function::gamma::gamma(p - 1.0)
                        * LAPLACE_SCALE.powf(p - 2.0)
                }
            }
            DgpName::Logit1d | DgpName::Logit2d => {
                let e = logistic(self.mu0(x, &vec![0; x.len()], q)?);
                1.0 / (e * (1.0 - e))
            }
        })
    }
}

fn signal(x: &[f64]) -> f64 {
    let mut g = (2.0 * PI * x[0]).sin();
    if x.len() > 1 {
        g += 0.5 * (PI * x[1]).cos();
    }
    g
}

fn signal_grad(x: &[f64], j: usize) -> f64 {
    match j {
        0 => 2.0 * PI * (2.0 * PI * x[0]).cos(),
        _ => -0.5 * PI * (PI * x[1]).sin(),
    }
}

fn qr_scale(x: f64) -> f64 {
    (1.0 + 0.2 * x) * T3_SCALE
}

/// CDF of Student's t with three degrees of freedom.
pub fn t3_cdf(t: f64) -> f64 {
    let r = t / 3f64.sqrt();
    0.5 + (r / (1.0 + r * r) + r.atan()) / PI
}

pub fn t3_pdf(t: f64) -> f64 {
    6.0 * 3f64.sqrt() / (PI * (3.0 + t * t).powi(2))
}

/// Quantile of `t_3` by safeguarded Newton iteration on the closed-form CDF.
pub fn t3_quantile(q: f64) -> f64 {
    assert!(q > 0.0 && q < 1.0, "quantile level must lie in (0, 1)");
    let (mut lo, mut hi) = (-1e4, 1e4);
    let mut t = 0.0;
    for _ in 0..200 {
        let f = t3_cdf(t) - q;
        if f.abs() < 1e-15 {
            break;
        }
        if f > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let next = t - f / t3_pdf(t);
        t = if next > lo && next < hi {
            next
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-14 {
            break;
        }
    }
    t
}
