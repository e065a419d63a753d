//! Loss/link family: `rho(y, eta; q)`, its a.e. derivative `psi` in `eta`,
//! inverse links, and the plug-in estimators of `Psi_1` and `S_{q,q'}`.
//!
//! Sign convention: `psi = d rho / d eta`, so `E[psi | x] = 0` at the truth and
//! `Psi_1 = d E[psi | x] / d eta > 0` (quantile: `psi = 1(y < eta) - q`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Inverse link `eta(theta)` mapping the linear index to the loss argument.
#[derive(Clone)]
pub enum Link {
    Identity,
    Logit,
    /// Complementary log-log: `eta(a) = 1 - exp(-exp(a))`.
    Cloglog,
    /// `eta(a * theta)` for an inner link and `a > 0`.
    Scaled {
        inner: Box<Link>,
        a: f64,
    },
    Custom(CustomLink),
}

/// User-supplied link given by plain function pointers.
#[derive(Clone, Copy)]
pub struct CustomLink {
    pub name: &'static str,
    pub eta: fn(f64) -> f64,
    pub deta: fn(f64) -> f64,
    pub ddeta: fn(f64) -> f64,
    pub inverse: fn(f64) -> f64,
    pub range: (f64, f64),
}

impl Link {
    pub fn scaled(self, a: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "link scale must be positive, got {a}"
            )));
        }
        Ok(Link::Scaled {
            inner: Box::new(self),
            a,
        })
    }

    #[inline]
    pub fn eta(&self, t: f64) -> f64 {
        match self {
            Link::Identity => t,
            Link::Logit => logistic(t),
            Link::Cloglog => -(-t.exp()).exp_m1(),
            Link::Scaled { inner, a } => inner.eta(a * t),
            Link::Custom(c) => (c.eta)(t),
        }
    }

    #[inline]
    pub fn deta(&self, t: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => {
                let e = logistic(t);
                e * (1.0 - e)
            }
            Link::Cloglog => (t - t.exp()).exp(),
            Link::Scaled { inner, a } => a * inner.deta(a * t),
            Link::Custom(c) => (c.deta)(t),
        }
    }

    #[inline]
    pub fn ddeta(&self, t: f64) -> f64 {
        match self {
            Link::Identity => 0.0,
            Link::Logit => {
                let e = logistic(t);
                e * (1.0 - e) * (1.0 - 2.0 * e)
            }
            Link::Cloglog => (t - t.exp()).exp() * (1.0 - t.exp()),
            Link::Scaled { inner, a } => a * a * inner.ddeta(a * t),
            Link::Custom(c) => (c.ddeta)(t),
        }
    }

    /// `eta^{-1}(u)`; `u` must lie in the open range.
    pub fn inverse(&self, u: f64) -> f64 {
        match self {
            Link::Identity => u,
            Link::Logit => (u / (1.0 - u)).ln(),
            Link::Cloglog => (-(-u).ln_1p()).ln(),
            Link::Scaled { inner, a } => inner.inverse(u) / a,
            Link::Custom(c) => (c.inverse)(u),
        }
    }

    /// Open interval of attainable `eta` values.
    pub fn range(&self) -> (f64, f64) {
        match self {
            Link::Identity => (f64::NEG_INFINITY, f64::INFINITY),
            Link::Logit | Link::Cloglog => (0.0, 1.0),
            Link::Scaled { inner, .. } => inner.range(),
            Link::Custom(c) => c.range,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Link::Identity)
    }

    /// Identity up to a positive rescaling of the index.
    pub fn is_affine(&self) -> bool {
        match self {
            Link::Identity => true,
            Link::Scaled { inner, .. } => inner.is_affine(),
            _ => false,
        }
    }

    fn is_logit_like(&self) -> bool {
        match self {
            Link::Logit => true,
            Link::Scaled { inner, .. } => inner.is_logit_like(),
            _ => false,
        }
    }

    /// Stable key: `identity`, `logit`, `cloglog`, `scaled:<a>:<inner>`, `custom:<name>`.
    pub fn key(&self) -> String {
        match self {
            Link::Identity => "identity".into(),
            Link::Logit => "logit".into(),
            Link::Cloglog => "cloglog".into(),
            Link::Scaled { inner, a } => format!("scaled:{a}:{}", inner.key()),
            Link::Custom(c) => format!("custom:{}", c.name),
        }
    }

    /// Clamps `eta` strictly inside the link range.
    #[inline]
    pub fn clamp_to_range(&self, u: f64) -> f64 {
        let (lo, hi) = self.range();
        let eps = 1e-12;
        if lo.is_finite() && u <= lo + eps {
            lo + eps
        } else if hi.is_finite() && u >= hi - eps {
            hi - eps
        } else {
            u
        }
    }
}

#[inline]
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl fmt::Debug for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Link({})", self.key())
    }
}

impl PartialEq for Link {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Link::Identity),
            "logit" => Ok(Link::Logit),
            "cloglog" => Ok(Link::Cloglog),
            _ => {
                if let Some(rest) = s.strip_prefix("scaled:") {
                    let (a, inner) = rest
                        .split_once(':')
                        .ok_or_else(|| Error::InvalidInput(format!("malformed link key {s:?}")))?;
                    let a: f64 = a
                        .parse()
                        .map_err(|_| Error::InvalidInput(format!("bad link scale in {s:?}")))?;
                    inner.parse::<Link>()?.scaled(a)
                } else {
                    Err(Error::InvalidInput(format!(
                        "unknown link {s:?} (expected identity|logit|cloglog)"
                    )))
                }
            }
        }
    }
}

impl Serialize for Link {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.key())
    }
}

impl<'de> Deserialize<'de> for Link {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum LossKind {
    Quantile,
    Distribution,
    Lp { p: f64 },
    Logistic,
    Huber,
    Tukey,
}

/// Read-only view of a fit that the plug-in hooks consume.
pub trait PlugInContext {
    fn n(&self) -> usize;
    fn response(&self, i: usize) -> f64;
    /// Fitted index `mu_hat(x_i, q)`, if a fit at `q` is available.
    fn index(&self, i: usize, q: f64) -> Option<f64>;
}

/// Value, first and second derivative of `theta -> rho(y, eta(theta); q)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composite {
    pub value: f64,
    pub grad: f64,
    pub hess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub kind: LossKind,
    pub link: Link,
    /// Closed interval of admissible loss indices; a singleton when `q` is absent.
    pub q_domain: (f64, f64),
    /// Multiplier `c` of the difference-quotient bandwidth `c n^{-1/5}` (quantile only).
    #[serde(default = "one")]
    pub density_bandwidth: f64,
}

fn one() -> f64 {
    1.0
}

const PSI1_CLIP: (f64, f64) = (1e-3, 1e3);

impl LossModel {
    /// Check loss on `[eps0, 1 - eps0]`.
    pub fn quantile(link: Link, eps0: f64) -> Result<Self> {
        if !(eps0 > 0.0 && eps0 < 0.5) {
            return Err(Error::InvalidInput(format!(
                "eps0 must lie in (0, 0.5), got {eps0}"
            )));
        }
        Ok(Self {
            kind: LossKind::Quantile,
            link,
            q_domain: (eps0, 1.0 - eps0),
            density_bandwidth: 1.0,
        })
    }

    /// Squared loss on the indicator `1(y <= q)`, `q` in `[-a, a]`.
    pub fn distribution(link: Link, a: f64) -> Result<Self> {
        let (lo, hi) = link.range();
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::LinkRangeInvalid { lo, hi });
        }
        if !(a > 0.0) {
            return Err(Error::InvalidInput(format!(
                "distribution threshold range must be positive, got {a}"
            )));
        }
        Ok(Self {
            kind: LossKind::Distribution,
            link,
            q_domain: (-a, a),
            density_bandwidth: 1.0,
        })
    }

    pub fn lp(p: f64, link: Link) -> Result<Self> {
        if !(p > 1.0 && p <= 2.0) {
            return Err(Error::InvalidP(p));
        }
        Ok(Self {
            kind: LossKind::Lp { p },
            link,
            q_domain: (0.0, 0.0),
            density_bandwidth: 1.0,
        })
    }

    /// Bernoulli (quasi-)likelihood with the logit link.
    pub fn logistic() -> Self {
        Self {
            kind: LossKind::Logistic,
            link: Link::Logit,
            q_domain: (0.0, 0.0),
            density_bandwidth: 1.0,
        }
    }

    /// Huber loss; `q` in `[q_min, q_max]` is the robustness threshold.
    pub fn huber(link: Link, q_min: f64, q_max: f64) -> Result<Self> {
        Self::robust(LossKind::Huber, link, q_min, q_max)
    }

    /// Tukey biweight loss; `q` in `[q_min, q_max]` is the rejection threshold.
    pub fn tukey(link: Link, q_min: f64, q_max: f64) -> Result<Self> {
        Self::robust(LossKind::Tukey, link, q_min, q_max)
    }

    fn robust(kind: LossKind, link: Link, q_min: f64, q_max: f64) -> Result<Self> {
        if !(q_min > 0.0) {
            return Err(Error::NonPositiveTuning(q_min));
        }
        if q_max < q_min {
            return Err(Error::InvalidInput(format!(
                "tuning range [{q_min}, {q_max}] is empty"
            )));
        }
        Ok(Self {
            kind,
            link,
            q_domain: (q_min, q_max),
            density_bandwidth: 1.0,
        })
    }

    /// Builds a model from a CLI key (`quantile|distribution|lp:<p>|logistic|huber|tukey`).
    /// `q_range` overrides the default index domain where one applies.
    pub fn from_key(key: &str, link: Link, q_range: Option<(f64, f64)>) -> Result<Self> {
        let model = match key {
            "quantile" => {
                let eps0 = q_range.map_or(0.05, |r| r.0);
                let mut m = Self::quantile(link, eps0.min(0.49))?;
                if let Some(r) = q_range {
                    m.q_domain = r;
                }
                m
            }
            "distribution" => {
                let (lo, hi) = q_range.unwrap_or((-1.0, 1.0));
                let mut m = Self::distribution(link, lo.abs().max(hi.abs()))?;
                m.q_domain = (lo, hi);
                m
            }
            "logistic" => {
                if !link.is_identity() && !matches!(link, Link::Logit) {
                    return Err(Error::InvalidInput(
                        "logistic loss uses the logit link".into(),
                    ));
                }
                Self::logistic()
            }
            "huber" => {
                let (lo, hi) = q_range.unwrap_or((1.345, 1.345));
                Self::huber(link, lo, hi)?
            }
            "tukey" => {
                let (lo, hi) = q_range.unwrap_or((4.685, 4.685));
                Self::tukey(link, lo, hi)?
            }
            _ => {
                let p = key
                    .strip_prefix("lp:")
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("unknown loss {key:?}")))?;
                Self::lp(p, link)?
            }
        };
        Ok(model)
    }

    pub fn key(&self) -> String {
        match self.kind {
            LossKind::Quantile => "quantile".into(),
            LossKind::Distribution => "distribution".into(),
            LossKind::Lp { p } => format!("lp:{p}"),
            LossKind::Logistic => "logistic".into(),
            LossKind::Huber => "huber".into(),
            LossKind::Tukey => "tukey".into(),
        }
    }

    /// Whether `psi` is continuous in `eta`.
    pub fn smooth(&self) -> bool {
        !matches!(self.kind, LossKind::Quantile)
    }

    /// Hölder exponent of `psi` (metadata).
    pub fn holder_alpha(&self) -> f64 {
        match self.kind {
            LossKind::Lp { p } => p - 1.0,
            _ => 1.0,
        }
    }

    pub fn convex_in_theta(&self) -> bool {
        match self.kind {
            LossKind::Logistic => self.link.is_logit_like(),
            LossKind::Tukey => false,
            _ => self.link.is_affine(),
        }
    }

    pub fn q_is_singleton(&self) -> bool {
        self.q_domain.0 == self.q_domain.1
    }

    pub fn contains_q(&self, q: f64) -> bool {
        q >= self.q_domain.0 - 1e-12 && q <= self.q_domain.1 + 1e-12
    }

    /// Checks responses against the model's support.
    pub fn validate_responses(&self, y: &[f64]) -> Result<()> {
        if matches!(self.kind, LossKind::Logistic) {
            if let Some((row, &value)) = y
                .iter()
                .enumerate()
                .find(|(_, v)| !(**v >= 0.0 && **v <= 1.0))
            {
                return Err(Error::ResponseOutOfRange { row, value });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn rho(&self, y: f64, eta: f64, q: f64) -> f64 {
        match self.kind {
            LossKind::Quantile => (q - if y < eta { 1.0 } else { 0.0 }) * (y - eta),
            LossKind::Distribution => {
                let r = if y <= q { 1.0 } else { 0.0 } - eta;
                r * r
            }
            LossKind::Lp { p } => (y - eta).abs().powf(p),
            LossKind::Logistic => {
                let mut v = 0.0;
                if y > 0.0 {
                    v -= y * eta.ln();
                }
                if y < 1.0 {
                    v -= (1.0 - y) * (-eta).ln_1p();
                }
                v
            }
            LossKind::Huber => {
                let r = (y - eta).abs();
                if r <= q {
                    r * r
                } else {
                    q * (2.0 * r - q)
                }
            }
            LossKind::Tukey => {
                let r = y - eta;
                if r.abs() <= q {
                    let u = 1.0 - r * r / (q * q);
                    q * q * (1.0 - u * u * u)
                } else {
                    q * q
                }
            }
        }
    }

    /// `d rho / d eta` (a.e.).
    #[inline]
    pub fn psi(&self, y: f64, eta: f64, q: f64) -> f64 {
        match self.kind {
            LossKind::Quantile => (if y < eta { 1.0 } else { 0.0 }) - q,
            LossKind::Distribution => -2.0 * (if y <= q { 1.0 } else { 0.0 } - eta),
            LossKind::Lp { p } => {
                let r = eta - y;
                if r == 0.0 {
                    0.0
                } else {
                    p * r.abs().powf(p - 1.0) * r.signum()
                }
            }
            LossKind::Logistic => -y / eta + (1.0 - y) / (1.0 - eta),
            LossKind::Huber => {
                let r = eta - y;
                if r.abs() <= q {
                    2.0 * r
                } else {
                    2.0 * q * r.signum()
                }
            }
            LossKind::Tukey => {
                let r = eta - y;
                if r.abs() <= q {
                    let u = 1.0 - r * r / (q * q);
                    6.0 * r * u * u
                } else {
                    0.0
                }
            }
        }
    }

    /// `d psi / d eta` where it exists; zero for the quantile loss.
    #[inline]
    pub fn dpsi(&self, y: f64, eta: f64, q: f64) -> f64 {
        match self.kind {
            LossKind::Quantile => 0.0,
            LossKind::Distribution => 2.0,
            LossKind::Lp { p } => {
                let r = (eta - y).abs().max(1e-12);
                p * (p - 1.0) * r.powf(p - 2.0)
            }
            LossKind::Logistic => y / (eta * eta) + (1.0 - y) / ((1.0 - eta) * (1.0 - eta)),
            LossKind::Huber => {
                if (eta - y).abs() <= q {
                    2.0
                } else {
                    0.0
                }
            }
            LossKind::Tukey => {
                let r = eta - y;
                if r.abs() <= q {
                    let u = r * r / (q * q);
                    6.0 * (1.0 - u) * (1.0 - 5.0 * u)
                } else {
                    0.0
                }
            }
        }
    }

    /// Values of `eta` at which `rho(y, ., q)` fails to be twice differentiable.
    pub fn kinks(&self, y: f64, q: f64) -> Vec<f64> {
        match self.kind {
            LossKind::Quantile | LossKind::Lp { .. } => vec![y],
            LossKind::Huber | LossKind::Tukey => vec![y - q, y + q],
            LossKind::Distribution | LossKind::Logistic => Vec::new(),
        }
    }

    /// Composite loss in the index. With `tau = Some(t)` the quantile check
    /// function is replaced by its Moreau envelope with parameter `t`.
    #[inline]
    pub fn composite(&self, y: f64, theta: f64, q: f64, tau: Option<f64>) -> Composite {
        if let (LossKind::Logistic, Link::Logit) = (&self.kind, &self.link) {
            // softplus(theta) - y theta, written to avoid overflow.
            let sp = if theta > 0.0 {
                theta + (-theta).exp().ln_1p()
            } else {
                theta.exp().ln_1p()
            };
            let e = logistic(theta);
            return Composite {
                value: sp - y * theta,
                grad: e - y,
                hess: e * (1.0 - e),
            };
        }
        let eta = self.link.clamp_to_range(self.link.eta(theta));
        let d1 = self.link.deta(theta);
        let d2 = self.link.ddeta(theta);
        let (value, psi, dpsi) = match (self.kind, tau) {
            (LossKind::Quantile, Some(t)) => smoothed_check(y - eta, q, t),
            _ => (
                self.rho(y, eta, q),
                self.psi(y, eta, q),
                self.dpsi(y, eta, q),
            ),
        };
        let gn = dpsi * d1 * d1;
        let full = gn + psi * d2;
        Composite {
            value,
            grad: psi * d1,
            hess: if full >= 0.0 { full } else { gn.max(0.0) },
        }
    }

    /// Difference-quotient bracket `(q_lo, q_hi)` for the conditional density at `q`.
    pub fn density_bracket(&self, q: f64, n: usize) -> Option<(f64, f64)> {
        if !matches!(self.kind, LossKind::Quantile) {
            return None;
        }
        // Shrunk symmetrically near the ends so the quotient stays centred at q.
        let floor = 0.5 * self.q_domain.0;
        let delta = (self.density_bandwidth * (n as f64).powf(-0.2))
            .min(q - floor)
            .min(1.0 - floor - q);
        Some((q - delta, q + delta))
    }

    /// Plug-in estimate of `Psi_1(x_i, eta(mu(x_i, q)); q)`.
    pub fn psi1_hat(&self, ctx: &dyn PlugInContext, i: usize, q: f64) -> Result<f64> {
        let theta = index_or_err(ctx, i, q)?;
        let eta = self.link.clamp_to_range(self.link.eta(theta));
        let y = ctx.response(i);
        Ok(match self.kind {
            LossKind::Quantile => {
                let (lo, hi) = self.density_bracket(q, ctx.n()).expect("quantile bracket");
                let spread = self.link.eta(index_or_err(ctx, i, hi)?)
                    - self.link.eta(index_or_err(ctx, i, lo)?);
                let f = (hi - lo) / spread;
                if f.is_nan() || f <= 0.0 {
                    PSI1_CLIP.1
                } else {
                    f.clamp(PSI1_CLIP.0, PSI1_CLIP.1)
                }
            }
            LossKind::Distribution => 2.0,
            LossKind::Logistic => 1.0 / (eta * (1.0 - eta)),
            _ => self.dpsi(y, eta, q).min(1e8),
        })
    }

    /// Plug-in estimate of `S_{q,q'}(x_i) = E[psi(q) psi(q') | x_i]`.
    pub fn s_hat(&self, ctx: &dyn PlugInContext, i: usize, q: f64, q2: f64) -> Result<f64> {
        Ok(match self.kind {
            LossKind::Quantile => q.min(q2) - q * q2,
            LossKind::Distribution => {
                let lo = self.link.eta(index_or_err(ctx, i, q.min(q2))?);
                let hi = self.link.eta(index_or_err(ctx, i, q.max(q2))?);
                4.0 * lo * (1.0 - hi)
            }
            _ => {
                let y = ctx.response(i);
                let e1 = self
                    .link
                    .clamp_to_range(self.link.eta(index_or_err(ctx, i, q)?));
                let e2 = self
                    .link
                    .clamp_to_range(self.link.eta(index_or_err(ctx, i, q2)?));
                self.psi(y, e1, q) * self.psi(y, e2, q2)
            }
        })
    }
}

fn index_or_err(ctx: &dyn PlugInContext, i: usize, q: f64) -> Result<f64> {
    ctx.index(i, q)
        .ok_or_else(|| Error::InvalidInput(format!("no fit available at q = {q}")))
}

/// Moreau envelope of the check function in the residual `u = y - eta`,
/// returned as (value, d/d eta, d^2/d eta^2).
#[inline]
pub fn smoothed_check(u: f64, q: f64, tau: f64) -> (f64, f64, f64) {
    if u > q * tau {
        (q * u - 0.5 * q * q * tau, -q, 0.0)
    } else if u < -(1.0 - q) * tau {
        (
            (q - 1.0) * u - 0.5 * (1.0 - q) * (1.0 - q) * tau,
            1.0 - q,
            0.0,
        )
    } else {
        (0.5 * u * u / tau, -u / tau, 1.0 / tau)
    }
}
