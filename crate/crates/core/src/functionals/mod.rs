//! Estimand catalog: survival integrals, the counterfactual median and smooth
//! functionals of the counterfactual distribution function.
//!
//! Non-linear functionals work on a [`Surface`]: cross-fitted one-step
//! estimates of F(t) = P{T(a0) <= t} on a time grid together with their
//! per-record influence values.

pub mod kernel;

use std::fmt;

use thiserror::Error;

use crate::data::Dataset;
use crate::estimators::{variance, wald_ci, CrossFit, EstimationError};
use kernel::{Kernel, KernelError};

#[derive(Debug, Error)]
pub enum FunctionalError {
    #[error("cannot parse estimand '{id}': {detail}")]
    Parse { id: String, detail: String },
    #[error("estimating equation has no sign change on the solve grid")]
    NoRoot,
    #[error("estimating equation decreases by {drop} at t={t}")]
    NonMonotone { t: f64, drop: f64 },
    #[error("distribution-function estimate {value} at t={t} is not strictly inside (0, 1)")]
    BoundaryViolation { t: f64, value: f64 },
    #[error("invalid weight function: {0}")]
    InvalidWeights(String),
    #[error("derivative evaluation failed: {0}")]
    DerivativeEvaluationFailure(String),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Weight function on a time grid, stored as quadrature weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Omega {
    pub times: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Omega {
    pub fn new(times: Vec<f64>, weights: Vec<f64>) -> Result<Self, FunctionalError> {
        if times.is_empty() || times.len() != weights.len() {
            return Err(FunctionalError::InvalidWeights("times and weights must be non-empty and aligned".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FunctionalError::InvalidWeights("times must be strictly increasing".into()));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(FunctionalError::InvalidWeights("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(FunctionalError::InvalidWeights(format!("weights integrate to {total}, not 1")));
        }
        Ok(Self { times, weights })
    }

    /// Point mass at t.
    pub fn point(t: f64) -> Self {
        Self { times: vec![t], weights: vec![1.0] }
    }

    /// Uniform density on [lo, hi] with trapezoid weights on `m` equally spaced points.
    pub fn uniform(lo: f64, hi: f64, m: usize) -> Result<Self, FunctionalError> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) || m < 2 {
            return Err(FunctionalError::InvalidWeights("uniform weight needs lo < hi and at least 2 points".into()));
        }
        let step = (hi - lo) / (m - 1) as f64;
        let times = (0..m).map(|j| lo + step * j as f64).collect();
        let inner = 1.0 / (m - 1) as f64;
        let weights = (0..m).map(|j| if j == 0 || j == m - 1 { inner / 2.0 } else { inner }).collect();
        Self::new(times, weights)
    }

    /// Uniform on the [0.1, 0.6] quantile window of the pooled follow-up times.
    pub fn default_for(data: &Dataset) -> Result<Self, FunctionalError> {
        let mut y: Vec<f64> = data.records().iter().map(|r| r.y).collect();
        y.sort_by(f64::total_cmp);
        let q = |p: f64| y[((p * y.len() as f64).ceil() as usize).clamp(1, y.len()) - 1];
        Self::uniform(q(0.1), q(0.6), 50)
    }
}

/// A catalogued estimand, addressable by id string.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimand {
    Survival {
        tau: f64,
    },
    Brier {
        tau: f64,
        b: f64,
    },
    CfSurvival {
        tau: f64,
        a0: u8,
    },
    Median {
        a0: u8,
    },
    /// `None` selects the default weight for the data at hand.
    LogLog {
        omega: Option<Omega>,
    },
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Survival { tau } => write!(f, "survival(tau={tau})"),
            Self::Brier { tau, b } => write!(f, "brier(tau={tau},b={b})"),
            Self::CfSurvival { tau, a0 } => write!(f, "cf_survival(tau={tau},a0={a0})"),
            Self::Median { a0 } => write!(f, "median(a0={a0})"),
            Self::LogLog { omega: None } => write!(f, "loglog(omega=default)"),
            Self::LogLog { omega: Some(o) } if o.times.len() == 1 => write!(f, "loglog(omega=point:{})", o.times[0]),
            Self::LogLog { omega: Some(o) } => {
                write!(f, "loglog(omega=uniform:{}:{})", o.times[0], o.times[o.times.len() - 1])
            }
        }
    }
}

/// Parses `survival(tau=..)`, `brier(tau=..,b=..)`, `cf_survival(tau=..,a0=..)`,
/// `median(a0=..)` and `loglog(omega=default|point:t|uniform:lo:hi)`.
pub fn parse_estimand(id: &str) -> Result<Estimand, FunctionalError> {
    let fail = |detail: &str| FunctionalError::Parse { id: id.to_string(), detail: detail.to_string() };
    let id_trim = id.trim();
    let (name, rest) = id_trim.split_once('(').ok_or_else(|| fail("expected name(key=value,...)"))?;
    let body = rest.strip_suffix(')').ok_or_else(|| fail("missing closing parenthesis"))?;
    let mut args = std::collections::BTreeMap::new();
    for part in body.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| fail("arguments must be key=value"))?;
        args.insert(k.trim().to_string(), v.trim().to_string());
    }
    let num = |key: &str| -> Result<f64, FunctionalError> {
        let v = args.get(key).ok_or_else(|| fail(&format!("missing argument '{key}'")))?;
        v.parse::<f64>().map_err(|_| fail(&format!("argument '{key}' is not a number")))
    };
    let exposure = || -> Result<u8, FunctionalError> {
        match args.get("a0").map(String::as_str) {
            None | Some("1") => Ok(1),
            Some("0") => Ok(0),
            Some(_) => Err(fail("a0 must be 0 or 1")),
        }
    };
    let positive = |v: f64, key: &str| if v > 0.0 { Ok(v) } else { Err(fail(&format!("'{key}' must be positive"))) };
    match name.trim() {
        "survival" => Ok(Estimand::Survival { tau: positive(num("tau")?, "tau")? }),
        "brier" => {
            let b = if args.contains_key("b") { num("b")? } else { 0.0 };
            if !(0.0..=1.0).contains(&b) {
                return Err(fail("b must lie in [0, 1]"));
            }
            Ok(Estimand::Brier { tau: positive(num("tau")?, "tau")?, b })
        }
        "cf_survival" => Ok(Estimand::CfSurvival { tau: positive(num("tau")?, "tau")?, a0: exposure()? }),
        "median" => Ok(Estimand::Median { a0: exposure()? }),
        "loglog" => {
            let spec = args.get("omega").map(String::as_str).unwrap_or("default");
            let fields: Vec<&str> = spec.split(':').collect();
            let parse = |s: &str| s.parse::<f64>().map_err(|_| fail("omega bounds must be numbers"));
            let omega = match fields.as_slice() {
                ["default"] => None,
                ["point", t] => Some(Omega::point(parse(t)?)),
                ["uniform", lo, hi] => Some(Omega::uniform(parse(lo)?, parse(hi)?, 50)?),
                _ => return Err(fail("omega must be default, point:t or uniform:lo:hi")),
            };
            Ok(Estimand::LogLog { omega })
        }
        other => Err(fail(&format!("unknown estimand '{other}'"))),
    }
}

impl Estimand {
    /// Kernel and exposure for the survival-integral estimands.
    pub fn survival_integral(&self) -> Result<Option<(Kernel, u8)>, FunctionalError> {
        Ok(match *self {
            Self::Survival { tau } => Some((Kernel::survival(tau), 1)),
            Self::Brier { tau, b } => Some((Kernel::brier_constant(tau, b)?, 1)),
            Self::CfSurvival { tau, a0 } => Some((cf_survival_kernel(tau, a0), a0)),
            Self::Median { .. } | Self::LogLog { .. } => None,
        })
    }
}

/// Functional specification.
#[derive(Debug, Clone)]
pub enum FunctionalSpec {
    SurvivalIntegral {
        kernel: Kernel,
        a0: u8,
    },
    /// Root in m of F(m) - level, with the density bandwidth constant.
    Quantile {
        a0: u8,
        level: f64,
        bandwidth_constant: f64,
    },
    LogLog {
        omega: Omega,
    },
}

fn cf_survival_kernel(tau: f64, a0: u8) -> Kernel {
    Kernel::survival(tau).with_id(format!("cf_survival(tau={tau},a0={a0})"))
}

pub fn counterfactual_survival(tau: f64, a0: u8) -> FunctionalSpec {
    FunctionalSpec::SurvivalIntegral { kernel: cf_survival_kernel(tau, a0), a0 }
}

/// Cross-fitted distribution-function estimates on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub a0: u8,
    pub times: Vec<f64>,
    /// One-step estimates of F(t).
    pub values: Vec<f64>,
    /// eif[j][i]: influence value of record i for F(times[j]), at the estimate.
    pub eif: Vec<Vec<f64>>,
}

impl Surface {
    pub fn n(&self) -> usize {
        self.eif.first().map_or(0, Vec::len)
    }

    /// Right-continuous step evaluation, 0 before the first grid time.
    pub fn eval(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => 0.0,
            j => self.values[j - 1],
        }
    }

    fn index_of(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&s| s == t)
    }
}

pub fn estimate_cdf_surface(cf: &CrossFit, times: &[f64], a0: u8) -> Result<Surface, FunctionalError> {
    let mut values = Vec::with_capacity(times.len());
    let mut eif = Vec::with_capacity(times.len());
    for &t in times {
        let fit = cf.kernel_fit(&Kernel::cdf(t), a0)?;
        let psi = fit.psi_onestep();
        eif.push(fit.eif(psi));
        values.push(psi);
    }
    Ok(Surface { a0, times: times.to_vec(), values, eif })
}

/// Distinct event times among records with exposure a0, strictly below the
/// second-largest follow-up time of that arm so that every training fold covers them.
pub fn event_time_grid(data: &Dataset, a0: u8) -> Vec<f64> {
    let mut y: Vec<f64> = data.records().iter().filter(|r| r.a == a0).map(|r| r.y).collect();
    y.sort_by(|a, b| b.total_cmp(a));
    let cap = y.get(1).copied().unwrap_or(f64::NEG_INFINITY);
    let mut t: Vec<f64> =
        data.records().iter().filter(|r| r.a == a0 && r.is_event() && r.y < cap).map(|r| r.y).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Inference summary for a scalar functional.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ScalarEstimate {
    pub value: f64,
    pub se: f64,
    pub ci: (f64, f64),
    #[serde(skip)]
    pub influence: Vec<f64>,
}

fn summarize(value: f64, influence: Vec<f64>, alpha: f64) -> ScalarEstimate {
    let n = influence.len();
    let se = (variance(&influence, &vec![0; n], 1).sigma2_simple / n as f64).sqrt();
    ScalarEstimate { value, se, ci: wald_ci(value, se, alpha), influence }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct QuantileEstimate {
    pub estimate: ScalarEstimate,
    pub density: f64,
    pub bandwidth: f64,
}

/// Decreases of the surface below this size are tolerated when checking monotonicity.
pub const MONOTONE_TOLERANCE: f64 = 0.02;

/// Smallest grid point at which the surface reaches `level`.
pub fn smallest_crossing(surface: &Surface, level: f64) -> Result<usize, FunctionalError> {
    surface.values.iter().position(|&f| f >= level).ok_or(FunctionalError::NoRoot)
}

/// Solves F(m) = level on the surface grid and attaches a delta-method standard error.
pub fn solve_quantile(
    surface: &Surface,
    level: f64,
    bandwidth_constant: f64,
    alpha: f64,
) -> Result<QuantileEstimate, FunctionalError> {
    let mut running = f64::NEG_INFINITY;
    for (t, &f) in surface.times.iter().zip(&surface.values) {
        if running - f > MONOTONE_TOLERANCE {
            return Err(FunctionalError::NonMonotone { t: *t, drop: running - f });
        }
        running = running.max(f);
    }
    let j = smallest_crossing(surface, level)?;
    let m_hat = surface.times[j];
    let q25 = surface.times[smallest_crossing(surface, 0.25)?];
    let q75 = surface.times[smallest_crossing(surface, 0.75)?];
    let n = surface.n() as f64;
    let bandwidth = bandwidth_constant * n.powf(-0.2) * (q75 - q25);
    let density = (surface.eval(m_hat + bandwidth) - surface.eval(m_hat - bandwidth)) / (2.0 * bandwidth);
    if !(density.is_finite() && density > 0.0) {
        return Err(FunctionalError::DerivativeEvaluationFailure(format!(
            "density estimate {density} at m={m_hat} with bandwidth {bandwidth}"
        )));
    }
    let influence = surface.eif[j].iter().map(|x| -x / density).collect();
    Ok(QuantileEstimate { estimate: summarize(m_hat, influence, alpha), density, bandwidth })
}

pub fn solve_median(surface: &Surface, alpha: f64) -> Result<QuantileEstimate, FunctionalError> {
    solve_quantile(surface, 0.5, 1.0, alpha)
}

/// Smooth functional of a distribution-function surface with its derivative.
pub trait HadamardFunctional {
    fn id(&self) -> String;
    fn value(&self, times: &[f64], f: &[f64]) -> Result<f64, FunctionalError>;
    /// Derivative at F in direction h (both on the surface grid).
    fn derivative(&self, times: &[f64], f: &[f64], h: &[f64]) -> Result<f64, FunctionalError>;
}

/// F(t_j).
pub struct Evaluation {
    pub index: usize,
}

impl HadamardFunctional for Evaluation {
    fn id(&self) -> String {
        format!("evaluation(index={})", self.index)
    }

    fn value(&self, _: &[f64], f: &[f64]) -> Result<f64, FunctionalError> {
        f.get(self.index)
            .copied()
            .ok_or_else(|| FunctionalError::DerivativeEvaluationFailure("index out of range".into()))
    }

    fn derivative(&self, times: &[f64], _: &[f64], h: &[f64]) -> Result<f64, FunctionalError> {
        self.value(times, h)
    }
}

/// sum_j w_j log{-log(1 - F(t_j))} for weights aligned with the surface grid.
pub struct LogLogArm {
    pub weights: Vec<f64>,
}

impl LogLogArm {
    fn check(&self, times: &[f64], f: &[f64]) -> Result<(), FunctionalError> {
        if self.weights.len() != f.len() {
            return Err(FunctionalError::InvalidWeights("weights are not aligned with the surface".into()));
        }
        for ((t, &v), w) in times.iter().zip(f).zip(&self.weights) {
            if *w > 0.0 && !(v > 0.0 && v < 1.0) {
                return Err(FunctionalError::BoundaryViolation { t: *t, value: v });
            }
        }
        Ok(())
    }
}

impl HadamardFunctional for LogLogArm {
    fn id(&self) -> String {
        "loglog_arm".into()
    }

    fn value(&self, times: &[f64], f: &[f64]) -> Result<f64, FunctionalError> {
        self.check(times, f)?;
        Ok(self.weights.iter().zip(f).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * (-(1.0 - v).ln()).ln()).sum())
    }

    fn derivative(&self, times: &[f64], f: &[f64], h: &[f64]) -> Result<f64, FunctionalError> {
        self.check(times, f)?;
        Ok(self
            .weights
            .iter()
            .zip(f)
            .zip(h)
            .filter(|((w, _), _)| **w > 0.0)
            .map(|((w, v), dh)| w * dh / ((1.0 - v) * -(1.0 - v).ln()))
            .sum())
    }
}

/// int_lo^hi F(t) dt for the right-continuous step surface; lo must be a grid point.
pub struct IntegratedCdf {
    pub lo: f64,
    pub hi: f64,
}

impl IntegratedCdf {
    fn integrate(&self, times: &[f64], f: &[f64]) -> Result<f64, FunctionalError> {
        if times.first().is_none_or(|&t0| t0 > self.lo) || self.hi < self.lo {
            return Err(FunctionalError::DerivativeEvaluationFailure(
                "integration window must start on or after the first grid time".into(),
            ));
        }
        let mut total = 0.0;
        for j in 0..times.len() {
            let start = times[j].max(self.lo);
            let end = times.get(j + 1).copied().unwrap_or(f64::INFINITY).min(self.hi);
            if end > start {
                total += f[j] * (end - start);
            }
        }
        Ok(total)
    }
}

impl HadamardFunctional for IntegratedCdf {
    fn id(&self) -> String {
        format!("integrated_cdf(lo={},hi={})", self.lo, self.hi)
    }

    fn value(&self, times: &[f64], f: &[f64]) -> Result<f64, FunctionalError> {
        self.integrate(times, f)
    }

    fn derivative(&self, times: &[f64], _: &[f64], h: &[f64]) -> Result<f64, FunctionalError> {
        self.integrate(times, h)
    }
}

/// Delta-method inference for a Hadamard-differentiable functional of the surface.
pub fn hadamard_delta(
    theta: &dyn HadamardFunctional,
    surface: &Surface,
    alpha: f64,
) -> Result<ScalarEstimate, FunctionalError> {
    let value = theta.value(&surface.times, &surface.values)?;
    let mut direction = vec![0.0; surface.times.len()];
    let influence = (0..surface.n())
        .map(|i| {
            for (j, col) in surface.eif.iter().enumerate() {
                direction[j] = col[i];
            }
            theta.derivative(&surface.times, &surface.values, &direction)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(summarize(value, influence, alpha))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LogLogEstimate {
    pub contrast: ScalarEstimate,
    pub arm1: f64,
    pub arm0: f64,
}

/// L(1) - L(0) with L(a) = int omega(t) log{-log P(T(a) > t)} dt.
pub fn loglog_contrast(
    omega: &Omega,
    arm1: &Surface,
    arm0: &Surface,
    alpha: f64,
) -> Result<LogLogEstimate, FunctionalError> {
    let align = |s: &Surface| -> Result<Vec<usize>, FunctionalError> {
        omega
            .times
            .iter()
            .map(|&t| s.index_of(t).ok_or_else(|| FunctionalError::InvalidWeights(format!("surface lacks t={t}"))))
            .collect()
    };
    let restrict = |s: &Surface| -> Result<Surface, FunctionalError> {
        let idx = align(s)?;
        Ok(Surface {
            a0: s.a0,
            times: omega.times.clone(),
            values: idx.iter().map(|&j| s.values[j]).collect(),
            eif: idx.iter().map(|&j| s.eif[j].clone()).collect(),
        })
    };
    let (s1, s0) = (restrict(arm1)?, restrict(arm0)?);
    if s1.n() != s0.n() {
        return Err(FunctionalError::InvalidWeights("arm surfaces are built on different samples".into()));
    }
    let theta = LogLogArm { weights: omega.weights.clone() };
    let e1 = hadamard_delta(&theta, &s1, alpha)?;
    let e0 = hadamard_delta(&theta, &s0, alpha)?;
    let influence: Vec<f64> = e1.influence.iter().zip(&e0.influence).map(|(a, b)| a - b).collect();
    Ok(LogLogEstimate { contrast: summarize(e1.value - e0.value, influence, alpha), arm1: e1.value, arm0: e0.value })
}
