//! Monte Carlo study: data-generating processes, censoring calibration,
//! population truths, the marginal risk-set Kaplan-Meier baseline and the
//! metric suite (scaled bias, scaled variance, coverage).
//!
//! Every replicate draws from its own ChaCha stream `(seed, rep)`, so results do
//! not depend on scheduling.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta as BetaDist, Continuous};
use statrs::function::gamma::{gamma_lr, gamma_ur};
use thiserror::Error;

use crate::data::{make_folds, CovariateAlphabet, DataError, Dataset, FoldPlan, ObservedRecord, Stratum};
use crate::estimators::{survival_band, wald_ci, BandOptions, CrossFit, EstimationError};
use crate::functionals::kernel::Kernel;
use crate::influence::{InfluenceContext, InfluenceError};
use crate::nuisance::{
    product_limit, CensoringMode, CensoringModel, Misspecification, NuisanceConfig, NuisanceError, NuisanceSet,
    PropensityCorruption, StratumNuisance,
};
use crate::step::StepFunction;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

/// Draws used when calibrating the censoring shape.
pub const CALIBRATION_DRAWS: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("target fraction {0} is outside (0, 1)")]
    InvalidTarget(f64),
    #[error("censoring fraction cannot be bracketed for target {target}")]
    NoBracket { target: f64 },
    #[error("{failures} of {reps} replicates failed")]
    TooManyFailures { failures: usize, reps: usize },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationLevel {
    None,
    #[serde(rename = "low_25")]
    Low25,
    #[serde(rename = "high_50")]
    High50,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CensoringLevel {
    #[serde(rename = "low_25")]
    Low25,
    #[serde(rename = "high_50")]
    High50,
}

impl CensoringLevel {
    pub fn target(self) -> f64 {
        match self {
            Self::Low25 => 0.25,
            Self::High50 => 0.5,
        }
    }
}

fn level_error(kind: &str, s: &str) -> SimulationError {
    SimulationError::Invalid(format!("unknown {kind} level '{s}'"))
}

impl FromStr for TruncationLevel {
    type Err = SimulationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "low_25" => Ok(Self::Low25),
            "high_50" => Ok(Self::High50),
            _ => Err(level_error("truncation", s)),
        }
    }
}

impl FromStr for CensoringLevel {
    type Err = SimulationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low_25" => Ok(Self::Low25),
            "high_50" => Ok(Self::High50),
            _ => Err(level_error("censoring", s)),
        }
    }
}

impl fmt::Display for TruncationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Low25 => "low_25",
            Self::High50 => "high_50",
        })
    }
}

impl fmt::Display for CensoringLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Low25 => "low_25",
            Self::High50 => "high_50",
        })
    }
}

/// Data-generating process. Z is uniform on {-1, 1}^3 with s = z1 + z2 + z3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dgp {
    /// T ~ Gamma(6, scale e^{s/10}); W = 10 Beta(a(z1), b(z1)); C = W + Gamma(k, scale e^{-s/10}).
    #[default]
    Main,
    /// As `Main` but with entry and censoring laws free of z.
    IndependentControl,
    /// Exposure with P(A=1|z) = 0.5 + exposure_gap sign(z1) and T exponential with
    /// rate base_rate e^{effect a + covariate_effect z1}.
    Robustness { effect: f64, covariate_effect: f64, exposure_gap: f64, base_rate: f64 },
    /// P(A=1|z) = 0.3 + 0.4 I(z1 > 0) and T exponential with rate base_rate e^{rho a}, free of z.
    ProportionalHazards { rho: f64, base_rate: f64 },
}

impl Dgp {
    /// Default exposure design of the robustness check.
    pub const ROBUSTNESS: Dgp =
        Dgp::Robustness { effect: -1.0, covariate_effect: -0.8, exposure_gap: 0.2, base_rate: 0.2 };

    pub fn has_exposure(&self) -> bool {
        matches!(self, Self::Robustness { .. } | Self::ProportionalHazards { .. })
    }

    /// P(A = 1 | z) in the full population.
    pub fn exposure_prob(&self, z: &[f64]) -> f64 {
        let gap = match *self {
            Self::Robustness { exposure_gap, .. } => exposure_gap,
            Self::ProportionalHazards { .. } => 0.2,
            _ => return 1.0,
        };
        if z[0] > 0.0 {
            0.5 + gap
        } else {
            0.5 - gap
        }
    }

    fn arms(&self) -> Vec<u8> {
        if self.has_exposure() {
            vec![0, 1]
        } else {
            vec![1]
        }
    }

    fn t_scale(&self, z: &[f64]) -> f64 {
        (z.iter().sum::<f64>() / 10.0).exp()
    }

    /// Hazard rate of exponential event times, or None for gamma event times.
    fn event_rate(&self, a: u8, z: &[f64]) -> Option<f64> {
        let a = a as f64;
        match *self {
            Self::ProportionalHazards { rho, base_rate } => Some(base_rate * (rho * a).exp()),
            Self::Robustness { effect, covariate_effect, base_rate, .. } => {
                Some(base_rate * (effect * a + covariate_effect * z[0]).exp())
            }
            _ => None,
        }
    }

    /// P(T > t | a, z).
    pub fn event_survival(&self, a: u8, z: &[f64], t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        match self.event_rate(a, z) {
            Some(rate) => (-rate * t).exp(),
            None => gamma_ur(6.0, t / self.t_scale(z)),
        }
    }

    fn sample_t(&self, a: u8, z: &[f64], rng: &mut ChaCha8Rng) -> f64 {
        match self.event_rate(a, z) {
            Some(rate) => {
                let u: f64 = rng.random();
                -(1.0 - u).ln() / rate
            }
            None => Gamma::new(6.0, self.t_scale(z)).expect("valid gamma").sample(rng),
        }
    }

    /// Scale of the censoring delay C - W.
    pub fn c_scale(&self, z: &[f64]) -> f64 {
        match self {
            Self::IndependentControl => 1.0,
            _ => (-z.iter().sum::<f64>() / 10.0).exp(),
        }
    }

    /// Beta parameters of W / 10, or None when there is no truncation.
    pub fn entry_params(&self, level: TruncationLevel, z: &[f64]) -> Option<(f64, f64)> {
        let (neg, pos) = (z[0] < 0.0, z[0] > 0.0);
        match (self, level) {
            (_, TruncationLevel::None) => None,
            (Self::IndependentControl, TruncationLevel::Low25) => Some((1.0, 2.0)),
            (Self::IndependentControl, TruncationLevel::High50) => Some((1.5, 1.0)),
            (_, TruncationLevel::Low25) => Some((1.0, 1.0 + 2.0 * neg as u8 as f64)),
            (_, TruncationLevel::High50) => Some((1.0 + pos as u8 as f64, 1.0)),
        }
    }
}

/// The eight covariate points of {-1, 1}^3.
pub fn covariate_alphabet() -> CovariateAlphabet {
    CovariateAlphabet::new(vec![vec![-1.0, 1.0]; 3])
}

/// Estimator run inside the Monte Carlo loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub label: String,
    pub kind: EstimatorKind,
    #[serde(default)]
    pub oracle: bool,
    #[serde(default)]
    pub misspecify: Misspecification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Marginal risk-set Kaplan-Meier with Greenwood intervals.
    Km,
    /// Cross-fitted one-step estimator.
    OneStep,
    /// Cross-fitted estimating-equation estimator.
    EstimatingEquation,
}

impl EstimatorConfig {
    pub fn new(label: &str, kind: EstimatorKind) -> Self {
        Self { label: label.into(), kind, oracle: false, misspecify: Misspecification::default() }
    }

    pub fn defaults() -> Vec<Self> {
        vec![
            Self::new("km", EstimatorKind::Km),
            Self::new("onestep", EstimatorKind::OneStep),
            Self::new("ee", EstimatorKind::EstimatingEquation),
        ]
    }
}

fn default_folds() -> usize {
    5
}

fn default_alpha() -> f64 {
    0.05
}

fn default_a0() -> u8 {
    1
}

/// One simulation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub dgp: Dgp,
    pub truncation: TruncationLevel,
    pub censoring: CensoringLevel,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_a0")]
    pub a0: u8,
    /// Censoring delay shape; calibrated when absent.
    #[serde(default)]
    pub censoring_shape: Option<f64>,
    /// Evaluation times; population quintiles when absent.
    #[serde(default)]
    pub eval_times: Option<Vec<f64>>,
    #[serde(default = "EstimatorConfig::defaults")]
    pub estimators: Vec<EstimatorConfig>,
}

impl Scenario {
    pub fn new(truncation: TruncationLevel, censoring: CensoringLevel, n: usize, reps: usize, seed: u64) -> Self {
        Self {
            schema_version: SCENARIO_SCHEMA_VERSION,
            name: format!("trunc_{truncation}-cens_{censoring}"),
            dgp: Dgp::Main,
            truncation,
            censoring,
            n,
            reps,
            seed,
            folds: default_folds(),
            alpha: default_alpha(),
            a0: default_a0(),
            censoring_shape: None,
            eval_times: None,
            estimators: EstimatorConfig::defaults(),
        }
    }

    /// The six truncation-by-censoring cells.
    pub fn all_six(n: usize, reps: usize, seed: u64) -> Vec<Self> {
        let mut out = Vec::new();
        for t in [TruncationLevel::None, TruncationLevel::Low25, TruncationLevel::High50] {
            for c in [CensoringLevel::Low25, CensoringLevel::High50] {
                out.push(Self::new(t, c, n, reps, seed));
            }
        }
        out
    }

    /// Exposure design for the robustness check: one-step and estimating-equation
    /// estimators with Q forced to 1, alone and together with a constant propensity.
    pub fn robustness(n: usize, reps: usize, seed: u64) -> Self {
        let mut sc = Self::new(TruncationLevel::Low25, CensoringLevel::Low25, n, reps, seed);
        sc.name = "robustness".into();
        sc.dgp = Dgp::ROBUSTNESS;
        let q_only = Misspecification { censoring_one: true, propensity: PropensityCorruption::None };
        let q_and_pi = Misspecification { censoring_one: true, propensity: PropensityCorruption::Constant(0.95) };
        sc.estimators = Vec::new();
        for (tag, m) in [("q+pi", q_and_pi), ("q", q_only)] {
            for (label, kind) in [("onestep", EstimatorKind::OneStep), ("ee", EstimatorKind::EstimatingEquation)] {
                let mut e = EstimatorConfig::new(&format!("{label}:{tag}"), kind);
                e.misspecify = m.clone();
                sc.estimators.push(e);
            }
        }
        sc
    }

    pub fn from_json(text: &str) -> Result<Self, SimulationError> {
        let mut sc: Self = serde_json::from_str(text)?;
        if sc.name.is_empty() {
            sc.name = format!("trunc_{}-cens_{}", sc.truncation, sc.censoring);
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        if self.n < 2 * self.folds || self.folds < 2 {
            return Err(SimulationError::Invalid(format!("n={} too small for {} folds", self.n, self.folds)));
        }
        if self.reps == 0 {
            return Err(SimulationError::Invalid("reps must be positive".into()));
        }
        if self.estimators.is_empty() {
            return Err(SimulationError::Invalid("no estimators configured".into()));
        }
        if !self.dgp.has_exposure() && self.a0 != 1 {
            return Err(SimulationError::Invalid("degenerate exposure requires a0 = 1".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> Result<f64, SimulationError> {
        match self.censoring_shape {
            Some(k) => Ok(k),
            None => calibrate_censoring_shape(self.dgp, self.censoring.target(), self.truncation, 0.005),
        }
    }

    pub fn times(&self) -> Vec<f64> {
        self.eval_times.clone().unwrap_or_else(|| population_quintiles(self.dgp, self.a0).to_vec())
    }

    pub fn truths(&self) -> Vec<f64> {
        population_truth(self.dgp, self.a0, &self.times())
    }
}

/// An ideal unit before truncation.
struct Unit {
    z: Vec<f64>,
    a: u8,
    w: f64,
    t: f64,
}

fn draw_unit(dgp: Dgp, level: TruncationLevel, rng: &mut ChaCha8Rng) -> Unit {
    let z: Vec<f64> = (0..3).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let a = if dgp.has_exposure() { rng.random_bool(dgp.exposure_prob(&z)) as u8 } else { 1 };
    let w = match dgp.entry_params(level, &z) {
        Some((p, q)) => 10.0 * Beta::new(p, q).expect("valid beta").sample(rng),
        None => 0.0,
    };
    let t = dgp.sample_t(a, &z, rng);
    Unit { z, a, w, t }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Draws units until `n` satisfy T >= W; returns the retained sample and the number drawn.
pub fn sample_dgp(
    dgp: Dgp,
    level: TruncationLevel,
    shape: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, usize), SimulationError> {
    let mut records = Vec::with_capacity(n);
    let mut drawn = 0;
    while records.len() < n {
        let u = draw_unit(dgp, level, rng);
        drawn += 1;
        if u.t < u.w {
            continue;
        }
        let c = u.w + Gamma::new(shape, dgp.c_scale(&u.z)).expect("valid gamma").sample(rng);
        let (y, delta) = if u.t <= c { (u.t, 1) } else { (c, 0) };
        records.push(ObservedRecord::new(y, delta, u.w, u.a, u.z));
    }
    Ok((Dataset::with_exposure(records, covariate_alphabet(), dgp.has_exposure())?, drawn))
}

/// Replicate `rep` of a scenario.
pub fn sample_scenario(sc: &Scenario, rep: u64) -> Result<Dataset, SimulationError> {
    let shape = sc.shape()?;
    Ok(sample_dgp(sc.dgp, sc.truncation, shape, sc.n, &mut stream(sc.seed, rep))?.0)
}

fn shape_cache() -> &'static Mutex<HashMap<String, f64>> {
    static CACHE: OnceLock<Mutex<HashMap<String, f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Censoring fraction among retained units as a function of the delay shape,
/// averaged over Monte Carlo draws of (Z, W, T) with the delay integrated out.
pub fn censoring_fraction(dgp: Dgp, level: TruncationLevel, shape: f64, draws: usize, seed: u64) -> f64 {
    let units = retained_gaps(dgp, level, draws, seed);
    units.par_iter().map(|&(gap, scale)| gamma_lr(shape, gap / scale)).sum::<f64>() / units.len() as f64
}

/// (T - W, censoring scale) for retained units of a fixed calibration sample.
fn retained_gaps(dgp: Dgp, level: TruncationLevel, draws: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = stream(seed, u64::MAX);
    let mut out = Vec::with_capacity(draws);
    while out.len() < draws {
        let u = draw_unit(dgp, level, &mut rng);
        if u.t >= u.w {
            out.push((u.t - u.w, dgp.c_scale(&u.z)));
        }
    }
    out
}

/// Bisection on the delay shape so that the censoring fraction matches `target`.
pub fn calibrate_censoring_shape(
    dgp: Dgp,
    target: f64,
    level: TruncationLevel,
    tolerance: f64,
) -> Result<f64, SimulationError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(SimulationError::InvalidTarget(target));
    }
    let key = format!("{dgp:?}|{level}|{target}|{tolerance}");
    if let Some(k) = shape_cache().lock().expect("cache lock").get(&key) {
        return Ok(*k);
    }
    let units = retained_gaps(dgp, level, CALIBRATION_DRAWS, 20_240_917);
    let fraction =
        |k: f64| units.par_iter().map(|&(gap, scale)| gamma_lr(k, gap / scale)).sum::<f64>() / units.len() as f64;
    // The fraction decreases in the shape.
    let (mut lo, mut hi) = (0.05, 200.0);
    if fraction(lo) < target || fraction(hi) > target {
        return Err(SimulationError::NoBracket { target });
    }
    let mut k = 0.5 * (lo + hi);
    for _ in 0..100 {
        k = 0.5 * (lo + hi);
        let f = fraction(k);
        if (f - target).abs() <= tolerance / 10.0 {
            break;
        }
        if f > target {
            lo = k;
        } else {
            hi = k;
        }
    }
    shape_cache().lock().expect("cache lock").insert(key, k);
    Ok(k)
}

fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, cells: usize) -> f64 {
    let h = (b - a) / cells as f64;
    let mut total = f(a) + f(b);
    for i in 1..cells {
        total += f(a + h * i as f64) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    total * h / 3.0
}

fn entry_density(params: (f64, f64)) -> impl Fn(f64) -> f64 {
    let beta = BetaDist::new(params.0, params.1).expect("valid beta");
    move |w: f64| if w <= 0.0 || w >= 10.0 { 0.0 } else { beta.pdf(w / 10.0) / 10.0 }
}

/// P(T >= W | a, z), by Simpson integration over the entry density.
pub fn retention_probability(dgp: Dgp, level: TruncationLevel, a: u8, z: &[f64]) -> f64 {
    match dgp.entry_params(level, z) {
        None => 1.0,
        Some(p) => {
            let f = entry_density(p);
            integrate(|w| f(w) * dgp.event_survival(a, z, w), 0.0, 10.0, 4000)
        }
    }
}

/// Retained-sample law of Z over the covariate alphabet.
pub fn retained_z_probabilities(dgp: Dgp, level: TruncationLevel) -> Vec<f64> {
    let alphabet = covariate_alphabet();
    let mass: Vec<f64> = (0..alphabet.n_codes())
        .map(|c| {
            let z = alphabet.decode(c);
            let p1 = dgp.exposure_prob(&z);
            let mut m = p1 * retention_probability(dgp, level, 1, &z);
            if dgp.has_exposure() {
                m += (1.0 - p1) * retention_probability(dgp, level, 0, &z);
            }
            m
        })
        .collect();
    let total: f64 = mass.iter().sum();
    mass.iter().map(|m| m / total).collect()
}

/// Marginal counterfactual survival P(T(a0) > t) averaged over the eight covariate points.
pub fn population_survival(dgp: Dgp, a0: u8, t: f64) -> f64 {
    let alphabet = covariate_alphabet();
    (0..8).map(|c| dgp.event_survival(a0, &alphabet.decode(c), t)).sum::<f64>() / 8.0
}

pub fn population_truth(dgp: Dgp, a0: u8, times: &[f64]) -> Vec<f64> {
    times.iter().map(|&t| population_survival(dgp, a0, t)).collect()
}

/// Time t with population survival equal to `level`, by bisection.
pub fn population_quantile_time(dgp: Dgp, a0: u8, level: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    while population_survival(dgp, a0, hi) > level {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if population_survival(dgp, a0, mid) > level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Times at which population survival equals 0.8, 0.6, 0.4 and 0.2.
pub fn population_quintiles(dgp: Dgp, a0: u8) -> [f64; 4] {
    [0.8, 0.6, 0.4, 0.2].map(|p| population_quantile_time(dgp, a0, p))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KmEstimate {
    pub estimates: Vec<f64>,
    pub se: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
}

/// Marginal product-limit estimate of P(T >= t) with risk set {W <= u <= Y} and Greenwood errors.
pub fn km_baseline(data: &Dataset, times: &[f64], alpha: f64) -> KmEstimate {
    let recs = data.records();
    let entry: Vec<f64> = recs.iter().map(|r| r.w).collect();
    let exit: Vec<f64> = recs.iter().map(|r| r.y).collect();
    let event: Vec<bool> = recs.iter().map(|r| r.is_event()).collect();
    let pl = product_limit(&entry, &exit, &event);
    let mut estimates = Vec::with_capacity(times.len());
    let mut se = Vec::with_capacity(times.len());
    for &t in times {
        let s = pl.survival.eval_left(t);
        let mut green = 0.0;
        for ((&u, &d), &r) in pl.times.iter().zip(&pl.events).zip(&pl.at_risk) {
            if u >= t {
                break;
            }
            if r > d {
                green += d as f64 / (r as f64 * (r - d) as f64);
            }
        }
        estimates.push(s);
        se.push(s * green.sqrt());
    }
    let ci = estimates.iter().zip(&se).map(|(&e, &s)| wald_ci(e, s, alpha)).collect();
    KmEstimate { estimates, se, ci }
}

/// Grid spacing of the discretized oracle curves.
pub const ORACLE_SPACING: f64 = 0.01;

fn grid_until(spacing: f64, done: impl Fn(f64) -> bool, knots: &[f64]) -> Vec<f64> {
    let mut grid = Vec::new();
    let mut j = 1;
    loop {
        let t = spacing * j as f64;
        grid.push(t);
        if done(t) {
            break;
        }
        j += 1;
    }
    grid.extend(knots.iter().filter(|&&k| k > 0.0).map(|&k| k.next_down()));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// True nuisances discretized on a fine grid. Survival curves are exact at grid
/// points; `knots` adds points just below the given times so that P(T >= t) is
/// exact there.
pub fn oracle_nuisances(
    dgp: Dgp,
    level: TruncationLevel,
    shape: f64,
    knots: &[f64],
) -> Result<NuisanceSet, SimulationError> {
    let alphabet = covariate_alphabet();
    let mut strata = BTreeMap::new();
    let mut h = Vec::with_capacity(alphabet.n_codes());
    let mut p1 = Vec::with_capacity(alphabet.n_codes());
    for code in 0..alphabet.n_codes() {
        let z = alphabet.decode(code);
        let pf = dgp.exposure_prob(&z);
        let mut retained = [0.0; 2];
        for a in dgp.arms() {
            let beta = retention_probability(dgp, level, a, &z);
            retained[a as usize] = beta;
            let grid = grid_until(ORACLE_SPACING, |t| dgp.event_survival(a, &z, t) < 1e-10, knots);
            let values = grid.iter().map(|&t| dgp.event_survival(a, &z, t)).collect();
            let s = StepFunction::new(1.0, grid, values).expect("sorted grid");
            let g = match dgp.entry_params(level, &z) {
                None => StepFunction::new(0.0, vec![0.0], vec![1.0]).expect("point mass"),
                Some(p) => {
                    let f = entry_density(p);
                    let cells = (10.0 / ORACLE_SPACING).round() as usize;
                    let mut atoms = Vec::with_capacity(cells);
                    for i in 1..=cells {
                        let (u0, u1) = (ORACLE_SPACING * (i - 1) as f64, ORACLE_SPACING * i as f64);
                        atoms.push((u1, integrate(|w| f(w) * dgp.event_survival(a, &z, w), u0, u1, 8)));
                    }
                    StepFunction::from_atoms(&atoms, true).expect("valid atoms")
                }
            };
            let scale = dgp.c_scale(&z);
            let dgrid = grid_until(ORACLE_SPACING, |d| gamma_ur(shape, d / scale) < 1e-10, &[]);
            let qvals = dgrid.iter().map(|&d| gamma_ur(shape, d / scale)).collect();
            let q = CensoringModel::Elapsed(StepFunction::new(1.0, dgrid, qvals).expect("sorted grid"));
            strata.insert(Stratum::new(a, code), StratumNuisance::new(s, g, q));
        }
        let m1 = pf * retained[1];
        let m0 = if dgp.has_exposure() { (1.0 - pf) * retained[0] } else { 0.0 };
        h.push(m1 + m0);
        p1.push(m1 / (m1 + m0));
    }
    let total: f64 = h.iter().sum();
    h.iter_mut().for_each(|x| *x /= total);
    let mut eta = NuisanceSet::from_parts(alphabet, h, p1, strata)?;
    eta.add_flag("oracle");
    Ok(eta)
}

fn oracle_cache() -> &'static Mutex<HashMap<String, Arc<InfluenceContext>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<InfluenceContext>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Oracle influence context for a scenario, optionally corrupted, built once per process.
pub fn oracle_context(sc: &Scenario, misspecify: &Misspecification) -> Result<Arc<InfluenceContext>, SimulationError> {
    let shape = sc.shape()?;
    let times = sc.times();
    let key = format!("{:?}|{}|{shape}|{times:?}|{misspecify:?}", sc.dgp, sc.truncation);
    if let Some(ctx) = oracle_cache().lock().expect("cache lock").get(&key) {
        return Ok(ctx.clone());
    }
    let mut eta = oracle_nuisances(sc.dgp, sc.truncation, shape, &times)?;
    if misspecify.censoring_one {
        eta.corrupt_censoring();
    }
    eta.corrupt_propensity(misspecify.propensity);
    let ctx = Arc::new(InfluenceContext::new(Arc::new(eta))?);
    oracle_cache().lock().expect("cache lock").insert(key, ctx.clone());
    Ok(ctx)
}

/// Estimate, standard error and interval of one estimator at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointResult {
    pub estimate: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

/// results[estimator][time].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateResult {
    pub rep: u64,
    pub results: Vec<Vec<PointResult>>,
}

/// Cross-fit with stratified product-limit nuisances, censoring in elapsed time and
/// the at-risk floor.
pub fn stratified_fit(
    data: &Dataset,
    folds: &FoldPlan,
    misspecify: &Misspecification,
) -> Result<CrossFit, SimulationError> {
    let config = NuisanceConfig {
        censoring: CensoringMode::Elapsed,
        at_risk_floor: true,
        misspecify: misspecify.clone(),
        ..NuisanceConfig::default()
    };
    Ok(CrossFit::fit(data, folds, &config)?)
}

/// Runs every configured estimator on replicate `rep`.
pub fn run_replicate(sc: &Scenario, rep: u64) -> Result<ReplicateResult, SimulationError> {
    let data = sample_scenario(sc, rep)?;
    let times = sc.times();
    let folds = make_folds(data.len(), sc.folds, sc.seed.wrapping_add(rep))?;
    let mut fits: Vec<(String, CrossFit)> = Vec::new();
    let mut results = Vec::with_capacity(sc.estimators.len());
    for est in &sc.estimators {
        if est.kind == EstimatorKind::Km {
            let km = km_baseline(&data, &times, sc.alpha);
            results.push(
                (0..times.len())
                    .map(|j| PointResult { estimate: km.estimates[j], se: km.se[j], lo: km.ci[j].0, hi: km.ci[j].1 })
                    .collect(),
            );
            continue;
        }
        let key = format!("{}|{:?}", est.oracle, est.misspecify);
        if !fits.iter().any(|(k, _)| *k == key) {
            let cf = if est.oracle {
                CrossFit::with_context(&data, &folds, oracle_context(sc, &est.misspecify)?)?
            } else {
                stratified_fit(&data, &folds, &est.misspecify)?
            };
            fits.push((key.clone(), cf));
        }
        let cf = &fits.iter().find(|(k, _)| *k == key).expect("fit cached").1;
        let mut row = Vec::with_capacity(times.len());
        for &t in &times {
            let report = cf.kernel_fit(&Kernel::survival(t), sc.a0)?.report(sc.alpha)?;
            row.push(match est.kind {
                EstimatorKind::EstimatingEquation => {
                    PointResult { estimate: report.psi_ee, se: report.se_ee, lo: report.ci_ee.0, hi: report.ci_ee.1 }
                }
                _ => {
                    PointResult { estimate: report.psi_onestep, se: report.se_simple, lo: report.ci.0, hi: report.ci.1 }
                }
            });
        }
        results.push(row);
    }
    Ok(ReplicateResult { rep, results })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub estimator: String,
    pub time_index: usize,
    pub time: f64,
    pub truth: f64,
    pub n: usize,
    pub reps: usize,
    pub failures: usize,
    pub scaled_bias: f64,
    pub scaled_bias_mc_se: f64,
    /// n times the unbiased variance of the estimates; None with fewer than two replicates.
    pub scaled_var: Option<f64>,
    pub scaled_var_mc_se: Option<f64>,
    pub coverage: f64,
    pub coverage_mc_se: f64,
    /// Mean of n times the squared reported standard error.
    pub mean_scaled_se2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub flags: Vec<String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |x| x.to_string())
}

impl MetricsTable {
    pub fn row(&self, estimator: &str, time_index: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.time_index == time_index)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), SimulationError> {
        let mut w = csv::Writer::from_path(path)?;
        self.write_to(&mut w)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, SimulationError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_to(&mut w)?;
        let bytes = w.into_inner().map_err(|e| SimulationError::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    fn write_to<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<(), SimulationError> {
        w.write_record([
            "scenario",
            "estimator",
            "time_index",
            "time",
            "truth",
            "n",
            "reps",
            "failures",
            "scaled_bias",
            "scaled_bias_mc_se",
            "scaled_var",
            "scaled_var_mc_se",
            "coverage",
            "coverage_mc_se",
            "mean_scaled_se2",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.scenario.clone(),
                r.estimator.clone(),
                r.time_index.to_string(),
                r.time.to_string(),
                r.truth.to_string(),
                r.n.to_string(),
                r.reps.to_string(),
                r.failures.to_string(),
                r.scaled_bias.to_string(),
                r.scaled_bias_mc_se.to_string(),
                fmt_opt(r.scaled_var),
                fmt_opt(r.scaled_var_mc_se),
                r.coverage.to_string(),
                r.coverage_mc_se.to_string(),
                r.mean_scaled_se2.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Output of a Monte Carlo run: the metric table and the per-replicate results.
#[derive(Debug, Clone)]
pub struct MonteCarloRun {
    pub table: MetricsTable,
    pub replicates: Vec<ReplicateResult>,
}

/// Aggregates replicate results into metrics.
pub fn summarize(sc: &Scenario, replicates: &[ReplicateResult], failures: usize) -> MetricsTable {
    let times = sc.times();
    let truths = population_truth(sc.dgp, sc.a0, &times);
    let n = sc.n as f64;
    let reps = replicates.len();
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    if reps < 2 {
        flags.push("variance_undefined:reps<2".to_string());
    }
    for (e, est) in sc.estimators.iter().enumerate() {
        for (j, (&t, &truth)) in times.iter().zip(&truths).enumerate() {
            let vals: Vec<PointResult> = replicates.iter().map(|r| r.results[e][j]).collect();
            let m = reps as f64;
            let mean = vals.iter().map(|v| v.estimate).sum::<f64>() / m;
            let var = (reps > 1).then(|| vals.iter().map(|v| (v.estimate - mean).powi(2)).sum::<f64>() / (m - 1.0));
            let covered = vals.iter().filter(|v| v.lo <= truth && truth <= v.hi).count() as f64 / m;
            let sd = var.unwrap_or(0.0).sqrt();
            rows.push(MetricsRow {
                scenario: sc.name.clone(),
                estimator: est.label.clone(),
                time_index: j,
                time: t,
                truth,
                n: sc.n,
                reps,
                failures,
                scaled_bias: n.sqrt() * (mean - truth),
                scaled_bias_mc_se: n.sqrt() * sd / m.sqrt(),
                scaled_var: var.map(|v| n * v),
                scaled_var_mc_se: var.map(|v| n * v * (2.0 / (m - 1.0)).sqrt()),
                coverage: covered,
                coverage_mc_se: (covered * (1.0 - covered) / m).sqrt(),
                mean_scaled_se2: vals.iter().map(|v| n * v.se * v.se).sum::<f64>() / m,
            });
        }
    }
    MetricsTable { rows, flags }
}

/// Runs all replicates of a scenario. More than 1% failed replicates is an error.
pub fn run_monte_carlo(sc: &Scenario) -> Result<MonteCarloRun, SimulationError> {
    sc.validate()?;
    sc.shape()?;
    for est in sc.estimators.iter().filter(|e| e.oracle) {
        oracle_context(sc, &est.misspecify)?;
    }
    let outcomes: Vec<Result<ReplicateResult, SimulationError>> =
        (0..sc.reps as u64).into_par_iter().map(|rep| run_replicate(sc, rep)).collect();
    let mut replicates = Vec::with_capacity(sc.reps);
    let mut failures = 0;
    for o in outcomes {
        match o {
            Ok(r) => replicates.push(r),
            Err(e) => {
                log::warn!("replicate failed: {e}");
                failures += 1;
            }
        }
    }
    if failures as f64 > 0.01 * sc.reps as f64 || replicates.is_empty() {
        return Err(SimulationError::TooManyFailures { failures, reps: sc.reps });
    }
    let table = summarize(sc, &replicates, failures);
    Ok(MonteCarloRun { table, replicates })
}

/// Coverage of the simultaneous survival band over the evaluation times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandCoverage {
    pub reps: usize,
    pub failures: usize,
    /// Share of replicates whose band contains the truth at every time.
    pub simultaneous: f64,
    pub simultaneous_mc_se: f64,
    pub pointwise: Vec<f64>,
}

/// Band coverage with stratified nuisances; replicate `rep` uses multiplier seed `opts.seed + rep`.
pub fn band_coverage(sc: &Scenario, opts: &BandOptions) -> Result<BandCoverage, SimulationError> {
    sc.validate()?;
    sc.shape()?;
    let times = sc.times();
    let truths = sc.truths();
    let outcomes: Vec<Result<Vec<bool>, SimulationError>> = (0..sc.reps as u64)
        .into_par_iter()
        .map(|rep| {
            let data = sample_scenario(sc, rep)?;
            let folds = make_folds(data.len(), sc.folds, sc.seed.wrapping_add(rep))?;
            let cf = stratified_fit(&data, &folds, &Misspecification::default())?;
            let band = survival_band(&cf, &times, sc.a0, &BandOptions { seed: opts.seed.wrapping_add(rep), ..*opts })?;
            Ok(truths.iter().enumerate().map(|(j, &t)| band.lower[j] <= t && t <= band.upper[j]).collect())
        })
        .collect();
    let mut hits = Vec::new();
    let mut failures = 0;
    for o in outcomes {
        match o {
            Ok(h) => hits.push(h),
            Err(e) => {
                log::warn!("replicate failed: {e}");
                failures += 1;
            }
        }
    }
    if failures as f64 > 0.01 * sc.reps as f64 || hits.is_empty() {
        return Err(SimulationError::TooManyFailures { failures, reps: sc.reps });
    }
    let m = hits.len() as f64;
    let simultaneous = hits.iter().filter(|h| h.iter().all(|&b| b)).count() as f64 / m;
    let pointwise = (0..times.len()).map(|j| hits.iter().filter(|h| h[j]).count() as f64 / m).collect();
    Ok(BandCoverage {
        reps: hits.len(),
        failures,
        simultaneous,
        simultaneous_mc_se: (simultaneous * (1.0 - simultaneous) / m).sqrt(),
        pointwise,
    })
}
