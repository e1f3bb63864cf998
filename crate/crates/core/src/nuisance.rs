//! Nuisance tuple (H, pi, G, Q, S) fitted on a training split.
//!
//! Every conditional curve is stored per exposure-by-covariate stratum. The
//! default learners are stratified nonparametric: product-limit estimators for
//! the event and censoring survival curves and empirical distribution
//! functions for the entry-time law, covariates and exposure.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CovariateAlphabet, Dataset, Stratum};
use crate::step::StepFunction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NuisanceError {
    #[error("stratum {0} has no training records")]
    EmptyStratum(Stratum),
    #[error("training data is empty")]
    EmptyDataset,
    #[error("support violation in stratum {stratum}: {detail}")]
    SupportViolation { stratum: Stratum, detail: String },
    #[error("positivity violation: no records with a={a} in covariate stratum {z}")]
    Positivity { a: u8, z: usize },
    #[error("invalid nuisance set: {0}")]
    Invalid(String),
}

/// Product-limit table: distinct event times with event and at-risk counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductLimit {
    pub times: Vec<f64>,
    pub events: Vec<usize>,
    pub at_risk: Vec<usize>,
    pub survival: StepFunction,
}

/// Product-limit estimator with risk set {entry <= u <= exit}; tied events share one factor.
pub fn product_limit(entry: &[f64], exit: &[f64], event: &[bool]) -> ProductLimit {
    product_limit_impl(entry, exit, event, false).0
}

/// As [`product_limit`], except that a risk set emptied by events while later
/// entrants remain uses the factor 1 - d/(r + 1) instead of dropping to zero.
/// Returns whether any factor was bridged this way.
pub fn product_limit_bridged(entry: &[f64], exit: &[f64], event: &[bool]) -> (ProductLimit, bool) {
    product_limit_impl(entry, exit, event, true)
}

fn product_limit_impl(entry: &[f64], exit: &[f64], event: &[bool], bridge: bool) -> (ProductLimit, bool) {
    let mut entries = entry.to_vec();
    entries.sort_by(f64::total_cmp);
    let mut exits = exit.to_vec();
    exits.sort_by(f64::total_cmp);
    let mut ev: Vec<f64> = exit.iter().zip(event).filter(|(_, &e)| e).map(|(&y, _)| y).collect();
    ev.sort_by(f64::total_cmp);

    let (mut times, mut events, mut at_risk, mut values) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let last_entry = entries.last().copied().unwrap_or(f64::NEG_INFINITY);
    let mut bridged = false;
    let mut s = 1.0;
    let mut i = 0;
    while i < ev.len() {
        let u = ev[i];
        let mut d = 0;
        while i < ev.len() && ev[i] == u {
            d += 1;
            i += 1;
        }
        let r = entries.partition_point(|&w| w <= u) - exits.partition_point(|&y| y < u);
        if bridge && d == r && last_entry > u {
            bridged = true;
            s *= 1.0 - d as f64 / (r + 1) as f64;
        } else {
            s *= 1.0 - d as f64 / r as f64;
        }
        times.push(u);
        events.push(d);
        at_risk.push(r);
        values.push(s);
    }
    let survival = StepFunction::new(1.0, times.clone(), values).expect("event times are sorted and distinct");
    (ProductLimit { times, events, at_risk, survival }, bridged)
}

/// Observable censoring survival Q(c | w) within one stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CensoringModel {
    /// Entry times split by `edges` (lower bounds of bins 1..); one curve in c per bin.
    Binned { edges: Vec<f64>, curves: Vec<StepFunction> },
    /// Q(c | w) = Q_e(c - w), a survival curve in elapsed time since entry.
    Elapsed(StepFunction),
}

impl CensoringModel {
    pub fn none() -> Self {
        CensoringModel::Binned { edges: Vec::new(), curves: vec![StepFunction::constant(1.0)] }
    }

    fn bin(edges: &[f64], w: f64) -> usize {
        edges.partition_point(|&e| e <= w)
    }

    /// Q(c | w) = P(C > c | W = w).
    pub fn survival(&self, c: f64, w: f64) -> f64 {
        match self {
            CensoringModel::Binned { edges, curves } => curves[Self::bin(edges, w)].eval(c),
            CensoringModel::Elapsed(q) => q.eval(c - w),
        }
    }

    /// Q(c- | w) = P(C >= c | W = w).
    pub fn survival_left(&self, c: f64, w: f64) -> f64 {
        match self {
            CensoringModel::Binned { edges, curves } => curves[Self::bin(edges, w)].eval_left(c),
            CensoringModel::Elapsed(q) => q.eval_left(c - w),
        }
    }

    pub fn curves(&self) -> Vec<&StepFunction> {
        match self {
            CensoringModel::Binned { curves, .. } => curves.iter().collect(),
            CensoringModel::Elapsed(q) => vec![q],
        }
    }

    /// Jump times of Q(. | w) in calendar time.
    pub fn jump_times(&self, w: f64) -> Vec<f64> {
        match self {
            CensoringModel::Binned { edges, curves } => curves[Self::bin(edges, w)].jump_times().to_vec(),
            CensoringModel::Elapsed(q) => q.jump_times().iter().map(|e| e + w).collect(),
        }
    }
}

/// Per-stratum curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumNuisance {
    /// Event-time survival S(t | a, z).
    pub s: StepFunction,
    /// Observable entry-time CDF G(w | a, z).
    pub g: StepFunction,
    pub q: CensoringModel,
    /// Largest follow-up time seen in the stratum.
    pub tau_bar: f64,
    pub no_events: bool,
    pub n: usize,
}

impl StratumNuisance {
    pub fn new(s: StepFunction, g: StepFunction, q: CensoringModel) -> Self {
        let tau_bar = s.jump_times().last().copied().unwrap_or(f64::INFINITY);
        Self { s, g, q, tau_bar, no_events: false, n: 0 }
    }

    /// R-bar(u) = sum_{w <= u} G(dw) Q(u- | w) / S(w-), so that R(u) = S(u-) R-bar(u).
    pub fn rbar(&self, u: f64) -> f64 {
        let mut total = 0.0;
        for (w, mass) in self.g.increments() {
            if w > u {
                break;
            }
            let sw = self.s.eval_left(w);
            if mass != 0.0 && sw > 0.0 {
                total += mass * self.q.survival_left(u, w) / sw;
            }
        }
        total
    }

    /// [`Self::rbar`] on a sorted grid, walking each censoring curve once per entry atom.
    pub fn rbar_on_grid(&self, grid: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; grid.len()];
        for (w, mass) in self.g.increments() {
            let sw = self.s.eval_left(w);
            if mass == 0.0 || sw <= 0.0 {
                continue;
            }
            let weight = mass / sw;
            let (curve, offset) = match &self.q {
                CensoringModel::Binned { edges, curves } => (&curves[CensoringModel::bin(edges, w)], None),
                CensoringModel::Elapsed(q) => (q, Some(w)),
            };
            let (jumps, values) = (curve.jump_times(), curve.values());
            let mut j = 0;
            for (k, &u) in grid.iter().enumerate().skip(grid.partition_point(|&g| g < w)) {
                let x = offset.map_or(u, |w| u - w);
                while j < jumps.len() && jumps[j] < x {
                    j += 1;
                }
                let q = if j == 0 { curve.initial_value() } else { values[j - 1] };
                out[k] += weight * q;
            }
        }
        out
    }

    /// Observable at-risk probability R(u) = P(W <= u <= Y).
    pub fn at_risk(&self, u: f64) -> f64 {
        self.s.eval_left(u) * self.rbar(u)
    }
}

/// Observable at-risk curve reconstructed from (G, Q, S) of one stratum.
#[derive(Debug, Clone, Copy)]
pub struct AtRiskCurve<'a> {
    nuisance: &'a StratumNuisance,
}

impl AtRiskCurve<'_> {
    pub fn eval(&self, u: f64) -> f64 {
        self.nuisance.at_risk(u)
    }

    /// Union of the jump grids of S, G and Q(. | w) over G's atoms.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.nuisance;
        let mut grid: Vec<f64> = n.s.jump_times().iter().chain(n.g.jump_times()).copied().collect();
        for &w in n.g.jump_times() {
            grid.extend(n.q.jump_times(w));
        }
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        grid
    }
}

/// Propensity corruption used to study robustness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PropensityCorruption {
    #[default]
    None,
    /// Replace P(A=1|z) by 1 - P(A=1|z).
    Flip,
    /// Replace P(A=1|z) by a constant.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Misspecification {
    /// Force Q = 1 whatever the data.
    pub censoring_one: bool,
    pub propensity: PropensityCorruption,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CensoringMode {
    /// Quantile bins of the entry time within each stratum.
    Binned { bins: usize },
    /// Product-limit in time since entry.
    Elapsed,
}

impl Default for CensoringMode {
    fn default() -> Self {
        CensoringMode::Binned { bins: 1 }
    }
}

pub const NUISANCE_SCHEMA_VERSION: u32 = 1;

/// Nuisance learner configuration (JSON).
#[derive(Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceConfig {
    pub schema_version: u32,
    pub censoring: CensoringMode,
    /// Lower clip for P(A = a0 | z) inside inverse weights.
    pub pi_floor: f64,
    /// Lower clip for S(w- | a, z) inside 1/S at evaluation records.
    pub survival_floor: f64,
    /// Clip the at-risk factor at an evaluation record's own time to 1/(n + 1), n the
    /// training size of its stratum, instead of failing when it is zero.
    pub at_risk_floor: bool,
    pub misspecify: Misspecification,
    /// Fixed nuisances returned instead of fitting (simulation truth injection).
    #[serde(skip)]
    pub oracle: Option<Arc<NuisanceSet>>,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            schema_version: NUISANCE_SCHEMA_VERSION,
            censoring: CensoringMode::default(),
            pi_floor: 0.01,
            survival_floor: 1e-3,
            at_risk_floor: false,
            misspecify: Misspecification::default(),
            oracle: None,
        }
    }
}

impl std::fmt::Debug for NuisanceConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NuisanceConfig")
            .field("censoring", &self.censoring)
            .field("pi_floor", &self.pi_floor)
            .field("survival_floor", &self.survival_floor)
            .field("at_risk_floor", &self.at_risk_floor)
            .field("misspecify", &self.misspecify)
            .field("oracle", &self.oracle.is_some())
            .finish()
    }
}

impl NuisanceConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn elapsed() -> Self {
        Self { censoring: CensoringMode::Elapsed, ..Self::default() }
    }

    pub fn with_oracle(oracle: NuisanceSet) -> Self {
        Self { oracle: Some(Arc::new(oracle)), ..Self::default() }
    }
}

/// Fitted nuisance tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceSet {
    alphabet: CovariateAlphabet,
    /// Covariate stratum probabilities.
    h: Vec<f64>,
    /// P(A = 1 | z).
    p1: Vec<f64>,
    strata: BTreeMap<Stratum, StratumNuisance>,
    pub pi_floor: f64,
    pub survival_floor: f64,
    pub at_risk_floor: bool,
    flags: BTreeSet<String>,
}

impl NuisanceSet {
    /// Assembles a nuisance set from explicit components.
    pub fn from_parts(
        alphabet: CovariateAlphabet,
        h: Vec<f64>,
        p1: Vec<f64>,
        strata: BTreeMap<Stratum, StratumNuisance>,
    ) -> Result<Self, NuisanceError> {
        let set = Self {
            alphabet,
            h,
            p1,
            strata,
            pi_floor: 0.01,
            survival_floor: 1e-3,
            at_risk_floor: false,
            flags: BTreeSet::new(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), NuisanceError> {
        let n = self.alphabet.n_codes();
        if self.h.len() != n || self.p1.len() != n {
            return Err(NuisanceError::Invalid("H and pi must have one entry per covariate stratum".into()));
        }
        let total: f64 = self.h.iter().sum();
        if (total - 1.0).abs() > 1e-12 || self.h.iter().any(|&v| v < 0.0) {
            return Err(NuisanceError::Invalid(format!("H sums to {total}")));
        }
        if self.p1.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(NuisanceError::Invalid("propensity outside [0, 1]".into()));
        }
        for (st, sn) in &self.strata {
            if !sn.g.is_cdf() {
                return Err(NuisanceError::Invalid(format!("G is not a CDF in {st}")));
            }
            if !sn.s.is_survival() || sn.q.curves().iter().any(|q| !q.is_survival()) {
                return Err(NuisanceError::Invalid(format!("S or Q is not a survival curve in {st}")));
            }
        }
        for z in 0..n {
            for a in 0..2u8 {
                if self.h[z] * self.pi(a, z) > 0.0 && !self.strata.contains_key(&Stratum::new(a, z)) {
                    return Err(NuisanceError::Positivity { a, z });
                }
            }
        }
        Ok(())
    }

    pub fn alphabet(&self) -> &CovariateAlphabet {
        &self.alphabet
    }

    pub fn n_codes(&self) -> usize {
        self.h.len()
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    /// P(A = a | Z = z).
    pub fn pi(&self, a: u8, z: usize) -> f64 {
        if a == 1 {
            self.p1[z]
        } else {
            1.0 - self.p1[z]
        }
    }

    /// Observable exposure-covariate mass J(a, z).
    pub fn j(&self, s: Stratum) -> f64 {
        self.h[s.z] * self.pi(s.a, s.z)
    }

    pub fn stratum(&self, s: Stratum) -> Option<&StratumNuisance> {
        self.strata.get(&s)
    }

    pub fn strata(&self) -> &BTreeMap<Stratum, StratumNuisance> {
        &self.strata
    }

    /// Strata with positive mass J(a, z).
    pub fn supported_strata(&self) -> impl Iterator<Item = (Stratum, &StratumNuisance)> {
        self.strata.iter().filter(|(s, _)| self.j(**s) > 0.0).map(|(s, n)| (*s, n))
    }

    pub fn flags(&self) -> &BTreeSet<String> {
        &self.flags
    }

    pub fn add_flag(&mut self, flag: impl Into<String>) {
        self.flags.insert(flag.into());
    }

    pub fn at_risk(&self, s: Stratum) -> Result<AtRiskCurve<'_>, NuisanceError> {
        reconstruct_at_risk(self, s)
    }

    /// Applies a propensity corruption.
    pub fn corrupt_propensity(&mut self, c: PropensityCorruption) {
        match c {
            PropensityCorruption::None => return,
            PropensityCorruption::Flip => self.p1.iter_mut().for_each(|p| *p = 1.0 - *p),
            PropensityCorruption::Constant(v) => self.p1.iter_mut().for_each(|p| *p = v),
        }
        self.flags.insert("misspecified:pi".into());
    }

    /// Replaces every censoring curve by Q = 1.
    pub fn corrupt_censoring(&mut self) {
        for sn in self.strata.values_mut() {
            sn.q = CensoringModel::none();
        }
        self.flags.insert("misspecified:Q".into());
    }

    /// Pointwise mixture (1 - eps) * self + eps * other of every component.
    pub fn mix(&self, other: &NuisanceSet, eps: f64) -> Result<NuisanceSet, NuisanceError> {
        let lerp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (1.0 - eps) * x + eps * y).collect::<Vec<_>>();
        let mut strata = BTreeMap::new();
        for (s, a) in &self.strata {
            let b = other.strata.get(s).ok_or(NuisanceError::EmptyStratum(*s))?;
            let q = match (&a.q, &b.q) {
                (
                    CensoringModel::Binned { edges: e1, curves: c1 },
                    CensoringModel::Binned { edges: e2, curves: c2 },
                ) if e1 == e2 => {
                    let curves = c1.iter().zip(c2).map(|(x, y)| x.mix(y, eps)).collect();
                    CensoringModel::Binned { edges: e1.clone(), curves }
                }
                (CensoringModel::Elapsed(x), CensoringModel::Elapsed(y)) => CensoringModel::Elapsed(x.mix(y, eps)),
                _ => return Err(NuisanceError::Invalid("censoring models are not mixable".into())),
            };
            let mut sn = StratumNuisance::new(a.s.mix(&b.s, eps), a.g.mix(&b.g, eps), q);
            sn.tau_bar = a.tau_bar.max(b.tau_bar);
            strata.insert(*s, sn);
        }
        NuisanceSet::from_parts(self.alphabet.clone(), lerp(&self.h, &other.h), lerp(&self.p1, &other.p1), strata)
    }
}

fn stratum_indices(train: &Dataset, s: Stratum) -> Vec<usize> {
    (0..train.len()).filter(|&i| train.stratum(i) == s).collect()
}

/// Event-time survival by left-truncation product-limit; NoEvents strata give S = 1 and `true`.
pub fn fit_event_survival(train: &Dataset, s: Stratum) -> Result<(StepFunction, bool), NuisanceError> {
    fit_event_survival_flagged(train, s).map(|(surv, no_events, _)| (surv, no_events))
}

/// Event-time survival with risk-set gaps bridged (see [`product_limit_bridged`]).
/// The third value reports whether a gap was bridged.
pub fn fit_event_survival_flagged(train: &Dataset, s: Stratum) -> Result<(StepFunction, bool, bool), NuisanceError> {
    let idx = stratum_indices(train, s);
    if idx.is_empty() {
        return Err(NuisanceError::EmptyStratum(s));
    }
    let entry: Vec<f64> = idx.iter().map(|&i| train.record(i).w).collect();
    let exit: Vec<f64> = idx.iter().map(|&i| train.record(i).y).collect();
    let event: Vec<bool> = idx.iter().map(|&i| train.record(i).is_event()).collect();
    if !event.iter().any(|&e| e) {
        return Ok((StepFunction::constant(1.0), true, false));
    }
    let (pl, bridged) = product_limit_bridged(&entry, &exit, &event);
    Ok((pl.survival, false, bridged))
}

/// Censoring survival by reversed-indicator product-limit.
pub fn fit_censoring_survival(
    train: &Dataset,
    s: Stratum,
    mode: CensoringMode,
) -> Result<CensoringModel, NuisanceError> {
    let idx = stratum_indices(train, s);
    if idx.is_empty() {
        return Err(NuisanceError::EmptyStratum(s));
    }
    let km = |rows: &[usize], elapsed: bool| {
        let exit: Vec<f64> = rows
            .iter()
            .map(|&i| {
                let r = train.record(i);
                if elapsed {
                    r.y - r.w
                } else {
                    r.y
                }
            })
            .collect();
        let event: Vec<bool> = rows.iter().map(|&i| !train.record(i).is_event()).collect();
        product_limit(&vec![0.0; rows.len()], &exit, &event).survival
    };
    match mode {
        CensoringMode::Elapsed => Ok(CensoringModel::Elapsed(km(&idx, true))),
        CensoringMode::Binned { bins } => {
            let mut ws: Vec<f64> = idx.iter().map(|&i| train.record(i).w).collect();
            ws.sort_by(f64::total_cmp);
            let mut edges: Vec<f64> =
                (1..bins.max(1)).map(|j| ws[(j * ws.len()) / bins]).filter(|&e| e > ws[0]).collect();
            edges.dedup();
            let pooled = km(&idx, false);
            let curves = (0..=edges.len())
                .map(|b| {
                    let rows: Vec<usize> =
                        idx.iter().copied().filter(|&i| CensoringModel::bin(&edges, train.record(i).w) == b).collect();
                    if rows.is_empty() {
                        pooled.clone()
                    } else {
                        km(&rows, false)
                    }
                })
                .collect();
            Ok(CensoringModel::Binned { edges, curves })
        }
    }
}

/// Empirical CDF of the entry time within the stratum.
pub fn fit_truncation_cdf(train: &Dataset, s: Stratum) -> Result<StepFunction, NuisanceError> {
    let idx = stratum_indices(train, s);
    if idx.is_empty() {
        return Err(NuisanceError::EmptyStratum(s));
    }
    let atoms: Vec<(f64, f64)> = idx.iter().map(|&i| (train.record(i).w, 1.0)).collect();
    StepFunction::from_atoms(&atoms, true).map_err(|e| NuisanceError::Invalid(e.to_string()))
}

/// P(A = a0 | Z = z) by stratum frequency (1 for datasets without an exposure column).
pub fn fit_propensity(train: &Dataset, a0: u8) -> Result<Vec<f64>, NuisanceError> {
    if train.is_empty() {
        return Err(NuisanceError::EmptyDataset);
    }
    let n = train.alphabet().n_codes();
    let (mut hits, mut totals) = (vec![0usize; n], vec![0usize; n]);
    for (i, r) in train.records().iter().enumerate() {
        let z = train.z_code(i);
        totals[z] += 1;
        if r.a == a0 {
            hits[z] += 1;
        }
    }
    Ok((0..n).map(|z| if totals[z] == 0 { 0.0 } else { hits[z] as f64 / totals[z] as f64 }).collect())
}

/// Covariate stratum frequencies.
pub fn fit_covariate_dist(train: &Dataset) -> Result<Vec<f64>, NuisanceError> {
    if train.is_empty() {
        return Err(NuisanceError::EmptyDataset);
    }
    let mut h = vec![0.0; train.alphabet().n_codes()];
    for i in 0..train.len() {
        h[train.z_code(i)] += 1.0;
    }
    let n = train.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    Ok(h)
}

/// Observable at-risk curve R(u | a, z) = S(u-) sum_{w <= u} G(dw) Q(u- | w) / S(w-).
pub fn reconstruct_at_risk(eta: &NuisanceSet, s: Stratum) -> Result<AtRiskCurve<'_>, NuisanceError> {
    let nuisance = eta.stratum(s).ok_or(NuisanceError::EmptyStratum(s))?;
    for (w, mass) in nuisance.g.increments() {
        if mass > 0.0 && nuisance.s.eval_left(w) <= 0.0 {
            return Err(NuisanceError::SupportViolation {
                stratum: s,
                detail: format!("event survival vanishes before entry atom w={w}"),
            });
        }
    }
    Ok(AtRiskCurve { nuisance })
}

/// Fits every component on `train`, or returns the configured oracle.
pub fn fit_nuisances(train: &Dataset, config: &NuisanceConfig) -> Result<NuisanceSet, NuisanceError> {
    let mut eta = match &config.oracle {
        Some(oracle) => (**oracle).clone(),
        None => fit_stratified(train, config)?,
    };
    eta.pi_floor = config.pi_floor;
    eta.survival_floor = config.survival_floor;
    eta.at_risk_floor = config.at_risk_floor;
    if config.misspecify.censoring_one {
        eta.corrupt_censoring();
    }
    eta.corrupt_propensity(config.misspecify.propensity);
    Ok(eta)
}

fn fit_stratified(train: &Dataset, config: &NuisanceConfig) -> Result<NuisanceSet, NuisanceError> {
    if train.is_empty() {
        return Err(NuisanceError::EmptyDataset);
    }
    let h = fit_covariate_dist(train)?;
    let p1 = if train.has_exposure() { fit_propensity(train, 1)? } else { vec![1.0; h.len()] };
    let mut flags = BTreeSet::new();
    let mut strata = BTreeMap::new();
    for (s, idx) in train.strata() {
        let (surv, no_events, bridged) = fit_event_survival_flagged(train, s)?;
        if bridged {
            flags.insert(format!("risk_set_gap:{s}"));
        }
        if no_events {
            flags.insert(format!("no_events:{s}"));
            log::warn!("stratum {s} has no events; using S = 1");
        }
        let tau_bar = idx.iter().map(|&i| train.record(i).y).fold(0.0, f64::max);
        strata.insert(
            s,
            StratumNuisance {
                s: surv,
                g: fit_truncation_cdf(train, s)?,
                q: fit_censoring_survival(train, s, config.censoring)?,
                tau_bar,
                no_events,
                n: idx.len(),
            },
        );
    }
    let mut eta = NuisanceSet::from_parts(train.alphabet().clone(), h, p1, strata)?;
    eta.flags = flags;
    Ok(eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ObservedRecord;

    fn rec(y: f64, delta: u8, w: f64) -> ObservedRecord {
        ObservedRecord::new(y, delta, w, 1, vec![])
    }

    fn ds(recs: Vec<ObservedRecord>) -> Dataset {
        Dataset::new(recs, CovariateAlphabet::new(vec![])).unwrap()
    }

    const S0: Stratum = Stratum { a: 1, z: 0 };

    #[test]
    fn product_limit_reduces_to_ecdf() {
        let d = ds(vec![rec(1.0, 1, 0.0), rec(2.0, 1, 0.0), rec(3.0, 1, 0.0)]);
        let (s, _) = fit_event_survival(&d, S0).unwrap();
        assert!((s.eval(1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.eval(2.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.eval(3.0), 0.0);
    }

    #[test]
    fn product_limit_with_censoring() {
        let d = ds(vec![rec(1.0, 1, 0.0), rec(2.0, 0, 0.0), rec(3.0, 1, 0.0)]);
        let (s, _) = fit_event_survival(&d, S0).unwrap();
        assert!((s.eval(1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.eval(2.5) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.eval(3.0), 0.0);
    }

    #[test]
    fn late_entrant_is_not_at_risk_early() {
        // Risk-set tabulation by brute force: at u=2 only the first unit is at risk.
        let d = ds(vec![rec(2.0, 1, 0.0), rec(3.0, 1, 2.5)]);
        let s = product_limit(&[0.0, 2.5], &[2.0, 3.0], &[true, true]).survival;
        let brute = |u: f64| d.records().iter().filter(|r| r.w <= u && u <= r.y).count();
        assert_eq!(brute(2.0), 1);
        assert_eq!(s.eval(2.0), 1.0 - 1.0 / brute(2.0) as f64);
    }

    #[test]
    fn emptied_risk_set_with_later_entrant_is_bridged() {
        let d = ds(vec![rec(2.0, 1, 0.0), rec(3.0, 1, 2.5)]);
        let (s, _, bridged) = fit_event_survival_flagged(&d, S0).unwrap();
        assert!(bridged);
        assert_eq!(s.eval(2.0), 0.5);
        assert_eq!(s.eval(3.0), 0.0);
        let eta = fit_nuisances(&d, &NuisanceConfig::default()).unwrap();
        assert!(eta.flags().contains("risk_set_gap:a1z0"));
    }

    #[test]
    fn tied_events_share_one_factor() {
        let pl = product_limit(&[0.0; 4], &[1.0, 1.0, 2.0, 3.0], &[true, true, false, true]);
        assert_eq!(pl.times, vec![1.0, 3.0]);
        assert_eq!(pl.events, vec![2, 1]);
        assert_eq!(pl.at_risk, vec![4, 1]);
        assert_eq!(pl.survival.eval(1.0), 0.5);
    }

    #[test]
    fn censoring_fitter_cases() {
        let d = ds(vec![rec(1.0, 1, 0.0), rec(2.0, 1, 0.0)]);
        let q = fit_censoring_survival(&d, S0, CensoringMode::default()).unwrap();
        assert_eq!(q.survival(5.0, 0.0), 1.0);
        let d = ds(vec![rec(1.0, 0, 0.0), rec(2.0, 0, 0.0), rec(4.0, 0, 0.0), rec(5.0, 0, 0.0)]);
        let q = fit_censoring_survival(&d, S0, CensoringMode::default()).unwrap();
        assert_eq!(q.survival(1.0, 0.0), 0.75);
        assert_eq!(q.survival(4.5, 0.0), 0.25);
    }

    #[test]
    fn censoring_matches_reversed_indicator_oracle() {
        let d = ds(vec![
            rec(1.0, 1, 0.3),
            rec(1.5, 0, 0.0),
            rec(2.0, 1, 0.5),
            rec(2.0, 0, 1.0),
            rec(3.0, 0, 0.2),
            rec(3.5, 1, 0.0),
            rec(4.0, 0, 2.0),
        ]);
        let q = fit_censoring_survival(&d, S0, CensoringMode::default()).unwrap();
        let flipped = d.map_records(|r| ObservedRecord::new(r.y, 1 - r.delta, 0.0, r.a, r.z.clone())).unwrap();
        let (dual, _) = fit_event_survival(&flipped, S0).unwrap();
        // Brute-force reversed product: risk set {Y >= c}, events precede censorings at ties.
        let mut brute = 1.0;
        for c in [1.5, 2.0, 3.0, 4.0] {
            let r = d.records().iter().filter(|x| x.y >= c).count() as f64;
            let k = d.records().iter().filter(|x| x.y == c && x.delta == 0).count() as f64;
            brute *= 1.0 - k / r;
            assert!((q.survival(c, 0.0) - brute).abs() < 1e-12);
            assert!((dual.eval(c) - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_cdf_cases() {
        let d = ds(vec![rec(3.0, 1, 0.0), rec(3.0, 1, 0.0), rec(3.0, 1, 0.0)]);
        let g = fit_truncation_cdf(&d, S0).unwrap();
        assert_eq!(g.eval(0.0), 1.0);
        let d = ds(vec![rec(6.0, 1, 1.0), rec(6.0, 1, 2.0), rec(6.0, 1, 2.0), rec(6.0, 1, 5.0)]);
        let g = fit_truncation_cdf(&d, S0).unwrap();
        assert_eq!((g.eval(0.5), g.eval(1.0), g.eval(2.0), g.eval(5.0), g.eval(9.0)), (0.0, 0.25, 0.75, 1.0, 1.0));
    }

    #[test]
    fn propensity_and_covariates() {
        let recs = vec![
            ObservedRecord::new(1.0, 1, 0.0, 1, vec![0.0]),
            ObservedRecord::new(1.0, 1, 0.0, 1, vec![0.0]),
            ObservedRecord::new(1.0, 1, 0.0, 0, vec![0.0]),
            ObservedRecord::new(1.0, 1, 0.0, 1, vec![0.0]),
        ];
        let d = Dataset::from_records(recs).unwrap();
        assert_eq!(fit_propensity(&d, 1).unwrap(), vec![0.75]);
        let recs = vec![ObservedRecord::new(1.0, 1, 0.0, 1, vec![0.0]), ObservedRecord::new(1.0, 1, 0.0, 1, vec![1.0])];
        let d = Dataset::from_records(recs).unwrap();
        assert_eq!(fit_propensity(&d, 1).unwrap(), vec![1.0, 1.0]);
        assert_eq!(fit_covariate_dist(&d).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn at_risk_factorises_without_truncation() {
        let s = StepFunction::new(1.0, vec![1.0, 2.0, 3.0], vec![0.7, 0.4, 0.1]).unwrap();
        let q = StepFunction::new(1.0, vec![1.5, 2.5], vec![0.8, 0.5]).unwrap();
        let g = StepFunction::new(0.0, vec![0.0], vec![1.0]).unwrap();
        let none = StratumNuisance::new(s.clone(), g.clone(), CensoringModel::none());
        let known = StratumNuisance::new(s.clone(), g, CensoringModel::Elapsed(q.clone()));
        for u in [0.5, 1.0, 1.5, 2.0, 2.7, 3.0, 4.0] {
            assert!((none.at_risk(u) - s.eval_left(u)).abs() < 1e-15);
            assert!((known.at_risk(u) - s.eval_left(u) * q.eval_left(u)).abs() < 1e-15);
        }
    }

    #[test]
    fn at_risk_matches_discrete_enumeration() {
        // T atoms, three entry atoms, censoring C = W + D with D discrete.
        let t_atoms: [(f64, f64); 3] = [(1.0, 0.3), (2.0, 0.3), (3.0, 0.4)];
        let wx_atoms = [(0.0, 0.5), (0.5, 0.3), (1.5, 0.2)];
        let d_atoms = [(0.75, 0.4), (10.0, 0.6)];
        let mut total = 0.0;
        let mut obs = Vec::new();
        for &(w, pw) in &wx_atoms {
            for &(t, pt) in &t_atoms {
                if t < w {
                    continue;
                }
                for &(dd, pd) in &d_atoms {
                    let p = pw * pt * pd;
                    total += p;
                    obs.push((w, t.min(w + dd), p));
                }
            }
        }
        let brute = |u: f64| obs.iter().filter(|o| o.0 <= u && u <= o.1).map(|o| o.2).sum::<f64>() / total;
        let s = StepFunction::from_hazards(&[1.0, 2.0, 3.0], &[0.3, 0.3 / 0.7, 1.0]).unwrap();
        let g_obs: Vec<(f64, f64)> = wx_atoms.iter().map(|&(w, p)| (w, p * s.eval_left(w))).collect();
        let g = StepFunction::from_atoms(&g_obs, true).unwrap();
        let q = StepFunction::from_atoms(&[(0.75, 0.4), (10.0, 0.6)], false).unwrap().map(|v| 1.0 - v);
        let n = StratumNuisance::new(s, g, CensoringModel::Elapsed(q));
        let grid = [0.0, 0.25, 0.5, 1.0, 1.25, 1.5, 2.0, 2.25, 2.5, 3.0, 3.5];
        for u in grid {
            assert!((n.at_risk(u) - brute(u)).abs() < 1e-12, "u={u}: {} vs {}", n.at_risk(u), brute(u));
        }
        let walked = n.rbar_on_grid(&grid);
        for (u, r) in grid.iter().zip(walked) {
            assert_eq!(r, n.rbar(*u));
        }
    }

    #[test]
    fn oracle_and_corruption_plumbing() {
        let d = ds(vec![rec(1.0, 1, 0.0), rec(2.0, 0, 0.5), rec(3.0, 1, 0.0)]);
        let eta = fit_nuisances(&d, &NuisanceConfig::default()).unwrap();
        let injected = fit_nuisances(&ds(vec![rec(9.0, 1, 0.0)]), &NuisanceConfig::with_oracle(eta.clone())).unwrap();
        assert_eq!(injected.strata(), eta.strata());
        let cfg = NuisanceConfig {
            misspecify: Misspecification { censoring_one: true, ..Default::default() },
            ..NuisanceConfig::default()
        };
        let bad = fit_nuisances(&d, &cfg).unwrap();
        assert!(bad.flags().contains("misspecified:Q"));
        assert_eq!(bad.stratum(S0).unwrap().q.survival(10.0, 0.0), 1.0);
        assert!(bad.validate().is_ok());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = NuisanceConfig::from_json(r#"{"censoring":{"mode":"elapsed"},"misspecify":{"propensity":"flip"}}"#)
            .unwrap();
        assert_eq!(cfg.censoring, CensoringMode::Elapsed);
        assert_eq!(cfg.misspecify.propensity, PropensityCorruption::Flip);
        assert_eq!(cfg.pi_floor, 0.01);
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("schema_version"));
    }
}
