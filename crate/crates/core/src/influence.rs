//! Efficient influence function of the survival-integral parameter.
//!
//! All integrals against fitted step functions are finite sums over jump points.
//! The integrands are the exact discrete forms of the continuous-time
//! expressions: with S the event survival curve, h its discrete hazards on the
//! jump grid s_1 < ... < s_g and phi the kernel,
//!
//! * `M(v) = sum_{u > v} dphi(u) prod_{v < s < u} (1 - h(s))`, so that the
//!   kernel tail is `L(v) = S(v-) M(v)` and `mu(z) = phi(0) + M(0)`;
//! * `gamma_nat(v) = sum_{w > v} G(dw) / S(w-)`;
//! * `R(u) = S(u-) Rbar(u)` with `Rbar` from the entry and censoring laws.
//!
//! Ratios such as `L / R = M / Rbar` are formed before dividing so that strata
//! whose survival reaches zero do not produce 0/0.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::data::{Dataset, ObservedRecord, Stratum};
use crate::functionals::kernel::Kernel;
use crate::nuisance::{NuisanceError, NuisanceSet, StratumNuisance};
use crate::step::StepFunction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InfluenceError {
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
    #[error("at-risk probability is zero at u={u} in stratum {stratum}")]
    AtRiskZero { stratum: Stratum, u: f64 },
    #[error("support violation: {0}")]
    SupportViolation(String),
    #[error("no fitted nuisances for stratum {0}")]
    MissingStratum(Stratum),
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    if num == 0.0 {
        Some(0.0)
    } else if den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

/// Jump grid and discrete hazards of a survival curve.
fn hazard_grid(s: &StepFunction) -> (Vec<f64>, Vec<f64>) {
    (s.jump_times().to_vec(), s.hazards())
}

/// `M` at each grid point (open at the point), by backward recursion.
fn tail_on_grid(grid: &[f64], h: &[f64], kernel: &Kernel, z: &[f64]) -> Vec<f64> {
    let g = grid.len();
    let mut m = vec![0.0; g];
    if g == 0 {
        return m;
    }
    m[g - 1] = kernel.value_at_infinity(z) - kernel.eval(grid[g - 1], z);
    for j in (0..g - 1).rev() {
        m[j] = kernel.eval(grid[j + 1], z) - kernel.eval(grid[j], z) + (1.0 - h[j + 1]) * m[j + 1];
    }
    m
}

/// `M(y)` at an arbitrary time, from its grid values.
fn tail_at(y: f64, grid: &[f64], h: &[f64], m: &[f64], kernel: &Kernel, z: &[f64]) -> f64 {
    let j = grid.partition_point(|&s| s <= y);
    if j == grid.len() {
        kernel.value_at_infinity(z) - kernel.eval(y, z)
    } else {
        kernel.eval(grid[j], z) - kernel.eval(y, z) + (1.0 - h[j]) * m[j]
    }
}

/// Kernel tail L(y) = int_{[y, inf)} S(u) phi(du, z) (closed at y).
pub fn compute_l(s: &StepFunction, kernel: &Kernel, y: f64, z: &[f64]) -> f64 {
    kernel.survival_weighted_tail(s, y, z)
}

/// Discrete-exact kernel tail L(y) = S(y-) M(y) used inside the influence function.
pub fn compute_l_discrete(s: &StepFunction, kernel: &Kernel, y: f64, z: &[f64]) -> f64 {
    let (grid, h) = hazard_grid(s);
    let m = tail_on_grid(&grid, &h, kernel, z);
    s.eval_left(y) * tail_at(y, &grid, &h, &m, kernel, z)
}

/// mu(z) = int phi(t, z) F(dt) with F = 1 - S, remaining mass placed at infinity.
pub fn kernel_mean(s: &StepFunction, kernel: &Kernel, z: &[f64]) -> f64 {
    let mut mu = 0.0;
    for (t, ds) in s.increments() {
        mu -= kernel.eval(t, z) * ds;
    }
    mu + s.last_value() * kernel.value_at_infinity(z)
}

/// Truncation-weight quantities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaBundle {
    /// gamma(a, z) = sum_w G(dw | a, z) / S(w- | a, z).
    pub gamma_az: BTreeMap<Stratum, f64>,
    /// gamma = sum_{a,z} gamma(a, z) J(a, z).
    pub gamma_scalar: f64,
    pub gamma_bar_az: BTreeMap<Stratum, f64>,
    /// gamma_bar(z) = sum_a gamma_bar(a, z) pi(a | z).
    pub gamma_bar_z: Vec<f64>,
    /// Strict partial weight y -> sum_{w > y} G(dw) / S(w-), right-continuous.
    pub gamma_natural_strict: BTreeMap<Stratum, StepFunction>,
}

impl GammaBundle {
    /// Closed partial weight gamma_nat(y) = sum_{w >= y} G(dw) / S(w-).
    pub fn natural(&self, s: Stratum, y: f64) -> f64 {
        self.gamma_natural_strict.get(&s).map_or(0.0, |f| f.eval_left(y))
    }
}

fn entry_weights(s: Stratum, sn: &StratumNuisance) -> Result<Vec<(f64, f64)>, InfluenceError> {
    let mut out = Vec::with_capacity(sn.g.len());
    for (w, mass) in sn.g.increments() {
        if mass == 0.0 {
            continue;
        }
        let sw = sn.s.eval_left(w);
        if sw <= 0.0 {
            return Err(NuisanceError::SupportViolation {
                stratum: s,
                detail: format!("event survival vanishes before entry atom w={w}"),
            }
            .into());
        }
        out.push((w, mass / sw));
    }
    Ok(out)
}

pub fn compute_gamma(eta: &NuisanceSet) -> Result<GammaBundle, InfluenceError> {
    let mut gamma_az = BTreeMap::new();
    let mut gamma_natural_strict = BTreeMap::new();
    for (s, sn) in eta.strata() {
        let weights = entry_weights(*s, sn)?;
        let total: f64 = weights.iter().map(|w| w.1).sum();
        let mut acc = total;
        let mut values = Vec::with_capacity(weights.len());
        for &(_, x) in &weights {
            acc -= x;
            values.push(acc.max(0.0));
        }
        let times = weights.iter().map(|w| w.0).collect();
        gamma_natural_strict.insert(*s, StepFunction::new(total, times, values).expect("entry atoms are sorted"));
        gamma_az.insert(*s, total);
    }
    let gamma_scalar: f64 = eta.supported_strata().map(|(s, _)| gamma_az[&s] * eta.j(s)).sum();
    if gamma_scalar <= 0.0 || !gamma_scalar.is_finite() {
        return Err(InfluenceError::SupportViolation(format!("total truncation weight is {gamma_scalar}")));
    }
    let gamma_bar_az: BTreeMap<Stratum, f64> = gamma_az.iter().map(|(s, g)| (*s, g / gamma_scalar)).collect();
    let gamma_bar_z = (0..eta.n_codes())
        .map(|z| {
            (0..2u8)
                .map(|a| {
                    let pi = eta.pi(a, z);
                    if pi > 0.0 {
                        gamma_bar_az.get(&Stratum::new(a, z)).copied().unwrap_or(0.0) * pi
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect();
    Ok(GammaBundle { gamma_az, gamma_scalar, gamma_bar_az, gamma_bar_z, gamma_natural_strict })
}

/// Per-stratum quantities shared by every kernel.
#[derive(Debug, Clone)]
struct StratumCache {
    grid: Vec<f64>,
    h: Vec<f64>,
    s: Vec<f64>,
    rbar: Vec<f64>,
    /// Entry atoms (w, G(dw)/S(w-)) and suffix sums over strictly later atoms.
    entry_w: Vec<f64>,
    entry_suffix: Vec<f64>,
    /// prefix[j] = sum_{i < j} gamma_nat(s_i) h_i / (S(s_i) Rbar(s_i)).
    gamma_prefix: Vec<f64>,
}

impl StratumCache {
    fn build(stratum: Stratum, sn: &StratumNuisance) -> Result<Self, InfluenceError> {
        let (grid, h) = hazard_grid(&sn.s);
        let s = sn.s.values().to_vec();
        let rbar = sn.rbar_on_grid(&grid);
        let weights = entry_weights(stratum, sn)?;
        let entry_w: Vec<f64> = weights.iter().map(|w| w.0).collect();
        let mut entry_suffix = vec![0.0; weights.len() + 1];
        for k in (0..weights.len()).rev() {
            entry_suffix[k] = entry_suffix[k + 1] + weights[k].1;
        }
        let mut cache = Self { grid, h, s, rbar, entry_w, entry_suffix, gamma_prefix: Vec::new() };
        let mut prefix = vec![0.0; cache.grid.len() + 1];
        for j in 0..cache.grid.len() {
            let num = cache.gamma_strict(cache.grid[j]) * cache.h[j];
            let term = ratio(num, cache.s[j] * cache.rbar[j])
                .ok_or(InfluenceError::AtRiskZero { stratum, u: cache.grid[j] })?;
            prefix[j + 1] = prefix[j] + term;
        }
        cache.gamma_prefix = prefix;
        Ok(cache)
    }

    fn gamma_strict(&self, v: f64) -> f64 {
        self.entry_suffix[self.entry_w.partition_point(|&w| w <= v)]
    }

    fn hazard_at(&self, v: f64) -> f64 {
        match self.grid.binary_search_by(|g| g.total_cmp(&v)) {
            Ok(j) => self.h[j],
            Err(_) => 0.0,
        }
    }
}

/// Kernel quantities on the exposure-a0 stratum of one covariate value.
#[derive(Debug, Clone)]
struct CovariateKernel {
    z: Vec<f64>,
    m: Vec<f64>,
    prefix: Vec<f64>,
    mu: f64,
}

/// Kernel-specific cache for one nuisance set and target exposure.
#[derive(Debug, Clone)]
pub struct KernelCache {
    kernel: Kernel,
    a0: u8,
    per_z: Vec<Option<CovariateKernel>>,
    pub flags: BTreeSet<String>,
}

impl KernelCache {
    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn a0(&self) -> u8 {
        self.a0
    }

    /// mu(z) for covariate code z (None when the a0 stratum carries no mass).
    pub fn mu(&self, z: usize) -> Option<f64> {
        self.per_z[z].as_ref().map(|c| c.mu)
    }
}

/// Record-level quantities shared by every kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordGeometry {
    pub stratum: Stratum,
    pub y: f64,
    pub event: bool,
    /// Grid indices bounding [w, y]: grid[lo..hi] lie in the interval.
    lo: usize,
    hi: usize,
    rbar_y: f64,
    /// D = 1/S(w-) - phi_KM(gamma-part).
    pub d: f64,
    /// S(w-) was clipped at the survival floor.
    pub floored: bool,
    /// The at-risk factor at y was clipped at 1/(n + 1).
    pub at_risk_floored: bool,
}

/// Per-record decomposition phi(psi) = phi1 + (mu - psi) * dnorm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EifParts {
    pub phi1: f64,
    /// D / gamma.
    pub dnorm: f64,
    pub mu: f64,
}

impl EifParts {
    pub fn phi(&self, psi: f64) -> f64 {
        self.phi1 + (self.mu - psi) * self.dnorm
    }

    /// phi = c - psi * d.
    pub fn c(&self) -> f64 {
        self.phi1 + self.mu * self.dnorm
    }
}

/// Influence-function components for a set of records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EifComponents {
    pub phi1: Vec<f64>,
    pub phi2: Vec<f64>,
    pub phi: Vec<f64>,
    /// Per-record D = 1/S(w-) - phi_KM(gamma_nat).
    pub d: Vec<f64>,
    pub mu_z: Vec<Option<f64>>,
    pub xi_z: Vec<Option<f64>>,
    pub psi_ref: f64,
}

/// Evaluation context for one fitted nuisance set.
#[derive(Debug, Clone)]
pub struct InfluenceContext {
    eta: Arc<NuisanceSet>,
    gamma: GammaBundle,
    caches: BTreeMap<Stratum, StratumCache>,
}

impl InfluenceContext {
    pub fn new(eta: Arc<NuisanceSet>) -> Result<Self, InfluenceError> {
        let gamma = compute_gamma(&eta)?;
        let mut caches = BTreeMap::new();
        for (s, sn) in eta.strata() {
            caches.insert(*s, StratumCache::build(*s, sn)?);
        }
        Ok(Self { eta, gamma, caches })
    }

    pub fn from_set(eta: &NuisanceSet) -> Result<Self, InfluenceError> {
        Self::new(Arc::new(eta.clone()))
    }

    pub fn eta(&self) -> &NuisanceSet {
        &self.eta
    }

    pub fn gamma(&self) -> &GammaBundle {
        &self.gamma
    }

    /// Observable covariate weight H~(z) = gamma_bar(z) H(z).
    pub fn h_tilde(&self, z: usize) -> f64 {
        self.gamma.gamma_bar_z[z] * self.eta.h()[z]
    }

    pub fn kernel_cache(&self, kernel: &Kernel, a0: u8) -> Result<KernelCache, InfluenceError> {
        let alphabet = self.eta.alphabet();
        let mut flags = BTreeSet::new();
        let mut per_z = Vec::with_capacity(self.eta.n_codes());
        let tail = kernel.tail_from();
        let mut caps = Vec::new();
        for code in 0..self.eta.n_codes() {
            if self.h_tilde(code) <= 0.0 {
                per_z.push(None);
                continue;
            }
            let s = Stratum::new(a0, code);
            let (Some(sn), Some(cache)) = (self.eta.stratum(s), self.caches.get(&s)) else {
                return Err(NuisanceError::Positivity { a: a0, z: code }.into());
            };
            if self.eta.pi(a0, code) <= 0.0 {
                return Err(NuisanceError::Positivity { a: a0, z: code }.into());
            }
            caps.push(sn.tau_bar);
            if tail > sn.tau_bar {
                flags.insert(format!("support_truncated:{s}"));
            }
            let z = alphabet.decode(code);
            let m = tail_on_grid(&cache.grid, &cache.h, kernel, &z);
            let mut prefix = vec![0.0; m.len() + 1];
            for j in 0..m.len() {
                let term = ratio(m[j] * cache.h[j], cache.rbar[j])
                    .ok_or(InfluenceError::AtRiskZero { stratum: s, u: cache.grid[j] })?;
                prefix[j + 1] = prefix[j] + term;
            }
            let mu = kernel_mean(&sn.s, kernel, &z);
            per_z.push(Some(CovariateKernel { z, m, prefix, mu }));
        }
        if !caps.is_empty() && caps.iter().all(|&c| tail > c) {
            return Err(InfluenceError::SupportViolation(format!(
                "kernel {} is not constant beyond the largest follow-up time of any stratum",
                kernel.id()
            )));
        }
        Ok(KernelCache { kernel: kernel.clone(), a0, per_z, flags })
    }

    /// Plug-in value sum_z H~(z) mu(z).
    pub fn plug_in(&self, kc: &KernelCache) -> f64 {
        (0..self.eta.n_codes()).filter_map(|z| kc.mu(z).map(|mu| self.h_tilde(z) * mu)).sum()
    }

    pub fn geometry(&self, r: &ObservedRecord, z: usize) -> Result<RecordGeometry, InfluenceError> {
        let stratum = Stratum::new(r.a, z);
        let sn = self.eta.stratum(stratum).ok_or(InfluenceError::MissingStratum(stratum))?;
        let cache = &self.caches[&stratum];
        let lo = cache.grid.partition_point(|&g| g < r.w);
        let hi = cache.grid.partition_point(|&g| g <= r.y);
        let mut rbar_y = sn.rbar(r.y);
        let mut at_risk_floored = false;
        if self.eta.at_risk_floor && sn.n > 0 {
            let floor = 1.0 / (sn.n + 1) as f64;
            if rbar_y < floor {
                rbar_y = floor;
                at_risk_floored = true;
            }
        }
        let mut km = if hi > lo { cache.gamma_prefix[hi] - cache.gamma_prefix[lo] } else { 0.0 };
        if r.is_event() {
            let num = cache.gamma_strict(r.y);
            km -= ratio(num, sn.s.eval(r.y) * rbar_y).ok_or(InfluenceError::AtRiskZero { stratum, u: r.y })?;
        }
        let sw = sn.s.eval_left(r.w);
        let floored = sw < self.eta.survival_floor;
        let d = 1.0 / sw.max(self.eta.survival_floor) - km;
        Ok(RecordGeometry {
            stratum,
            y: r.y,
            event: r.is_event(),
            lo: lo.min(hi),
            hi,
            rbar_y,
            d,
            floored,
            at_risk_floored,
        })
    }

    /// phi_KM of the kernel-tail integrand at a record of the a0 stratum.
    fn km_tail(&self, kc: &KernelCache, geo: &RecordGeometry) -> Result<f64, InfluenceError> {
        let ck = kc.per_z[geo.stratum.z].as_ref().ok_or(InfluenceError::MissingStratum(geo.stratum))?;
        let cache = &self.caches[&geo.stratum];
        let mut value = ck.prefix[geo.hi] - ck.prefix[geo.lo];
        if geo.event {
            let m = tail_at(geo.y, &cache.grid, &cache.h, &ck.m, &kc.kernel, &ck.z);
            value -= ratio(m, geo.rbar_y).ok_or(InfluenceError::AtRiskZero { stratum: geo.stratum, u: geo.y })?;
        }
        Ok(value)
    }

    pub fn parts(&self, kc: &KernelCache, geo: &RecordGeometry) -> Result<EifParts, InfluenceError> {
        let z = geo.stratum.z;
        let mu = kc.mu(z).unwrap_or(0.0);
        let phi1 = if geo.stratum.a == kc.a0 {
            let pi = self.eta.pi(kc.a0, z).max(self.eta.pi_floor);
            self.gamma.gamma_bar_z[z] / pi * self.km_tail(kc, geo)?
        } else {
            0.0
        };
        Ok(EifParts { phi1, dnorm: geo.d / self.gamma.gamma_scalar, mu })
    }

    /// Influence-function components at the given records.
    pub fn compute_eif(
        &self,
        kernel: &Kernel,
        a0: u8,
        psi_ref: f64,
        data: &Dataset,
        idx: &[usize],
    ) -> Result<EifComponents, InfluenceError> {
        let kc = self.kernel_cache(kernel, a0)?;
        let (mut phi1, mut phi2, mut phi, mut d) = (vec![], vec![], vec![], vec![]);
        for &i in idx {
            let geo = self.geometry(data.record(i), data.z_code(i))?;
            let p = self.parts(&kc, &geo)?;
            phi1.push(p.phi1);
            phi2.push(p.phi(psi_ref) - p.phi1);
            phi.push(p.phi(psi_ref));
            d.push(geo.d);
        }
        let mu_z: Vec<Option<f64>> = (0..self.eta.n_codes()).map(|z| kc.mu(z)).collect();
        let xi_z = mu_z.iter().map(|m| m.map(|m| (m - psi_ref) / self.gamma.gamma_scalar)).collect();
        Ok(EifComponents { phi1, phi2, phi, d, mu_z, xi_z, psi_ref })
    }
}

/// Generic transform phi_KM(m)(o) = -delta m(y)/R(y) + sum_{v in [w, y]} m(v) dLambda(v) / R(v).
pub fn phi_km(
    m: impl Fn(f64) -> f64,
    eta: &NuisanceSet,
    record: &ObservedRecord,
    z: usize,
) -> Result<f64, InfluenceError> {
    let stratum = Stratum::new(record.a, z);
    let sn = eta.stratum(stratum).ok_or(InfluenceError::MissingStratum(stratum))?;
    let (grid, h) = hazard_grid(&sn.s);
    let mut value = 0.0;
    for (v, hv) in grid.iter().zip(&h) {
        if *v >= record.w && *v <= record.y {
            value += ratio(m(*v) * hv, sn.at_risk(*v)).ok_or(InfluenceError::AtRiskZero { stratum, u: *v })?;
        }
    }
    if record.is_event() {
        value -= ratio(m(record.y), sn.at_risk(record.y)).ok_or(InfluenceError::AtRiskZero { stratum, u: record.y })?;
    }
    Ok(value)
}

/// Integrand of the kernel part, m_L(v) = S(v-) M(v).
pub fn kernel_integrand(sn: &StratumNuisance, kernel: &Kernel, z: &[f64]) -> impl Fn(f64) -> f64 {
    let (grid, h) = hazard_grid(&sn.s);
    let m = tail_on_grid(&grid, &h, kernel, z);
    let (s, kernel, z) = (sn.s.clone(), kernel.clone(), z.to_vec());
    move |v| s.eval_left(v) * tail_at(v, &grid, &h, &m, &kernel, &z)
}

/// Integrand of the truncation part, m_gamma(v) = gamma_nat(v+) / (1 - h(v)).
pub fn truncation_integrand(sn: &StratumNuisance, stratum: Stratum) -> Result<impl Fn(f64) -> f64, InfluenceError> {
    let cache = StratumCache::build(stratum, sn)?;
    Ok(move |v| {
        let g = cache.gamma_strict(v);
        if g == 0.0 {
            0.0
        } else {
            g / (1.0 - cache.hazard_at(v))
        }
    })
}

/// Second-order remainder of the linearisation and its decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RemainderReport {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
    pub r4_1: f64,
    pub r4_2: f64,
    pub r4_3: f64,
    /// r1 + r2 + r3 + r4.
    pub total: f64,
    /// Psi(P) - Psi(P0) + E_0[phi_P], computed directly.
    pub direct: f64,
}

fn union_grid(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = a.iter().chain(b).copied().collect();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Remainder R(P, P0) for nuisance sets on a common stratum alphabet.
pub fn remainder_terms(
    eta_p: &NuisanceSet,
    eta_0: &NuisanceSet,
    kernel: &Kernel,
    a0: u8,
) -> Result<RemainderReport, InfluenceError> {
    let ctx_p = InfluenceContext::from_set(eta_p)?;
    let ctx_0 = InfluenceContext::from_set(eta_0)?;
    let kc_p = ctx_p.kernel_cache(kernel, a0)?;
    let kc_0 = ctx_0.kernel_cache(kernel, a0)?;
    let psi_p = ctx_p.plug_in(&kc_p);
    let psi_0 = ctx_0.plug_in(&kc_0);
    let (gam_p, gam_0) = (&ctx_p.gamma, &ctx_0.gamma);
    let xi_p = |z: usize| (kc_p.mu(z).unwrap_or(0.0) - psi_p) / gam_p.gamma_scalar;
    let n = eta_0.n_codes();

    let (mut r1, mut r2, mut r3) = (0.0, 0.0, 0.0);
    let mut expected_phi = 0.0;
    for (s, sn0) in eta_0.supported_strata() {
        let sn_p = eta_p.stratum(s).ok_or(InfluenceError::MissingStratum(s))?;
        let (cp, c0) = (&ctx_p.caches[&s], &ctx_0.caches[&s]);
        let grid = union_grid(&cp.grid, &c0.grid);
        let j0 = eta_0.j(s);
        let z = s.z;

        // Conditional means under P0 of the P-transforms, and the R1, R2 integrands.
        let (mut e_km_gamma, mut sum_r2) = (0.0, 0.0);
        let (mut e_km_tail, mut sum_r1) = (0.0, 0.0);
        let ck = if s.a == a0 { kc_p.per_z[z].as_ref() } else { None };
        let weight_r1 = if s.a == a0 {
            let (pp, p0) = (eta_p.pi(a0, z), eta_0.pi(a0, z));
            p0 * gam_p.gamma_bar_z[z] / (pp * gam_0.gamma_bar_z[z])
        } else {
            0.0
        };
        for &v in &grid {
            let (hp, h0) = (cp.hazard_at(v), c0.hazard_at(v));
            if hp == h0 {
                continue;
            }
            let (rbar_p, rbar_0) = (sn_p.rbar(v), sn0.rbar(v));
            let s0_left = sn0.s.eval_left(v);
            let dh = s0_left * (hp - h0);
            let nu_ratio = ratio(rbar_0, rbar_p).ok_or(InfluenceError::AtRiskZero { stratum: s, u: v })?;
            let g = cp.gamma_strict(v);
            let gd = ratio(g * dh, sn_p.s.eval(v)).ok_or(InfluenceError::AtRiskZero { stratum: s, u: v })?;
            e_km_gamma += gd * nu_ratio;
            sum_r2 += gd * (1.0 - nu_ratio);
            if let Some(ck) = ck {
                let m = tail_at(v, &cp.grid, &cp.h, &ck.m, kernel, &ck.z);
                e_km_tail += m * dh * nu_ratio;
                sum_r1 += m * dh * (weight_r1 * nu_ratio - 1.0);
            }
        }
        if s.a == a0 {
            r1 += ctx_0.h_tilde(z) * sum_r1;
        }
        r2 += j0 * xi_p(z) * sum_r2;

        // Entry-time terms over the union of G atoms.
        let atoms = union_grid(sn_p.g.jump_times(), sn0.g.jump_times());
        let (mut cross, mut square, mut e_inv_s) = (0.0, 0.0, 0.0);
        for &w in &atoms {
            let (gp, g0) = (sn_p.g.jump_at(w), sn0.g.jump_at(w));
            let (sp, s0) = (sn_p.s.eval_left(w), sn0.s.eval_left(w));
            if g0 != 0.0 {
                e_inv_s += g0 / sp;
            }
            if gp != g0 {
                cross += (gp - g0) * (1.0 / s0 - 1.0 / sp);
            }
            if gp != 0.0 {
                square += gp * (sp - s0).powi(2) / (s0 * sp * sp);
            }
        }
        r3 += j0 * xi_p(z) * (cross - square);

        let phi1 = if s.a == a0 { gam_p.gamma_bar_z[z] / eta_p.pi(a0, z) * e_km_tail } else { 0.0 };
        expected_phi += j0 * (phi1 + xi_p(z) * (e_inv_s - e_km_gamma));
    }

    let gamma_p_az = |s: Stratum| gam_p.gamma_az.get(&s).copied().unwrap_or(0.0);
    let gamma_0_az = |s: Stratum| gam_0.gamma_az.get(&s).copied().unwrap_or(0.0);
    let (mut r4_1, mut r4_2, mut r4_3) = (0.0, 0.0, 0.0);
    for z in 0..n {
        for a in 0..2u8 {
            let s = Stratum::new(a, z);
            let (gp, xi) = (gamma_p_az(s), xi_p(z));
            r4_1 += xi * (gp - gamma_0_az(s)) * eta_0.j(s);
            r4_2 += xi * gp * (eta_p.pi(a, z) - eta_0.pi(a, z)) * eta_0.h()[z];
            r4_3 += xi * eta_p.pi(a, z) * gp * (eta_p.h()[z] - eta_0.h()[z]);
        }
    }
    let r4 = (gam_p.gamma_scalar - gam_0.gamma_scalar) / gam_0.gamma_scalar * (r4_1 + r4_2 + r4_3);
    Ok(RemainderReport {
        r1,
        r2,
        r3,
        r4,
        r4_1,
        r4_2,
        r4_3,
        total: r1 + r2 + r3 + r4,
        direct: psi_p - psi_0 + expected_phi,
    })
}

/// Which Duhamel identity or bound to evaluate.
#[derive(Debug, Clone, Copy)]
pub enum DuhamelCase<'a> {
    /// int phi d(F_P - F_0) = -int L_P (S_0/S_P) d(Lambda_P - Lambda_0).
    Kernel { kernel: &'a Kernel, z: &'a [f64] },
    /// int (S_P - S_0)/S_P^2 dG_P = -int gamma_nat,P (S_0/S_P) d(Lambda_P - Lambda_0).
    Truncation { g: &'a StepFunction },
    /// |int_a^b omega [(L/S)_P dLambda_P - (L/S)_0 dLambda_0]| <= 3 v(omega) sup |(L/S)_P - (L/S)_0|.
    KernelBound { kernel: &'a Kernel, z: &'a [f64], omega: &'a StepFunction, alpha: f64, beta: f64 },
    /// The companion bound for gamma_nat / S with entry laws G_P and G_0.
    TruncationBound { g_p: &'a StepFunction, g_0: &'a StepFunction, omega: &'a StepFunction, alpha: f64, beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DuhamelReport {
    pub lhs: f64,
    pub rhs: f64,
    /// |lhs - rhs| for identities, rhs - lhs (expected >= 0) for bounds.
    pub gap: f64,
}

fn omega_variation(omega: &StepFunction, alpha: f64, beta: f64) -> f64 {
    let mut sup = omega.eval(alpha).abs();
    let mut tv = 0.0;
    for (t, jump) in omega.increments() {
        if t > alpha && t <= beta {
            tv += jump.abs();
            sup = sup.max(omega.eval(t).abs());
        }
    }
    sup.max(tv)
}

/// sup over [alpha, beta] of |f|, using values and left limits at the grid points.
fn sup_on(f: impl Fn(f64) -> f64, f_left: impl Fn(f64) -> f64, grid: &[f64], alpha: f64, beta: f64) -> f64 {
    let mut sup = f(alpha).abs().max(f(beta).abs());
    for &t in grid {
        if t > alpha && t <= beta {
            sup = sup.max(f(t).abs()).max(f_left(t).abs());
        }
    }
    sup
}

/// Evaluates one Duhamel identity or bound on step survival curves.
pub fn duhamel_check(s_p: &StepFunction, s_0: &StepFunction, case: DuhamelCase<'_>) -> DuhamelReport {
    let (gp, hp) = hazard_grid(s_p);
    let (g0, h0) = hazard_grid(s_0);
    let grid = union_grid(&gp, &g0);
    let hz = |g: &[f64], h: &[f64], v: f64| match g.binary_search_by(|x| x.total_cmp(&v)) {
        Ok(j) => h[j],
        Err(_) => 0.0,
    };
    match case {
        DuhamelCase::Kernel { kernel, z } => {
            let lhs = kernel_mean(s_p, kernel, z) - kernel_mean(s_0, kernel, z);
            let mp = tail_on_grid(&gp, &hp, kernel, z);
            let mut rhs = 0.0;
            for &v in &grid {
                let d = hz(&gp, &hp, v) - hz(&g0, &h0, v);
                if d != 0.0 {
                    let l = s_p.eval(v) * tail_at(v, &gp, &hp, &mp, kernel, z);
                    rhs -= ratio(l * s_0.eval_left(v), s_p.eval(v)).unwrap_or(0.0) * d;
                }
            }
            DuhamelReport { lhs, rhs, gap: (lhs - rhs).abs() }
        }
        DuhamelCase::Truncation { g } => {
            let mut lhs = 0.0;
            for (w, mass) in g.increments() {
                let (sp, s0) = (s_p.eval_left(w), s_0.eval_left(w));
                lhs += mass * (sp - s0) / (sp * sp);
            }
            let mut rhs = 0.0;
            for &v in &grid {
                let d = hz(&gp, &hp, v) - hz(&g0, &h0, v);
                if d != 0.0 {
                    let nat: f64 = g.increments().filter(|(w, _)| *w > v).map(|(w, m)| m / s_p.eval_left(w)).sum();
                    rhs -= ratio(nat * s_0.eval_left(v), s_p.eval(v)).unwrap_or(0.0) * d;
                }
            }
            DuhamelReport { lhs, rhs, gap: (lhs - rhs).abs() }
        }
        DuhamelCase::KernelBound { kernel, z, omega, alpha, beta } => {
            let mp = tail_on_grid(&gp, &hp, kernel, z);
            let m0 = tail_on_grid(&g0, &h0, kernel, z);
            let tp = |v: f64| tail_at(v, &gp, &hp, &mp, kernel, z);
            let t0 = |v: f64| tail_at(v, &g0, &h0, &m0, kernel, z);
            let mut lhs = 0.0;
            for &v in &grid {
                if v > alpha && v <= beta {
                    lhs += omega.eval(v) * (tp(v) * hz(&gp, &hp, v) - t0(v) * hz(&g0, &h0, v));
                }
            }
            let left = |v: f64| {
                let e = v - v.abs().max(1.0) * 1e-12;
                tp(e) - t0(e)
            };
            let mut pts = grid.clone();
            pts.extend(kernel.breakpoints());
            let sup = sup_on(|v| tp(v) - t0(v), left, &pts, alpha, beta);
            let rhs = 3.0 * omega_variation(omega, alpha, beta) * sup;
            DuhamelReport { lhs: lhs.abs(), rhs, gap: rhs - lhs.abs() }
        }
        DuhamelCase::TruncationBound { g_p, g_0, omega, alpha, beta } => {
            let nat = |s: &StepFunction, g: &StepFunction, v: f64| -> f64 {
                g.increments().filter(|(w, _)| *w > v).map(|(w, m)| m / s.eval_left(w)).sum()
            };
            let mut lhs = 0.0;
            for &v in &grid {
                if v > alpha && v <= beta {
                    let a = ratio(nat(s_p, g_p, v) * hz(&gp, &hp, v), s_p.eval(v)).unwrap_or(0.0);
                    let b = ratio(nat(s_0, g_0, v) * hz(&g0, &h0, v), s_0.eval(v)).unwrap_or(0.0);
                    lhs += omega.eval(v) * (a - b);
                }
            }
            let mut pts = union_grid(&grid, &union_grid(g_p.jump_times(), g_0.jump_times()));
            pts.retain(|t| t.is_finite());
            let x = |v: f64| nat(s_p, g_p, v) / s_p.eval(v) - nat(s_0, g_0, v) / s_0.eval(v);
            let x_left = |v: f64| {
                let gl = |s: &StepFunction, g: &StepFunction| -> f64 {
                    g.increments().filter(|(w, _)| *w >= v).map(|(w, m)| m / s.eval_left(w)).sum()
                };
                gl(s_p, g_p) / s_p.eval_left(v) - gl(s_0, g_0) / s_0.eval_left(v)
            };
            let inv = |v: f64| 1.0 / s_p.eval(v) - 1.0 / s_0.eval(v);
            let inv_left = |v: f64| 1.0 / s_p.eval_left(v) - 1.0 / s_0.eval_left(v);
            let dg = |v: f64| g_p.eval(v) - g_0.eval(v);
            let dg_left = |v: f64| g_p.eval_left(v) - g_0.eval_left(v);
            let vw = omega_variation(omega, alpha, beta);
            let (spb, s0b) = (s_p.eval(beta), s_0.eval(beta));
            let rhs = 3.0 * vw * sup_on(x, x_left, &pts, alpha, beta)
                + 3.0 * vw / s0b.powi(3) * sup_on(dg, dg_left, &pts, alpha, beta)
                + 2.0 * vw / (spb * s0b) * sup_on(inv, inv_left, &pts, alpha, beta);
            DuhamelReport { lhs: lhs.abs(), rhs, gap: rhs - lhs.abs() }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CovariateAlphabet;
    use crate::nuisance::CensoringModel;

    fn single(sn: StratumNuisance) -> NuisanceSet {
        let mut strata = BTreeMap::new();
        strata.insert(Stratum::new(1, 0), sn);
        NuisanceSet::from_parts(CovariateAlphabet::new(vec![]), vec![1.0], vec![1.0], strata).unwrap()
    }

    fn point_mass_at_zero() -> StepFunction {
        StepFunction::new(0.0, vec![0.0], vec![1.0]).unwrap()
    }

    #[test]
    fn survival_kernel_tail() {
        let s = StepFunction::new(1.0, vec![1.0, 2.0, 3.0], vec![0.8, 0.5, 0.1]).unwrap();
        let k = Kernel::survival(2.5);
        for y in [0.0, 1.0, 2.0, 2.5] {
            assert_eq!(compute_l(&s, &k, y, &[]), s.eval(2.5));
        }
        assert_eq!(compute_l(&s, &k, 2.6, &[]), 0.0);
        assert_eq!(compute_l(&s, &Kernel::constant(4.0), 0.3, &[]), 0.0);
        // Off the jump grid the discrete tail agrees with the closed one.
        assert!((compute_l_discrete(&s, &k, 1.5, &[]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kernel_mean_matches_recursion() {
        let s = StepFunction::new(1.0, vec![0.5, 1.0, 2.0, 3.0], vec![0.9, 0.8, 0.5, 0.1]).unwrap();
        let k = Kernel::piecewise_linear(&[(0.0, 1.0), (1.5, 3.0), (2.5, -1.0)]).unwrap();
        let (grid, h) = hazard_grid(&s);
        let m = tail_on_grid(&grid, &h, &k, &[]);
        let from_tail = k.eval(0.0, &[]) + tail_at(0.0, &grid, &h, &m, &k, &[]);
        assert!((from_tail - kernel_mean(&s, &k, &[])).abs() < 1e-14);
    }

    #[test]
    fn gamma_without_truncation_is_one() {
        let s = StepFunction::new(1.0, vec![1.0, 2.0], vec![0.5, 0.0]).unwrap();
        let eta = single(StratumNuisance::new(s, point_mass_at_zero(), CensoringModel::none()));
        let g = compute_gamma(&eta).unwrap();
        let st = Stratum::new(1, 0);
        assert_eq!(g.gamma_az[&st], 1.0);
        assert_eq!(g.gamma_bar_z, vec![1.0]);
        assert_eq!(g.natural(st, 0.0), 1.0);
        assert_eq!(g.natural(st, 0.1), 0.0);
    }

    #[test]
    fn gamma_two_atoms() {
        let s = StepFunction::new(1.0, vec![1.0, 3.0], vec![0.8, 0.2]).unwrap();
        let g = StepFunction::new(0.0, vec![0.5, 2.0], vec![0.5, 1.0]).unwrap();
        let eta = single(StratumNuisance::new(s.clone(), g, CensoringModel::none()));
        let gb = compute_gamma(&eta).unwrap();
        let st = Stratum::new(1, 0);
        let expected = 0.5 / s.eval(0.5) + 0.5 / s.eval(2.0);
        assert!((gb.gamma_az[&st] - expected).abs() < 1e-15);
        assert!(gb.gamma_az[&st] >= 1.0);
        assert!((gb.natural(st, 0.0) - expected).abs() < 1e-15);
        assert!((gb.natural(st, 1.0) - 0.5 / 0.8).abs() < 1e-15);
        let integral: f64 = eta.supported_strata().map(|(s, _)| gb.gamma_bar_az[&s] * eta.j(s)).sum();
        assert!((integral - 1.0).abs() < 1e-12);
    }

    #[test]
    fn phi_km_hand_computation() {
        // Three events, no truncation or censoring: R(u) = S(u-), dLambda = 1/3, 1/2, 1.
        let s = StepFunction::new(1.0, vec![1.0, 2.0, 3.0], vec![2.0 / 3.0, 1.0 / 3.0, 0.0]).unwrap();
        let eta = single(StratumNuisance::new(s, point_mass_at_zero(), CensoringModel::none()));
        let r = ObservedRecord::new(2.0, 1, 0.0, 1, vec![]);
        let m = |u: f64| u * u;
        let hand = -4.0 / (2.0 / 3.0) + 1.0 / 3.0 + 4.0 * 0.5 / (2.0 / 3.0);
        let v = phi_km(m, &eta, &r, 0).unwrap();
        assert!((v - hand).abs() < 1e-12, "{v} vs {hand}");
        assert_eq!(phi_km(|_| 0.0, &eta, &r, 0).unwrap(), 0.0);
    }

    #[test]
    fn specialised_transforms_match_generic() {
        let s = StepFunction::new(1.0, vec![1.0, 2.0, 3.5, 4.0], vec![0.9, 0.6, 0.3, 0.1]).unwrap();
        let g = StepFunction::new(0.0, vec![0.0, 0.5, 1.5], vec![0.5, 0.8, 1.0]).unwrap();
        let q = StepFunction::new(1.0, vec![1.0, 3.0], vec![0.7, 0.4]).unwrap();
        let sn = StratumNuisance::new(s, g, CensoringModel::Elapsed(q));
        let eta = single(sn.clone());
        let ctx = InfluenceContext::from_set(&eta).unwrap();
        let k = Kernel::piecewise_linear(&[(0.0, 0.0), (2.5, 1.0), (3.8, 0.2)]).unwrap();
        let kc = ctx.kernel_cache(&k, 1).unwrap();
        let st = Stratum::new(1, 0);
        let ml = kernel_integrand(&sn, &k, &[]);
        let mg = truncation_integrand(&sn, st).unwrap();
        for (y, d, w) in [(1.0, 1, 0.0), (2.2, 1, 0.5), (3.5, 0, 1.5), (4.0, 1, 0.0), (2.0, 1, 2.0), (1.2, 0, 0.5)] {
            let r = ObservedRecord::new(y, d, w, 1, vec![]);
            let geo = ctx.geometry(&r, 0).unwrap();
            let tail_generic = phi_km(&ml, &eta, &r, 0).unwrap();
            let gam_generic = phi_km(&mg, &eta, &r, 0).unwrap();
            let parts = ctx.parts(&kc, &geo).unwrap();
            assert!((parts.phi1 - tail_generic).abs() < 1e-12, "tail at {y}");
            let d_generic = 1.0 / sn.s.eval_left(w) - gam_generic;
            assert!((geo.d - d_generic).abs() < 1e-12, "gamma at {y}");
        }
    }

    #[test]
    fn duhamel_identities_are_exact_for_steps() {
        let sp = StepFunction::new(1.0, vec![0.5, 1.0, 2.0, 3.0], vec![0.9, 0.7, 0.4, 0.2]).unwrap();
        let s0 = StepFunction::new(1.0, vec![0.7, 1.0, 2.5, 3.0], vec![0.95, 0.6, 0.45, 0.1]).unwrap();
        let k = Kernel::piecewise_linear(&[(0.0, 0.0), (1.2, 1.0), (2.8, 0.3)]).unwrap();
        let r = duhamel_check(&sp, &s0, DuhamelCase::Kernel { kernel: &k, z: &[] });
        assert!(r.gap < 1e-14, "{r:?}");
        let g = StepFunction::new(0.0, vec![0.0, 0.8, 2.2], vec![0.3, 0.7, 1.0]).unwrap();
        let r = duhamel_check(&sp, &s0, DuhamelCase::Truncation { g: &g });
        assert!(r.gap < 1e-14, "{r:?}");
        let same = duhamel_check(&sp, &sp, DuhamelCase::Kernel { kernel: &k, z: &[] });
        assert_eq!(same.gap, 0.0);
    }
}
