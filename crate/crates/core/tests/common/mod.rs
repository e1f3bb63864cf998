//! Shared fixtures: finite observed laws enumerated exactly, and an independent
//! map from an observed law to its nuisances and target value.
#![allow(dead_code)]

use ltrc::data::{CovariateAlphabet, Stratum};
use ltrc::influence::InfluenceContext;
use ltrc::nuisance::{CensoringModel, StratumNuisance};
use ltrc::{Kernel, NuisanceSet, ObservedRecord, StepFunction};
use std::collections::BTreeMap;

/// Full-data law with discrete T, W and censoring delay D = C - W, and a binary Z.
#[derive(Debug, Clone)]
pub struct DiscreteModel {
    /// P(Z = z) in the full population, z in {0, 1}.
    pub z_prob: [f64; 2],
    /// P(A = 1 | z), or None when every unit has a = 1.
    pub p1: Option<[f64; 2]>,
    pub t_atoms: Vec<f64>,
    /// t_prob[a][z][j]; a = 0 is ignored without exposure.
    pub t_prob: [[Vec<f64>; 2]; 2],
    pub w_atoms: Vec<f64>,
    pub w_prob: [[Vec<f64>; 2]; 2],
    pub d_atoms: Vec<f64>,
    pub d_prob: Vec<f64>,
}

/// Observed law as weighted records with distinct values.
pub type Law = Vec<(ObservedRecord, f64)>;

pub fn alphabet() -> CovariateAlphabet {
    CovariateAlphabet::new(vec![vec![0.0, 1.0]])
}

fn simplex(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

impl DiscreteModel {
    /// Four event atoms, three entry atoms and three delay atoms. `u` supplies
    /// numbers in (0, 1) that perturb the masses.
    pub fn random(exposure: bool, u: &mut impl FnMut() -> f64) -> Self {
        let mut draw = |k: usize| simplex(&(0..k).map(|_| 0.2 + u()).collect::<Vec<_>>());
        let t_prob = [[draw(4), draw(4)], [draw(4), draw(4)]];
        let w_prob = [[draw(3), draw(3)], [draw(3), draw(3)]];
        let d_prob = draw(3);
        let zp = draw(2);
        let p1 = exposure.then(|| [0.25 + 0.5 * u(), 0.25 + 0.5 * u()]);
        Self {
            z_prob: [zp[0], zp[1]],
            p1,
            t_atoms: vec![1.0, 2.0, 3.0, 4.0],
            t_prob,
            w_atoms: vec![0.0, 1.0, 2.0],
            w_prob,
            d_atoms: vec![1.0, 2.5, 6.0],
            d_prob,
        }
    }

    pub fn arms(&self) -> Vec<u8> {
        if self.p1.is_some() {
            vec![0, 1]
        } else {
            vec![1]
        }
    }

    fn arm_prob(&self, a: u8, z: usize) -> f64 {
        match self.p1 {
            Some(p) if a == 1 => p[z],
            Some(p) => 1.0 - p[z],
            None => 1.0,
        }
    }

    /// The retained, coarsened law of O = (Y, delta, W, A, Z).
    pub fn observed_law(&self) -> Law {
        let mut cells: BTreeMap<(u8, usize, u64, u8, u64), f64> = BTreeMap::new();
        for a in self.arms() {
            for z in 0..2 {
                let base = self.z_prob[z] * self.arm_prob(a, z);
                for (ti, &t) in self.t_atoms.iter().enumerate() {
                    for (wi, &w) in self.w_atoms.iter().enumerate() {
                        if t < w {
                            continue;
                        }
                        for (di, &d) in self.d_atoms.iter().enumerate() {
                            let p = base
                                * self.t_prob[a as usize][z][ti]
                                * self.w_prob[a as usize][z][wi]
                                * self.d_prob[di];
                            let c = w + d;
                            let (y, delta) = if t <= c { (t, 1) } else { (c, 0) };
                            *cells.entry((a, z, y.to_bits(), delta, w.to_bits())).or_default() += p;
                        }
                    }
                }
            }
        }
        let total: f64 = cells.values().sum();
        cells
            .into_iter()
            .map(|((a, z, y, delta, w), p)| {
                (ObservedRecord::new(f64::from_bits(y), delta, f64::from_bits(w), a, vec![z as f64]), p / total)
            })
            .collect()
    }

    /// Survival of the delay D, which is the censoring curve in elapsed time.
    pub fn delay_survival(&self) -> StepFunction {
        let cdf = StepFunction::from_atoms(
            &self.d_atoms.iter().copied().zip(self.d_prob.iter().copied()).collect::<Vec<_>>(),
            true,
        )
        .unwrap();
        cdf.map(|v| 1.0 - v)
    }

    /// Nuisances of the observed law, with the true censoring curve.
    pub fn nuisances(&self) -> NuisanceSet {
        law_nuisances(&self.observed_law(), &CensoringModel::Elapsed(self.delay_survival()))
    }
}

/// Applies the tilt P(o) (1 + eps h(o)) and renormalises.
pub fn tilt(law: &Law, h: &[f64], eps: f64) -> Law {
    let total: f64 = law.iter().zip(h).map(|((_, p), hv)| p * (1.0 + eps * hv)).sum();
    law.iter().zip(h).map(|((r, p), hv)| (r.clone(), p * (1.0 + eps * hv) / total)).collect()
}

/// Centres a direction so that it has mean zero under the law.
pub fn centre(law: &Law, g: &[f64]) -> Vec<f64> {
    let mean: f64 = law.iter().zip(g).map(|((_, p), v)| p * v).sum();
    g.iter().map(|v| v - mean).collect()
}

/// S by the product-limit of the law's hazards, G as the law's entry distribution,
/// H and pi as the law's covariate and exposure marginals.
pub fn law_nuisances(law: &Law, q: &CensoringModel) -> NuisanceSet {
    let zc = |r: &ObservedRecord| r.z[0] as usize;
    let mut h = vec![0.0; 2];
    let mut joint = [[0.0; 2]; 2];
    for (r, p) in law {
        h[zc(r)] += p;
        joint[r.a as usize][zc(r)] += p;
    }
    let exposure = law.iter().any(|(r, _)| r.a == 0);
    let p1: Vec<f64> = (0..2).map(|z| if exposure { joint[1][z] / h[z] } else { 1.0 }).collect();
    let mut strata = BTreeMap::new();
    for a in 0..2u8 {
        for z in 0..2 {
            let rows: Vec<&(ObservedRecord, f64)> = law.iter().filter(|(r, _)| r.a == a && zc(r) == z).collect();
            if rows.is_empty() {
                continue;
            }
            let mut times: Vec<f64> = rows.iter().filter(|(r, _)| r.delta == 1).map(|(r, _)| r.y).collect();
            times.sort_by(f64::total_cmp);
            times.dedup();
            let hazards: Vec<f64> = times
                .iter()
                .map(|&u| {
                    let events: f64 = rows.iter().filter(|(r, _)| r.delta == 1 && r.y == u).map(|(_, p)| p).sum();
                    let risk: f64 = rows.iter().filter(|(r, _)| r.w <= u && u <= r.y).map(|(_, p)| p).sum();
                    events / risk
                })
                .collect();
            let s = StepFunction::from_hazards(&times, &hazards).unwrap();
            let g = StepFunction::from_atoms(&rows.iter().map(|(r, p)| (r.w, *p)).collect::<Vec<_>>(), true).unwrap();
            let mut sn = StratumNuisance::new(s, g, q.clone());
            sn.n = rows.len();
            strata.insert(Stratum::new(a, z), sn);
        }
    }
    NuisanceSet::from_parts(alphabet(), h, p1, strata).unwrap()
}

/// Target value written out directly: the covariate law of the full population is
/// proportional to sum_a J(a, z) gamma(a, z) with gamma = int G(dw) / S(w-).
pub fn target(eta: &NuisanceSet, kernel: &Kernel, a0: u8) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for z in 0..2 {
        let zv = [z as f64];
        let mut weight = 0.0;
        for a in 0..2u8 {
            if let Some(sn) = eta.stratum(Stratum::new(a, z)) {
                let gamma: f64 = sn.g.increments().map(|(w, m)| m / sn.s.eval_left(w)).sum();
                weight += eta.h()[z] * eta.pi(a, z) * gamma;
            }
        }
        let Some(sn) = eta.stratum(Stratum::new(a0, z)) else { continue };
        let mut mu = 0.0;
        let mut prev = 1.0;
        for (&t, &v) in sn.s.jump_times().iter().zip(sn.s.values()) {
            mu += kernel.eval(t, &zv) * (prev - v);
            prev = v;
        }
        mu += kernel.value_at_infinity(&zv) * prev;
        num += weight * mu;
        den += weight;
    }
    num / den
}

/// phi evaluated at every support point of the law.
pub fn influence_on_law(eta: &NuisanceSet, law: &Law, kernel: &Kernel, a0: u8, psi: f64) -> Vec<f64> {
    let ctx = InfluenceContext::from_set(eta).unwrap();
    let kc = ctx.kernel_cache(kernel, a0).unwrap();
    law.iter()
        .map(|(r, _)| {
            let geo = ctx.geometry(r, r.z[0] as usize).unwrap();
            ctx.parts(&kc, &geo).unwrap().phi(psi)
        })
        .collect()
}

pub fn expectation(law: &Law, f: &[f64]) -> f64 {
    law.iter().zip(f).map(|((_, p), v)| p * v).sum()
}
