//! Survival-integral kernels phi(t, z).
//!
//! A kernel is stored as its value at t = 0 plus a signed measure in t made of
//! point masses at fixed times and linear ramps on fixed intervals, each with a
//! covariate-dependent size. Evaluation is right-continuous in t.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::data::CovariateAlphabet;
use crate::step::StepFunction;

pub type CovariateFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("prediction b(z) = {value} outside [0, 1] at z = {z:?}")]
    PredictionOutOfRange { value: f64, z: Vec<f64> },
    #[error("invalid kernel parameter: {0}")]
    InvalidParameter(String),
}

fn constant_fn(c: f64) -> CovariateFn {
    Arc::new(move |_| c)
}

#[derive(Clone)]
struct Atom {
    at: f64,
    size: CovariateFn,
}

#[derive(Clone)]
struct Ramp {
    start: f64,
    end: f64,
    increment: CovariateFn,
}

impl Ramp {
    fn fraction(&self, t: f64) -> f64 {
        ((t - self.start) / (self.end - self.start)).clamp(0.0, 1.0)
    }
}

#[derive(Clone)]
pub struct Kernel {
    id: String,
    base: CovariateFn,
    atoms: Vec<Atom>,
    ramps: Vec<Ramp>,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel")
            .field("id", &self.id)
            .field("atoms", &self.atoms.iter().map(|a| a.at).collect::<Vec<_>>())
            .field("ramps", &self.ramps.iter().map(|r| (r.start, r.end)).collect::<Vec<_>>())
            .finish()
    }
}

impl Kernel {
    /// phi(t, z) = c.
    pub fn constant(c: f64) -> Self {
        Self { id: format!("constant(c={c})"), base: constant_fn(c), atoms: Vec::new(), ramps: Vec::new() }
    }

    /// phi(t, z) = I(t >= tau).
    pub fn survival(tau: f64) -> Self {
        Self {
            id: format!("survival(tau={tau})"),
            base: constant_fn(0.0),
            atoms: vec![Atom { at: tau, size: constant_fn(1.0) }],
            ramps: Vec::new(),
        }
    }

    /// phi(t, z) = I(t <= m), the distribution-function kernel.
    pub fn cdf(m: f64) -> Self {
        Self {
            id: format!("cdf(m={m})"),
            base: constant_fn(1.0),
            atoms: vec![Atom { at: m.next_up(), size: constant_fn(-1.0) }],
            ramps: Vec::new(),
        }
    }

    /// phi(t, z) = {I(t >= tau) - b(z)}^2, with b checked on every alphabet point.
    pub fn brier(tau: f64, b: CovariateFn, alphabet: &CovariateAlphabet) -> Result<Self, KernelError> {
        for code in 0..alphabet.n_codes() {
            let z = alphabet.decode(code);
            let value = b(&z);
            if !(0.0..=1.0).contains(&value) {
                return Err(KernelError::PredictionOutOfRange { value, z });
            }
        }
        let b2 = b.clone();
        Ok(Self {
            id: format!("brier(tau={tau})"),
            base: Arc::new(move |z| b(z) * b(z)),
            atoms: vec![Atom { at: tau, size: Arc::new(move |z| 1.0 - 2.0 * b2(z)) }],
            ramps: Vec::new(),
        })
    }

    /// Brier kernel with a covariate-free prediction.
    pub fn brier_constant(tau: f64, b: f64) -> Result<Self, KernelError> {
        if !(0.0..=1.0).contains(&b) {
            return Err(KernelError::PredictionOutOfRange { value: b, z: Vec::new() });
        }
        let mut k = Self::brier(tau, constant_fn(b), &CovariateAlphabet::new(Vec::new()))?;
        k.id = format!("brier(tau={tau},b={b})");
        Ok(k)
    }

    /// Continuous piecewise-linear kernel through `(t, value)` knots, constant outside them.
    pub fn piecewise_linear(knots: &[(f64, f64)]) -> Result<Self, KernelError> {
        if knots.is_empty() || knots.windows(2).any(|w| w[1].0 <= w[0].0) || knots[0].0 < 0.0 {
            return Err(KernelError::InvalidParameter("knots must be non-negative and strictly increasing".into()));
        }
        let ramps = knots
            .windows(2)
            .map(|w| Ramp { start: w[0].0, end: w[1].0, increment: constant_fn(w[1].1 - w[0].1) })
            .collect();
        Ok(Self {
            id: format!("piecewise_linear(knots={})", knots.len()),
            base: constant_fn(knots[0].1),
            atoms: Vec::new(),
            ramps,
        })
    }

    /// phi(t, z) = min(t, tau), whose integral is the restricted mean.
    pub fn restricted_mean(tau: f64) -> Result<Self, KernelError> {
        if tau <= 0.0 {
            return Err(KernelError::InvalidParameter("tau must be positive".into()));
        }
        let mut k = Self::piecewise_linear(&[(0.0, 0.0), (tau, tau)])?;
        k.id = format!("rmst(tau={tau})");
        Ok(k)
    }

    /// c1 * k1 + c2 * k2.
    pub fn linear_combination(c1: f64, k1: &Kernel, c2: f64, k2: &Kernel) -> Kernel {
        let scale = |f: &CovariateFn, c: f64| -> CovariateFn {
            let f = f.clone();
            Arc::new(move |z| c * f(z))
        };
        let (b1, b2) = (k1.base.clone(), k2.base.clone());
        let mut atoms: Vec<Atom> = k1.atoms.iter().map(|a| Atom { at: a.at, size: scale(&a.size, c1) }).collect();
        atoms.extend(k2.atoms.iter().map(|a| Atom { at: a.at, size: scale(&a.size, c2) }));
        let mut ramps: Vec<Ramp> =
            k1.ramps.iter().map(|r| Ramp { start: r.start, end: r.end, increment: scale(&r.increment, c1) }).collect();
        ramps.extend(k2.ramps.iter().map(|r| Ramp { start: r.start, end: r.end, increment: scale(&r.increment, c2) }));
        Kernel {
            id: format!("{c1}*{}+{c2}*{}", k1.id, k2.id),
            base: Arc::new(move |z| c1 * b1(z) + c2 * b2(z)),
            atoms,
            ramps,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Right-continuous value phi(t, z).
    pub fn eval(&self, t: f64, z: &[f64]) -> f64 {
        let mut v = (self.base)(z);
        for a in &self.atoms {
            if a.at <= t {
                v += (a.size)(z);
            }
        }
        for r in &self.ramps {
            v += (r.increment)(z) * r.fraction(t);
        }
        v
    }

    /// Left limit phi(t-, z).
    pub fn eval_left(&self, t: f64, z: &[f64]) -> f64 {
        let mut v = (self.base)(z);
        for a in &self.atoms {
            if a.at < t {
                v += (a.size)(z);
            }
        }
        for r in &self.ramps {
            v += (r.increment)(z) * r.fraction(t);
        }
        v
    }

    /// Limit of phi(t, z) as t grows.
    pub fn value_at_infinity(&self, z: &[f64]) -> f64 {
        (self.base)(z)
            + self.atoms.iter().map(|a| (a.size)(z)).sum::<f64>()
            + self.ramps.iter().map(|r| (r.increment)(z)).sum::<f64>()
    }

    /// Time from which t -> phi(t, z) is constant for every z.
    pub fn tail_from(&self) -> f64 {
        self.atoms.iter().map(|a| a.at).chain(self.ramps.iter().map(|r| r.end)).fold(0.0, f64::max)
    }

    /// Sorted distinct times where the t-measure has an atom or a ramp changes slope.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b: Vec<f64> =
            self.atoms.iter().map(|a| a.at).chain(self.ramps.iter().flat_map(|r| [r.start, r.end])).collect();
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    }

    /// Point masses (time, size) of the t-measure at covariate value z.
    pub fn atoms(&self, z: &[f64]) -> Vec<(f64, f64)> {
        self.atoms.iter().map(|a| (a.at, (a.size)(z))).collect()
    }

    /// Absolutely continuous part as (start, end, total increment) at covariate value z.
    pub fn ramps(&self, z: &[f64]) -> Vec<(f64, f64, f64)> {
        self.ramps.iter().map(|r| (r.start, r.end, (r.increment)(z))).collect()
    }

    /// Total variation of t -> phi(t, z).
    pub fn variation(&self, z: &[f64]) -> f64 {
        self.atoms.iter().map(|a| (a.size)(z).abs()).sum::<f64>()
            + self.ramps.iter().map(|r| (r.increment)(z).abs()).sum::<f64>()
    }

    /// Largest total variation over the alphabet.
    pub fn variation_bound(&self, alphabet: &CovariateAlphabet) -> f64 {
        (0..alphabet.n_codes()).map(|c| self.variation(&alphabet.decode(c))).fold(0.0, f64::max)
    }

    pub fn is_constant_in_t(&self) -> bool {
        self.atoms.is_empty() && self.ramps.is_empty()
    }

    /// L(y) = int_{[y, inf)} S(u) phi(du, z), closed at y; exact for a step survival curve.
    pub fn survival_weighted_tail(&self, s: &StepFunction, y: f64, z: &[f64]) -> f64 {
        let mut total = 0.0;
        for a in &self.atoms {
            if a.at >= y {
                total += (a.size)(z) * s.eval(a.at);
            }
        }
        for r in &self.ramps {
            let lo = r.start.max(y);
            if lo >= r.end {
                continue;
            }
            let slope = (r.increment)(z) / (r.end - r.start);
            let mut left = lo;
            let inner = s.jump_times().iter().copied().filter(|&t| t > lo && t < r.end);
            for t in inner.chain(std::iter::once(r.end)) {
                total += slope * s.eval(left) * (t - left);
                left = t;
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survival_kernel_is_closed_indicator() {
        let k = Kernel::survival(2.0);
        assert_eq!(k.eval(2.0, &[]), 1.0);
        assert_eq!(k.eval(1.999, &[]), 0.0);
        assert_eq!(k.eval_left(2.0, &[]), 0.0);
        assert_eq!(k.tail_from(), 2.0);
    }

    #[test]
    fn cdf_kernel_is_left_closed() {
        let k = Kernel::cdf(3.0);
        assert_eq!(k.eval(3.0, &[]), 1.0);
        assert_eq!(k.eval(3.0000001, &[]), 0.0);
    }

    #[test]
    fn brier_identities() {
        let alpha = CovariateAlphabet::new(vec![vec![-1.0, 1.0]]);
        let zero = Kernel::brier(2.0, constant_fn(0.0), &alpha).unwrap();
        let surv = Kernel::survival(2.0);
        let one = Kernel::brier(2.0, constant_fn(1.0), &alpha).unwrap();
        let half = Kernel::brier(2.0, constant_fn(0.5), &alpha).unwrap();
        for t in [0.0, 1.0, 2.0, 3.0] {
            assert_eq!(zero.eval(t, &[1.0]), surv.eval(t, &[1.0]));
            assert_eq!(one.eval(t, &[1.0]), 1.0 - surv.eval(t, &[1.0]));
            assert_eq!(half.eval(t, &[1.0]), 0.25);
        }
        assert_eq!(half.atoms(&[1.0]), vec![(2.0, 0.0)]);
        let bad = Kernel::brier(2.0, Arc::new(|z: &[f64]| z[0]), &alpha);
        assert!(matches!(bad, Err(KernelError::PredictionOutOfRange { .. })));
    }

    #[test]
    fn eval_matches_measure_on_fine_grid() {
        let alpha = CovariateAlphabet::new(vec![vec![-1.0, 1.0]]);
        let kernels = vec![
            Kernel::survival(1.3),
            Kernel::brier(2.0, Arc::new(|z: &[f64]| 0.5 + 0.3 * z[0]), &alpha).unwrap(),
            Kernel::piecewise_linear(&[(0.5, 1.0), (1.0, 3.0), (2.0, 2.0), (4.0, 0.0), (5.0, 1.0)]).unwrap(),
            Kernel::linear_combination(2.0, &Kernel::survival(1.0), -0.5, &Kernel::restricted_mean(3.0).unwrap()),
        ];
        for k in &kernels {
            for z in [[-1.0], [1.0]] {
                let base = k.eval(0.0, &z) - k.atoms(&z).iter().filter(|a| a.0 <= 0.0).map(|a| a.1).sum::<f64>();
                for i in 0..1000 {
                    let t = i as f64 * 6.0 / 999.0;
                    let mut v = base;
                    for (at, m) in k.atoms(&z) {
                        if at <= t {
                            v += m;
                        }
                    }
                    for (s, e, inc) in k.ramps(&z) {
                        v += inc * ((t - s) / (e - s)).clamp(0.0, 1.0);
                    }
                    assert!((v - k.eval(t, &z)).abs() < 1e-10);
                }
                assert!((k.value_at_infinity(&z) - k.eval(k.tail_from(), &z)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn survival_weighted_tail_for_survival_kernel() {
        let s = StepFunction::new(1.0, vec![1.0, 2.0, 3.0], vec![0.8, 0.5, 0.1]).unwrap();
        let k = Kernel::survival(2.5);
        assert_eq!(k.survival_weighted_tail(&s, 1.0, &[]), 0.5);
        assert_eq!(k.survival_weighted_tail(&s, 2.5, &[]), 0.5);
        assert_eq!(k.survival_weighted_tail(&s, 2.6, &[]), 0.0);
        assert_eq!(Kernel::constant(3.0).survival_weighted_tail(&s, 0.0, &[]), 0.0);
    }

    #[test]
    fn survival_weighted_tail_matches_riemann_sum() {
        let s = StepFunction::new(1.0, vec![0.7, 1.4, 2.2, 3.1, 4.5], vec![0.9, 0.75, 0.5, 0.3, 0.05]).unwrap();
        let k = Kernel::piecewise_linear(&[(0.0, 0.0), (1.0, 2.0), (2.0, 1.5), (3.0, 4.0), (5.0, 4.5)]).unwrap();
        for y in [0.0, 0.5, 1.2, 2.9, 4.9] {
            let exact = k.survival_weighted_tail(&s, y, &[]);
            let steps = ((5.0 - y) * 1e4).round() as usize;
            let dt = (5.0 - y) / steps as f64;
            let mut brute = 0.0;
            for i in 0..steps {
                let u = y + (i as f64 + 0.5) * dt;
                brute += s.eval(u) * (k.eval(u + 0.5 * dt, &[]) - k.eval(u - 0.5 * dt, &[]));
            }
            assert!((exact - brute).abs() <= 1e-8 * exact.abs().max(1.0), "y={y}: {exact} vs {brute}");
        }
    }
}
