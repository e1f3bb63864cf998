//! Right-continuous piecewise-constant functions on a jump grid.
//!
//! `StepFunction` carries every fitted curve in the crate: survival curves,
//! truncation CDFs, and censoring survival curves. Evaluation is
//! right-continuous with left limits available through [`StepFunction::eval_left`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StepError {
    #[error("jump times and values differ in length ({times} vs {values})")]
    LengthMismatch { times: usize, values: usize },
    #[error("jump times must be finite and strictly increasing (index {index})")]
    NotIncreasing { index: usize },
    #[error("step function values must be finite")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    jump_times: Vec<f64>,
    values: Vec<f64>,
    initial_value: f64,
}

impl StepFunction {
    pub fn new(initial_value: f64, jump_times: Vec<f64>, values: Vec<f64>) -> Result<Self, StepError> {
        if jump_times.len() != values.len() {
            return Err(StepError::LengthMismatch { times: jump_times.len(), values: values.len() });
        }
        if !initial_value.is_finite() || values.iter().any(|v| !v.is_finite()) {
            return Err(StepError::NonFinite);
        }
        for (i, t) in jump_times.iter().enumerate() {
            if !t.is_finite() || (i > 0 && *t <= jump_times[i - 1]) {
                return Err(StepError::NotIncreasing { index: i });
            }
        }
        Ok(Self { jump_times, values, initial_value })
    }

    pub fn constant(value: f64) -> Self {
        Self { jump_times: Vec::new(), values: Vec::new(), initial_value: value }
    }

    /// Survival curve from discrete hazards at the given times: S(t) = prod_{u <= t} (1 - h(u)).
    pub fn from_hazards(times: &[f64], hazards: &[f64]) -> Result<Self, StepError> {
        let mut s = 1.0;
        let values = hazards
            .iter()
            .map(|h| {
                s *= 1.0 - h;
                s
            })
            .collect();
        Self::new(1.0, times.to_vec(), values)
    }

    /// CDF of a discrete law with the given atoms and masses (masses need not be normalized
    /// if `normalize` is set).
    pub fn from_atoms(atoms: &[(f64, f64)], normalize: bool) -> Result<Self, StepError> {
        let mut pts: Vec<(f64, f64)> = atoms.iter().copied().filter(|(_, m)| *m != 0.0).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = if normalize { pts.iter().map(|p| p.1).sum() } else { 1.0 };
        let mut times: Vec<f64> = Vec::with_capacity(pts.len());
        let mut values: Vec<f64> = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        for (t, m) in pts {
            acc += m / total;
            if times.last() == Some(&t) {
                *values.last_mut().unwrap() = acc;
            } else {
                times.push(t);
                values.push(acc);
            }
        }
        if normalize {
            // Rounding in the running sum must not push the CDF above 1.
            values.iter_mut().for_each(|v| *v = v.min(1.0));
            if let Some(last) = values.last_mut() {
                *last = 1.0;
            }
        }
        Self::new(0.0, times, values)
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn initial_value(&self) -> f64 {
        self.initial_value
    }

    pub fn len(&self) -> usize {
        self.jump_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jump_times.is_empty()
    }

    /// Number of jump times `<= t`.
    fn count_le(&self, t: f64) -> usize {
        self.jump_times.partition_point(|&u| u <= t)
    }

    /// Number of jump times `< t`.
    fn count_lt(&self, t: f64) -> usize {
        self.jump_times.partition_point(|&u| u < t)
    }

    /// Right-continuous evaluation f(t).
    pub fn eval(&self, t: f64) -> f64 {
        match self.count_le(t) {
            0 => self.initial_value,
            k => self.values[k - 1],
        }
    }

    /// Left limit f(t-).
    pub fn eval_left(&self, t: f64) -> f64 {
        match self.count_lt(t) {
            0 => self.initial_value,
            k => self.values[k - 1],
        }
    }

    pub fn last_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(self.initial_value)
    }

    /// Size of the jump at `t` (zero off the grid).
    pub fn jump_at(&self, t: f64) -> f64 {
        self.eval(t) - self.eval_left(t)
    }

    /// Atoms (time, mass) of the Stieltjes measure df.
    pub fn increments(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.jump_times.iter().enumerate().map(move |(i, &t)| {
            let prev = if i == 0 { self.initial_value } else { self.values[i - 1] };
            (t, self.values[i] - prev)
        })
    }

    pub fn is_survival(&self) -> bool {
        self.initial_value == 1.0 && self.is_monotone_within(-1.0, 0.0, 1.0)
    }

    pub fn is_cdf(&self) -> bool {
        (0.0..=1.0).contains(&self.initial_value) && self.is_monotone_within(1.0, 0.0, 1.0)
    }

    fn is_monotone_within(&self, direction: f64, lo: f64, hi: f64) -> bool {
        let mut prev = self.initial_value;
        for &v in &self.values {
            if !(lo..=hi).contains(&v) || (v - prev) * direction < -1e-14 {
                return false;
            }
            prev = v;
        }
        true
    }

    /// Discrete hazards h_j = 1 - S(t_j)/S(t_j-) at each jump of a survival curve.
    /// Jumps out of a zero level are reported with hazard 0.
    pub fn hazards(&self) -> Vec<f64> {
        let mut prev = self.initial_value;
        self.values
            .iter()
            .map(|&v| {
                let h = if prev > 0.0 { 1.0 - v / prev } else { 0.0 };
                prev = v;
                h
            })
            .collect()
    }

    /// Pointwise convex combination (1 - eps) * self + eps * other on the union grid.
    pub fn mix(&self, other: &StepFunction, eps: f64) -> StepFunction {
        let mut grid: Vec<f64> = self.jump_times.iter().chain(other.jump_times.iter()).copied().collect();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let values = grid.iter().map(|&t| (1.0 - eps) * self.eval(t) + eps * other.eval(t)).collect();
        StepFunction {
            jump_times: grid,
            values,
            initial_value: (1.0 - eps) * self.initial_value + eps * other.initial_value,
        }
    }

    /// Applies `f` to every value, keeping the grid.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> StepFunction {
        StepFunction {
            jump_times: self.jump_times.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            initial_value: f(self.initial_value),
        }
    }

    /// Drops jumps of zero size.
    pub fn compact(&self) -> StepFunction {
        let mut times = Vec::with_capacity(self.len());
        let mut values = Vec::with_capacity(self.len());
        let mut prev = self.initial_value;
        for (&t, &v) in self.jump_times.iter().zip(&self.values) {
            if v != prev {
                times.push(t);
                values.push(v);
                prev = v;
            }
        }
        StepFunction { jump_times: times, values, initial_value: self.initial_value }
    }

    pub fn shift(&self, c: f64) -> StepFunction {
        StepFunction {
            jump_times: self.jump_times.iter().map(|t| t + c).collect(),
            values: self.values.clone(),
            initial_value: self.initial_value,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_at_two() -> StepFunction {
        StepFunction::new(1.0, vec![2.0], vec![0.5]).unwrap()
    }

    #[test]
    fn right_continuous_evaluation() {
        let f = half_at_two();
        assert_eq!(f.eval(2.0), 0.5);
        assert_eq!(f.eval_left(2.0), 1.0);
        assert_eq!(f.eval(1.999), 1.0);
        assert_eq!(f.eval(100.0), 0.5);
        assert!(f.is_survival());
    }

    #[test]
    fn rejects_unsorted_grid() {
        let err = StepFunction::new(1.0, vec![2.0, 1.0], vec![0.5, 0.2]).unwrap_err();
        assert_eq!(err, StepError::NotIncreasing { index: 1 });
    }

    #[test]
    fn exhaustive_grid_scan_matches_interval_definition() {
        let f = StepFunction::new(0.0, vec![0.5, 1.0, 2.5, 4.0], vec![0.1, 0.3, 0.35, 1.0]).unwrap();
        let jt = f.jump_times().to_vec();
        for k in 0..5000 {
            let t = k as f64 * 1e-3;
            let expected = match jt.iter().rposition(|&u| u <= t) {
                None => 0.0,
                Some(i) => f.values()[i],
            };
            assert_eq!(f.eval(t), expected);
        }
    }

    #[test]
    fn hazards_round_trip() {
        let s = StepFunction::from_hazards(&[1.0, 2.0, 3.0], &[0.25, 0.5, 1.0]).unwrap();
        let h = s.hazards();
        assert!((h[0] - 0.25).abs() < 1e-15 && (h[1] - 0.5).abs() < 1e-15 && h[2] == 1.0);
        assert_eq!(s.last_value(), 0.0);
    }

    #[test]
    fn atoms_to_cdf() {
        let g = StepFunction::from_atoms(&[(2.0, 2.0), (1.0, 1.0), (5.0, 1.0)], true).unwrap();
        assert_eq!(g.values(), &[0.25, 0.75, 1.0]);
        assert_eq!(g.eval(0.5), 0.0);
        assert!(g.is_cdf());
    }
}
