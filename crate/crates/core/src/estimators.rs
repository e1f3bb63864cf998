//! Plug-in, cross-fitted one-step and estimating-equation estimators, their
//! variance estimates, Wald intervals and multiplier-bootstrap uniform bands.
//!
//! The influence function is affine in the parameter value, `phi_i(psi) = c_i - psi d_i`,
//! so a [`KernelFit`] stores `c` and `d` per record and every estimator is a
//! closed-form reduction over them.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::{Dataset, FoldPlan};
use crate::functionals::kernel::Kernel;
use crate::influence::{InfluenceContext, InfluenceError, KernelCache, RecordGeometry};
use crate::nuisance::{fit_nuisances, NuisanceConfig, NuisanceError, NuisanceSet};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("fold {fold}: nuisance fitting failed: {source}")]
    FoldTrainingFailure { fold: usize, source: NuisanceError },
    #[error("fold {fold}: {source}")]
    Influence { fold: usize, source: InfluenceError },
    #[error(transparent)]
    Plugin(#[from] InfluenceError),
    #[error("fold {fold}: estimating-equation denominator is zero")]
    DegenerateDenominator { fold: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl EstimationError {
    /// True for failures caused by the data or the estimand rather than by I/O.
    pub fn is_support_failure(&self) -> bool {
        matches!(
            self,
            Self::Influence { source: InfluenceError::SupportViolation(_), .. }
                | Self::Plugin(InfluenceError::SupportViolation(_))
        )
    }
}

/// Compensated sum.
fn sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    s + c
}

fn mean(values: &[f64]) -> f64 {
    sum(values.iter().copied()) / values.len() as f64
}

/// Plug-in estimate sum_z H~(z) mu(z) from one nuisance set.
pub fn plug_in(eta: &NuisanceSet, kernel: &Kernel, a0: u8) -> Result<f64, InfluenceError> {
    let ctx = InfluenceContext::from_set(eta)?;
    let kc = ctx.kernel_cache(kernel, a0)?;
    Ok(ctx.plug_in(&kc))
}

fn check_plan(data: &Dataset, folds: &FoldPlan) -> Result<(), EstimationError> {
    if folds.assignment().len() != data.len() {
        return Err(EstimationError::InvalidArgument(format!(
            "fold plan covers {} records, dataset has {}",
            folds.assignment().len(),
            data.len()
        )));
    }
    Ok(())
}

fn fold_geometry(
    ctx: &InfluenceContext,
    data: &Dataset,
    folds: &FoldPlan,
    k: usize,
) -> Result<Vec<(usize, RecordGeometry)>, EstimationError> {
    folds
        .members(k)
        .into_iter()
        .map(|i| {
            ctx.geometry(data.record(i), data.z_code(i))
                .map(|g| (i, g))
                .map_err(|source| EstimationError::Influence { fold: k, source })
        })
        .collect()
}

type FoldFit = (Arc<InfluenceContext>, Vec<(usize, RecordGeometry)>);

/// Nuisances fitted on each fold's training complement, with the record
/// geometry every kernel shares.
#[derive(Debug, Clone)]
pub struct CrossFit {
    folds: FoldPlan,
    contexts: Vec<Arc<InfluenceContext>>,
    geometry: Vec<RecordGeometry>,
    flags: BTreeSet<String>,
}

impl CrossFit {
    pub fn fit(data: &Dataset, folds: &FoldPlan, config: &NuisanceConfig) -> Result<Self, EstimationError> {
        check_plan(data, folds)?;
        let fitted: Vec<FoldFit> = (0..folds.k())
            .into_par_iter()
            .map(|k| {
                let train = data.subset(&folds.complement(k));
                let eta = fit_nuisances(&train, config)
                    .map_err(|source| EstimationError::FoldTrainingFailure { fold: k, source })?;
                let ctx = InfluenceContext::new(eta.into())
                    .map_err(|source| EstimationError::Influence { fold: k, source })?;
                let geo = fold_geometry(&ctx, data, folds, k)?;
                Ok((Arc::new(ctx), geo))
            })
            .collect::<Result<_, EstimationError>>()?;
        Ok(Self::assemble(data, folds, fitted))
    }

    /// Uses one fixed nuisance context (for example the true nuisances) in every fold.
    pub fn with_context(data: &Dataset, folds: &FoldPlan, ctx: Arc<InfluenceContext>) -> Result<Self, EstimationError> {
        check_plan(data, folds)?;
        let fitted = (0..folds.k())
            .map(|k| Ok((ctx.clone(), fold_geometry(&ctx, data, folds, k)?)))
            .collect::<Result<Vec<_>, EstimationError>>()?;
        Ok(Self::assemble(data, folds, fitted))
    }

    fn assemble(data: &Dataset, folds: &FoldPlan, fitted: Vec<FoldFit>) -> Self {
        let mut geometry = vec![None; data.len()];
        let mut contexts = Vec::with_capacity(fitted.len());
        let mut flags = BTreeSet::new();
        for (k, (ctx, geo)) in fitted.into_iter().enumerate() {
            flags.extend(ctx.eta().flags().iter().map(|f| format!("fold{}:{f}", k + 1)));
            for (i, g) in geo {
                if g.floored {
                    flags.insert(format!("fold{}:survival_floor", k + 1));
                }
                if g.at_risk_floored {
                    flags.insert(format!("fold{}:at_risk_floor", k + 1));
                }
                geometry[i] = Some(g);
            }
            contexts.push(ctx);
        }
        let geometry = geometry.into_iter().map(|g| g.expect("every record belongs to a fold")).collect();
        Self { folds: folds.clone(), contexts, geometry, flags }
    }

    pub fn folds(&self) -> &FoldPlan {
        &self.folds
    }

    pub fn context(&self, k: usize) -> &InfluenceContext {
        &self.contexts[k]
    }

    pub fn flags(&self) -> &BTreeSet<String> {
        &self.flags
    }

    pub fn n(&self) -> usize {
        self.geometry.len()
    }

    pub fn kernel_fit(&self, kernel: &Kernel, a0: u8) -> Result<KernelFit, EstimationError> {
        let n = self.n();
        let (mut c, mut d) = (vec![0.0; n], vec![0.0; n]);
        let mut fold_plugin = Vec::with_capacity(self.folds.k());
        let mut flags = self.flags.clone();
        let mut shared: Option<(usize, KernelCache)> = None;
        for (k, ctx) in self.contexts.iter().enumerate() {
            let err = |source| EstimationError::Influence { fold: k, source };
            let reuse = shared.as_ref().is_some_and(|(j, _)| Arc::ptr_eq(&self.contexts[*j], ctx));
            if !reuse {
                shared = Some((k, ctx.kernel_cache(kernel, a0).map_err(err)?));
            }
            let kc = &shared.as_ref().expect("kernel cache set").1;
            flags.extend(kc.flags.iter().map(|f| format!("fold{}:{f}", k + 1)));
            fold_plugin.push(ctx.plug_in(kc));
            for i in self.folds.members(k) {
                let p = ctx.parts(kc, &self.geometry[i]).map_err(err)?;
                c[i] = p.c();
                d[i] = p.dnorm;
            }
        }
        Ok(KernelFit { kernel_id: kernel.id().to_string(), a0, folds: self.folds.clone(), fold_plugin, c, d, flags })
    }
}

/// Cross-fitted influence-function ingredients for one kernel.
#[derive(Debug, Clone)]
pub struct KernelFit {
    pub kernel_id: String,
    pub a0: u8,
    folds: FoldPlan,
    pub fold_plugin: Vec<f64>,
    /// phi_i(psi) = c_i - psi * d_i.
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub flags: BTreeSet<String>,
}

impl KernelFit {
    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn folds(&self) -> &FoldPlan {
        &self.folds
    }

    pub fn eif(&self, psi: f64) -> Vec<f64> {
        self.c.iter().zip(&self.d).map(|(c, d)| c - psi * d).collect()
    }

    /// psi*_k = plug-in_k + mean over fold k of phi(plug-in_k).
    pub fn fold_onestep(&self) -> Vec<f64> {
        (0..self.folds.k())
            .map(|k| {
                let p = self.fold_plugin[k];
                let idx = self.folds.members(k);
                p + sum(idx.iter().map(|&i| self.c[i] - p * self.d[i])) / idx.len() as f64
            })
            .collect()
    }

    /// psi**_k solving sum over fold k of phi(psi) = 0.
    pub fn fold_ee(&self) -> Result<Vec<f64>, EstimationError> {
        (0..self.folds.k())
            .map(|k| {
                let idx = self.folds.members(k);
                let den = sum(idx.iter().map(|&i| self.d[i]));
                if den == 0.0 || !den.is_finite() {
                    return Err(EstimationError::DegenerateDenominator { fold: k });
                }
                Ok(sum(idx.iter().map(|&i| self.c[i])) / den)
            })
            .collect()
    }

    /// Sum over fold k of phi(psi).
    pub fn ee_residual(&self, k: usize, psi: f64) -> f64 {
        sum(self.folds.members(k).into_iter().map(|i| self.c[i] - psi * self.d[i]))
    }

    pub fn psi_plugin(&self) -> f64 {
        mean(&self.fold_plugin)
    }

    pub fn psi_onestep(&self) -> f64 {
        mean(&self.fold_onestep())
    }

    pub fn psi_ee(&self) -> Result<f64, EstimationError> {
        Ok(mean(&self.fold_ee()?))
    }

    pub fn report(&self, alpha: f64) -> Result<EstimateReport, EstimationError> {
        let n = self.n() as f64;
        let onestep = self.fold_onestep();
        let ee = self.fold_ee()?;
        let (psi_onestep, psi_ee) = (mean(&onestep), mean(&ee));
        let var = variance(&self.eif(psi_onestep), self.folds.assignment(), self.folds.k());
        let var_ee = variance(&self.eif(psi_ee), self.folds.assignment(), self.folds.k());
        let se_simple = (var.sigma2_simple / n).sqrt();
        let se_ee = (var_ee.sigma2_simple / n).sqrt();
        let per_fold = (0..self.folds.k())
            .map(|k| FoldSummary {
                fold: k + 1,
                n: self.folds.members(k).len(),
                psi_plugin: self.fold_plugin[k],
                psi_onestep: onestep[k],
                psi_ee: ee[k],
                ee_residual: self.ee_residual(k, ee[k]),
            })
            .collect();
        Ok(EstimateReport {
            schema_version: SCHEMA_VERSION,
            estimand_id: self.kernel_id.clone(),
            a0: self.a0,
            n: self.n(),
            folds: self.folds.k(),
            alpha,
            psi_plugin: self.psi_plugin(),
            psi_onestep,
            psi_ee,
            se_simple,
            se_crossfit: (var.sigma2_crossfit / n).sqrt(),
            se_ee,
            ci: wald_ci(psi_onestep, se_simple, alpha),
            ci_ee: wald_ci(psi_ee, se_ee, alpha),
            per_fold,
            flags: self.flags.iter().cloned().collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n: usize,
    pub psi_plugin: f64,
    pub psi_onestep: f64,
    pub psi_ee: f64,
    /// Sum over the fold of phi(psi_ee).
    pub ee_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub estimand_id: String,
    pub a0: u8,
    pub n: usize,
    pub folds: usize,
    pub alpha: f64,
    pub psi_plugin: f64,
    pub psi_onestep: f64,
    pub psi_ee: f64,
    pub se_simple: f64,
    pub se_crossfit: f64,
    /// Standard error with the estimating-equation value inside phi.
    pub se_ee: f64,
    /// Wald interval around psi_onestep using se_simple.
    pub ci: (f64, f64),
    pub ci_ee: (f64, f64),
    pub per_fold: Vec<FoldSummary>,
    pub flags: Vec<String>,
}

impl EstimateReport {
    pub fn to_json(&self) -> Result<String, EstimationError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One pooled row followed by one row per fold.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EstimationError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "schema_version",
            "estimand_id",
            "level",
            "n",
            "psi_plugin",
            "psi_onestep",
            "psi_ee",
            "se_simple",
            "se_crossfit",
            "ci_lo",
            "ci_hi",
        ])?;
        let v = self.schema_version.to_string();
        w.write_record([
            v.as_str(),
            &self.estimand_id,
            "pooled",
            &self.n.to_string(),
            &self.psi_plugin.to_string(),
            &self.psi_onestep.to_string(),
            &self.psi_ee.to_string(),
            &self.se_simple.to_string(),
            &self.se_crossfit.to_string(),
            &self.ci.0.to_string(),
            &self.ci.1.to_string(),
        ])?;
        for f in &self.per_fold {
            w.write_record([
                v.as_str(),
                &self.estimand_id,
                &format!("fold{}", f.fold),
                &f.n.to_string(),
                &f.psi_plugin.to_string(),
                &f.psi_onestep.to_string(),
                &f.psi_ee.to_string(),
                "NA",
                "NA",
                "NA",
                "NA",
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Cross-fitted one-step estimate.
pub fn one_step(
    data: &Dataset,
    folds: &FoldPlan,
    kernel: &Kernel,
    a0: u8,
    config: &NuisanceConfig,
    alpha: f64,
) -> Result<EstimateReport, EstimationError> {
    CrossFit::fit(data, folds, config)?.kernel_fit(kernel, a0)?.report(alpha)
}

/// Closed-form estimating-equation estimate; the report carries both estimators.
pub fn estimating_equation(
    data: &Dataset,
    folds: &FoldPlan,
    kernel: &Kernel,
    a0: u8,
    config: &NuisanceConfig,
    alpha: f64,
) -> Result<EstimateReport, EstimationError> {
    one_step(data, folds, kernel, a0, config, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceEstimate {
    /// n^{-1} sum (phi_i - mean)^2.
    pub sigma2_simple: f64,
    /// Average over folds of the within-fold version.
    pub sigma2_crossfit: f64,
}

pub fn variance(phi: &[f64], fold_of: &[usize], k: usize) -> VarianceEstimate {
    let centered = |v: &[f64]| {
        let m = mean(v);
        sum(v.iter().map(|x| (x - m) * (x - m))) / v.len() as f64
    };
    let per_fold: Vec<f64> = (0..k)
        .filter_map(|j| {
            let v: Vec<f64> = phi.iter().zip(fold_of).filter(|(_, f)| **f == j).map(|(x, _)| *x).collect();
            (!v.is_empty()).then(|| centered(&v))
        })
        .collect();
    VarianceEstimate { sigma2_simple: centered(phi), sigma2_crossfit: mean(&per_fold) }
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn wald_ci(psi: f64, se: f64, alpha: f64) -> (f64, f64) {
    let q = normal_quantile(1.0 - alpha / 2.0);
    (psi - q * se, psi + q * se)
}

/// L2 projection onto non-increasing sequences (pool-adjacent-violators).
pub fn isotonic_project(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, w2) = blocks[blocks.len() - 1];
            let (m1, w1) = blocks[blocks.len() - 2];
            if m1 >= m2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            blocks.push(((m1 * w1 as f64 + m2 * w2 as f64) / (w1 + w2) as f64, w1 + w2));
        }
    }
    blocks.into_iter().flat_map(|(m, w)| std::iter::repeat_n(m, w)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandOptions {
    pub draws: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Scale the sup statistic by the pointwise standard errors.
    pub studentized: bool,
}

impl Default for BandOptions {
    fn default() -> Self {
        Self { draws: 20_000, alpha: 0.05, seed: 1, studentized: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandReport {
    pub schema_version: u32,
    pub family_id: String,
    pub n: usize,
    pub grid: Vec<f64>,
    pub estimates: Vec<f64>,
    pub pointwise_se: Vec<f64>,
    /// Fixed-width halfwidth c / sqrt(n), or c alone when studentized.
    pub band_halfwidth: f64,
    pub critical_value: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub multiplier_draws: usize,
    pub studentized: bool,
    pub seed: u64,
    /// Non-increasing projection of the estimates, when requested.
    pub projected: Option<Vec<f64>>,
    pub flags: Vec<String>,
}

impl BandReport {
    pub fn to_json(&self) -> Result<String, EstimationError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EstimationError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["schema_version", "s", "estimate", "pointwise_se", "lower", "upper", "projected"])?;
        for j in 0..self.grid.len() {
            let projected = self.projected.as_ref().map_or("NA".to_string(), |p| p[j].to_string());
            w.write_record([
                self.schema_version.to_string(),
                self.grid[j].to_string(),
                self.estimates[j].to_string(),
                self.pointwise_se[j].to_string(),
                self.lower[j].to_string(),
                self.upper[j].to_string(),
                projected,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Empirical covariance of the columns of an n x m influence matrix.
fn eif_covariance(columns: &[Vec<f64>]) -> DMatrix<f64> {
    let m = columns.len();
    let n = columns.first().map_or(0, Vec::len);
    let centered: Vec<Vec<f64>> = columns
        .iter()
        .map(|c| {
            let mu = mean(c);
            c.iter().map(|x| x - mu).collect()
        })
        .collect();
    DMatrix::from_fn(m, m, |r, s| sum(centered[r].iter().zip(&centered[s]).map(|(a, b)| a * b)) / n as f64)
}

/// (1 - alpha)-quantile of sup_s |G_s| / scale_s for G ~ N(0, cov), from seeded draws.
fn sup_quantile(cov: &DMatrix<f64>, scale: &[f64], opts: &BandOptions) -> (f64, bool) {
    let m = cov.nrows();
    let eig = SymmetricEigen::new(cov.clone());
    let max_ev = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let singular = eig.eigenvalues.iter().any(|&l| l <= 1e-12 * max_ev.max(f64::MIN_POSITIVE));
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let mut stats: Vec<f64> = (0..opts.draws)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(b as u64);
            let xi = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
            let g = &root * xi;
            g.iter().zip(scale).map(|(x, s)| if *s > 0.0 { (x / s).abs() } else { 0.0 }).fold(0.0, f64::max)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let idx = (((1.0 - opts.alpha) * opts.draws as f64).ceil() as usize).clamp(1, opts.draws) - 1;
    (stats[idx], singular)
}

/// Uniform band over a kernel family sharing one cross-fit.
pub fn uniform_band(
    cf: &CrossFit,
    family_id: &str,
    grid: &[f64],
    kernels: &[Kernel],
    a0: u8,
    opts: &BandOptions,
) -> Result<BandReport, EstimationError> {
    if grid.is_empty() || grid.len() != kernels.len() {
        return Err(EstimationError::InvalidArgument(
            "band grid and kernel family must be non-empty and aligned".into(),
        ));
    }
    if opts.draws == 0 || !(0.0..1.0).contains(&opts.alpha) || opts.alpha == 0.0 {
        return Err(EstimationError::InvalidArgument("band needs draws > 0 and alpha in (0, 1)".into()));
    }
    let fits: Vec<KernelFit> = kernels.iter().map(|k| cf.kernel_fit(k, a0)).collect::<Result<_, _>>()?;
    let n = cf.n() as f64;
    let estimates: Vec<f64> = fits.iter().map(KernelFit::psi_onestep).collect();
    let columns: Vec<Vec<f64>> = fits.iter().zip(&estimates).map(|(f, &psi)| f.eif(psi)).collect();
    let cov = eif_covariance(&columns);
    let sd: Vec<f64> = (0..grid.len()).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let scale = if opts.studentized { sd.clone() } else { vec![1.0; grid.len()] };
    let (crit, singular) = sup_quantile(&cov, &scale, opts);
    let half: Vec<f64> = scale.iter().map(|s| crit * s / n.sqrt()).collect();
    let mut flags: BTreeSet<String> = fits.iter().flat_map(|f| f.flags.iter().cloned()).collect();
    if singular {
        log::warn!("band covariance is singular; multiplier draws use its positive part");
        flags.insert("singular_covariance".into());
    }
    Ok(BandReport {
        schema_version: SCHEMA_VERSION,
        family_id: family_id.to_string(),
        n: cf.n(),
        grid: grid.to_vec(),
        lower: estimates.iter().zip(&half).map(|(e, h)| e - h).collect(),
        upper: estimates.iter().zip(&half).map(|(e, h)| e + h).collect(),
        estimates,
        pointwise_se: sd.iter().map(|s| s / n.sqrt()).collect(),
        band_halfwidth: if opts.studentized { crit } else { crit / n.sqrt() },
        critical_value: crit,
        covariance: (0..grid.len()).map(|r| (0..grid.len()).map(|s| cov[(r, s)]).collect()).collect(),
        multiplier_draws: opts.draws,
        studentized: opts.studentized,
        seed: opts.seed,
        projected: None,
        flags: flags.into_iter().collect(),
    })
}

/// Band for the counterfactual survival function at the given times, with its
/// non-increasing projection.
pub fn survival_band(cf: &CrossFit, times: &[f64], a0: u8, opts: &BandOptions) -> Result<BandReport, EstimationError> {
    let kernels: Vec<Kernel> = times.iter().map(|&t| Kernel::survival(t)).collect();
    let mut band = uniform_band(cf, &format!("survival(a0={a0})"), times, &kernels, a0, opts)?;
    band.projected = Some(isotonic_project(&band.estimates));
    Ok(band)
}

/// Writes a per-record influence dump with columns phi1, phi2, phi, fold, stratum.
pub fn write_influence_dump(
    cf: &CrossFit,
    data: &Dataset,
    kernel: &Kernel,
    a0: u8,
    psi_ref: f64,
    path: impl AsRef<Path>,
) -> Result<(), EstimationError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "index,phi1,phi2,phi,fold,stratum")?;
    let folds = cf.folds();
    for k in 0..folds.k() {
        let ctx = cf.context(k);
        let kc = ctx.kernel_cache(kernel, a0).map_err(|source| EstimationError::Influence { fold: k, source })?;
        for i in folds.members(k) {
            let p = ctx.parts(&kc, &cf.geometry[i]).map_err(|source| EstimationError::Influence { fold: k, source })?;
            let phi = p.phi(psi_ref);
            writeln!(out, "{},{},{},{},{},{}", i, p.phi1, phi - p.phi1, phi, k + 1, data.stratum(i))?;
        }
    }
    out.flush()?;
    Ok(())
}
