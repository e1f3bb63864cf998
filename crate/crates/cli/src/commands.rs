use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ltrc::data::{ingest_csv, make_folds, CsvSchema, Dataset};
use ltrc::estimators::{survival_band, uniform_band, write_influence_dump, BandOptions, CrossFit};
use ltrc::functionals::{
    estimate_cdf_surface, event_time_grid, loglog_contrast, parse_estimand, solve_median, Estimand, Omega,
    ScalarEstimate,
};
use ltrc::simulation::{run_monte_carlo, CensoringLevel, Scenario, TruncationLevel};
use ltrc::{Kernel, NuisanceConfig};
use serde::Serialize;
use serde_json::json;

use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::{Common, Family};

const DEFAULT_N: usize = 1000;
const DEFAULT_REPS: usize = 1000;
const DEFAULT_SEED: u64 = 1;

fn load_config(path: Option<&Path>) -> Result<NuisanceConfig, CliError> {
    let Some(path) = path else { return Ok(NuisanceConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    NuisanceConfig::from_json(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn inputs(data: &Path, common: &Common) -> Vec<PathBuf> {
    let mut v = vec![data.to_path_buf()];
    v.extend(common.nuisance.clone());
    v
}

fn check_common(common: &Common) -> Result<(), CliError> {
    if !(common.alpha > 0.0 && common.alpha < 1.0) {
        return Err(CliError::Invalid(format!("alpha must lie in (0, 1), got {}", common.alpha)));
    }
    Ok(())
}

/// Loads the data, fits the cross-fitted nuisances and prepares the output directory.
fn prepare(data_path: &Path, common: &Common) -> Result<(Dataset, NuisanceConfig, CrossFit), CliError> {
    check_common(common)?;
    let config = load_config(common.nuisance.as_deref())?;
    let data = ingest_csv(data_path, &CsvSchema::default())?;
    let folds = make_folds(data.len(), common.folds, common.seed)?;
    let cf = CrossFit::fit(&data, &folds, &config)?;
    fs::create_dir_all(&common.out)?;
    Ok((data, config, cf))
}

fn config_json(config: &NuisanceConfig) -> serde_json::Value {
    serde_json::to_value(config).unwrap_or(serde_json::Value::Null)
}

/// Scalar functional summary for the median and the log-log contrast.
#[derive(Serialize)]
struct FunctionalReport {
    schema_version: u32,
    estimand_id: String,
    n: usize,
    folds: usize,
    alpha: f64,
    estimate: f64,
    se: f64,
    ci: (f64, f64),
    #[serde(skip_serializing_if = "Option::is_none")]
    density: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bandwidth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    arms: Option<(f64, f64)>,
    flags: Vec<String>,
}

fn write_functional(out: &Path, report: &FunctionalReport, est: &ScalarEstimate) -> Result<(), CliError> {
    fs::write(out.join("report.json"), serde_json::to_string_pretty(report).map_err(std::io::Error::other)? + "\n")?;
    let mut w = csv::Writer::from_path(out.join("report.csv")).map_err(|e| CliError::Failed(e.to_string()))?;
    let row = [
        report.schema_version.to_string(),
        report.estimand_id.clone(),
        report.n.to_string(),
        report.estimate.to_string(),
        report.se.to_string(),
        report.ci.0.to_string(),
        report.ci.1.to_string(),
    ];
    let write = |w: &mut csv::Writer<fs::File>| -> csv::Result<()> {
        w.write_record(["schema_version", "estimand_id", "n", "estimate", "se", "ci_lo", "ci_hi"])?;
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    };
    write(&mut w).map_err(|e| CliError::Failed(e.to_string()))?;
    let mut text = String::from("index,phi\n");
    for (i, v) in est.influence.iter().enumerate() {
        text.push_str(&format!("{i},{v}\n"));
    }
    fs::write(out.join("influence.csv"), text)?;
    Ok(())
}

pub fn estimate(data_path: &Path, estimand_id: &str, common: &Common) -> Result<(), CliError> {
    let start = Instant::now();
    let estimand = parse_estimand(estimand_id)?;
    let (data, config, cf) = prepare(data_path, common)?;
    let out = &common.out;
    let flags: Vec<String> = cf.flags().iter().cloned().collect();
    match &estimand {
        Estimand::Median { a0 } => {
            let surface = estimate_cdf_surface(&cf, &event_time_grid(&data, *a0), *a0)?;
            let q = solve_median(&surface, common.alpha)?;
            let report = FunctionalReport {
                schema_version: 1,
                estimand_id: estimand.to_string(),
                n: data.len(),
                folds: common.folds,
                alpha: common.alpha,
                estimate: q.estimate.value,
                se: q.estimate.se,
                ci: q.estimate.ci,
                density: Some(q.density),
                bandwidth: Some(q.bandwidth),
                arms: None,
                flags,
            };
            write_functional(out, &report, &q.estimate)?;
        }
        Estimand::LogLog { omega } => {
            let omega = match omega {
                Some(o) => o.clone(),
                None => Omega::default_for(&data)?,
            };
            let s1 = estimate_cdf_surface(&cf, &omega.times, 1)?;
            let s0 = estimate_cdf_surface(&cf, &omega.times, 0)?;
            let e = loglog_contrast(&omega, &s1, &s0, common.alpha)?;
            let report = FunctionalReport {
                schema_version: 1,
                estimand_id: estimand.to_string(),
                n: data.len(),
                folds: common.folds,
                alpha: common.alpha,
                estimate: e.contrast.value,
                se: e.contrast.se,
                ci: e.contrast.ci,
                density: None,
                bandwidth: None,
                arms: Some((e.arm1, e.arm0)),
                flags,
            };
            write_functional(out, &report, &e.contrast)?;
        }
        _ => {
            let (kernel, a0) = estimand.survival_integral()?.expect("survival-integral estimand");
            let report = cf.kernel_fit(&kernel, a0)?.report(common.alpha)?;
            fs::write(out.join("report.json"), report.to_json()? + "\n")?;
            report.write_csv(out.join("report.csv"))?;
            write_influence_dump(&cf, &data, &kernel, a0, report.psi_onestep, out.join("influence.csv"))?;
        }
    }
    let config = json!({
        "estimand": estimand.to_string(),
        "folds": common.folds,
        "alpha": common.alpha,
        "nuisance": config_json(&config),
    });
    RunManifest::new(config, common.seed, &inputs(data_path, common))?.finish(
        out,
        &["report.json", "report.csv", "influence.csv"],
        start.elapsed().as_secs_f64(),
    )?;
    Ok(())
}

pub fn band(
    data_path: &Path,
    family: Family,
    times: &[f64],
    a0: u8,
    draws: usize,
    studentized: bool,
    common: &Common,
) -> Result<(), CliError> {
    let start = Instant::now();
    if a0 > 1 {
        return Err(CliError::Invalid("a0 must be 0 or 1".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) || times.iter().any(|t| !t.is_finite() || *t <= 0.0) {
        return Err(CliError::Invalid("band times must be positive and strictly increasing".into()));
    }
    let (_, config, cf) = prepare(data_path, common)?;
    let opts = BandOptions { draws, alpha: common.alpha, seed: common.seed, studentized };
    let report = match family {
        Family::Survival => survival_band(&cf, times, a0, &opts)?,
        Family::Cdf => {
            let kernels: Vec<Kernel> = times.iter().map(|&t| Kernel::cdf(t)).collect();
            uniform_band(&cf, &format!("cdf(a0={a0})"), times, &kernels, a0, &opts)?
        }
    };
    let out = &common.out;
    fs::write(out.join("band.json"), report.to_json()? + "\n")?;
    report.write_csv(out.join("band.csv"))?;
    let config = json!({
        "family": family,
        "times": times,
        "a0": a0,
        "draws": draws,
        "studentized": studentized,
        "folds": common.folds,
        "alpha": common.alpha,
        "nuisance": config_json(&config),
    });
    RunManifest::new(config, common.seed, &inputs(data_path, common))?.finish(
        out,
        &["band.json", "band.csv"],
        start.elapsed().as_secs_f64(),
    )?;
    Ok(())
}

/// Resolves `all`, `robustness` or `trunc_<level>-cens_<level>`.
fn named_scenarios(name: &str, n: usize, reps: usize, seed: u64) -> Result<Vec<Scenario>, CliError> {
    match name {
        "all" => Ok(Scenario::all_six(n, reps, seed)),
        "robustness" => Ok(vec![Scenario::robustness(n, reps, seed)]),
        _ => {
            let bad = || {
                CliError::Invalid(format!(
                    "unknown scenario '{name}'; expected trunc_<level>-cens_<level>, robustness or all"
                ))
            };
            let rest = name.strip_prefix("trunc_").ok_or_else(bad)?;
            let (t, c) = rest.split_once("-cens_").ok_or_else(bad)?;
            let t: TruncationLevel = t.parse()?;
            let c: CensoringLevel = c.parse()?;
            Ok(vec![Scenario::new(t, c, n, reps, seed)])
        }
    }
}

pub fn simulate(
    config: Option<&Path>,
    name: Option<&str>,
    n: Option<usize>,
    reps: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), CliError> {
    let start = Instant::now();
    let mut scenarios = match (config, name) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
            vec![Scenario::from_json(&text)?]
        }
        (None, Some(name)) => {
            named_scenarios(name, n.unwrap_or(DEFAULT_N), reps.unwrap_or(DEFAULT_REPS), seed.unwrap_or(DEFAULT_SEED))?
        }
        (None, None) => return Err(CliError::Invalid("pass --scenario or --config".into())),
    };
    for sc in &mut scenarios {
        sc.n = n.unwrap_or(sc.n);
        sc.reps = reps.unwrap_or(sc.reps);
        sc.seed = seed.unwrap_or(sc.seed);
        sc.validate()?;
        sc.censoring_shape = Some(sc.shape()?);
    }
    let mut csv = String::new();
    let mut summaries = Vec::new();
    for sc in &scenarios {
        let run = run_monte_carlo(sc)?;
        let block = run.table.to_csv_string()?;
        let body = if csv.is_empty() { block.as_str() } else { block.split_once('\n').map_or("", |(_, b)| b) };
        csv.push_str(body);
        let failures = run.table.rows.first().map_or(0, |r| r.failures);
        let mut block = format!("scenario {} (n={}, reps={}, failures={failures})\n", sc.name, sc.n, sc.reps);
        for r in &run.table.rows {
            block.push_str(&format!(
                "  {:<10} t{} sqrt(n)-bias {:+.3} ({:.3})  n-var {}  coverage {:.3}\n",
                r.estimator,
                r.time_index,
                r.scaled_bias,
                r.scaled_bias_mc_se,
                r.scaled_var.map_or("NA".to_string(), |v| format!("{v:.3}")),
                r.coverage
            ));
        }
        // A closed stdout must not abort the run before its files are written.
        let _ = std::io::stdout().write_all(block.as_bytes());
        summaries.push(json!({ "scenario": sc.name, "failures": failures, "flags": run.table.flags }));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.csv"), csv)?;
    let resolved = json!({ "scenarios": scenarios, "summaries": summaries });
    fs::write(
        out.join("scenarios.json"),
        serde_json::to_string_pretty(&resolved).map_err(std::io::Error::other)? + "\n",
    )?;
    let inputs: Vec<PathBuf> = config.map(Path::to_path_buf).into_iter().collect();
    let seed = scenarios.first().map_or(DEFAULT_SEED, |s| s.seed);
    RunManifest::new(json!({ "scenarios": scenarios }), seed, &inputs)?.finish(
        out,
        &["metrics.csv", "scenarios.json"],
        start.elapsed().as_secs_f64(),
    )?;
    Ok(())
}
