use ltrc::simulation::{
    calibrate_censoring_shape, covariate_alphabet, retained_z_probabilities, run_monte_carlo, sample_dgp,
    sample_scenario, CensoringLevel, Dgp, EstimatorConfig, EstimatorKind, Scenario, TruncationLevel,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn rejection_fraction_matches_truncation_level() {
    for (level, target) in
        [(TruncationLevel::None, 0.0), (TruncationLevel::Low25, 0.25), (TruncationLevel::High50, 0.5)]
    {
        let (_, drawn) = sample_dgp(Dgp::Main, level, 2.0, 500_000, &mut rng(1)).unwrap();
        let rejected = 1.0 - 500_000.0 / drawn as f64;
        assert!((rejected - target).abs() <= 0.01, "{level}: rejected {rejected}");
    }
}

#[test]
fn retained_covariates_follow_the_conditional_law() {
    let alphabet = covariate_alphabet();
    for level in [TruncationLevel::Low25, TruncationLevel::High50] {
        let n = 40_000;
        let (data, _) = sample_dgp(Dgp::Main, level, 2.0, n, &mut rng(2)).unwrap();
        let expected = retained_z_probabilities(Dgp::Main, level);
        let mut counts = vec![0usize; alphabet.n_codes()];
        for i in 0..data.len() {
            counts[data.z_code(i)] += 1;
        }
        for (c, &p) in expected.iter().enumerate() {
            let freq = counts[c] as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() <= 3.0 * se, "{level} z={:?}: {freq} vs {p}", alphabet.decode(c));
        }
    }
}

#[test]
fn calibrated_shape_hits_the_censoring_target() {
    for trunc in [TruncationLevel::None, TruncationLevel::Low25, TruncationLevel::High50] {
        for cens in [CensoringLevel::Low25, CensoringLevel::High50] {
            let shape = calibrate_censoring_shape(Dgp::Main, cens.target(), trunc, 0.005).unwrap();
            let (data, _) = sample_dgp(Dgp::Main, trunc, shape, 50_000, &mut rng(3)).unwrap();
            let censored = data.records().iter().filter(|r| r.delta == 0).count() as f64 / data.len() as f64;
            assert!((censored - cens.target()).abs() <= 0.01, "{trunc}/{cens}: censored {censored}");
        }
    }
}

#[test]
fn retained_records_respect_truncation() {
    let sc = Scenario::new(TruncationLevel::High50, CensoringLevel::High50, 2000, 1, 4);
    let data = sample_scenario(&sc, 0).unwrap();
    assert_eq!(data.len(), 2000);
    assert!(data.records().iter().all(|r| r.w <= r.y && r.y > 0.0));
    assert_eq!(data.records(), sample_scenario(&sc, 0).unwrap().records());
    assert_ne!(data.records(), sample_scenario(&sc, 1).unwrap().records());
}

fn moments_within(draws: &[f64], mean: f64, var: f64, m4: f64) {
    let n = draws.len() as f64;
    let m1 = draws.iter().sum::<f64>() / n;
    let m2 = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    assert!((m1 - mean).abs() <= 4.0 * (var / n).sqrt(), "mean {m1} vs {mean}");
    assert!((m2 - var).abs() <= 4.0 * ((m4 - var * var) / n).sqrt(), "variance {m2} vs {var}");
}

#[test]
fn gamma_and_beta_samplers_match_moments() {
    let n = 1_000_000;
    let (k, s) = (6.0, 1.3);
    let mut r = rng(5);
    let g: Vec<f64> = (0..n).map(|_| Gamma::new(k, s).unwrap().sample(&mut r)).collect();
    // Central fourth moment of Gamma(k, s) is 3k(k + 2)s^4.
    moments_within(&g, k * s, k * s * s, 3.0 * k * (k + 2.0) * s.powi(4));

    let (a, b) = (2.0_f64, 5.0_f64);
    let b_draws: Vec<f64> = (0..n).map(|_| Beta::new(a, b).unwrap().sample(&mut r)).collect();
    let mean = a / (a + b);
    let var = a * b / ((a + b).powi(2) * (a + b + 1.0));
    let m4 = 3.0 * a * b * (a * b * (a + b - 6.0) + 2.0 * (a + b).powi(2))
        / ((a + b).powi(4) * (a + b + 1.0) * (a + b + 2.0) * (a + b + 3.0));
    moments_within(&b_draws, mean, var, m4);
}

#[test]
fn oracle_one_step_covers_at_nominal_rate() {
    let mut sc = Scenario::new(TruncationLevel::Low25, CensoringLevel::Low25, 500, 1000, 6);
    let mut oracle = EstimatorConfig::new("oracle", EstimatorKind::OneStep);
    oracle.oracle = true;
    sc.estimators = vec![oracle];
    let table = run_monte_carlo(&sc).unwrap().table;
    for r in &table.rows {
        assert!((0.93..=0.97).contains(&r.coverage), "time {}: coverage {}", r.time_index, r.coverage);
    }
}

#[test]
fn debiased_scaled_bias_does_not_grow_with_n() {
    let mean_abs_bias = |n| {
        let mut sc = Scenario::new(TruncationLevel::Low25, CensoringLevel::Low25, n, 1000, 7);
        sc.estimators = vec![EstimatorConfig::new("onestep", EstimatorKind::OneStep)];
        let table = run_monte_carlo(&sc).unwrap().table;
        table.rows.iter().map(|r| r.scaled_bias.abs()).sum::<f64>() / table.rows.len() as f64
    };
    let (small, large) = (mean_abs_bias(500), mean_abs_bias(2000));
    assert!(large / small <= 2.0, "n=500 {small} n=2000 {large}");
}

#[test]
fn reruns_are_byte_identical() {
    let sc = Scenario::new(TruncationLevel::None, CensoringLevel::High50, 300, 20, 8);
    let a = run_monte_carlo(&sc).unwrap().table.to_csv_string().unwrap();
    let b = run_monte_carlo(&sc).unwrap().table.to_csv_string().unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_replicate_leaves_variance_undefined() {
    let sc = Scenario::new(TruncationLevel::Low25, CensoringLevel::Low25, 300, 1, 9);
    let table = run_monte_carlo(&sc).unwrap().table;
    assert!(table.flags.iter().any(|f| f == "variance_undefined:reps<2"));
    assert!(table.rows.iter().all(|r| r.scaled_var.is_none()));
    let csv = table.to_csv_string().unwrap();
    assert!(csv.lines().skip(1).all(|l| l.contains(",NA,NA,")));
}

#[test]
fn scenario_documents_reject_unknown_levels() {
    let ok = r#"{"truncation":"high_50","censoring":"low_25","n":400,"reps":3,"seed":1}"#;
    let sc = Scenario::from_json(ok).unwrap();
    assert_eq!(sc.name, "trunc_high_50-cens_low_25");
    assert!(Scenario::from_json(&ok.replace("high_50", "medium")).is_err());
    assert!(Scenario::from_json(&ok.replace("\"n\":400", "\"n\":4")).is_err());
}
