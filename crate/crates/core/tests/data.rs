use ltrc::data::{ingest_csv, make_folds, write_csv, CsvSchema, DataError};
use ltrc::simulation::{sample_scenario, CensoringLevel, Dgp, Scenario, TruncationLevel};

#[test]
fn csv_round_trip_preserves_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = Scenario::new(TruncationLevel::High50, CensoringLevel::Low25, 300, 1, 5);
    for dgp in [Dgp::Main, Dgp::ROBUSTNESS] {
        sc.dgp = dgp;
        let data = sample_scenario(&sc, 0).unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&data, &path).unwrap();
        let back = ingest_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(back.records(), data.records());
        assert_eq!(back.has_exposure(), data.has_exposure());
    }
}

#[test]
fn entry_after_follow_up_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "y,delta,w,z1\n4,1,1,1\n3,0,5,-1\n").unwrap();
    match ingest_csv(&path, &CsvSchema::default()) {
        Err(DataError::TruncationViolation { row, w, y }) => assert_eq!((row, w, y), (2, 5.0, 3.0)),
        other => panic!("expected truncation violation, got {other:?}"),
    }
}

#[test]
fn fold_plans_are_balanced_and_reproducible() {
    for (n, k) in [(10, 5), (11, 3), (1000, 5)] {
        let plan = make_folds(n, k, 42).unwrap();
        assert_eq!(plan.assignment(), make_folds(n, k, 42).unwrap().assignment());
        let sizes = plan.sizes();
        assert_eq!(sizes.iter().sum::<usize>(), n);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in 0..k {
            let mut all = plan.members(f);
            all.extend(plan.complement(f));
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
    assert_ne!(make_folds(1000, 5, 1).unwrap().assignment(), make_folds(1000, 5, 2).unwrap().assignment());
    assert!(matches!(make_folds(3, 5, 0), Err(DataError::InvalidK { k: 5, n: 3 })));
}
