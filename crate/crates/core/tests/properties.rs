use ltrc::estimators::isotonic_project;
use ltrc::StepFunction;
use proptest::prelude::*;

fn grid_and_hazards() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::collection::vec((0.01f64..3.0, 0.0f64..1.0), 1..30).prop_map(|pairs| {
        let mut t = 0.0;
        pairs
            .into_iter()
            .map(|(gap, h)| {
                t += gap;
                (t, h)
            })
            .unzip()
    })
}

proptest! {
    #[test]
    fn hazards_give_monotone_survival((times, hazards) in grid_and_hazards(), probe in 0.0f64..100.0) {
        let s = StepFunction::from_hazards(&times, &hazards).unwrap();
        prop_assert!(s.is_survival());
        prop_assert!(s.values().windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(s.eval(probe) <= s.eval_left(probe) + 1e-15);
        for &t in &times {
            prop_assert!(s.eval_left(t) >= s.eval(t));
            prop_assert!(s.eval(t + 1e-9) == s.eval(t));
        }
    }

    #[test]
    fn hazards_round_trip((times, hazards) in grid_and_hazards()) {
        let capped: Vec<f64> = hazards.iter().map(|h| h.min(0.99)).collect();
        let s = StepFunction::from_hazards(&times, &capped).unwrap();
        for (a, b) in s.hazards().iter().zip(&capped) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn atoms_give_a_cdf(atoms in prop::collection::vec((0.0f64..50.0, 0.0f64..1.0), 1..25)) {
        prop_assume!(atoms.iter().any(|a| a.1 > 0.0));
        let f = StepFunction::from_atoms(&atoms, true).unwrap();
        prop_assert!(f.is_cdf());
        prop_assert_eq!(f.last_value(), 1.0);
        prop_assert!(f.values().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn isotonic_projection_is_monotone_idempotent_and_mean_preserving(v in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let p = isotonic_project(&v);
        prop_assert_eq!(p.len(), v.len());
        prop_assert!(p.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(isotonic_project(&p), p.clone());
        let (sv, sp) = (v.iter().sum::<f64>(), p.iter().sum::<f64>());
        prop_assert!((sv - sp).abs() < 1e-9);
    }

    #[test]
    fn isotonic_projection_is_nearest(v in prop::collection::vec(-5.0f64..5.0, 1..20), shift in -1.0f64..1.0) {
        let p = isotonic_project(&v);
        let dist = |w: &[f64]| w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let mut rival: Vec<f64> = v.clone();
        rival.sort_by(|a, b| b.total_cmp(a));
        let shifted: Vec<f64> = p.iter().map(|x| x + shift).collect();
        prop_assert!(dist(&p) <= dist(&rival) + 1e-9);
        prop_assert!(dist(&p) <= dist(&shifted) + 1e-9);
    }

    #[test]
    fn monotone_input_is_a_fixed_point(mut v in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        v.sort_by(|a, b| b.total_cmp(a));
        prop_assert_eq!(isotonic_project(&v), v);
    }
}
