use stoplab::paths::TimeGrid;
use stoplab::processes::{Adaptation, ProcessSpec, TimeFn};
use stoplab::stopderiv::{Estimator, ShrinkFamily};
use stoplab::stopping::{RatePolicy, StoppingRule};
use stoplab::theorems::*;
use stoplab::LabError;

#[test]
fn every_rule_passes_on_its_canonical_scenario() {
    for rule in RuleId::ALL {
        let r = check_identity(rule, &Sizes::standard(), 42).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{rule}: {:?}", r.parts);
    }
}

#[test]
fn quick_suite_is_reproducible() {
    let a: Vec<_> = run_suite(&Sizes::quick(), 5).unwrap().into_iter().map(|r| r.without_timing()).collect();
    let b: Vec<_> = run_suite(&Sizes::quick(), 5).unwrap().into_iter().map(|r| r.without_timing()).collect();
    assert_eq!(a, b);
    assert_eq!(summary_csv(&a), summary_csv(&b));
    let ids: Vec<&str> = a.iter().map(|r| r.id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    for rule in RuleId::ALL {
        assert!(ids.contains(&rule.as_str()));
    }
}

#[test]
fn same_law_ks_is_an_expected_failure() {
    let grid = TimeGrid::with_horizon(1e-2, 1.0).unwrap();
    let bm = ProcessSpec::brownian();
    let r = check_distinct_distributions("same_law", &bm, &bm, &grid, 1.0, 2000, 9, None).unwrap();
    assert_eq!(r.verdict, Verdict::Fail);
}

#[test]
fn levy_identity_and_scaled_cases() {
    let grid = TimeGrid::with_horizon(1e-2, 4.0).unwrap();
    let r = check_levy_time_change("identity", &ProcessSpec::brownian(), &Adaptation::constant(1.0), &grid, 2000, 3, 1, RatePolicy::StrictlyPositive).unwrap();
    assert!(r.passed(), "{:?}", r.parts);

    // sigma = 2 with a = 4: W_s = X_{s/4}
    let fast = ProcessSpec::ito_constant(0.0, 0.0, 2.0);
    let r = check_levy_time_change("scaled", &fast, &Adaptation::constant(4.0), &grid, 2000, 3, 2, RatePolicy::StrictlyPositive).unwrap();
    assert!(r.passed(), "{:?}", r.parts);
}

#[test]
fn levy_on_stopped_brownian_motion_fails() {
    let (stopped, _, indicator) = nonunique_pair();
    let grid = TimeGrid::with_horizon(1e-3, 10.0).unwrap();
    match check_levy_time_change("stopped", &stopped, &indicator, &grid, 400, 3, 3, RatePolicy::AllowZero) {
        Ok(r) => assert_eq!(r.verdict, Verdict::Fail, "{:?}", r.parts),
        Err(e) => assert!(matches!(e, LabError::InsufficientIntrinsicTime { .. })),
    }
    assert!(matches!(
        check_levy_time_change("strict", &stopped, &indicator, &grid, 50, 3, 3, RatePolicy::StrictlyPositive),
        Err(LabError::NonPositiveRate { .. })
    ));
}

#[test]
fn quadratic_variation_examples() {
    let grid = TimeGrid::with_horizon(1e-4, 1.0).unwrap();
    let est = Estimator::new(ProcessSpec::brownian(), grid).sizes(2, 2);
    let tol = Tolerances { z: 3.0, tol_abs: 0.0, tol_rel: 0.05 };
    let two = ProcessSpec::ito_constant(0.0, 0.0, 2.0);
    let r = check_quadratic_variation("sigma2", &two, &Adaptation::constant(4.0), &grid, 100, &est, &[], tol).unwrap();
    assert!(r.passed(), "{:?}", r.parts);
    assert!((r.left.finest - 4.0).abs() <= 0.2);

    let line = ProcessSpec::Deterministic { f: TimeFn::identity() };
    let r = check_quadratic_variation("smooth", &line, &Adaptation::constant(0.0), &grid, 2, &est, &[], Tolerances { tol_abs: 1e-3, ..tol }).unwrap();
    assert!(r.left.finest < 1e-3);
    assert!(r.passed());
}

#[test]
fn zero_drift_at_debut_and_deterministic_anchors() {
    let est = Estimator::new(ProcessSpec::brownian(), TimeGrid::with_horizon(1e-3, 2.0).unwrap())
        .family(ShrinkFamily::offset(0.1, 3))
        .sizes(100, 400)
        .seed(21);
    let debut = StoppingRule::Min { rules: vec![StoppingRule::Debut { level: 0.5 }, StoppingRule::AtTime { t: 1.5 }] };
    let anchors = [StoppingRule::AtTime { t: 0.3 }, debut];
    let r = check_zero_drift("bm", &est, stoplab::condest::Observable::coord(0), &anchors, Tolerances::default()).unwrap();
    assert!(r.passed(), "{:?}", r.parts);
}

#[test]
fn phi_round_trip_within_bound_across_dt() {
    let a = clipped_rate();
    for dt in [1e-2, 1e-3, 1e-4] {
        let grid = TimeGrid::with_horizon(dt, 1.0).unwrap();
        let f = stoplab::processes::simulate_path(&ProcessSpec::brownian(), &grid, 17).unwrap();
        let back = phi_invert(&a, &phi_apply(&a, &f).unwrap(), &grid).unwrap();
        let max_step = f.values.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        let n = back.values.len().min(f.values.len());
        assert!(n > grid.len() / 2);
        let worst = (0..n).map(|k| (back.values[k] - f.values[k]).abs()).fold(0.0, f64::max);
        assert!(worst <= 2.0 * max_step, "dt {dt}: {worst}");
    }
}

#[test]
fn report_serializes_with_required_keys() {
    let r = check_identity(RuleId::ChainRule, &Sizes::quick(), 1).unwrap();
    let v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    for key in ["id", "verdict", "left", "right", "ci", "tolerances", "seed", "runtime_s"] {
        assert!(v.get(key).is_some());
    }
    let back: CheckReport = serde_json::from_value(v).unwrap();
    assert_eq!(back, r);
}
