mod common;

use common::*;
use fedscore::aggregation::AggregationRule;
use fedscore::contribution::CeMethod;
use fedscore::harness::{run_round, setup_run, RunState};
use fedscore::stats::{anderson_darling_k2, loss_divergence_monitor, mean, paired_t_test, rmse, spearman, Tail};
use proptest::prelude::*;

#[test]
fn ad_agrees_with_a_permutation_test_away_from_the_threshold() {
    for i in 0..10u64 {
        let mut r = rng(300 + i);
        let shift = if i % 2 == 0 { 0.0 } else { 2.0 };
        let a: Vec<f64> = (0..20).map(|_| normal(&mut r)).collect();
        let b: Vec<f64> = (0..25).map(|_| normal(&mut r) + shift).collect();
        let p = anderson_darling_k2(&a, &b).unwrap().p_value;
        let perm = ad_permutation_p(&a, &b, 2000, i);
        assert_eq!(p < 0.05, perm < 0.05, "instance {i}: {p} vs {perm}");
    }
}

#[test]
fn ad_p_never_rises_with_a_larger_shift() {
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let a: Vec<f64> = (0..30).map(|_| normal(&mut r)).collect();
        let b: Vec<f64> = (0..30).map(|_| normal(&mut r)).collect();
        // move b away from a
        let dir = (mean(&b) - mean(&a)).signum();
        let mut last = f64::INFINITY;
        for s in 0..30 {
            let shifted: Vec<f64> = b.iter().map(|x| x + dir * 0.1 * s as f64).collect();
            let p = anderson_darling_k2(&a, &shifted).unwrap().p_value;
            assert!(p <= last + 1e-12, "seed {seed} shift {s}");
            last = p;
        }
    }
}

#[test]
fn divergence_monitor_examples() {
    let l = [1.0, 0.5, 0.4, 0.4, 0.9, 1.2, 1.5];
    assert_eq!(loss_divergence_monitor(&l, 1, 1.5).unwrap().first_round, Some(5));
    let falling: Vec<f64> = (0..20).map(|i| 1.0 / (1.0 + i as f64)).collect();
    assert!(!loss_divergence_monitor(&falling, 3, 1.5).unwrap().flagged);
    assert!(!loss_divergence_monitor(&[0.7; 10], 2, 1.01).unwrap().flagged);
    assert!(loss_divergence_monitor(&l, 0, 1.5).is_err());
}

#[test]
fn ce_scores_ignore_the_aggregator_but_adp_does_not() {
    let cfg = config(SMALL);
    let setup = setup_run(&cfg, 11, None).unwrap();
    let mut records = Vec::new();
    for rule in [AggregationRule::Fedavg, AggregationRule::Krum, AggregationRule::Fednova] {
        let c = cfg.with_rule(rule);
        let mut state = RunState::new(&setup);
        records.push(run_round(&mut state, &setup, &c).unwrap());
    }
    for rec in &records[1..] {
        assert_eq!(rec.submitted, records[0].submitted);
        for m in [CeMethod::Sv, CeMethod::Loo, CeMethod::Gtg] {
            assert_eq!(rec.raw_for(m), records[0].raw_for(m), "{m:?}");
        }
    }
    let adp: Vec<_> = records.iter().map(|r| r.raw_for(CeMethod::Adp).unwrap().values.clone()).collect();
    assert_ne!(adp[0], adp[1], "krum and fedavg give the same ADP scores");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn t_test_tails_are_consistent(d in prop::collection::vec(-5.0f64..5.0, 3..20)) {
        let g = paired_t_test(&d, Tail::Greater).unwrap();
        let l = paired_t_test(&d, Tail::Less).unwrap();
        let two = paired_t_test(&d, Tail::TwoSided).unwrap();
        if g.t.is_finite() {
            prop_assert!((g.p_value + l.p_value - 1.0).abs() < 1e-9);
            prop_assert!((two.p_value - 2.0 * g.p_value.min(l.p_value)).abs() < 1e-9);
        }
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        prop_assert!((paired_t_test(&neg, Tail::Less).unwrap().p_value - g.p_value).abs() < 1e-9);
    }

    #[test]
    fn rmse_and_spearman_are_permutation_invariant(v in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..12), rot in 0usize..12) {
        let a: Vec<f64> = v.iter().map(|p| p.0).collect();
        let b: Vec<f64> = v.iter().map(|p| p.1).collect();
        let k = rot % a.len();
        let mut ar = a.clone();
        let mut br = b.clone();
        ar.rotate_left(k);
        br.rotate_left(k);
        prop_assert!((rmse(&a, &b).unwrap() - rmse(&ar, &br).unwrap()).abs() < 1e-12);
        let s = spearman(&a, &b).unwrap();
        prop_assert!((s - spearman(&ar, &br).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        // any strictly increasing map leaves ranks alone
        let cubed: Vec<f64> = a.iter().map(|x| x.powi(3) + 2.0 * x).collect();
        prop_assert!((spearman(&cubed, &b).unwrap() - s).abs() < 1e-12);
    }

    #[test]
    fn ad_statistic_is_symmetric(seed in 0u64..1000) {
        let mut r = rng(seed);
        let a: Vec<f64> = (0..12).map(|_| normal(&mut r)).collect();
        let b: Vec<f64> = (0..17).map(|_| normal(&mut r) + 0.5).collect();
        let x = anderson_darling_k2(&a, &b).unwrap();
        let y = anderson_darling_k2(&b, &a).unwrap();
        prop_assert!((x.statistic - y.statistic).abs() < 1e-9);
    }
}
