use cpmda::evaluation::{
    aggregate_reports, coverage_report, coverage_report_clamped, mean_and_mcse, run_experiment,
    ExperimentConfig, GroupKey, Method, TestSet,
};
use cpmda::{MaskPattern, PredictionInterval};

fn m(s: &str) -> MaskPattern {
    s.parse().unwrap()
}

fn iv(lo: f64, hi: f64) -> PredictionInterval {
    PredictionInterval::new(lo, hi, MaskPattern::zeros(2), 10)
}

#[test]
fn report_on_hand_built_intervals() {
    let ivs = vec![
        iv(0.0, 1.0),
        iv(0.0, 2.0),
        PredictionInterval::unbounded(MaskPattern::zeros(2), 10),
        iv(-1.0, 1.0),
    ];
    let y = [0.5, 3.0, 100.0, 0.0];
    let masks = [m("00"), m("00"), m("10"), m("01")];
    let rep = coverage_report(&ivs, &y, &masks).unwrap();

    let all = rep.marginal();
    assert_eq!(all.n_test, 4);
    assert_eq!(all.coverage, 0.75);
    assert_eq!(all.mean_length, 5.0 / 3.0);
    assert_eq!(all.infinite_fraction, 0.25);
    assert_eq!(all.clamped_mean_length, None);

    let g00 = rep.get(&GroupKey::Mask(m("00"))).unwrap();
    assert_eq!((g00.n_test, g00.coverage, g00.mean_length), (2, 0.5, 1.5));
    let g10 = rep.get(&GroupKey::Mask(m("10"))).unwrap();
    assert_eq!(g10.mean_length, f64::INFINITY);
    assert_eq!(g10.infinite_fraction, 1.0);
    assert_eq!(rep.get(&GroupKey::Size(1)).unwrap().n_test, 2);
    assert_eq!(rep.lowest_mask_coverage(), Some(0.5));
    assert_eq!(rep.highest_mask_coverage(), Some(1.0));

    let clamped = coverage_report_clamped(&ivs, &y, &masks, Some(10.0)).unwrap();
    assert_eq!(clamped.marginal().clamped_mean_length, Some(15.0 / 4.0));
}

#[test]
fn report_rejects_mismatched_lengths() {
    assert!(coverage_report(&[iv(0.0, 1.0)], &[0.0, 1.0], &[m("00")]).is_err());
}

#[test]
fn mcse_matches_hand_computation() {
    let (mean, se) = mean_and_mcse(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(mean, 2.5);
    assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    assert_eq!(mean_and_mcse(&[7.0]), (7.0, 0.0));
    assert!(mean_and_mcse(&[]).0.is_nan());
}

fn small(d: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::synthetic(d);
    cfg.sizes.train = 200;
    cfg.sizes.cal = 100;
    cfg.sizes.test = 300;
    cfg.sizes.per_pattern = Some(50);
    cfg.experiment.repetitions = 2;
    cfg.experiment.seed = 11;
    cfg.methods.list = Method::ALL.to_vec();
    cfg
}

#[test]
fn runs_are_deterministic_given_the_seed() {
    let cfg = small(3);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), Method::ALL.len() * 2);
}

#[test]
fn groups_partition_each_test_set() {
    let reports = run_experiment(&small(3)).unwrap();
    for r in &reports {
        for set in [TestSet::Marginal, TestSet::PerPattern] {
            let rep = r.report(set).unwrap();
            let total = rep.marginal().n_test;
            let by_mask: usize = rep.masks().map(|(_, g)| g.n_test).sum();
            let by_size: usize = rep
                .groups
                .iter()
                .filter(|(k, _)| matches!(k, GroupKey::Size(_)))
                .map(|(_, g)| g.n_test)
                .sum();
            assert_eq!(by_mask, total);
            assert_eq!(by_size, total);
            let weighted: f64 = rep.masks().map(|(_, g)| g.coverage * g.n_test as f64).sum();
            assert!((weighted / total as f64 - rep.marginal().coverage).abs() < 1e-12);
        }
    }
}

#[test]
fn per_pattern_set_excludes_all_missing_mask() {
    let reports = run_experiment(&small(3)).unwrap();
    let rep = reports[0].report(TestSet::PerPattern).unwrap();
    let masks: Vec<_> = rep.masks().map(|(k, g)| (k.clone(), g.n_test)).collect();
    assert_eq!(masks.len(), 7);
    assert!(masks.iter().all(|(k, n)| !k.is_all_missing() && *n == 50));
}

#[test]
fn complete_data_collapses_to_the_complete_mask() {
    let mut cfg = small(3);
    cfg.missingness.rate = 0.0;
    cfg.sizes.per_pattern = Some(0);
    cfg.methods.list = vec![Method::Cqr, Method::CqrMdaExact, Method::CqrMdaNested];
    let reports = run_experiment(&cfg).unwrap();
    for r in &reports {
        let keys: Vec<String> = r.marginal.groups.keys().map(|k| k.to_string()).collect();
        assert_eq!(keys, ["marginal", "mask:000", "size:0"]);
        assert!(r.per_pattern.is_none());
    }
    // on complete data the three calibrators coincide
    let cov = |m| {
        reports
            .iter()
            .find(|r| r.method == m)
            .unwrap()
            .marginal
            .marginal()
            .clone()
    };
    assert_eq!(cov(Method::Cqr), cov(Method::CqrMdaExact));
    assert_eq!(cov(Method::Cqr), cov(Method::CqrMdaNested));
}

#[test]
fn aggregate_labels_and_counts() {
    let reports = run_experiment(&small(2)).unwrap();
    let agg = aggregate_reports(&reports);
    let marg = agg
        .iter()
        .find(|a| a.method == "cqr" && a.group == "marginal")
        .unwrap();
    assert_eq!(marg.repetitions, 2);
    assert!(agg.iter().any(|a| a.group.starts_with("eval:mask:")));
    assert!(agg.iter().all(|a| (0.0..=1.0).contains(&a.coverage)));
}

#[test]
fn invalid_config_is_rejected() {
    let mut cfg = small(3);
    cfg.methods.alpha = 1.5;
    assert!(run_experiment(&cfg).unwrap_err().is_validation());
    let mut cfg = small(3);
    cfg.experiment.repetitions = 0;
    assert!(run_experiment(&cfg).is_err());
}
