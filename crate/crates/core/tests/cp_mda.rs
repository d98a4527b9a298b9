use cpmda::conformal_core::{itp_conformalize_fit, PipelineConfig};
use cpmda::cp_mda::{
    mda_exact_interval, mda_nested_bags, mda_nested_interval, mda_nested_partitioned_interval,
    MdaMethod, MdaPipeline, PatternChoice,
};
use cpmda::gaussian_oracle::{generate_glm_dataset, GlmParams};
use cpmda::imputation::{fit_imputer, ImputeHyper, ImputerKind};
use cpmda::missingness::{enumerate_masks, McarSpec};
use cpmda::quantile_regression::QuantileModel;
use cpmda::{split_train_cal, MaskPattern, MaskedDataset, MISSING};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// d = 1, constant-zero imputation, band `[x - 1, x + 1]`.
fn hand_pipeline(cal: MaskedDataset, alpha: f64) -> MdaPipeline {
    let imp = fit_imputer(ImputerKind::Constant(0.0), &cal, &ImputeHyper::default()).unwrap();
    let lo = QuantileModel::linear(alpha / 2.0, vec![1.0, 0.0], -1.0).unwrap();
    let hi = QuantileModel::linear(1.0 - alpha / 2.0, vec![1.0, 0.0], 1.0).unwrap();
    MdaPipeline::from_parts(imp, lo, hi, cal, alpha).unwrap()
}

fn one_dim(x: &[f64], m: &[u8], y: &[f64]) -> MaskedDataset {
    let masks = m.iter().map(|b| MaskPattern::from_bits(&[*b])).collect();
    MaskedDataset::new(x.to_vec(), masks, y.to_vec(), 1).unwrap()
}

#[test]
fn nested_three_row_fixture() {
    // cal scores: row 0 band [-1, 1], y 0.5 -> -0.5; row 1 band [1, 3], y 4 -> 1;
    // row 2 missing, imputed 0, band [-1, 1], y -3 -> 2.
    let p = hand_pipeline(
        one_dim(&[0.0, 2.0, MISSING], &[0, 0, 1], &[0.5, 4.0, -3.0]),
        0.5,
    );
    let m = MaskPattern::from_bits(&[0]);
    // test x = 1: band [0, 2] under the empty mask, [-1, 1] when masked.
    // lower bag {0.5, -1, -3}, upper bag {1.5, 3, 3}, k = ceil(0.5 * 4) = 2.
    let bags = mda_nested_bags(&p, &[1.0], &m).unwrap();
    assert_eq!(bags.lower, vec![0.5, -1.0, -3.0]);
    assert_eq!(bags.upper, vec![1.5, 3.0, 3.0]);
    let iv = mda_nested_interval(&p, &[1.0], &m).unwrap();
    assert_eq!((iv.lower, iv.upper), (-1.0, 3.0));
    assert_eq!(iv.cal_subset_size, 3);
    // exact keeps rows 0 and 1, scores {-0.5, 1}, k = ceil(0.5 * 3) = 2 -> Q = 1
    let ex = mda_exact_interval(&p, &[1.0], &m).unwrap();
    assert_eq!((ex.lower, ex.upper), (-1.0, 3.0));
    assert_eq!(ex.cal_subset_size, 2);
}

#[test]
fn exact_order_statistic_example() {
    let p = hand_pipeline(one_dim(&[0.0, 0.0, 0.0], &[0, 0, 0], &[1.1, 1.2, 1.3]), 0.5);
    let m = MaskPattern::from_bits(&[0]);
    let scores = p.exact_scores(&m).unwrap();
    for (s, want) in scores.iter().zip([0.1, 0.2, 0.3]) {
        assert!((s - want).abs() < 1e-12);
    }
    let iv = mda_exact_interval(&p, &[0.0], &m).unwrap();
    assert!((iv.lower - (-1.2)).abs() < 1e-12 && (iv.upper - 1.2).abs() < 1e-12);
}

#[test]
fn exact_with_too_few_rows_is_unbounded() {
    let p = hand_pipeline(one_dim(&[0.0, MISSING], &[0, 1], &[0.0, 0.0]), 0.1);
    let iv = mda_exact_interval(&p, &[0.0], &MaskPattern::from_bits(&[0])).unwrap();
    assert!(iv.is_infinite());
    assert_eq!(iv.cal_subset_size, 1);
    let iv = mda_nested_interval(&p, &[0.0], &MaskPattern::from_bits(&[0])).unwrap();
    assert!(iv.is_infinite());
}

#[test]
fn exact_with_no_rows_is_unbounded() {
    let p = hand_pipeline(one_dim(&[MISSING, MISSING], &[1, 1], &[0.0, 0.0]), 0.5);
    let iv = mda_exact_interval(&p, &[0.0], &MaskPattern::from_bits(&[0])).unwrap();
    assert!(iv.is_infinite() && iv.contains(-1e300));
    assert_eq!(iv.cal_subset_size, 0);
}

fn reference(d: usize, n: usize, rate: f64, seed: u64) -> (MaskedDataset, MdaPipeline) {
    let params = GlmParams::reference(d).unwrap();
    let data = generate_glm_dataset(&params, n, &McarSpec::new(rate), seed).unwrap();
    let split = split_train_cal(n, 0.5, seed).unwrap();
    let p = MdaPipeline::fit(&data, &split, &PipelineConfig::default()).unwrap();
    let test = generate_glm_dataset(&params, 200, &McarSpec::new(rate), seed + 1000).unwrap();
    (test, p)
}

#[test]
fn all_missing_mask_nested_equals_exact() {
    let (test, p) = reference(3, 400, 0.2, 11);
    let ones = MaskPattern::ones(3);
    for i in 0..20 {
        let e = mda_exact_interval(&p, test.row(i), &ones).unwrap();
        let n = mda_nested_interval(&p, test.row(i), &ones).unwrap();
        assert_eq!((e.lower, e.upper), (n.lower, n.upper));
        assert_eq!(e.cal_subset_size, p.calibration().n());
    }
}

#[test]
fn complete_mask_exact_uses_complete_rows_only() {
    let (_, p) = reference(3, 400, 0.2, 12);
    let cal = p.calibration();
    let complete = (0..cal.n()).filter(|&k| cal.mask(k).is_complete()).count();
    assert_eq!(
        p.exact_scores(&MaskPattern::zeros(3)).unwrap().len(),
        complete
    );
}

#[test]
fn complete_data_reduces_to_split_cqr() {
    let params = GlmParams::reference(3).unwrap();
    let data = generate_glm_dataset(&params, 400, &McarSpec::new(0.0), 13).unwrap();
    let split = split_train_cal(400, 0.5, 13).unwrap();
    let cfg = PipelineConfig::default();
    let mda = MdaPipeline::fit(&data, &split, &cfg).unwrap();
    let cqr = itp_conformalize_fit(&data, &split, &cfg).unwrap();
    let test = generate_glm_dataset(&params, 100, &McarSpec::new(0.0), 14).unwrap();
    let nested = mda.predict_batch(&MdaMethod::Nested, &test).unwrap();
    let exact = mda.predict_batch(&MdaMethod::Exact, &test).unwrap();
    for i in 0..test.n() {
        let v = cqr.predict(test.row(i), test.mask(i)).unwrap();
        assert_eq!((nested[i].lower, nested[i].upper), (v.lower, v.upper));
        assert_eq!((exact[i].lower, exact[i].upper), (v.lower, v.upper));
    }
}

#[test]
fn batch_matches_single_point() {
    let (test, p) = reference(3, 400, 0.3, 15);
    let exact = p.predict_batch(&MdaMethod::Exact, &test).unwrap();
    let nested = p.predict_batch(&MdaMethod::Nested, &test).unwrap();
    let part = p
        .predict_batch(
            &MdaMethod::NestedPartitioned(PatternChoice::Smallest),
            &test,
        )
        .unwrap();
    for i in 0..test.n() {
        assert_eq!(
            exact[i],
            mda_exact_interval(&p, test.row(i), test.mask(i)).unwrap()
        );
        assert_eq!(
            nested[i],
            mda_nested_interval(&p, test.row(i), test.mask(i)).unwrap()
        );
        let single = mda_nested_partitioned_interval(
            &p,
            test.row(i),
            test.mask(i),
            &PatternChoice::Smallest,
        )
        .unwrap();
        assert_eq!(part[i], single);
    }
}

#[test]
fn nested_bag_invariants() {
    let (test, p) = reference(4, 300, 0.3, 16);
    for m in enumerate_masks(4, true) {
        let bags = mda_nested_bags(&p, test.true_row(0).unwrap(), &m).unwrap();
        assert_eq!(bags.lower.len(), p.calibration().n());
        assert_eq!(bags.upper.len(), p.calibration().n());
        assert!(bags.masks.iter().all(|a| m.is_included_in(a)));
        for (k, a) in bags.masks.iter().enumerate() {
            assert_eq!(a, &p.calibration().mask(k).union(&m));
        }
    }
}

#[test]
fn exact_is_nested_in_alpha() {
    let (test, p) = reference(3, 400, 0.2, 17);
    for i in 0..test.n() {
        let a = p.exact_interval_at(test.row(i), test.mask(i), 0.1).unwrap();
        let b = p.exact_interval_at(test.row(i), test.mask(i), 0.2).unwrap();
        assert!(b.lower >= a.lower && b.upper <= a.upper);
    }
}

#[test]
fn partitioned_variants() {
    let (test, p) = reference(3, 400, 0.2, 18);
    for i in 0..test.n() {
        let m = test.mask(i);
        // some complete calibration row always exists here, so the default
        // choice is the test mask and matches the exact calibrator
        let part =
            mda_nested_partitioned_interval(&p, test.row(i), m, &PatternChoice::Smallest).unwrap();
        let exact = mda_exact_interval(&p, test.row(i), m).unwrap();
        assert_eq!(
            (part.lower, part.upper, part.cal_subset_size),
            (exact.lower, exact.upper, exact.cal_subset_size)
        );
    }

    let ones = MaskPattern::ones(3);
    let m = MaskPattern::from_bits(&[1, 0, 0]);
    let row = test.true_row(0).unwrap();
    let part =
        mda_nested_partitioned_interval(&p, row, &m, &PatternChoice::Fixed(ones.clone())).unwrap();
    let bags = mda_nested_bags(&p, row, &m).unwrap();
    assert_eq!(
        part.cal_subset_size,
        bags.masks.iter().filter(|a| **a == ones).count()
    );
    assert_eq!(part.mask_used, ones);

    let bad = PatternChoice::Fixed(MaskPattern::from_bits(&[0, 1, 0]));
    assert!(mda_nested_partitioned_interval(&p, row, &m, &bad).is_err());

    let choice = PatternChoice::RandomByCardinality { seed: 5 };
    let a = mda_nested_partitioned_interval(&p, row, &m, &choice).unwrap();
    let b = mda_nested_partitioned_interval(&p, row, &m, &choice).unwrap();
    assert_eq!(a, b);
    assert!(m.is_included_in(&a.mask_used));
}

#[test]
fn smallest_superset_when_no_calibration_row_fits() {
    // calibration masks {01, 11}; test mask 10 has no contained calibration mask
    let masks = vec![MaskPattern::from_bits(&[0, 1]); 30]
        .into_iter()
        .chain(vec![MaskPattern::from_bits(&[1, 1]); 10])
        .collect::<Vec<_>>();
    let x: Vec<f64> = (0..80).map(|i| (i % 7) as f64).collect();
    let y: Vec<f64> = (0..40).map(|i| (i % 5) as f64).collect();
    let cal = MaskedDataset::new(x, masks, y, 2).unwrap();
    let imp = fit_imputer(ImputerKind::Constant(0.0), &cal, &ImputeHyper::default()).unwrap();
    let lo = QuantileModel::linear(0.05, vec![0.0; 4], -1.0).unwrap();
    let hi = QuantileModel::linear(0.95, vec![0.0; 4], 1.0).unwrap();
    let p = MdaPipeline::from_parts(imp, lo, hi, cal, 0.1).unwrap();
    let m = MaskPattern::from_bits(&[1, 0]);
    let iv =
        mda_nested_partitioned_interval(&p, &[0.0, 0.0], &m, &PatternChoice::Smallest).unwrap();
    assert_eq!(iv.mask_used, MaskPattern::ones(2));
    assert_eq!(iv.cal_subset_size, 40);
    assert!(mda_exact_interval(&p, &[0.0, 0.0], &m)
        .unwrap()
        .is_infinite());
}

#[test]
fn rejects_mismatched_levels() {
    let cal = one_dim(&[0.0, 1.0], &[0, 0], &[0.0, 1.0]);
    let imp = fit_imputer(ImputerKind::Mean, &cal, &ImputeHyper::default()).unwrap();
    let lo = QuantileModel::linear(0.1, vec![0.0; 2], 0.0).unwrap();
    let hi = QuantileModel::linear(0.9, vec![0.0; 2], 0.0).unwrap();
    assert!(MdaPipeline::from_parts(imp, lo, hi, cal, 0.1).is_err());
}

/// Rank of the test score among the augmented calibration scores of its mask
/// class is uniform when calibration rows with masks inside the class are
/// exchangeable with the test row.
#[test]
fn exact_test_rank_is_uniform_within_mask_class() {
    let params = GlmParams::reference(3).unwrap();
    let mcar = McarSpec::new(0.2);
    let train = generate_glm_dataset(&params, 400, &mcar, 21).unwrap();
    let split = split_train_cal(400, 0.5, 21).unwrap();
    let base = MdaPipeline::fit(&train, &split, &PipelineConfig::default()).unwrap();
    let (q_low, q_upp) = base.quantile_models();
    let m = MaskPattern::from_bits(&[1, 0, 0]);
    let per_trial = 9;
    let trials = 2000;
    let mut counts = vec![0usize; per_trial + 1];
    for t in 0..trials {
        // rejection-sample rows whose mask lies inside the class
        let pool = generate_glm_dataset(&params, 60, &mcar, 10_000 + t as u64).unwrap();
        let keep: Vec<usize> = (0..pool.n())
            .filter(|&i| pool.mask(i).is_included_in(&m))
            .take(per_trial + 1)
            .collect();
        assert_eq!(keep.len(), per_trial + 1);
        let cal = pool.subset(&keep[..per_trial]);
        let test_row = keep[per_trial];
        let p = MdaPipeline::from_parts(
            base.imputer().clone(),
            q_low.clone(),
            q_upp.clone(),
            cal,
            0.1,
        )
        .unwrap();
        let scores = p.exact_scores(&m).unwrap();
        // the test row's own mask lies inside the class; it is scored under `m`
        let one = pool.subset(&[test_row]);
        let p_test = MdaPipeline::from_parts(
            base.imputer().clone(),
            q_low.clone(),
            q_upp.clone(),
            one,
            0.1,
        )
        .unwrap();
        let test_score = p_test.exact_scores(&m).unwrap()[0];
        let rank = scores.iter().filter(|&&s| s < test_score).count();
        counts[rank] += 1;
    }
    let expected = trials as f64 / (per_trial + 1) as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let crit = ChiSquared::new(per_trial as f64)
        .unwrap()
        .inverse_cdf(0.999);
    assert!(chi2 < crit, "chi2 {chi2} >= {crit}, counts {counts:?}");
    // the corrected quantile covers the test score with the rank-exact probability
    let k = ((0.9f64 * (per_trial + 1) as f64) - 1e-10).ceil() as usize;
    let covered: usize = counts[..k].iter().sum();
    let p_hat = covered as f64 / trials as f64;
    let p_exact = k as f64 / (per_trial + 1) as f64;
    assert!((p_hat - p_exact).abs() < 4.0 * (p_exact * (1.0 - p_exact) / trials as f64).sqrt());
}
