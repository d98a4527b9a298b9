//! Conformal prediction with missing-data augmentation (CP-MDA).
//!
//! Calibration rows are additionally masked so that their pattern matches the
//! test pattern. `Exact` keeps only the rows whose mask is contained in the
//! test mask and re-masks them with it; `Nested` keeps every row and masks it
//! with the union of both patterns, moving the test point's quantile
//! predictions into the score bags. The partitioned variant restricts the
//! nested bags to a single augmented pattern.
//!
//! Calibration work depends only on the test mask, so batch prediction groups
//! test rows by mask and reuses it. A single-point call is a batch of one and
//! returns bit-identical results.

use std::collections::BTreeMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal_core::{
    bounded, corrected_lower_quantile, corrected_upper_quantile, correction_rank, cqr_score,
    fit_score_function, ordered, widen, PipelineConfig, ScoreFunction, ScoreKind,
};
use crate::data_model::{MaskPattern, MaskedDataset, PredictionInterval, SplitIndices};
use crate::error::{check_alpha, check_len, Error, Result};
use crate::imputation::Imputer;
use crate::quantile_regression::{featurize_into, QuantileModel};
use crate::rng;

/// Fitted imputer and quantile pair plus the held-out calibration rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdaPipeline {
    imputer: Imputer,
    q_low: QuantileModel,
    q_upp: QuantileModel,
    cal: MaskedDataset,
    alpha: f64,
}

/// Which calibrator to apply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdaMethod {
    Exact,
    Nested,
    NestedPartitioned(PatternChoice),
}

/// How the partitioned variant picks the augmented pattern whose sub-bag is used.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternChoice {
    /// The test mask when some calibration mask is contained in it, otherwise
    /// the occurring augmented pattern with the fewest missing entries.
    #[default]
    Smallest,
    /// A given pattern, which must contain the test mask.
    Fixed(MaskPattern),
    /// An occurring pattern drawn with probability proportional to its
    /// sub-bag size.
    RandomByCardinality { seed: u64 },
}

/// The two score bags of the nested calibrator for one test point.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedBags {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Augmented mask of each calibration row: union of its mask and the test mask.
    pub masks: Vec<MaskPattern>,
}

/// Exact calibration for one test mask.
#[derive(Debug, Clone)]
struct ExactCal {
    scores: Vec<f64>,
}

/// Nested calibration for one test mask: distinct augmented patterns, the
/// pattern of each calibration row, and the row scores under it.
#[derive(Debug, Clone)]
struct NestedCal {
    patterns: Vec<MaskPattern>,
    pattern_of: Vec<usize>,
    scores: Vec<f64>,
    /// Whether some calibration mask is contained in the test mask.
    has_subset: bool,
}

impl MdaPipeline {
    /// Fits the imputer and the `alpha/2`, `1 - alpha/2` quantile models on
    /// the training rows and keeps the calibration rows aside.
    pub fn fit(data: &MaskedDataset, split: &SplitIndices, cfg: &PipelineConfig) -> Result<Self> {
        let cfg = PipelineConfig {
            score: ScoreKind::Cqr,
            ..cfg.clone()
        };
        let train = data.subset(&split.train);
        let (imputer, score) = fit_score_function(&train, &cfg)?;
        let ScoreFunction::Cqr { q_low, q_upp } = score else {
            unreachable!("score kind forced to cqr")
        };
        MdaPipeline::from_parts(imputer, q_low, q_upp, data.subset(&split.cal), cfg.alpha)
    }

    pub fn from_parts(
        imputer: Imputer,
        q_low: QuantileModel,
        q_upp: QuantileModel,
        cal: MaskedDataset,
        alpha: f64,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        let d = imputer.dim();
        check_len(d, cal.dim())?;
        check_len(2 * d, q_low.n_features())?;
        check_len(2 * d, q_upp.n_features())?;
        if (q_low.tau() - alpha / 2.0).abs() > 1e-12
            || (q_low.tau() + q_upp.tau() - 1.0).abs() > 1e-12
        {
            return Err(Error::invalid(
                "q_low, q_upp",
                format!(
                    "levels must be alpha/2 and 1 - alpha/2, got {} and {}",
                    q_low.tau(),
                    q_upp.tau()
                ),
            ));
        }
        Ok(MdaPipeline {
            imputer,
            q_low,
            q_upp,
            cal,
            alpha,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn imputer(&self) -> &Imputer {
        &self.imputer
    }

    pub fn quantile_models(&self) -> (&QuantileModel, &QuantileModel) {
        (&self.q_low, &self.q_upp)
    }

    pub fn calibration(&self) -> &MaskedDataset {
        &self.cal
    }

    fn check_point(&self, row: &[f64], m: &MaskPattern) -> Result<()> {
        check_len(self.cal.dim(), row.len())?;
        check_len(self.cal.dim(), m.len())
    }

    /// Ordered quantile band of `row` seen through mask `m`.
    fn band(&self, row: &[f64], m: &MaskPattern, buf: &mut [f64]) -> Result<(f64, f64)> {
        featurize_into(&self.imputer, row, m, buf)?;
        Ok(ordered(
            self.q_low.predict_unchecked(buf),
            self.q_upp.predict_unchecked(buf),
        ))
    }

    fn cal_score(&self, k: usize, m: &MaskPattern, buf: &mut [f64]) -> Result<f64> {
        let (lo, hi) = self.band(self.cal.row(k), m, buf)?;
        Ok(cqr_score(lo, hi, self.cal.response(k)))
    }

    fn exact_cal(&self, m: &MaskPattern) -> Result<ExactCal> {
        let mut buf = vec![0.0; 2 * self.cal.dim()];
        let mut scores = Vec::new();
        for k in 0..self.cal.n() {
            if self.cal.mask(k).is_included_in(m) {
                // additional masking: every retained row now carries exactly `m`
                debug_assert_eq!(&self.cal.mask(k).union(m), m);
                scores.push(self.cal_score(k, m, &mut buf)?);
            }
        }
        Ok(ExactCal { scores })
    }

    fn nested_cal(&self, m: &MaskPattern) -> Result<NestedCal> {
        let mut buf = vec![0.0; 2 * self.cal.dim()];
        let mut index: BTreeMap<MaskPattern, usize> = BTreeMap::new();
        let mut patterns = Vec::new();
        let mut pattern_of = Vec::with_capacity(self.cal.n());
        let mut scores = Vec::with_capacity(self.cal.n());
        let mut has_subset = false;
        for k in 0..self.cal.n() {
            let aug = self.cal.mask(k).union(m);
            has_subset |= &aug == m;
            let id = *index.entry(aug.clone()).or_insert_with(|| {
                patterns.push(aug.clone());
                patterns.len() - 1
            });
            pattern_of.push(id);
            scores.push(self.cal_score(k, &aug, &mut buf)?);
        }
        Ok(NestedCal {
            patterns,
            pattern_of,
            scores,
            has_subset,
        })
    }

    fn exact_predict(
        &self,
        c: &ExactCal,
        row: &[f64],
        m: &MaskPattern,
        level: f64,
    ) -> Result<PredictionInterval> {
        let (lo, hi) = self.band(row, m, &mut vec![0.0; 2 * self.cal.dim()])?;
        let q = corrected_upper_quantile(&c.scores, level)?;
        if q.is_infinite() {
            log::debug!(
                "exact calibration for mask {m} has {} rows; interval is unbounded",
                c.scores.len()
            );
        }
        Ok(widen(lo, hi, q, m.clone(), c.scores.len()))
    }

    /// Test-point bands under each augmented pattern.
    fn pattern_bands(&self, c: &NestedCal, row: &[f64]) -> Result<Vec<(f64, f64)>> {
        let mut buf = vec![0.0; 2 * self.cal.dim()];
        c.patterns
            .iter()
            .map(|p| self.band(row, p, &mut buf))
            .collect()
    }

    fn nested_bags(&self, c: &NestedCal, row: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let bands = self.pattern_bands(c, row)?;
        Ok(c.pattern_of
            .iter()
            .zip(&c.scores)
            .map(|(&p, &s)| (bands[p].0 - s, bands[p].1 + s))
            .unzip())
    }

    fn nested_predict(
        &self,
        c: &NestedCal,
        row: &[f64],
        m: &MaskPattern,
    ) -> Result<PredictionInterval> {
        let (lower, upper) = self.nested_bags(c, row)?;
        bag_interval(&lower, &upper, self.alpha, m.clone())
    }

    fn partitioned_predict(
        &self,
        c: &NestedCal,
        row: &[f64],
        m: &MaskPattern,
        choice: &PatternChoice,
    ) -> Result<PredictionInterval> {
        let chosen = match choice {
            PatternChoice::Smallest => {
                if c.has_subset {
                    m.clone()
                } else {
                    match c
                        .patterns
                        .iter()
                        .min_by(|a, b| a.pattern_size().cmp(&b.pattern_size()).then(a.cmp(b)))
                    {
                        Some(p) => p.clone(),
                        None => return Ok(PredictionInterval::unbounded(m.clone(), 0)),
                    }
                }
            }
            PatternChoice::Fixed(p) => {
                check_len(m.len(), p.len())?;
                if !m.is_included_in(p) {
                    return Err(Error::invalid(
                        "pattern_choice",
                        format!("{p} does not contain the test mask {m}"),
                    ));
                }
                p.clone()
            }
            PatternChoice::RandomByCardinality { seed } => {
                if c.scores.is_empty() {
                    return Ok(PredictionInterval::unbounded(m.clone(), 0));
                }
                // each row is equally likely, so its pattern is drawn with
                // probability proportional to the sub-bag size
                let k = rng::from_seed(*seed).random_range(0..c.scores.len());
                c.patterns[c.pattern_of[k]].clone()
            }
        };
        let Some(id) = c.patterns.iter().position(|p| *p == chosen) else {
            return Ok(PredictionInterval::unbounded(chosen, 0));
        };
        let (lo, hi) = self.band(row, &chosen, &mut vec![0.0; 2 * self.cal.dim()])?;
        let (lower, upper): (Vec<f64>, Vec<f64>) = c
            .pattern_of
            .iter()
            .zip(&c.scores)
            .filter(|(&p, _)| p == id)
            .map(|(_, &s)| (lo - s, hi + s))
            .unzip();
        bag_interval(&lower, &upper, self.alpha, chosen)
    }

    /// Exact interval with the correction taken at `level` instead of the
    /// training level; the quantile models are unchanged.
    pub fn exact_interval_at(
        &self,
        row: &[f64],
        m: &MaskPattern,
        level: f64,
    ) -> Result<PredictionInterval> {
        self.check_point(row, m)?;
        self.exact_predict(&self.exact_cal(m)?, row, m, level)
    }

    /// Augmented calibration scores used by the exact calibrator for mask `m`.
    pub fn exact_scores(&self, m: &MaskPattern) -> Result<Vec<f64>> {
        check_len(self.cal.dim(), m.len())?;
        Ok(self.exact_cal(m)?.scores)
    }

    /// Predicts every row of `data` under its own mask. Results equal
    /// single-point calls, except that `RandomByCardinality` draws row `i`
    /// with seed `derive_seed(seed, i)` so rows get independent draws.
    pub fn predict_batch(
        &self,
        method: &MdaMethod,
        data: &MaskedDataset,
    ) -> Result<Vec<PredictionInterval>> {
        check_len(self.cal.dim(), data.dim())?;
        let mut groups: BTreeMap<&MaskPattern, Vec<usize>> = BTreeMap::new();
        for i in 0..data.n() {
            groups.entry(data.mask(i)).or_default().push(i);
        }
        let groups: Vec<(&MaskPattern, Vec<usize>)> = groups.into_iter().collect();
        let per_group: Vec<Vec<(usize, PredictionInterval)>> = groups
            .par_iter()
            .map(|(m, rows)| {
                let row_seed = |i: usize| match method {
                    MdaMethod::NestedPartitioned(PatternChoice::RandomByCardinality { seed }) => {
                        PatternChoice::RandomByCardinality {
                            seed: rng::derive_seed(*seed, i as u64),
                        }
                    }
                    MdaMethod::NestedPartitioned(c) => c.clone(),
                    _ => PatternChoice::Smallest,
                };
                match method {
                    MdaMethod::Exact => {
                        let c = self.exact_cal(m)?;
                        rows.par_iter()
                            .map(|&i| Ok((i, self.exact_predict(&c, data.row(i), m, self.alpha)?)))
                            .collect()
                    }
                    MdaMethod::Nested => {
                        let c = self.nested_cal(m)?;
                        rows.par_iter()
                            .map(|&i| Ok((i, self.nested_predict(&c, data.row(i), m)?)))
                            .collect()
                    }
                    MdaMethod::NestedPartitioned(_) => {
                        let c = self.nested_cal(m)?;
                        rows.par_iter()
                            .map(|&i| {
                                Ok((
                                    i,
                                    self.partitioned_predict(&c, data.row(i), m, &row_seed(i))?,
                                ))
                            })
                            .collect()
                    }
                }
            })
            .collect::<Result<_>>()?;
        let mut out: Vec<Option<PredictionInterval>> = vec![None; data.n()];
        for (i, iv) in per_group.into_iter().flatten() {
            out[i] = Some(iv);
        }
        Ok(out
            .into_iter()
            .map(|iv| iv.expect("every row belongs to a group"))
            .collect())
    }
}

/// `[lower corrected quantile of the lower bag, upper corrected quantile of the upper bag]`.
fn bag_interval(
    lower: &[f64],
    upper: &[f64],
    alpha: f64,
    mask: MaskPattern,
) -> Result<PredictionInterval> {
    let n = lower.len();
    if correction_rank(n, alpha).is_none() {
        return Ok(PredictionInterval::unbounded(mask, n));
    }
    let lo = corrected_lower_quantile(lower, alpha)?;
    let hi = corrected_upper_quantile(upper, alpha)?;
    Ok(bounded(lo, hi, mask, n))
}

/// CP-MDA-Exact interval for one test point.
pub fn mda_exact_interval(
    p: &MdaPipeline,
    row: &[f64],
    m: &MaskPattern,
) -> Result<PredictionInterval> {
    p.check_point(row, m)?;
    p.exact_predict(&p.exact_cal(m)?, row, m, p.alpha)
}

/// CP-MDA-Nested interval for one test point.
pub fn mda_nested_interval(
    p: &MdaPipeline,
    row: &[f64],
    m: &MaskPattern,
) -> Result<PredictionInterval> {
    p.check_point(row, m)?;
    p.nested_predict(&p.nested_cal(m)?, row, m)
}

/// Nested interval restricted to the calibration rows whose augmented mask
/// equals the chosen pattern. The returned `mask_used` is that pattern.
pub fn mda_nested_partitioned_interval(
    p: &MdaPipeline,
    row: &[f64],
    m: &MaskPattern,
    choice: &PatternChoice,
) -> Result<PredictionInterval> {
    p.check_point(row, m)?;
    p.partitioned_predict(&p.nested_cal(m)?, row, m, choice)
}

/// The nested score bags for one test point.
pub fn mda_nested_bags(p: &MdaPipeline, row: &[f64], m: &MaskPattern) -> Result<NestedBags> {
    p.check_point(row, m)?;
    let c = p.nested_cal(m)?;
    let (lower, upper) = p.nested_bags(&c, row)?;
    Ok(NestedBags {
        lower,
        upper,
        masks: c
            .pattern_of
            .iter()
            .map(|&i| c.patterns[i].clone())
            .collect(),
    })
}
