//! Split conformal calibration on top of impute-then-predict models.
//!
//! The correction is the `k`-th smallest calibration score with
//! `k = ceil((1 - alpha)(n + 1))`, and `+inf` when `k > n`. Infinite
//! corrections are not errors; they produce unbounded intervals.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{MaskPattern, MaskedDataset, PredictionInterval, SplitIndices};
use crate::error::{check_alpha, check_len, Error, Result};
use crate::gaussian_oracle::{oracle_mean, GlmParams};
use crate::imputation::{fit_imputer, ImputeHyper, Imputer, ImputerKind};
use crate::quantile_regression::{
    featurize_dataset, featurize_into, fit_quantile_model, QrHyper, QrKind, QuantileModel,
};

/// Slack subtracted before the ceiling so that `(1 - alpha)(n + 1)` landing on
/// an integer up to rounding error is not pushed to the next rank.
const RANK_EPS: f64 = 1e-10;

/// Rank `k = ceil((1 - alpha)(n + 1))` of the corrected quantile among `n`
/// scores, or `None` when `k > n`.
pub fn correction_rank(n: usize, alpha: f64) -> Option<usize> {
    let k = (((1.0 - alpha) * (n as f64 + 1.0)) - RANK_EPS)
        .ceil()
        .max(1.0) as usize;
    (k <= n).then_some(k)
}

/// `k`-th smallest score, `k = ceil((1 - alpha)(n + 1))`; `+inf` if `k > n`.
pub fn corrected_upper_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let Some(k) = correction_rank(scores.len(), alpha) else {
        return Ok(f64::INFINITY);
    };
    let mut buf = scores.to_vec();
    Ok(kth_smallest(&mut buf, k))
}

/// Lower-tail counterpart: `-corrected_upper_quantile(-scores)`, `-inf` if the rank exceeds `n`.
pub fn corrected_lower_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let Some(k) = correction_rank(scores.len(), alpha) else {
        return Ok(f64::NEG_INFINITY);
    };
    let mut buf: Vec<f64> = scores.iter().map(|s| -s).collect();
    Ok(-kth_smallest(&mut buf, k))
}

/// 1-based order statistic; reorders `buf`.
pub(crate) fn kth_smallest(buf: &mut [f64], k: usize) -> f64 {
    debug_assert!(k >= 1 && k <= buf.len());
    debug_assert!(buf.iter().all(|s| !s.is_nan()));
    *buf.select_nth_unstable_by(k - 1, f64::total_cmp).1
}

/// `max(q_low - y, y - q_upp)`; negative iff `y` lies strictly inside.
#[inline]
pub fn cqr_score(q_low: f64, q_upp: f64, y: f64) -> f64 {
    (q_low - y).max(y - q_upp)
}

#[inline]
pub fn abs_residual_score(yhat: f64, y: f64) -> f64 {
    (y - yhat).abs()
}

/// Builds `[lo - q, hi + q]`. A negative correction can cross the bounds,
/// which describes an empty set; it is returned as the zero-length interval
/// at the midpoint.
pub(crate) fn widen(
    lo: f64,
    hi: f64,
    q: f64,
    mask: MaskPattern,
    cal_size: usize,
) -> PredictionInterval {
    if q == f64::INFINITY {
        return PredictionInterval::unbounded(mask, cal_size);
    }
    bounded(lo - q, hi + q, mask, cal_size)
}

pub(crate) fn bounded(lo: f64, hi: f64, mask: MaskPattern, cal_size: usize) -> PredictionInterval {
    if lo <= hi {
        PredictionInterval::new(lo, hi, mask, cal_size)
    } else {
        let mid = 0.5 * (lo + hi);
        PredictionInterval::new(mid, mid, mask, cal_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Cqr,
    AbsResidual,
}

/// Point predictor used by the absolute-residual score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MeanModel {
    /// Least squares on mask-concatenated imputed features.
    Linear { weights: Vec<f64>, intercept: f64 },
    /// Conditional mean `E[Y | X_obs(m), M = m]` of a known Gaussian model.
    Oracle(GlmParams),
}

impl MeanModel {
    /// Minimum-norm least-squares fit of `y` on the rows of `x` with an intercept.
    pub fn fit_linear(x: &DMatrix<f64>, y: &[f64]) -> Result<Self> {
        check_len(x.nrows(), y.len())?;
        if x.nrows() == 0 {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        let n = x.nrows() as f64;
        let col_means: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
        let y_mean = y.iter().sum::<f64>() / n;
        let xc = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - col_means[j]);
        let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
        let scale = xc.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let w = xc
            .svd(true, true)
            .solve(&yc, 1e-10 * scale)
            .map_err(|e| Error::invalid("x", e.to_string()))?;
        let intercept = y_mean - w.iter().zip(&col_means).map(|(a, b)| a * b).sum::<f64>();
        Ok(MeanModel::Linear {
            weights: w.iter().copied().collect(),
            intercept,
        })
    }

    pub fn predict(&self, imp: &Imputer, row: &[f64], m: &MaskPattern) -> Result<f64> {
        match self {
            MeanModel::Linear { weights, intercept } => {
                let mut z = vec![0.0; 2 * imp.dim()];
                featurize_into(imp, row, m, &mut z)?;
                check_len(weights.len(), z.len())?;
                Ok(intercept + weights.iter().zip(&z).map(|(w, x)| w * x).sum::<f64>())
            }
            MeanModel::Oracle(params) => oracle_mean(params, m, row),
        }
    }
}

/// A conformity score together with the models it is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScoreFunction {
    Cqr {
        q_low: QuantileModel,
        q_upp: QuantileModel,
    },
    AbsResidual {
        mean: MeanModel,
    },
}

impl ScoreFunction {
    pub fn cqr(q_low: QuantileModel, q_upp: QuantileModel) -> Result<Self> {
        if !(q_low.tau() < q_upp.tau()) {
            return Err(Error::invalid(
                "q_low",
                "lower level must be below the upper level",
            ));
        }
        Ok(ScoreFunction::Cqr { q_low, q_upp })
    }

    pub fn kind(&self) -> ScoreKind {
        match self {
            ScoreFunction::Cqr { .. } => ScoreKind::Cqr,
            ScoreFunction::AbsResidual { .. } => ScoreKind::AbsResidual,
        }
    }

    /// Uncorrected band `(lo, hi)` at `(row, m)`; crossed quantiles are reordered.
    pub fn band(&self, imp: &Imputer, row: &[f64], m: &MaskPattern) -> Result<(f64, f64)> {
        match self {
            ScoreFunction::Cqr { q_low, q_upp } => {
                let mut z = vec![0.0; 2 * imp.dim()];
                featurize_into(imp, row, m, &mut z)?;
                Ok(ordered(q_low.predict(&z)?, q_upp.predict(&z)?))
            }
            ScoreFunction::AbsResidual { mean } => {
                let yhat = mean.predict(imp, row, m)?;
                Ok((yhat, yhat))
            }
        }
    }

    pub fn score(&self, imp: &Imputer, row: &[f64], m: &MaskPattern, y: f64) -> Result<f64> {
        let (lo, hi) = self.band(imp, row, m)?;
        Ok(match self {
            ScoreFunction::Cqr { .. } => cqr_score(lo, hi, y),
            ScoreFunction::AbsResidual { .. } => abs_residual_score(lo, y),
        })
    }
}

#[inline]
pub(crate) fn ordered(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Calibration scores and the miscoverage level they are used at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    scores: Vec<f64>,
    alpha: f64,
}

impl CalibrationRecord {
    pub fn new(scores: Vec<f64>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid(
                "scores",
                "calibration scores must be finite",
            ));
        }
        Ok(CalibrationRecord { scores, alpha })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn correction(&self) -> f64 {
        corrected_upper_quantile(&self.scores, self.alpha).expect("alpha validated on construction")
    }
}

/// Settings for fitting an impute-then-predict pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub alpha: f64,
    pub imputer: ImputerKind,
    pub impute_hyper: ImputeHyper,
    pub score: ScoreKind,
    pub qr: QrKind,
    pub qr_hyper: QrHyper,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            alpha: 0.1,
            imputer: ImputerKind::IterativeRidge,
            impute_hyper: ImputeHyper::default(),
            score: ScoreKind::Cqr,
            qr: QrKind::Linear,
            qr_hyper: QrHyper::default(),
        }
    }
}

/// Fits the imputer on `train` and the score models on its imputed,
/// mask-concatenated rows.
pub fn fit_score_function(
    train: &MaskedDataset,
    cfg: &PipelineConfig,
) -> Result<(Imputer, ScoreFunction)> {
    check_alpha(cfg.alpha)?;
    let imputer = fit_imputer(cfg.imputer, train, &cfg.impute_hyper)?;
    let x = featurize_dataset(&imputer, train)?;
    let score = match cfg.score {
        ScoreKind::Cqr => {
            let lo = fit_quantile_model(
                &x,
                train.responses(),
                cfg.alpha / 2.0,
                cfg.qr,
                &cfg.qr_hyper,
            )?;
            let hi = fit_quantile_model(
                &x,
                train.responses(),
                1.0 - cfg.alpha / 2.0,
                cfg.qr,
                &cfg.qr_hyper,
            )?;
            ScoreFunction::cqr(lo, hi)?
        }
        ScoreKind::AbsResidual => ScoreFunction::AbsResidual {
            mean: MeanModel::fit_linear(&x, train.responses())?,
        },
    };
    Ok((imputer, score))
}

/// Impute-then-predict model with a single marginal conformal correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItpPipeline {
    imputer: Imputer,
    score: ScoreFunction,
    record: CalibrationRecord,
    correction: f64,
}

/// Fits on `split.train` and calibrates on `split.cal`.
pub fn itp_conformalize_fit(
    data: &MaskedDataset,
    split: &SplitIndices,
    cfg: &PipelineConfig,
) -> Result<ItpPipeline> {
    let train = data.subset(&split.train);
    let cal = data.subset(&split.cal);
    let (imputer, score) = fit_score_function(&train, cfg)?;
    ItpPipeline::calibrate(imputer, score, &cal, cfg.alpha)
}

impl ItpPipeline {
    /// Calibrates already-fitted components on `cal`.
    pub fn calibrate(
        imputer: Imputer,
        score: ScoreFunction,
        cal: &MaskedDataset,
        alpha: f64,
    ) -> Result<Self> {
        check_len(imputer.dim(), cal.dim())?;
        let scores = calibration_scores(&imputer, &score, cal)?;
        let record = CalibrationRecord::new(scores, alpha)?;
        let correction = record.correction();
        Ok(ItpPipeline {
            imputer,
            score,
            record,
            correction,
        })
    }

    pub fn imputer(&self) -> &Imputer {
        &self.imputer
    }

    pub fn score_function(&self) -> &ScoreFunction {
        &self.score
    }

    pub fn record(&self) -> &CalibrationRecord {
        &self.record
    }

    /// The conformal correction `Q`, possibly `+inf`.
    pub fn correction(&self) -> f64 {
        self.correction
    }

    pub fn predict(&self, row: &[f64], m: &MaskPattern) -> Result<PredictionInterval> {
        self.predict_with(row, m, self.correction, self.record.len())
    }

    fn predict_with(
        &self,
        row: &[f64],
        m: &MaskPattern,
        q: f64,
        n: usize,
    ) -> Result<PredictionInterval> {
        let (lo, hi) = self.score.band(&self.imputer, row, m)?;
        Ok(widen(lo, hi, q, m.clone(), n))
    }

    /// Predicts every row of `data` under its own mask, in parallel.
    pub fn predict_batch(&self, data: &MaskedDataset) -> Result<Vec<PredictionInterval>> {
        (0..data.n())
            .into_par_iter()
            .map(|i| self.predict(data.row(i), data.mask(i)))
            .collect()
    }
}

/// Alias of [`ItpPipeline::predict`].
pub fn itp_conformalize_predict(
    p: &ItpPipeline,
    row: &[f64],
    m: &MaskPattern,
) -> Result<PredictionInterval> {
    p.predict(row, m)
}

pub(crate) fn calibration_scores(
    imp: &Imputer,
    score: &ScoreFunction,
    cal: &MaskedDataset,
) -> Result<Vec<f64>> {
    (0..cal.n())
        .map(|i| score.score(imp, cal.row(i), cal.mask(i), cal.response(i)))
        .collect()
}

/// Corrections computed separately for each pattern size of the calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeGroupCalibration {
    by_size: BTreeMap<usize, CalibrationRecord>,
    marginal: CalibrationRecord,
}

impl SizeGroupCalibration {
    pub fn groups(&self) -> &BTreeMap<usize, CalibrationRecord> {
        &self.by_size
    }

    /// Record used for a test mask with `size` missing entries; sizes absent
    /// from the calibration set fall back to the marginal record.
    pub fn record_for(&self, size: usize) -> &CalibrationRecord {
        self.by_size.get(&size).unwrap_or(&self.marginal)
    }

    pub fn predict(
        &self,
        p: &ItpPipeline,
        row: &[f64],
        m: &MaskPattern,
    ) -> Result<PredictionInterval> {
        let rec = self.record_for(m.pattern_size());
        p.predict_with(row, m, rec.correction(), rec.len())
    }

    pub fn predict_batch(
        &self,
        p: &ItpPipeline,
        data: &MaskedDataset,
    ) -> Result<Vec<PredictionInterval>> {
        (0..data.n())
            .into_par_iter()
            .map(|i| self.predict(p, data.row(i), data.mask(i)))
            .collect()
    }
}

/// Partitions the calibration scores of `cal` by pattern size.
pub fn groupwise_calibrate_by_pattern_size(
    p: &ItpPipeline,
    cal: &MaskedDataset,
    alpha: f64,
) -> Result<SizeGroupCalibration> {
    let scores = calibration_scores(&p.imputer, &p.score, cal)?;
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (i, s) in scores.iter().enumerate() {
        groups
            .entry(cal.mask(i).pattern_size())
            .or_default()
            .push(*s);
    }
    let by_size = groups
        .into_iter()
        .map(|(k, v)| Ok((k, CalibrationRecord::new(v, alpha)?)))
        .collect::<Result<_>>()?;
    Ok(SizeGroupCalibration {
        by_size,
        marginal: CalibrationRecord::new(scores, alpha)?,
    })
}
