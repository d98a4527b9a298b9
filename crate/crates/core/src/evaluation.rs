//! Coverage/length estimators and the repeated-experiment runner.
//!
//! Each repetition fits every requested method once and evaluates it on two
//! test sets: a marginal set drawn like the data, and a per-pattern set with a
//! fixed number of rows per mask (or per pattern size) built by masking
//! complete draws. Repetitions run in parallel and are merged in index order,
//! so results do not depend on the thread count.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cli_io::inject_mcar;
use crate::conformal_core::{
    fit_score_function, groupwise_calibrate_by_pattern_size, ItpPipeline, MeanModel,
    PipelineConfig, ScoreFunction, ScoreKind,
};
use crate::cp_mda::{MdaMethod, MdaPipeline, PatternChoice};
use crate::data_model::{split_train_cal, MaskPattern, MaskedDataset, PredictionInterval};
use crate::error::{check_alpha, check_len, Error, Result};
use crate::gaussian_oracle::{
    generate_glm_dataset, generate_with_masks, GlmParams, MaskMoments, REFERENCE_BETA,
};
use crate::imputation::{ImputeHyper, ImputerKind};
use crate::missingness::{enumerate_masks, sample_eval_patterns, McarSpec};
use crate::quantile_regression::{featurize_dataset, QrHyper, QrKind};
use crate::rng::derive_seed;

/// Report group: the whole test set, one mask, or one pattern size.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupKey {
    Marginal,
    Mask(MaskPattern),
    Size(usize),
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupKey::Marginal => f.write_str("marginal"),
            GroupKey::Mask(m) => write!(f, "mask:{m}"),
            GroupKey::Size(s) => write!(f, "size:{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub n_test: usize,
    pub coverage: f64,
    /// Mean length over finite intervals; `+inf` when every interval is unbounded.
    pub mean_length: f64,
    /// Mean length with unbounded intervals replaced by the clamp value.
    pub clamped_mean_length: Option<f64>,
    pub infinite_fraction: f64,
}

/// Coverage and length per group; the mask groups and the size groups each
/// partition the test set.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub groups: BTreeMap<GroupKey, GroupStats>,
}

impl CoverageReport {
    pub fn marginal(&self) -> &GroupStats {
        &self.groups[&GroupKey::Marginal]
    }

    pub fn get(&self, key: &GroupKey) -> Option<&GroupStats> {
        self.groups.get(key)
    }

    pub fn masks(&self) -> impl Iterator<Item = (&MaskPattern, &GroupStats)> {
        self.groups.iter().filter_map(|(k, v)| match k {
            GroupKey::Mask(m) => Some((m, v)),
            _ => None,
        })
    }

    /// Minimum per-mask coverage.
    pub fn lowest_mask_coverage(&self) -> Option<f64> {
        self.masks().map(|(_, g)| g.coverage).reduce(f64::min)
    }

    pub fn highest_mask_coverage(&self) -> Option<f64> {
        self.masks().map(|(_, g)| g.coverage).reduce(f64::max)
    }
}

/// Coverage report for `intervals` against `y`, grouped by `masks`.
pub fn coverage_report(
    intervals: &[PredictionInterval],
    y: &[f64],
    masks: &[MaskPattern],
) -> Result<CoverageReport> {
    coverage_report_clamped(intervals, y, masks, None)
}

/// As [`coverage_report`], also averaging lengths with unbounded intervals
/// counted as `clamp`.
pub fn coverage_report_clamped(
    intervals: &[PredictionInterval],
    y: &[f64],
    masks: &[MaskPattern],
    clamp: Option<f64>,
) -> Result<CoverageReport> {
    check_len(intervals.len(), y.len())?;
    check_len(intervals.len(), masks.len())?;
    let mut members: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (i, m) in masks.iter().enumerate() {
        members.entry(GroupKey::Marginal).or_default().push(i);
        members
            .entry(GroupKey::Mask(m.clone()))
            .or_default()
            .push(i);
        members
            .entry(GroupKey::Size(m.pattern_size()))
            .or_default()
            .push(i);
    }
    let groups = members
        .into_iter()
        .map(|(k, idx)| (k, group_stats(&idx, intervals, y, clamp)))
        .collect();
    Ok(CoverageReport { groups })
}

fn group_stats(
    idx: &[usize],
    intervals: &[PredictionInterval],
    y: &[f64],
    clamp: Option<f64>,
) -> GroupStats {
    let n = idx.len() as f64;
    let covered = idx.iter().filter(|&&i| intervals[i].contains(y[i])).count();
    let finite: Vec<f64> = idx
        .iter()
        .map(|&i| intervals[i].length())
        .filter(|l| l.is_finite())
        .collect();
    let n_inf = idx.len() - finite.len();
    let mean_length = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    GroupStats {
        n_test: idx.len(),
        coverage: covered as f64 / n,
        mean_length,
        clamped_mean_length: clamp.map(|c| (finite.iter().sum::<f64>() + c * n_inf as f64) / n),
        infinite_fraction: n_inf as f64 / n,
    }
}

/// Methods the runner knows how to fit and evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Quantile regression fitted on train and calibration rows, uncalibrated.
    Qr,
    Cqr,
    CqrMdaExact,
    CqrMdaNested,
    CqrMdaNestedPartitioned,
    /// Absolute-residual split conformal around a mean predictor.
    MeanScp,
    /// As `mean_scp`, calibrated separately per pattern size.
    ScpByPatternSize,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Qr,
        Method::Cqr,
        Method::CqrMdaExact,
        Method::CqrMdaNested,
        Method::CqrMdaNestedPartitioned,
        Method::MeanScp,
        Method::ScpByPatternSize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Qr => "qr",
            Method::Cqr => "cqr",
            Method::CqrMdaExact => "cqr_mda_exact",
            Method::CqrMdaNested => "cqr_mda_nested",
            Method::CqrMdaNestedPartitioned => "cqr_mda_nested_partitioned",
            Method::MeanScp => "mean_scp",
            Method::ScpByPatternSize => "scp_by_pattern_size",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Gaussian linear generator. Without `beta` the reference coefficients are
/// truncated to `d` (default 3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub sigma_eps: f64,
    /// Common mean of every covariate.
    #[serde(default = "one")]
    pub mu: f64,
    /// Equicorrelation of the covariates.
    #[serde(default = "default_phi")]
    pub phi: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<OverrideConfig>,
}

/// Mask-specific covariate moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverrideConfig {
    pub mask: MaskPattern,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

fn default_phi() -> f64 {
    0.8
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d: None,
            beta: None,
            sigma_eps: 1.0,
            mu: 1.0,
            phi: 0.8,
            overrides: Vec::new(),
        }
    }
}

impl GeneratorConfig {
    pub fn with_dim(d: usize) -> Self {
        GeneratorConfig {
            d: Some(d),
            ..Default::default()
        }
    }

    pub fn params(&self) -> Result<GlmParams> {
        let beta = match (&self.beta, self.d) {
            (Some(b), Some(d)) if b.len() != d => {
                return Err(Error::Config(format!(
                    "generator.beta has {} entries but d = {d}",
                    b.len()
                )))
            }
            (Some(b), _) => b.clone(),
            (None, d) => {
                let d = d.unwrap_or(3);
                if d == 0 || d > REFERENCE_BETA.len() {
                    return Err(Error::Config(format!(
                        "generator.d = {d} needs an explicit beta"
                    )));
                }
                REFERENCE_BETA[..d].to_vec()
            }
        };
        let mut p = GlmParams::equicorrelated(beta, self.sigma_eps, self.mu, self.phi)?;
        let d = p.dim();
        for o in &self.overrides {
            if o.cov.len() != d || o.cov.iter().any(|r| r.len() != d) {
                return Err(Error::Config(format!(
                    "override for {} needs a {d}x{d} cov",
                    o.mask
                )));
            }
            let cov = nalgebra::DMatrix::from_fn(d, d, |i, j| o.cov[i][j]);
            p = p.with_override(
                o.mask.clone(),
                MaskMoments {
                    mean: o.mean.clone(),
                    cov,
                },
            )?;
        }
        Ok(p)
    }
}

/// CSV input. Loading happens in the CLI; the runner receives the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: std::path::PathBuf,
    pub target: String,
    #[serde(default = "default_na_tokens")]
    pub na_tokens: Vec<String>,
}

pub fn default_na_tokens() -> Vec<String> {
    vec![String::new(), "NA".into(), "NaN".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissingnessConfig {
    /// Per-cell MCAR probability.
    pub rate: f64,
    /// Columns eligible for masking; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<usize>>,
}

impl Default for MissingnessConfig {
    fn default() -> Self {
        MissingnessConfig {
            rate: 0.2,
            columns: None,
        }
    }
}

impl MissingnessConfig {
    pub fn spec(&self) -> McarSpec {
        match &self.columns {
            Some(c) => McarSpec::with_columns(self.rate, c.clone()),
            None => McarSpec::new(self.rate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodsConfig {
    pub list: Vec<Method>,
    pub alpha: f64,
    #[serde(default)]
    pub pattern_choice: PatternChoice,
}

impl Default for MethodsConfig {
    fn default() -> Self {
        MethodsConfig {
            list: vec![Method::Cqr, Method::CqrMdaExact, Method::CqrMdaNested],
            alpha: 0.1,
            pattern_choice: PatternChoice::Smallest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerPatternMode {
    /// Per mask when every mask can be listed (`d <= 3`), per size otherwise.
    Auto,
    PerMask,
    PerSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SizesConfig {
    pub train: usize,
    pub cal: usize,
    /// Marginal test rows.
    pub test: usize,
    /// Rows per mask or per size; 500 per mask and 100 per size when absent,
    /// 0 disables the per-pattern test set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_pattern: Option<usize>,
    #[serde(default = "auto_mode")]
    pub per_pattern_mode: PerPatternMode,
}

fn auto_mode() -> PerPatternMode {
    PerPatternMode::Auto
}

impl Default for SizesConfig {
    fn default() -> Self {
        SizesConfig {
            train: 500,
            cal: 250,
            test: 2000,
            per_pattern: None,
            per_pattern_mode: PerPatternMode::Auto,
        }
    }
}

impl SizesConfig {
    /// Resolved `(per_mask, count)`, or `None` when disabled.
    pub fn per_pattern_plan(&self, d: usize) -> Option<(bool, usize)> {
        let per_mask = match self.per_pattern_mode {
            PerPatternMode::Auto => d <= 3,
            PerPatternMode::PerMask => true,
            PerPatternMode::PerSize => false,
        };
        let count = self.per_pattern.unwrap_or(if per_mask { 500 } else { 100 });
        (count > 0).then_some((per_mask, count))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub repetitions: usize,
    /// Repetition `r` uses seed `seed + r`.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            repetitions: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputerName {
    Constant,
    Mean,
    IterativeRidge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputerConfig {
    pub kind: ImputerName,
    /// Fill value for the constant imputer.
    #[serde(default)]
    pub constant: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default = "default_sweeps")]
    pub max_sweeps: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_sweeps() -> usize {
    10
}

fn default_tol() -> f64 {
    1e-6
}

impl Default for ImputerConfig {
    fn default() -> Self {
        ImputerConfig {
            kind: ImputerName::IterativeRidge,
            constant: 0.0,
            lambda: None,
            max_sweeps: 10,
            tol: 1e-6,
        }
    }
}

impl ImputerConfig {
    pub fn kind(&self) -> ImputerKind {
        match self.kind {
            ImputerName::Constant => ImputerKind::Constant(self.constant),
            ImputerName::Mean => ImputerKind::Mean,
            ImputerName::IterativeRidge => ImputerKind::IterativeRidge,
        }
    }

    pub fn hyper(&self) -> ImputeHyper {
        ImputeHyper {
            lambda: self.lambda,
            max_sweeps: self.max_sweeps,
            tol: self.tol,
        }
    }
}

/// Quantile model settings; the MLP seed is derived per repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: QrKind,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

fn default_max_iter() -> usize {
    QrHyper::default().max_iter
}
fn default_lr() -> f64 {
    QrHyper::default().learning_rate
}
fn default_epochs() -> usize {
    QrHyper::default().max_epochs
}
fn default_batch() -> usize {
    QrHyper::default().batch_size
}
fn default_dropout() -> f64 {
    QrHyper::default().dropout
}
fn default_hidden() -> usize {
    QrHyper::default().hidden
}
fn default_holdout() -> f64 {
    QrHyper::default().holdout_fraction
}

impl Default for ModelConfig {
    fn default() -> Self {
        let h = QrHyper::default();
        ModelConfig {
            kind: QrKind::Linear,
            max_iter: h.max_iter,
            learning_rate: h.learning_rate,
            max_epochs: h.max_epochs,
            batch_size: h.batch_size,
            dropout: h.dropout,
            hidden: h.hidden,
            holdout_fraction: h.holdout_fraction,
        }
    }
}

impl ModelConfig {
    pub fn hyper(&self, seed: u64) -> QrHyper {
        QrHyper {
            max_iter: self.max_iter,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            dropout: self.dropout,
            hidden: self.hidden,
            holdout_fraction: self.holdout_fraction,
            seed,
        }
    }
}

/// Full description of a repeated experiment. Data come from the generator,
/// from a CSV file, or both: a file then supplies the training pool while test
/// sets are still drawn from the generator.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub missingness: MissingnessConfig,
    #[serde(default)]
    pub methods: MethodsConfig,
    #[serde(default)]
    pub sizes: SizesConfig,
    #[serde(default)]
    pub experiment: RunConfig,
    #[serde(default)]
    pub imputer: ImputerConfig,
    #[serde(default)]
    pub model: ModelConfig,
}

impl ExperimentConfig {
    /// Generator-only configuration with default settings.
    pub fn synthetic(d: usize) -> Self {
        ExperimentConfig {
            generator: Some(GeneratorConfig::with_dim(d)),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.methods.alpha)
            .map_err(|e| Error::Config(format!("methods.alpha: {e}")))?;
        if self.experiment.repetitions == 0 {
            return Err(Error::Config(
                "experiment.repetitions must be at least 1".into(),
            ));
        }
        if self.methods.list.is_empty() {
            return Err(Error::Config("methods.list is empty".into()));
        }
        if self.generator.is_none() && self.data.is_none() {
            return Err(Error::Config(
                "either [generator] or [data] is required".into(),
            ));
        }
        if self.sizes.train < 2 || self.sizes.cal == 0 {
            return Err(Error::Config(
                "sizes.train must be >= 2 and sizes.cal >= 1".into(),
            ));
        }
        if self.generator.is_some() && self.sizes.test == 0 {
            return Err(Error::Config("sizes.test must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.missingness.rate) {
            return Err(Error::Config(format!(
                "missingness.rate {} not in [0, 1]",
                self.missingness.rate
            )));
        }
        if let Some(g) = &self.generator {
            let p = g.params()?;
            self.missingness.spec().validate(p.dim())?;
        }
        Ok(())
    }

    fn pipeline(&self, seed: u64) -> PipelineConfig {
        PipelineConfig {
            alpha: self.methods.alpha,
            imputer: self.imputer.kind(),
            impute_hyper: self.imputer.hyper(),
            score: ScoreKind::Cqr,
            qr: self.model.kind,
            qr_hyper: self.model.hyper(seed),
        }
    }
}

/// Which test set a report was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TestSet {
    Marginal,
    PerPattern,
}

/// One method's results for one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub method: Method,
    pub repetition: usize,
    pub seed: u64,
    pub marginal: CoverageReport,
    pub per_pattern: Option<CoverageReport>,
}

impl MethodReport {
    /// `(group label, stats)` in emission order. Groups of the per-pattern
    /// set carry an `eval:` prefix.
    pub fn labeled_groups(&self) -> Vec<(String, &GroupStats)> {
        let mut out: Vec<(String, &GroupStats)> = self
            .marginal
            .groups
            .iter()
            .map(|(k, g)| (k.to_string(), g))
            .collect();
        if let Some(pp) = &self.per_pattern {
            out.extend(pp.groups.iter().map(|(k, g)| (format!("eval:{k}"), g)));
        }
        out
    }

    pub fn report(&self, set: TestSet) -> Option<&CoverageReport> {
        match set {
            TestSet::Marginal => Some(&self.marginal),
            TestSet::PerPattern => self.per_pattern.as_ref(),
        }
    }
}

// Independent random streams within a repetition.
const POOL: u64 = 1;
const SPLIT: u64 = 2;
const TEST: u64 = 3;
const EVAL_MASKS: u64 = 4;
const EVAL_DRAWS: u64 = 5;
const MODEL: u64 = 6;
const INJECT: u64 = 7;

/// Seed of the pool generated in repetition 0, as written by `synth-gen`.
pub fn pool_seed(base_seed: u64, repetition: usize) -> u64 {
    derive_seed(base_seed.wrapping_add(repetition as u64), POOL)
}

/// Runs every repetition of a generator-only experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MethodReport>> {
    run_experiment_with_data(cfg, None)
}

/// Runs every repetition; `data` is the loaded CSV when `cfg.data` is set.
/// Reports are ordered by method, then repetition.
pub fn run_experiment_with_data(
    cfg: &ExperimentConfig,
    data: Option<&MaskedDataset>,
) -> Result<Vec<MethodReport>> {
    cfg.validate()?;
    if cfg.data.is_some() && data.is_none() {
        return Err(Error::Config(
            "[data] is configured but no dataset was loaded".into(),
        ));
    }
    let params = cfg.generator.as_ref().map(|g| g.params()).transpose()?;
    let per_rep: Vec<Vec<MethodReport>> = (0..cfg.experiment.repetitions)
        .into_par_iter()
        .map(|r| {
            run_repetition(cfg, params.as_ref(), data, r).map_err(|e| Error::Repetition {
                index: r,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<MethodReport> = per_rep.into_iter().flatten().collect();
    out.sort_by_key(|m| (m.method, m.repetition));
    Ok(out)
}

struct RepData {
    pool: MaskedDataset,
    cal_fraction: f64,
    marginal: MaskedDataset,
    per_pattern: Option<MaskedDataset>,
}

fn eligible_mask(d: usize, mcar: &McarSpec) -> MaskPattern {
    match &mcar.columns {
        Some(c) => MaskPattern::new((0..d).map(|j| c.contains(&j)).collect()),
        None => MaskPattern::ones(d),
    }
}

/// Evaluation masks for the per-pattern test set.
fn eval_masks(
    cfg: &ExperimentConfig,
    d: usize,
    empirical: &[MaskPattern],
    seed: u64,
) -> Result<Option<Vec<MaskPattern>>> {
    let Some((per_mask, count)) = cfg.sizes.per_pattern_plan(d) else {
        return Ok(None);
    };
    let mcar = cfg.missingness.spec();
    let allowed = eligible_mask(d, &mcar);
    let masks: Vec<MaskPattern> = if per_mask {
        enumerate_masks(d, false)
            .into_iter()
            .filter(|m| m.is_included_in(&allowed))
            .flat_map(|m| std::iter::repeat_n(m, count))
            .collect()
    } else {
        sample_eval_patterns(d, count, empirical, false, seed)?
            .into_iter()
            .filter(|m| m.is_included_in(&allowed))
            .collect()
    };
    Ok(Some(masks))
}

fn repetition_data(
    cfg: &ExperimentConfig,
    params: Option<&GlmParams>,
    data: Option<&MaskedDataset>,
    seed: u64,
) -> Result<RepData> {
    let sizes = &cfg.sizes;
    let mcar = cfg.missingness.spec();
    if let Some(params) = params {
        let d = params.dim();
        let pool = match data {
            Some(ds) => {
                check_len(d, ds.dim())?;
                ds.clone()
            }
            None => generate_glm_dataset(
                params,
                sizes.train + sizes.cal,
                &mcar,
                derive_seed(seed, POOL),
            )?,
        };
        let marginal = generate_glm_dataset(params, sizes.test, &mcar, derive_seed(seed, TEST))?;
        // under plain MCAR the conditional law of a size class is uniform, so
        // the empirical sample is only consulted for restricted columns
        let empirical: &[MaskPattern] = if mcar.columns.is_some() {
            pool.masks()
        } else {
            &[]
        };
        let per_pattern = match eval_masks(cfg, d, empirical, derive_seed(seed, EVAL_MASKS))? {
            Some(m) => Some(generate_with_masks(
                params,
                m,
                derive_seed(seed, EVAL_DRAWS),
            )?),
            None => None,
        };
        return Ok(RepData {
            pool,
            cal_fraction: sizes.cal as f64 / (sizes.train + sizes.cal) as f64,
            marginal,
            per_pattern,
        });
    }

    let ds = data.expect("checked by caller");
    let ds = if cfg.missingness.rate > 0.0 {
        let cols: Vec<usize> = mcar
            .columns
            .clone()
            .unwrap_or_else(|| (0..ds.dim()).collect());
        inject_mcar(ds, &cols, cfg.missingness.rate, derive_seed(seed, INJECT))?
    } else {
        ds.clone()
    };
    let need = sizes.train + sizes.cal + sizes.test.max(1);
    if ds.n() < need {
        return Err(Error::InsufficientData {
            needed: need,
            got: ds.n(),
        });
    }
    let mut idx: Vec<usize> = (0..ds.n()).collect();
    idx.shuffle(&mut crate::rng::from_seed(derive_seed(seed, SPLIT)));
    let n_pool = sizes.train + sizes.cal;
    let test_idx: Vec<usize> = if sizes.test == 0 {
        idx[n_pool..].to_vec()
    } else {
        idx[n_pool..n_pool + sizes.test].to_vec()
    };
    let pool = ds.subset(&idx[..n_pool]);
    let marginal = ds.subset(&test_idx);
    let complete: Vec<usize> = test_idx
        .iter()
        .copied()
        .filter(|&i| ds.true_row(i).is_some())
        .collect();
    let per_pattern = match eval_masks(cfg, ds.dim(), pool.masks(), derive_seed(seed, EVAL_MASKS))?
    {
        Some(masks) if !complete.is_empty() && !masks.is_empty() => {
            let mut rng = crate::rng::from_seed(derive_seed(seed, EVAL_DRAWS));
            let d = ds.dim();
            let mut x = Vec::with_capacity(masks.len() * d);
            let mut y = Vec::with_capacity(masks.len());
            for _ in &masks {
                let i = complete[rng.random_range(0..complete.len())];
                x.extend_from_slice(ds.true_row(i).expect("filtered"));
                y.push(ds.response(i));
            }
            Some(MaskedDataset::from_complete(x, masks, y, d)?)
        }
        _ => None,
    };
    Ok(RepData {
        pool,
        cal_fraction: sizes.cal as f64 / n_pool as f64,
        marginal,
        per_pattern,
    })
}

fn run_repetition(
    cfg: &ExperimentConfig,
    params: Option<&GlmParams>,
    data: Option<&MaskedDataset>,
    r: usize,
) -> Result<Vec<MethodReport>> {
    let seed = cfg.experiment.seed.wrapping_add(r as u64);
    let rd = repetition_data(cfg, params, data, seed)?;
    let split = split_train_cal(rd.pool.n(), rd.cal_fraction, derive_seed(seed, SPLIT))?;
    let train = rd.pool.subset(&split.train);
    let cal = rd.pool.subset(&split.cal);
    let pcfg = cfg.pipeline(derive_seed(seed, MODEL));
    let alpha = cfg.methods.alpha;

    let clamp = {
        let y = rd.pool.responses();
        let (lo, hi) = y
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        hi - lo
    };

    let needs_cqr = cfg.methods.list.iter().any(|m| {
        matches!(
            m,
            Method::Cqr
                | Method::CqrMdaExact
                | Method::CqrMdaNested
                | Method::CqrMdaNestedPartitioned
        )
    });
    let cqr_parts = needs_cqr
        .then(|| fit_score_function(&train, &pcfg))
        .transpose()?;
    let needs_mean = cfg
        .methods
        .list
        .iter()
        .any(|m| matches!(m, Method::MeanScp | Method::ScpByPatternSize));
    let mean_pipeline = if needs_mean {
        let imputer = crate::imputation::fit_imputer(pcfg.imputer, &train, &pcfg.impute_hyper)?;
        let mean = match params {
            Some(p) => MeanModel::Oracle(p.clone()),
            None => {
                MeanModel::fit_linear(&featurize_dataset(&imputer, &train)?, train.responses())?
            }
        };
        Some(ItpPipeline::calibrate(
            imputer,
            ScoreFunction::AbsResidual { mean },
            &cal,
            alpha,
        )?)
    } else {
        None
    };
    let qr_parts = cfg
        .methods
        .list
        .contains(&Method::Qr)
        .then(|| fit_score_function(&rd.pool, &pcfg))
        .transpose()?;
    let mda = match &cqr_parts {
        Some((imp, ScoreFunction::Cqr { q_low, q_upp })) => Some(MdaPipeline::from_parts(
            imp.clone(),
            q_low.clone(),
            q_upp.clone(),
            cal.clone(),
            alpha,
        )?),
        _ => None,
    };

    let mut reports = Vec::with_capacity(cfg.methods.list.len());
    let mut methods = cfg.methods.list.clone();
    methods.sort();
    methods.dedup();
    for &method in &methods {
        let predict = |test: &MaskedDataset| -> Result<Vec<PredictionInterval>> {
            match method {
                Method::Qr => {
                    let (imp, score) = qr_parts.as_ref().expect("fitted");
                    (0..test.n())
                        .into_par_iter()
                        .map(|i| {
                            let (lo, hi) = score.band(imp, test.row(i), test.mask(i))?;
                            Ok(PredictionInterval::new(lo, hi, test.mask(i).clone(), 0))
                        })
                        .collect()
                }
                Method::Cqr => {
                    let (imp, score) = cqr_parts.clone().expect("fitted");
                    ItpPipeline::calibrate(imp, score, &cal, alpha)?.predict_batch(test)
                }
                Method::CqrMdaExact => mda
                    .as_ref()
                    .expect("fitted")
                    .predict_batch(&MdaMethod::Exact, test),
                Method::CqrMdaNested => mda
                    .as_ref()
                    .expect("fitted")
                    .predict_batch(&MdaMethod::Nested, test),
                Method::CqrMdaNestedPartitioned => mda.as_ref().expect("fitted").predict_batch(
                    &MdaMethod::NestedPartitioned(cfg.methods.pattern_choice.clone()),
                    test,
                ),
                Method::MeanScp => mean_pipeline.as_ref().expect("fitted").predict_batch(test),
                Method::ScpByPatternSize => {
                    let p = mean_pipeline.as_ref().expect("fitted");
                    groupwise_calibrate_by_pattern_size(p, &cal, alpha)?.predict_batch(p, test)
                }
            }
        };
        let report = |test: &MaskedDataset| -> Result<CoverageReport> {
            let iv = predict(test)?;
            coverage_report_clamped(&iv, test.responses(), test.masks(), Some(clamp))
        };
        let marginal = report(&rd.marginal)?;
        let per_pattern = rd.per_pattern.as_ref().map(report).transpose()?;
        reports.push(MethodReport {
            method,
            repetition: r,
            seed,
            marginal,
            per_pattern,
        });
    }
    Ok(reports)
}

/// Mean and Monte Carlo standard error (sample sd over `sqrt(n)`).
pub fn mean_and_mcse(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Across-repetition summary of one `(method, group)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: String,
    pub group: String,
    pub repetitions: usize,
    pub coverage: f64,
    pub coverage_mcse: f64,
    /// Mean of the per-repetition finite mean lengths; `+inf` if none is finite.
    pub mean_length: f64,
    pub infinite_fraction: f64,
}

/// Per-repetition record consumed by [`aggregate`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRecord<'a> {
    pub method: &'a str,
    pub group: &'a str,
    pub coverage: f64,
    pub mean_length: f64,
    pub infinite_fraction: f64,
}

/// Aggregates records by `(method, group)`, sorted by that key.
pub fn aggregate<'a>(records: impl IntoIterator<Item = GroupRecord<'a>>) -> Vec<Aggregate> {
    let mut by: BTreeMap<(&str, &str), Vec<GroupRecord<'a>>> = BTreeMap::new();
    for r in records {
        by.entry((r.method, r.group)).or_default().push(r);
    }
    by.into_iter()
        .map(|((method, group), rs)| {
            let cov: Vec<f64> = rs.iter().map(|r| r.coverage).collect();
            let (coverage, coverage_mcse) = mean_and_mcse(&cov);
            let finite: Vec<f64> = rs
                .iter()
                .map(|r| r.mean_length)
                .filter(|l| l.is_finite())
                .collect();
            Aggregate {
                method: method.to_string(),
                group: group.to_string(),
                repetitions: rs.len(),
                coverage,
                coverage_mcse,
                mean_length: if finite.is_empty() {
                    f64::INFINITY
                } else {
                    finite.iter().sum::<f64>() / finite.len() as f64
                },
                infinite_fraction: rs.iter().map(|r| r.infinite_fraction).sum::<f64>()
                    / rs.len() as f64,
            }
        })
        .collect()
}

/// Aggregates the groups of `reports` (labels as in [`MethodReport::labeled_groups`]).
pub fn aggregate_reports(reports: &[MethodReport]) -> Vec<Aggregate> {
    let labeled: Vec<(&str, String, &GroupStats)> = reports
        .iter()
        .flat_map(|r| {
            r.labeled_groups()
                .into_iter()
                .map(move |(g, s)| (r.method.name(), g, s))
        })
        .collect();
    aggregate(labeled.iter().map(|(m, g, s)| GroupRecord {
        method: m,
        group: g,
        coverage: s.coverage,
        mean_length: s.mean_length,
        infinite_fraction: s.infinite_fraction,
    }))
}

/// Per-group coverage of one method on one test set, as `(mean, mcse)` across repetitions.
pub fn coverage_by_group(
    reports: &[MethodReport],
    method: Method,
    set: TestSet,
) -> BTreeMap<GroupKey, (f64, f64)> {
    let mut acc: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.method == method) {
        if let Some(rep) = r.report(set) {
            for (k, g) in &rep.groups {
                acc.entry(k.clone()).or_default().push(g.coverage);
            }
        }
    }
    acc.into_iter()
        .map(|(k, v)| (k, mean_and_mcse(&v)))
        .collect()
}
