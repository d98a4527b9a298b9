//! Value types shared across the crate: masks, masked datasets, splits and
//! prediction intervals.
//!
//! Missing cells hold a NaN sentinel, but the mask is the only source of truth
//! about missingness. Code that reads a cell must consult the mask first.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_len, Error, Result};
use crate::rng;

/// Sentinel stored in masked cells.
pub const MISSING: f64 = f64::NAN;

/// Missingness pattern of one row; `true` means the coordinate is missing.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MaskPattern {
    bits: Vec<bool>,
}

impl MaskPattern {
    pub fn new(bits: Vec<bool>) -> Self {
        MaskPattern { bits }
    }

    pub fn zeros(d: usize) -> Self {
        MaskPattern {
            bits: vec![false; d],
        }
    }

    pub fn ones(d: usize) -> Self {
        MaskPattern {
            bits: vec![true; d],
        }
    }

    /// Builds a mask from 0/1 integers.
    pub fn from_bits(bits: &[u8]) -> Self {
        MaskPattern {
            bits: bits.iter().map(|&b| b != 0).collect(),
        }
    }

    /// Mask with bit `j` set iff bit `j` of `code` is set (coordinate 0 is the lowest bit).
    pub fn from_index(code: u64, d: usize) -> Self {
        MaskPattern {
            bits: (0..d).map(|j| (code >> j) & 1 == 1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn is_missing(&self, j: usize) -> bool {
        self.bits[j]
    }

    /// Number of missing coordinates.
    pub fn pattern_size(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_complete(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn is_all_missing(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn observed(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| !b)
            .map(|(j, _)| j)
    }

    pub fn missing(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(j, _)| j)
    }

    /// Every missing coordinate of `self` is also missing in `other`.
    /// Both masks must have the same length.
    #[inline]
    pub fn is_included_in(&self, other: &MaskPattern) -> bool {
        debug_assert_eq!(self.len(), other.len());
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Elementwise maximum. Both masks must have the same length.
    pub fn union(&self, other: &MaskPattern) -> MaskPattern {
        debug_assert_eq!(self.len(), other.len());
        MaskPattern {
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a || b)
                .collect(),
        }
    }

    /// Mask bits as 0.0 / 1.0.
    pub fn as_f64(&self) -> impl Iterator<Item = f64> + '_ {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 })
    }

    /// Bitstring key such as `"010"`.
    pub fn key(&self) -> String {
        self.bits
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }
}

impl fmt::Debug for MaskPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MaskPattern({})", self.key())
    }
}

impl fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for MaskPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::invalid(
                    "mask",
                    format!("unexpected character {other:?}"),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskPattern { bits })
    }
}

impl Serialize for MaskPattern {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.key())
    }
}

impl<'de> Deserialize<'de> for MaskPattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Row-major feature matrix with explicit masks and a response per row.
///
/// `truth`, when present, keeps the underlying value of cells that were masked
/// after the fact (synthetic generation or injected MCAR). It is never read by
/// fitting or prediction code, only by evaluation that re-masks complete rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDataset {
    features: Vec<f64>,
    masks: Vec<MaskPattern>,
    responses: Vec<f64>,
    d: usize,
    truth: Option<Vec<f64>>,
}

impl MaskedDataset {
    /// Builds a dataset from row-major `features`; cells under a mask bit are
    /// overwritten with the sentinel.
    pub fn new(
        features: Vec<f64>,
        masks: Vec<MaskPattern>,
        responses: Vec<f64>,
        d: usize,
    ) -> Result<Self> {
        let n = responses.len();
        check_len(n, masks.len())?;
        check_len(n * d, features.len())?;
        let mut features = features;
        for (i, m) in masks.iter().enumerate() {
            check_len(d, m.len())?;
            for j in m.missing() {
                features[i * d + j] = MISSING;
            }
        }
        Ok(MaskedDataset {
            features,
            masks,
            responses,
            d,
            truth: None,
        })
    }

    /// Masks a complete matrix while retaining its values as ground truth.
    pub fn from_complete(
        complete: Vec<f64>,
        masks: Vec<MaskPattern>,
        responses: Vec<f64>,
        d: usize,
    ) -> Result<Self> {
        let mut ds = MaskedDataset::new(complete.clone(), masks, responses, d)?;
        ds.truth = Some(complete);
        Ok(ds)
    }

    pub fn with_truth(mut self, truth: Vec<f64>) -> Result<Self> {
        check_len(self.features.len(), truth.len())?;
        self.truth = Some(truth);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn mask(&self, i: usize) -> &MaskPattern {
        &self.masks[i]
    }

    pub fn masks(&self) -> &[MaskPattern] {
        &self.masks
    }

    pub fn response(&self, i: usize) -> f64 {
        self.responses[i]
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn truth(&self) -> Option<&[f64]> {
        self.truth.as_deref()
    }

    /// Underlying complete row, if every coordinate is known.
    pub fn true_row(&self, i: usize) -> Option<&[f64]> {
        let truth = self.truth.as_ref()?;
        let row = &truth[i * self.d..(i + 1) * self.d];
        row.iter().all(|v| v.is_finite()).then_some(row)
    }

    /// Observed value of a cell, `None` when masked.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (!self.masks[i].is_missing(j)).then(|| self.features[i * self.d + j])
    }

    pub fn subset(&self, indices: &[usize]) -> MaskedDataset {
        let d = self.d;
        let mut features = Vec::with_capacity(indices.len() * d);
        let mut truth = self
            .truth
            .as_ref()
            .map(|_| Vec::with_capacity(indices.len() * d));
        for &i in indices {
            features.extend_from_slice(self.row(i));
            if let (Some(t), Some(src)) = (truth.as_mut(), self.truth.as_ref()) {
                t.extend_from_slice(&src[i * d..(i + 1) * d]);
            }
        }
        MaskedDataset {
            features,
            masks: indices.iter().map(|&i| self.masks[i].clone()).collect(),
            responses: indices.iter().map(|&i| self.responses[i]).collect(),
            d,
            truth,
        }
    }

    /// Concatenates rows of two datasets with the same dimension.
    pub fn concat(&self, other: &MaskedDataset) -> Result<MaskedDataset> {
        check_len(self.d, other.d)?;
        let truth = match (&self.truth, &other.truth) {
            (Some(a), Some(b)) => Some([a.as_slice(), b.as_slice()].concat()),
            _ => None,
        };
        Ok(MaskedDataset {
            features: [self.features.as_slice(), other.features.as_slice()].concat(),
            masks: [self.masks.as_slice(), other.masks.as_slice()].concat(),
            responses: [self.responses.as_slice(), other.responses.as_slice()].concat(),
            d: self.d,
            truth,
        })
    }

    /// Replaces the masks, keeping every previously masked cell masked.
    /// Values behind newly set bits move into `truth`.
    pub(crate) fn remask(&self, masks: Vec<MaskPattern>) -> Result<MaskedDataset> {
        check_len(self.n(), masks.len())?;
        let d = self.d;
        let truth = match &self.truth {
            Some(t) => t.clone(),
            None => self.features.clone(),
        };
        for (i, m) in self.masks.iter().enumerate() {
            check_len(d, masks[i].len())?;
            if !m.is_included_in(&masks[i]) {
                return Err(Error::invalid(
                    "masks",
                    format!("row {i} would unmask a cell"),
                ));
            }
        }
        let mut ds = MaskedDataset::new(self.features.clone(), masks, self.responses.clone(), d)?;
        ds.truth = Some(truth);
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetWire {
    d: usize,
    features: Vec<Option<f64>>,
    masks: Vec<MaskPattern>,
    responses: Vec<f64>,
    truth: Option<Vec<Option<f64>>>,
}

fn to_wire(v: &[f64]) -> Vec<Option<f64>> {
    v.iter().map(|x| (!x.is_nan()).then_some(*x)).collect()
}

fn from_wire(v: Vec<Option<f64>>) -> Vec<f64> {
    v.into_iter().map(|x| x.unwrap_or(MISSING)).collect()
}

impl Serialize for MaskedDataset {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        DatasetWire {
            d: self.d,
            features: to_wire(&self.features),
            masks: self.masks.clone(),
            responses: self.responses.clone(),
            truth: self.truth.as_deref().map(to_wire),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MaskedDataset {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = DatasetWire::deserialize(d)?;
        let ds = MaskedDataset::new(from_wire(w.features), w.masks, w.responses, w.d)
            .map_err(serde::de::Error::custom)?;
        match w.truth {
            Some(t) => ds
                .with_truth(from_wire(t))
                .map_err(serde::de::Error::custom),
            None => Ok(ds),
        }
    }
}

/// Disjoint proper-training and calibration index sets (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub cal: Vec<usize>,
}

/// Uniformly random train/calibration split with `round(cal_fraction * n)`
/// calibration rows.
pub fn split_train_cal(n: usize, cal_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    if !(cal_fraction > 0.0 && cal_fraction < 1.0) {
        return Err(Error::invalid(
            "cal_fraction",
            format!("{cal_fraction} not in (0, 1)"),
        ));
    }
    let n_cal = (cal_fraction * n as f64).round() as usize;
    if n_cal == 0 || n_cal == n {
        return Err(Error::EmptySplit { n, cal: n_cal });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::from_seed(seed));
    let mut cal = idx.split_off(n - n_cal);
    let mut train = idx;
    train.sort_unstable();
    cal.sort_unstable();
    Ok(SplitIndices { train, cal })
}

/// Closed prediction interval, possibly unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub lower: f64,
    pub upper: f64,
    pub mask_used: MaskPattern,
    /// Number of calibration scores behind the correction.
    pub cal_subset_size: usize,
}

impl PredictionInterval {
    pub fn new(lower: f64, upper: f64, mask_used: MaskPattern, cal_subset_size: usize) -> Self {
        debug_assert!(!(lower > upper), "lower {lower} > upper {upper}");
        PredictionInterval {
            lower,
            upper,
            mask_used,
            cal_subset_size,
        }
    }

    pub fn unbounded(mask_used: MaskPattern, cal_subset_size: usize) -> Self {
        PredictionInterval::new(f64::NEG_INFINITY, f64::INFINITY, mask_used, cal_subset_size)
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }

    pub fn is_infinite(&self) -> bool {
        self.lower.is_infinite() || self.upper.is_infinite()
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}
