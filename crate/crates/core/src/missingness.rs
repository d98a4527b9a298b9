//! MCAR mask generation, mask algebra and evaluation-pattern sampling.
//!
//! Only MCAR masks are synthesized here. Other mechanisms can be used by
//! building `MaskPattern`s externally and passing them to the dataset
//! constructors.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{MaskPattern, MISSING};
use crate::error::{check_len, Error, Result};
use crate::rng;

/// Missing-completely-at-random mechanism: each eligible cell is missing
/// independently with probability `rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McarSpec {
    pub rate: f64,
    /// Columns that may be masked; `None` means all columns.
    pub columns: Option<Vec<usize>>,
}

impl McarSpec {
    pub fn new(rate: f64) -> Self {
        McarSpec {
            rate,
            columns: None,
        }
    }

    pub fn with_columns(rate: f64, columns: Vec<usize>) -> Self {
        McarSpec {
            rate,
            columns: Some(columns),
        }
    }

    pub(crate) fn validate(&self, d: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::invalid(
                "rate",
                format!("{} not in [0, 1]", self.rate),
            ));
        }
        if let Some(cols) = &self.columns {
            if let Some(&bad) = cols.iter().find(|&&c| c >= d) {
                return Err(Error::invalid(
                    "columns",
                    format!("column index {bad} out of range for dimension {d}"),
                ));
            }
        }
        Ok(())
    }

    fn eligible(&self, d: usize) -> Vec<bool> {
        match &self.columns {
            None => vec![true; d],
            Some(cols) => {
                let mut e = vec![false; d];
                for &c in cols {
                    e[c] = true;
                }
                e
            }
        }
    }

    /// Draws one mask from the mechanism.
    pub(crate) fn sample<R: Rng + ?Sized>(&self, eligible: &[bool], rng: &mut R) -> MaskPattern {
        MaskPattern::new(
            eligible
                .iter()
                .map(|&e| e && rng.random::<f64>() < self.rate)
                .collect(),
        )
    }
}

/// Generates `n` MCAR masks of dimension `d`.
pub fn gen_mcar_masks(n: usize, d: usize, spec: &McarSpec, seed: u64) -> Result<Vec<MaskPattern>> {
    gen_mcar_masks_with(n, d, spec, &mut rng::from_seed(seed))
}

pub(crate) fn gen_mcar_masks_with<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    spec: &McarSpec,
    rng: &mut R,
) -> Result<Vec<MaskPattern>> {
    if n == 0 || d == 0 {
        return Err(Error::invalid("n, d", "must both be at least 1"));
    }
    spec.validate(d)?;
    let eligible = spec.eligible(d);
    Ok((0..n).map(|_| spec.sample(&eligible, rng)).collect())
}

/// `a ⊂ b`: every missing coordinate of `a` is missing in `b` (equality included).
pub fn mask_included(a: &MaskPattern, b: &MaskPattern) -> Result<bool> {
    check_len(a.len(), b.len())?;
    Ok(a.is_included_in(b))
}

/// Elementwise maximum of two masks.
pub fn mask_max(a: &MaskPattern, b: &MaskPattern) -> Result<MaskPattern> {
    check_len(a.len(), b.len())?;
    Ok(a.union(b))
}

/// Hides the coordinates of `row` flagged by `m`.
pub fn apply_mask(row: &[f64], m: &MaskPattern) -> Result<Vec<f64>> {
    check_len(m.len(), row.len())?;
    Ok(row
        .iter()
        .zip(m.bits())
        .map(|(&x, &miss)| if miss { MISSING } else { x })
        .collect())
}

/// All masks of dimension `d`, ordered by their integer code.
pub fn enumerate_masks(d: usize, include_all_missing: bool) -> Vec<MaskPattern> {
    assert!(d < 24, "enumerating 2^{d} masks is not supported");
    (0..1u64 << d)
        .map(|c| MaskPattern::from_index(c, d))
        .filter(|m| include_all_missing || !m.is_all_missing())
        .collect()
}

fn masks_of_size(d: usize, size: usize) -> Vec<MaskPattern> {
    enumerate_masks(d, true)
        .into_iter()
        .filter(|m| m.pattern_size() == size)
        .collect()
}

/// Evaluation masks with a fixed count per pattern size.
///
/// For each size `s` in `0..d` (or `0..=d` when `include_all_missing`), draws
/// `per_size` masks with replacement from the masks of size `s` in
/// `mechanism_masks`. When that sample has no mask of size `s` (in particular
/// when it is empty) the draw is uniform over all size-`s` masks, which is the
/// conditional law under plain MCAR.
pub fn sample_eval_patterns(
    d: usize,
    per_size: usize,
    mechanism_masks: &[MaskPattern],
    include_all_missing: bool,
    seed: u64,
) -> Result<Vec<MaskPattern>> {
    if per_size == 0 {
        return Err(Error::invalid("per_size", "must be at least 1"));
    }
    if d == 0 {
        return Err(Error::invalid("d", "must be at least 1"));
    }
    for m in mechanism_masks {
        check_len(d, m.len())?;
    }
    let mut rng = rng::from_seed(seed);
    let top = if include_all_missing { d } else { d - 1 };
    let mut out = Vec::with_capacity(per_size * (top + 1));
    for size in 0..=top {
        let empirical: Vec<&MaskPattern> = mechanism_masks
            .iter()
            .filter(|m| m.pattern_size() == size)
            .collect();
        if empirical.is_empty() {
            let pool = masks_of_size(d, size);
            for _ in 0..per_size {
                out.push(pool.choose(&mut rng).expect("non-empty size class").clone());
            }
        } else {
            for _ in 0..per_size {
                out.push((*empirical.choose(&mut rng).expect("non-empty")).clone());
            }
        }
    }
    Ok(out)
}
