//! Gaussian linear model with missing covariates: data generation and the
//! closed-form conditional quantiles of `Y | (X_obs(m), M = m)`.
//!
//! Under `X ~ N(mu, Sigma)` and `Y = beta^T X + eps`, the response given the
//! observed coordinates is Gaussian with mean
//! `beta_obs^T x_obs + beta_mis^T mu_mis|obs` and variance
//! `beta_mis^T Sigma_mis|obs beta_mis + sigma_eps^2`, where the conditional
//! moments are Schur complements. Only the mask enters the variance, so the
//! oracle interval length is a function of the mask alone.

#![allow(clippy::excessive_precision)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_model::{MaskPattern, MaskedDataset, PredictionInterval};
use crate::error::{check_alpha, check_len, Error, Result};
use crate::linalg;
use crate::missingness::McarSpec;
use crate::rng;

/// Regression coefficients used for the synthetic experiments; lower
/// dimensions keep the leading entries.
pub const REFERENCE_BETA: [f64; 10] = [1.0, 2.0, -1.0, 3.0, -0.5, -1.0, 0.3, 1.7, 0.4, -0.3];

// AS241 coefficients, highest degree first, digits as published.
const A: [f64; 8] = [
    2509.0809287301226727,
    33430.575583588128105,
    67265.770927008700853,
    45921.953931549871457,
    13731.693765509461125,
    1971.5909503065514427,
    133.14166789178437745,
    3.387132872796366608,
];
const B: [f64; 8] = [
    5226.495278852545925,
    28729.085735721942674,
    39307.89580009271061,
    21213.794301586595867,
    5394.1960214247511077,
    687.1870074920579083,
    42.313330701600911252,
    1.0,
];
const C: [f64; 8] = [
    7.7454501427834140764e-4,
    0.0227238449892691845833,
    0.24178072517745061177,
    1.27045825245236838258,
    3.64784832476320460504,
    5.7694972214606914055,
    4.6303378461565452959,
    1.42343711074968357734,
];
const D: [f64; 8] = [
    1.05075007164441684324e-9,
    5.475938084995344946e-4,
    0.0151986665636164571966,
    0.14810397642748007459,
    0.68976733498510000455,
    1.6763848301838038494,
    2.05319162663775882187,
    1.0,
];
const E: [f64; 8] = [
    2.01033439929228813265e-7,
    2.71155556874348757815e-5,
    0.0012426609473880784386,
    0.026532189526576123093,
    0.29656057182850489123,
    1.7848265399172913358,
    5.4637849111641143699,
    6.6579046435011037772,
];
const F: [f64; 8] = [
    2.04426310338993978564e-15,
    1.4215117583164458887e-7,
    1.8463183175100546818e-5,
    7.868691311456132591e-4,
    0.0148753612908506148525,
    0.13692988092273580531,
    0.59983220655588793769,
    1.0,
];

fn horner(c: &[f64], x: f64) -> f64 {
    c.iter().fold(0.0, |acc, &k| acc * x + k)
}

/// Inverse of the standard normal CDF (Wichura's AS241, relative accuracy ~1e-16).
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid("p", format!("{p} not in (0, 1)")));
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return Ok(q * horner(&A, r) / horner(&B, r));
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let r = (-tail.ln()).sqrt();
    let x = if r <= 5.0 {
        horner(&C, r - 1.6) / horner(&D, r - 1.6)
    } else {
        horner(&E, r - 5.0) / horner(&F, r - 5.0)
    };
    Ok(if q < 0.0 { -x } else { x })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMoments {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

/// Parameters of the Gaussian linear model. Per-mask overrides replace
/// `(mean, cov)` for rows carrying that mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmParams {
    pub beta: Vec<f64>,
    pub sigma_eps: f64,
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    #[serde(default)]
    pub overrides: BTreeMap<MaskPattern, MaskMoments>,
}

impl GlmParams {
    pub fn new(beta: Vec<f64>, sigma_eps: f64, mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let p = GlmParams {
            beta,
            sigma_eps,
            mean,
            cov,
            overrides: BTreeMap::new(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Equicorrelated design `Sigma = phi * 11^T + (1 - phi) I`, mean `mu * 1`.
    pub fn equicorrelated(beta: Vec<f64>, sigma_eps: f64, mu: f64, phi: f64) -> Result<Self> {
        let d = beta.len();
        let cov = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { phi });
        GlmParams::new(beta, sigma_eps, vec![mu; d], cov)
    }

    /// Reference setting truncated to the first `d <= 10` coordinates:
    /// `phi = 0.8`, `mu = 1`, `sigma_eps = 1`.
    pub fn reference(d: usize) -> Result<Self> {
        if d == 0 || d > REFERENCE_BETA.len() {
            return Err(Error::invalid(
                "d",
                format!("reference model supports 1..=10, got {d}"),
            ));
        }
        GlmParams::equicorrelated(REFERENCE_BETA[..d].to_vec(), 1.0, 1.0, 0.8)
    }

    pub fn with_override(mut self, m: MaskPattern, moments: MaskMoments) -> Result<Self> {
        check_len(self.dim(), m.len())?;
        check_moments(self.dim(), &moments.mean, &moments.cov)?;
        self.overrides.insert(m, moments);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_eps > 0.0) {
            return Err(Error::invalid("sigma_eps", "must be positive"));
        }
        check_moments(self.dim(), &self.mean, &self.cov)?;
        for (m, mm) in &self.overrides {
            check_len(self.dim(), m.len())?;
            check_moments(self.dim(), &mm.mean, &mm.cov)?;
        }
        Ok(())
    }

    fn moments_for(&self, m: &MaskPattern) -> (&[f64], &DMatrix<f64>) {
        match self.overrides.get(m) {
            Some(mm) => (&mm.mean, &mm.cov),
            None => (&self.mean, &self.cov),
        }
    }

    /// `Var(Y) = beta^T Sigma beta + sigma_eps^2` (homogeneous moments).
    pub fn response_variance(&self) -> f64 {
        let b = DVector::from_column_slice(&self.beta);
        (b.transpose() * &self.cov * &b)[(0, 0)] + self.sigma_eps.powi(2)
    }
}

fn check_moments(d: usize, mean: &[f64], cov: &DMatrix<f64>) -> Result<()> {
    check_len(d, mean.len())?;
    if cov.nrows() != d || cov.ncols() != d {
        return Err(Error::invalid("cov", format!("expected {d}x{d}")));
    }
    for i in 0..d {
        for j in 0..i {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 {
                return Err(Error::invalid("cov", "not symmetric"));
            }
        }
    }
    let min_eig = cov.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-10 {
        return Err(Error::NotPositiveDefinite {
            context: format!(" (min eigenvalue {min_eig})"),
        });
    }
    Ok(())
}

/// Distribution of the missing coordinates given the observed ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGaussian {
    /// Indices of the missing coordinates, in increasing order.
    pub missing: Vec<usize>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Conditions `X_mis` on the observed coordinates of `row` (values under mask
/// bits are ignored). The all-missing mask returns the unconditional moments.
pub fn conditional_gaussian(
    params: &GlmParams,
    m: &MaskPattern,
    row: &[f64],
) -> Result<ConditionalGaussian> {
    let d = params.dim();
    check_len(d, m.len())?;
    check_len(d, row.len())?;
    let (mu, sigma) = params.moments_for(m);
    let obs: Vec<usize> = m.observed().collect();
    let mis: Vec<usize> = m.missing().collect();
    let mu_mis = DVector::from_iterator(mis.len(), mis.iter().map(|&j| mu[j]));
    let s_mm = sigma.select_rows(&mis).select_columns(&mis);
    if obs.is_empty() || mis.is_empty() {
        return Ok(ConditionalGaussian {
            missing: mis,
            mean: mu_mis,
            cov: s_mm,
        });
    }
    let s_oo = sigma.select_rows(&obs).select_columns(&obs);
    let s_mo = sigma.select_rows(&mis).select_columns(&obs);
    let diff = DVector::from_iterator(obs.len(), obs.iter().map(|&j| row[j] - mu[j]));
    let chol = linalg::cholesky(s_oo).map_err(|_| Error::NotPositiveDefinite {
        context: " (observed block of the covariance)".into(),
    })?;
    let mean = mu_mis + &s_mo * chol.solve(&diff);
    let cov = &s_mm - &s_mo * chol.solve(&s_mo.transpose());
    let cov = 0.5 * (&cov + cov.transpose());
    Ok(ConditionalGaussian {
        missing: mis,
        mean,
        cov,
    })
}

/// `E[Y | X_obs(m), M = m]` and `Var(Y | X_obs(m), M = m)`.
pub fn oracle_moments(params: &GlmParams, m: &MaskPattern, row: &[f64]) -> Result<(f64, f64)> {
    let cg = conditional_gaussian(params, m, row)?;
    let mut center: f64 = m.observed().map(|j| params.beta[j] * row[j]).sum();
    let b_mis =
        DVector::from_iterator(cg.missing.len(), cg.missing.iter().map(|&j| params.beta[j]));
    center += b_mis.dot(&cg.mean);
    let var = (b_mis.transpose() * &cg.cov * &b_mis)[(0, 0)].max(0.0) + params.sigma_eps.powi(2);
    Ok((center, var))
}

/// Oracle conditional mean, the Bayes predictor under squared loss.
pub fn oracle_mean(params: &GlmParams, m: &MaskPattern, row: &[f64]) -> Result<f64> {
    Ok(oracle_moments(params, m, row)?.0)
}

/// Oracle `[q_{alpha/2}, q_{1-alpha/2}]` of `Y | (X_obs(m), M = m)`.
pub fn oracle_interval(
    params: &GlmParams,
    m: &MaskPattern,
    row: &[f64],
    alpha: f64,
) -> Result<PredictionInterval> {
    check_alpha(alpha)?;
    let (center, var) = oracle_moments(params, m, row)?;
    let half = std_normal_quantile(1.0 - alpha / 2.0)? * var.sqrt();
    Ok(PredictionInterval::new(
        center - half,
        center + half,
        m.clone(),
        0,
    ))
}

/// Oracle interval length for mask `m`; it does not depend on the observed values.
pub fn oracle_length(params: &GlmParams, m: &MaskPattern, alpha: f64) -> Result<f64> {
    let row: Vec<f64> = params.moments_for(m).0.to_vec();
    Ok(oracle_interval(params, m, &row, alpha)?.length())
}

/// Lower-triangular factor of a covariance matrix, used for sampling.
fn sampling_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(linalg::cholesky(cov.clone())?.l())
}

/// Draws one complete row into `x_out` and returns its response. Uses the
/// override moments of `mask` when it has any.
pub(crate) fn sample_complete<R: Rng + ?Sized>(
    params: &GlmParams,
    factors: &BTreeMap<Option<MaskPattern>, DMatrix<f64>>,
    mask: Option<&MaskPattern>,
    rng: &mut R,
    x_out: &mut [f64],
) -> f64 {
    let d = params.dim();
    let key = mask.filter(|m| params.overrides.contains_key(*m)).cloned();
    let l = &factors[&key];
    let (mu, _) = match &key {
        Some(m) => params.moments_for(m),
        None => (params.mean.as_slice(), &params.cov),
    };
    let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    for i in 0..d {
        x_out[i] = mu[i] + (0..=i).map(|k| l[(i, k)] * z[k]).sum::<f64>();
    }
    let eps: f64 = rng.sample(StandardNormal);
    params
        .beta
        .iter()
        .zip(x_out.iter())
        .map(|(b, x)| b * x)
        .sum::<f64>()
        + params.sigma_eps * eps
}

pub(crate) fn factors(params: &GlmParams) -> Result<BTreeMap<Option<MaskPattern>, DMatrix<f64>>> {
    let mut f = BTreeMap::new();
    f.insert(None, sampling_factor(&params.cov)?);
    for (m, mm) in &params.overrides {
        f.insert(Some(m.clone()), sampling_factor(&mm.cov)?);
    }
    Ok(f)
}

/// Draws `n` complete rows; returns row-major features and responses.
pub fn sample_complete_rows(
    params: &GlmParams,
    n: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    let f = factors(params)?;
    let d = params.dim();
    let mut rng = rng::from_seed(seed);
    let mut x = vec![0.0; n * d];
    let y = (0..n)
        .map(|i| sample_complete(params, &f, None, &mut rng, &mut x[i * d..(i + 1) * d]))
        .collect();
    Ok((x, y))
}

/// Generates `n` rows of the Gaussian linear model with MCAR masks. Masks are
/// drawn first and independently of `(X, Y)`; the complete features are kept
/// as the dataset's ground truth.
pub fn generate_glm_dataset(
    params: &GlmParams,
    n: usize,
    mcar: &McarSpec,
    seed: u64,
) -> Result<MaskedDataset> {
    params.validate()?;
    let masks = if n == 0 {
        Vec::new()
    } else {
        crate::missingness::gen_mcar_masks(n, params.dim(), mcar, rng::derive_seed(seed, 0))?
    };
    generate_with_masks(params, masks, rng::derive_seed(seed, 1))
}

/// One complete draw per given mask, masked accordingly. Rows use the mask's
/// override moments when present.
pub fn generate_with_masks(
    params: &GlmParams,
    masks: Vec<MaskPattern>,
    seed: u64,
) -> Result<MaskedDataset> {
    params.validate()?;
    let d = params.dim();
    for m in &masks {
        check_len(d, m.len())?;
    }
    let f = factors(params)?;
    let mut rng = rng::from_seed(seed);
    let n = masks.len();
    let mut x = vec![0.0; n * d];
    let y = (0..n)
        .map(|i| {
            sample_complete(
                params,
                &f,
                Some(&masks[i]),
                &mut rng,
                &mut x[i * d..(i + 1) * d],
            )
        })
        .collect();
    MaskedDataset::from_complete(x, masks, y, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::missingness::enumerate_masks;
    use statrs::function::erf::erfc;

    /// Independent oracle: bisection on whichever tail probability is small,
    /// `Phi(x) = erfc(-x / sqrt 2) / 2` below the median and
    /// `1 - Phi(x) = erfc(x / sqrt 2) / 2` above it.
    fn bisect_quantile(p: f64) -> f64 {
        let (sign, target) = if p < 0.5 { (-1.0, p) } else { (1.0, 1.0 - p) };
        let tail = |x: f64| 0.5 * erfc(x / std::f64::consts::SQRT_2);
        let (mut lo, mut hi) = (0.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if tail(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        sign * 0.5 * (lo + hi)
    }

    #[test]
    fn normal_quantile_examples() {
        assert_eq!(std_normal_quantile(0.5).unwrap(), 0.0);
        assert!((std_normal_quantile(0.95).unwrap() - 1.644854).abs() < 1e-6);
        assert!((std_normal_quantile(0.975).unwrap() - 1.959964).abs() < 1e-6);
        assert!(std_normal_quantile(0.0).is_err());
        assert!(std_normal_quantile(1.0).is_err());
    }

    #[test]
    fn normal_quantile_matches_bisection_oracle() {
        for p in [
            1e-12,
            1e-6,
            0.001,
            0.02,
            0.05,
            0.1,
            0.3,
            0.5,
            0.77,
            0.9,
            0.95,
            0.975,
            0.999,
            1.0 - 1e-9,
        ] {
            let a = std_normal_quantile(p).unwrap();
            let b = bisect_quantile(p);
            assert!((a - b).abs() < 1e-9, "p={p}: {a} vs {b}");
        }
    }

    #[test]
    fn bivariate_schur_complement() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let params = GlmParams::new(vec![1.0, 1.0], 1.0, vec![0.0, 0.0], cov).unwrap();
        let cg = conditional_gaussian(&params, &MaskPattern::from_bits(&[0, 1]), &[1.0, f64::NAN])
            .unwrap();
        assert!((cg.mean[0] - 0.5).abs() < 1e-12);
        assert!((cg.cov[(0, 0)] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn all_missing_returns_unconditional() {
        let params = GlmParams::reference(3).unwrap();
        let cg = conditional_gaussian(&params, &MaskPattern::ones(3), &[f64::NAN; 3]).unwrap();
        assert_eq!(cg.mean.as_slice(), params.mean.as_slice());
        assert_eq!(cg.cov, params.cov);
    }

    #[test]
    fn oracle_lengths() {
        let params = GlmParams::reference(3).unwrap();
        let full = oracle_length(&params, &MaskPattern::zeros(3), 0.1).unwrap();
        assert!((full - 3.289707).abs() < 1e-5, "{full}");
        let none = oracle_length(&params, &MaskPattern::ones(3), 0.1).unwrap();
        assert!(
            (none - 2.0 * 1.644854 * 5.4f64.sqrt()).abs() < 1e-3,
            "{none}"
        );
        assert!((params.response_variance() - 5.4).abs() < 1e-12);
        let masks = enumerate_masks(3, true);
        for a in &masks {
            for b in &masks {
                if a.is_included_in(b) {
                    assert!(
                        oracle_length(&params, a, 0.1).unwrap()
                            <= oracle_length(&params, b, 0.1).unwrap() + 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn oracle_length_ignores_observed_values() {
        let params = GlmParams::reference(4).unwrap();
        let m = MaskPattern::from_bits(&[1, 0, 1, 0]);
        let a = oracle_interval(&params, &m, &[0.0, 2.0, 0.0, -1.0], 0.2).unwrap();
        let b = oracle_interval(&params, &m, &[0.0, -5.0, 0.0, 3.0], 0.2).unwrap();
        assert!((a.length() - b.length()).abs() < 1e-12);
        assert!((a.lower - b.lower).abs() > 1e-3);
    }

    #[test]
    fn invalid_params() {
        assert!(GlmParams::equicorrelated(vec![1.0, 1.0], 0.0, 0.0, 0.5).is_err());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GlmParams::new(vec![1.0, 1.0], 1.0, vec![0.0; 2], bad).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.2, 1.0]);
        assert!(GlmParams::new(vec![1.0, 1.0], 1.0, vec![0.0; 2], asym).is_err());
        assert!(GlmParams::reference(11).is_err());
    }

    #[test]
    fn degenerate_generator() {
        let params = GlmParams::equicorrelated(vec![0.0; 3], 1e-300, 1.0, 0.8).unwrap();
        let ds = generate_glm_dataset(&params, 50, &McarSpec::new(0.2), 1).unwrap();
        assert!(ds.responses().iter().all(|y| y.abs() < 1e-200));
    }

    #[test]
    fn generator_is_deterministic_and_masks_are_mcar() {
        let params = GlmParams::reference(3).unwrap();
        let a = generate_glm_dataset(&params, 100, &McarSpec::new(0.2), 9).unwrap();
        let b = generate_glm_dataset(&params, 100, &McarSpec::new(0.2), 9).unwrap();
        assert_eq!(a.masks(), b.masks());
        assert_eq!(a.responses(), b.responses());
        let masks =
            crate::missingness::gen_mcar_masks(100, 3, &McarSpec::new(0.2), rng::derive_seed(9, 0))
                .unwrap();
        assert_eq!(a.masks(), masks.as_slice());
    }

    #[test]
    fn mask_overrides_shift_rows() {
        let m = MaskPattern::from_bits(&[1, 0]);
        let params = GlmParams::equicorrelated(vec![1.0, 1.0], 1.0, 0.0, 0.0)
            .unwrap()
            .with_override(
                m.clone(),
                MaskMoments {
                    mean: vec![10.0, 10.0],
                    cov: DMatrix::identity(2, 2),
                },
            )
            .unwrap();
        let ds =
            generate_glm_dataset(&params, 2000, &McarSpec::with_columns(0.5, vec![0]), 4).unwrap();
        let truth = ds.truth().unwrap();
        let (mut s_over, mut n_over, mut s_base, mut n_base) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..ds.n() {
            if ds.mask(i) == &m {
                s_over += truth[i * 2 + 1];
                n_over += 1.0;
            } else {
                s_base += truth[i * 2 + 1];
                n_base += 1.0;
            }
        }
        assert!((s_over / n_over - 10.0).abs() < 0.2);
        assert!((s_base / n_base).abs() < 0.2);
        // conditioning uses the override moments
        let cg = conditional_gaussian(&params, &m, &[f64::NAN, 10.0]).unwrap();
        assert!((cg.mean[0] - 10.0).abs() < 1e-12);
    }
}
