//! Conditional-quantile models fitted under the pinball loss, and the
//! mask-concatenated featurization they consume.

mod linear;
mod mlp;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data_model::{MaskPattern, MaskedDataset};
use crate::error::{check_len, Error, Result};
use crate::imputation::Imputer;

pub use mlp::Mlp;

/// Pinball (check) loss of predicting `yhat` for `y` at level `tau`.
#[inline]
pub fn pinball_loss(y: f64, yhat: f64, tau: f64) -> f64 {
    debug_assert!(tau > 0.0 && tau < 1.0);
    let u = y - yhat;
    if u >= 0.0 {
        tau * u
    } else {
        (tau - 1.0) * u
    }
}

/// Mean pinball loss of `predictions` against `y`.
pub fn empirical_pinball_risk(y: &[f64], predictions: &[f64], tau: f64) -> f64 {
    y.iter()
        .zip(predictions)
        .map(|(&a, &b)| pinball_loss(a, b, tau))
        .sum::<f64>()
        / y.len() as f64
}

/// `[impute(row, m), m as 0/1]`, a vector of length `2d`.
pub fn featurize_with_mask(imp: &Imputer, row: &[f64], m: &MaskPattern) -> Result<Vec<f64>> {
    let d = imp.dim();
    let mut out = vec![0.0; 2 * d];
    featurize_into(imp, row, m, &mut out)?;
    Ok(out)
}

pub(crate) fn featurize_into(
    imp: &Imputer,
    row: &[f64],
    m: &MaskPattern,
    out: &mut [f64],
) -> Result<()> {
    let d = imp.dim();
    check_len(2 * d, out.len())?;
    imp.impute_into(row, m, &mut out[..d])?;
    for (o, b) in out[d..].iter_mut().zip(m.as_f64()) {
        *o = b;
    }
    Ok(())
}

/// Featurizes every row of `data` under its own mask.
pub fn featurize_dataset(imp: &Imputer, data: &MaskedDataset) -> Result<DMatrix<f64>> {
    let d = data.dim();
    let mut x = DMatrix::<f64>::zeros(data.n(), 2 * d);
    let mut buf = vec![0.0; 2 * d];
    for i in 0..data.n() {
        featurize_into(imp, data.row(i), data.mask(i), &mut buf)?;
        for (j, v) in buf.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QrKind {
    Linear,
    Mlp,
}

/// Training settings. The linear solver only reads `max_iter`; the rest drive the MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QrHyper {
    /// Cap on basis exchanges in the linear solver.
    pub max_iter: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub hidden: usize,
    /// Fraction of rows held out to choose the epoch count.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for QrHyper {
    fn default() -> Self {
        QrHyper {
            max_iter: 10_000,
            learning_rate: 5e-4,
            max_epochs: 2000,
            batch_size: 64,
            dropout: 0.1,
            hidden: 64,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl QrHyper {
    fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout", "must lie in [0, 1)"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::invalid("holdout_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Body {
    Linear { weights: Vec<f64>, intercept: f64 },
    Mlp(Mlp),
}

/// A fitted predictor of the `tau`-quantile of the response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileModel {
    tau: f64,
    n_features: usize,
    body: Body,
}

impl QuantileModel {
    /// Linear model with given parameters.
    pub fn linear(tau: f64, weights: Vec<f64>, intercept: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(QuantileModel {
            tau,
            n_features: weights.len(),
            body: Body::Linear { weights, intercept },
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn kind(&self) -> QrKind {
        match self.body {
            Body::Linear { .. } => QrKind::Linear,
            Body::Mlp(_) => QrKind::Mlp,
        }
    }

    /// Weights and intercept of a linear model.
    pub fn linear_parameters(&self) -> Option<(&[f64], f64)> {
        match &self.body {
            Body::Linear { weights, intercept } => Some((weights, *intercept)),
            Body::Mlp(_) => None,
        }
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        check_len(self.n_features, features.len())?;
        Ok(self.predict_unchecked(features))
    }

    #[inline]
    pub(crate) fn predict_unchecked(&self, features: &[f64]) -> f64 {
        match &self.body {
            Body::Linear { weights, intercept } => {
                intercept
                    + weights
                        .iter()
                        .zip(features)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
            }
            Body::Mlp(net) => net.predict(features),
        }
    }
}

/// Alias matching the operation name used across the crate.
pub fn predict_quantile(model: &QuantileModel, features: &[f64]) -> Result<f64> {
    model.predict(features)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid("tau", format!("{tau} not in (0, 1)")));
    }
    Ok(())
}

/// Fits a `tau`-quantile model on the rows of `x` (n × p) and responses `y`.
pub fn fit_quantile_model(
    x: &DMatrix<f64>,
    y: &[f64],
    tau: f64,
    kind: QrKind,
    hyper: &QrHyper,
) -> Result<QuantileModel> {
    check_tau(tau)?;
    check_len(x.nrows(), y.len())?;
    if x.nrows() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: x.nrows(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("x, y", "non-finite value in training data"));
    }
    let body = match kind {
        QrKind::Linear => {
            let (weights, intercept) = linear::fit(x, y, tau, hyper.max_iter)?;
            Body::Linear { weights, intercept }
        }
        QrKind::Mlp => {
            hyper.validate()?;
            Body::Mlp(mlp::fit(x, y, tau, hyper))
        }
    };
    Ok(QuantileModel {
        tau,
        n_features: x.ncols(),
        body,
    })
}
