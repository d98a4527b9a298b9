//! Deterministic imputation functions that leave observed coordinates untouched.
//!
//! Three families are provided: a constant fill, a column-mean fill, and
//! iterative ridge (chained column-wise ridge regressions started from the
//! mean fill). All of them are fitted once on training rows and then applied
//! out-of-sample to any `(row, mask)` pair.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_model::{MaskPattern, MaskedDataset};
use crate::error::{check_len, Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputerKind {
    Constant(f64),
    Mean,
    IterativeRidge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImputeHyper {
    /// Ridge penalty; `None` uses `1e-3` times the variance of the target column.
    pub lambda: Option<f64>,
    pub max_sweeps: usize,
    pub tol: f64,
}

impl Default for ImputeHyper {
    fn default() -> Self {
        ImputeHyper {
            lambda: None,
            max_sweeps: 10,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ColumnRidge {
    /// One weight per column; the entry for the target column is zero.
    weights: Vec<f64>,
    intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RidgeChain {
    columns: Vec<ColumnRidge>,
    sweeps: usize,
    tol: f64,
}

/// A fitted imputation function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    kind: ImputerKind,
    d: usize,
    /// Initial fill per column (the constant, or the observed mean).
    fill: Vec<f64>,
    chain: Option<RidgeChain>,
}

impl Imputer {
    pub fn kind(&self) -> ImputerKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Number of chained sweeps applied at imputation time (0 for non-chained kinds).
    pub fn sweeps(&self) -> usize {
        self.chain.as_ref().map_or(0, |c| c.sweeps)
    }

    /// Completes `row` under `m`: observed coordinates are copied, missing ones are filled.
    pub fn impute(&self, row: &[f64], m: &MaskPattern) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.d];
        self.impute_into(row, m, &mut out)?;
        Ok(out)
    }

    pub(crate) fn impute_into(&self, row: &[f64], m: &MaskPattern, out: &mut [f64]) -> Result<()> {
        check_len(self.d, row.len())?;
        check_len(self.d, m.len())?;
        check_len(self.d, out.len())?;
        for j in 0..self.d {
            out[j] = if m.is_missing(j) {
                self.fill[j]
            } else if row[j].is_finite() {
                row[j]
            } else {
                return Err(Error::invalid(
                    "row",
                    format!("coordinate {j} is observed under {m} but not finite"),
                ));
            };
        }
        if let Some(chain) = &self.chain {
            if m.is_complete() {
                return Ok(());
            }
            let missing: Vec<usize> = m.missing().collect();
            for _ in 0..chain.sweeps {
                let mut change = 0.0f64;
                for &j in &missing {
                    let col = &chain.columns[j];
                    let v = col.predict(out);
                    change = change.max((v - out[j]).abs());
                    out[j] = v;
                }
                if change < chain.tol {
                    break;
                }
            }
        }
        Ok(())
    }
}

impl ColumnRidge {
    #[inline]
    fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Fits an imputer on `data` (typically the proper training rows).
pub fn fit_imputer(
    kind: ImputerKind,
    data: &MaskedDataset,
    hyper: &ImputeHyper,
) -> Result<Imputer> {
    let d = data.dim();
    if let Some(l) = hyper.lambda {
        if !(l > 0.0) {
            return Err(Error::invalid("lambda", format!("{l} must be positive")));
        }
    }
    match kind {
        ImputerKind::Constant(c) => Ok(Imputer {
            kind,
            d,
            fill: vec![c; d],
            chain: None,
        }),
        ImputerKind::Mean => Ok(Imputer {
            kind,
            d,
            fill: column_means(data)?,
            chain: None,
        }),
        ImputerKind::IterativeRidge => fit_iterative_ridge(data, hyper),
    }
}

fn column_means(data: &MaskedDataset) -> Result<Vec<f64>> {
    (0..data.dim())
        .map(|j| {
            let (sum, count) = (0..data.n())
                .filter_map(|i| data.get(i, j))
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if count == 0 {
                Err(Error::FullyMissingColumn { column: j })
            } else {
                Ok(sum / count as f64)
            }
        })
        .collect()
}

fn fit_iterative_ridge(data: &MaskedDataset, hyper: &ImputeHyper) -> Result<Imputer> {
    let d = data.dim();
    let n = data.n();
    let means = column_means(data)?;
    let mut x = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            x[(i, j)] = data.get(i, j).unwrap_or(means[j]);
        }
    }
    let observed_rows: Vec<Vec<usize>> = (0..d)
        .map(|j| (0..n).filter(|&i| !data.mask(i).is_missing(j)).collect())
        .collect();
    let missing_rows: Vec<Vec<usize>> = (0..d)
        .map(|j| (0..n).filter(|&i| data.mask(i).is_missing(j)).collect())
        .collect();

    let mut columns: Vec<ColumnRidge> = means
        .iter()
        .map(|&m| ColumnRidge {
            weights: vec![0.0; d],
            intercept: m,
        })
        .collect();
    let mut sweeps = 0;
    for _ in 0..hyper.max_sweeps {
        sweeps += 1;
        let mut change = 0.0f64;
        for j in 0..d {
            columns[j] = fit_column(&x, j, &observed_rows[j], hyper.lambda)?;
            for &i in &missing_rows[j] {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                let v = columns[j].predict(&row);
                change = change.max((v - x[(i, j)]).abs());
                x[(i, j)] = v;
            }
        }
        if change < hyper.tol {
            break;
        }
    }
    Ok(Imputer {
        kind: ImputerKind::IterativeRidge,
        d,
        fill: means,
        chain: Some(RidgeChain {
            columns,
            sweeps,
            tol: hyper.tol,
        }),
    })
}

/// Ridge regression of column `target` on every other column, over `rows`.
/// The intercept is not penalized.
fn fit_column(
    x: &DMatrix<f64>,
    target: usize,
    rows: &[usize],
    lambda: Option<f64>,
) -> Result<ColumnRidge> {
    let d = x.ncols();
    let preds: Vec<usize> = (0..d).filter(|&l| l != target).collect();
    let nr = rows.len() as f64;
    let y_mean = rows.iter().map(|&i| x[(i, target)]).sum::<f64>() / nr;
    let mut weights = vec![0.0; d];
    if preds.is_empty() || rows.len() < 2 {
        return Ok(ColumnRidge {
            weights,
            intercept: y_mean,
        });
    }
    let p = preds.len();
    let x_mean: Vec<f64> = preds
        .iter()
        .map(|&l| rows.iter().map(|&i| x[(i, l)]).sum::<f64>() / nr)
        .collect();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut y_var = 0.0;
    let mut centered = vec![0.0; p];
    for &i in rows {
        for (a, &l) in preds.iter().enumerate() {
            centered[a] = x[(i, l)] - x_mean[a];
        }
        let yc = x[(i, target)] - y_mean;
        y_var += yc * yc;
        for a in 0..p {
            rhs[a] += centered[a] * yc;
            for b in a..p {
                gram[(a, b)] += centered[a] * centered[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let lambda = lambda.unwrap_or_else(|| (1e-3 * y_var / nr).max(1e-12));
    for a in 0..p {
        gram[(a, a)] += lambda;
    }
    let w = linalg::spd_solve(gram, &rhs)?;
    let mut intercept = y_mean;
    for (a, &l) in preds.iter().enumerate() {
        weights[l] = w[a];
        intercept -= w[a] * x_mean[a];
    }
    Ok(ColumnRidge { weights, intercept })
}
