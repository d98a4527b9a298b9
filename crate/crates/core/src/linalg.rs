use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const JITTER: f64 = 1e-10;

/// Cholesky factorization, retried once with a diagonal jitter of
/// `1e-10 * max(1, max diag)`.
pub(crate) fn cholesky(mut a: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let scale = a.diagonal().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..a.nrows() {
        a[(i, i)] += JITTER * scale;
    }
    Cholesky::new(a).ok_or_else(|| Error::NotPositiveDefinite {
        context: String::new(),
    })
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub(crate) fn spd_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(cholesky(a)?.solve(b))
}
