//! Linear pinball regression.
//!
//! The problem is a linear program; its optimum is attained at a vertex where
//! `q` observations (one per free parameter) are interpolated exactly. We
//! warm-start with iteratively reweighted least squares on a smoothed loss
//! (smoothing annealed from 1e-2 to 1e-8, relative to the response scale),
//! pick the `q` best-fitted linearly independent rows as the initial basis,
//! then run basis exchanges: leave along the edge with the most negative
//! directional derivative, line-search to the minimizing breakpoint and let
//! that observation enter. Each exchange strictly decreases the risk, and the
//! loop stops when no edge descends, which at a nondegenerate vertex is the
//! exact optimality condition.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Returns `(weights, intercept)`; weights of columns that are linearly
/// dependent on earlier ones (or on the intercept) are zero.
pub(super) fn fit(
    x: &DMatrix<f64>,
    y: &[f64],
    tau: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, f64)> {
    let n = x.nrows();
    let p = x.ncols();
    let full = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let kept = independent_columns(&full);
    let a = full.select_columns(&kept);
    let yv = DVector::from_column_slice(y);

    let start = irls(&a, &yv, tau);
    let beta = exchange(&a, &yv, tau, &start, max_iter)?;

    let mut coef = vec![0.0; p + 1];
    for (k, &c) in kept.iter().enumerate() {
        coef[c] = beta[k];
    }
    let intercept = coef[0];
    coef.remove(0);
    Ok((coef, intercept))
}

/// Greedy Gram-Schmidt over columns in order, keeping those with a
/// non-negligible component outside the span of the columns kept so far.
fn independent_columns(a: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..a.ncols() {
        let col = a.column(j).into_owned();
        let norm = col.norm();
        if norm == 0.0 {
            continue;
        }
        let mut r = col;
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&r);
                r.axpy(-proj, b, 1.0);
            }
        }
        let rn = r.norm();
        if rn > 1e-9 * norm {
            basis.push(r / rn);
            kept.push(j);
        }
    }
    kept
}

fn irls(a: &DMatrix<f64>, y: &DVector<f64>, tau: f64) -> DVector<f64> {
    let q = a.ncols();
    let scale = {
        let mean = y.mean();
        (y.iter().map(|v| (v - mean).abs()).sum::<f64>() / y.len() as f64).max(1e-12)
    };
    let weighted_ls = |w: &DVector<f64>| -> Option<DVector<f64>> {
        let mut gram = DMatrix::<f64>::zeros(q, q);
        let mut rhs = DVector::<f64>::zeros(q);
        for i in 0..a.nrows() {
            let row = a.row(i);
            let wi = w[i];
            for r in 0..q {
                let v = wi * row[r];
                rhs[r] += v * y[i];
                for c in r..q {
                    gram[(r, c)] += v * row[c];
                }
            }
        }
        for r in 0..q {
            for c in 0..r {
                gram[(r, c)] = gram[(c, r)];
            }
        }
        crate::linalg::spd_solve(gram, &rhs).ok()
    };
    let mut beta = match weighted_ls(&DVector::from_element(a.nrows(), 1.0)) {
        Some(b) => b,
        None => return DVector::zeros(q),
    };
    let mut eta = 1e-2;
    while eta >= 1e-8 {
        for _ in 0..4 {
            let r = y - a * &beta;
            let w = DVector::from_iterator(
                r.len(),
                r.iter().map(|&ri| {
                    let c = if ri > 0.0 { tau } else { 1.0 - tau };
                    c / ri.abs().max(eta * scale)
                }),
            );
            match weighted_ls(&w) {
                Some(b) => beta = b,
                None => return beta,
            }
        }
        eta *= 0.1;
    }
    beta
}

/// Chooses `q` linearly independent rows, preferring small residuals.
fn initial_basis(a: &DMatrix<f64>, residuals: &DVector<f64>) -> Result<Vec<usize>> {
    let q = a.ncols();
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| {
        residuals[i]
            .abs()
            .total_cmp(&residuals[j].abs())
            .then(i.cmp(&j))
    });
    let mut basis_vecs: Vec<DVector<f64>> = Vec::with_capacity(q);
    let mut rows = Vec::with_capacity(q);
    for i in order {
        let v = a.row(i).transpose();
        let norm = v.norm();
        if norm == 0.0 {
            continue;
        }
        let mut r = v;
        for _ in 0..2 {
            for b in &basis_vecs {
                let proj = b.dot(&r);
                r.axpy(-proj, b, 1.0);
            }
        }
        let rn = r.norm();
        if rn > 1e-8 * norm {
            basis_vecs.push(r / rn);
            rows.push(i);
            if rows.len() == q {
                return Ok(rows);
            }
        }
    }
    Err(Error::invalid(
        "x",
        "design has fewer independent rows than columns",
    ))
}

fn exchange(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: f64,
    start: &DVector<f64>,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let n = a.nrows();
    let q = a.ncols();
    let mut basis = initial_basis(a, &(y - a * start))?;
    let mut in_basis = vec![false; n];
    for &i in &basis {
        in_basis[i] = true;
    }
    let y_scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let zero_tol = 1e-10 * y_scale;
    let slope_tol = 1e-10 * n as f64;

    let mut beta = DVector::zeros(q);
    for _ in 0..max_iter.max(1) {
        let bh = a.select_rows(&basis);
        let inv = bh
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::invalid("x", "singular basis in quantile solver"))?;
        let yh = DVector::from_iterator(q, basis.iter().map(|&i| y[i]));
        beta = &inv * yh;
        let mut r = y - a * &beta;
        for &i in &basis {
            r[i] = 0.0;
        }
        // z[(i, j)] = change of row i's fit per unit move along the edge that releases basis slot j
        let z = a * &inv;

        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..q {
            let mut w = 0.0;
            let mut deg_plus = 0.0;
            let mut deg_minus = 0.0;
            for i in 0..n {
                if in_basis[i] {
                    continue;
                }
                let zij = z[(i, j)];
                if r[i].abs() > zero_tol {
                    w += if r[i] > 0.0 { tau } else { tau - 1.0 } * zij;
                } else if zij > 0.0 {
                    deg_plus += zij * (1.0 - tau);
                    deg_minus += zij * tau;
                } else {
                    deg_plus += -zij * tau;
                    deg_minus += -zij * (1.0 - tau);
                }
            }
            let s_plus = -w + deg_plus + (1.0 - tau);
            let s_minus = w + deg_minus + tau;
            for (sigma, slope) in [(1.0, s_plus), (-1.0, s_minus)] {
                if slope < -slope_tol && best.is_none_or(|(_, _, s)| slope < s) {
                    best = Some((j, sigma, slope));
                }
            }
        }
        let Some((j, sigma, slope0)) = best else {
            return Ok(beta);
        };

        let mut breaks: Vec<(f64, f64, usize)> = (0..n)
            .filter(|&i| !in_basis[i] && r[i].abs() > zero_tol)
            .filter_map(|i| {
                let ai = sigma * z[(i, j)];
                let t = r[i] / ai;
                (ai != 0.0 && t > 0.0).then_some((t, ai.abs(), i))
            })
            .collect();
        breaks.sort_by(|u, v| u.0.total_cmp(&v.0).then(u.2.cmp(&v.2)));
        let mut slope = slope0;
        let mut entering = None;
        for (_, weight, i) in breaks {
            slope += weight;
            if slope >= 0.0 {
                entering = Some(i);
                break;
            }
        }
        let Some(enter) = entering else {
            return Err(Error::invalid("x", "pinball risk unbounded along an edge"));
        };
        in_basis[basis[j]] = false;
        basis[j] = enter;
        in_basis[enter] = true;
    }
    log::warn!("quantile solver hit the exchange cap of {max_iter}");
    Ok(beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Coordinate-wise subgradient intervals of the mean pinball risk at the
    /// fitted parameters; each must contain zero. Independent of the solver.
    fn subgradient_gap(x: &DMatrix<f64>, y: &[f64], tau: f64, w: &[f64], b: f64) -> f64 {
        let n = x.nrows();
        let p = x.ncols();
        let mut worst: f64 = 0.0;
        for j in 0..=p {
            let (mut lo, mut hi) = (0.0, 0.0);
            for i in 0..n {
                let xi = if j == 0 { 1.0 } else { x[(i, j - 1)] };
                let fit = b + (0..p).map(|k| w[k] * x[(i, k)]).sum::<f64>();
                let r = y[i] - fit;
                if r.abs() <= 1e-9 {
                    // psi ranges over [tau - 1, tau]
                    let (u, v) = ((tau - 1.0) * xi, tau * xi);
                    lo -= u.max(v);
                    hi -= u.min(v);
                } else {
                    let psi = if r > 0.0 { tau } else { tau - 1.0 };
                    lo -= psi * xi;
                    hi -= psi * xi;
                }
            }
            lo /= n as f64;
            hi /= n as f64;
            let gap = if lo > 0.0 {
                lo
            } else if hi < 0.0 {
                -hi
            } else {
                0.0
            };
            worst = worst.max(gap);
        }
        worst
    }

    #[test]
    fn subgradient_optimality_on_random_designs() {
        for seed in 0..20u64 {
            let mut rng = crate::rng::from_seed(seed);
            let n = 60 + (seed as usize * 37) % 400;
            let p = 1 + (seed as usize) % 6;
            let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y: Vec<f64> = (0..n)
                .map(|i| {
                    (0..p).map(|k| x[(i, k)] * (k as f64 - 1.0)).sum::<f64>()
                        + 2.0 * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            let tau = [0.05, 0.25, 0.5, 0.9, 0.95][seed as usize % 5];
            let (w, b) = fit(&x, &y, tau, 10_000).unwrap();
            let gap = subgradient_gap(&x, &y, tau, &w, b);
            assert!(gap <= 1e-4, "seed {seed}: gap {gap}");
        }
    }

    #[test]
    fn collinear_and_zero_columns() {
        let mut rng = crate::rng::from_seed(1);
        let n = 200;
        let x = DMatrix::from_fn(n, 4, |i, j| match j {
            0 => (i as f64 * 0.1).sin(),
            1 => 0.0,
            2 => 2.0 * (i as f64 * 0.1).sin(),
            _ => {
                if i % 3 == 0 {
                    1.0
                } else {
                    0.0
                }
            }
        });
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)] + rng.random::<f64>()).collect();
        let (w, b) = fit(&x, &y, 0.7, 10_000).unwrap();
        assert_eq!(w[1], 0.0);
        assert_eq!(w[2], 0.0);
        assert!(subgradient_gap(&x, &y, 0.7, &w, b) <= 1e-4);
    }

    #[test]
    fn quantile_levels_do_not_cross_in_sample() {
        let mut rng = crate::rng::from_seed(12);
        let n = 1000;
        let x = DMatrix::from_fn(n, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..n)
            .map(|i| x[(i, 0)] - 0.5 * x[(i, 2)] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (wl, bl) = fit(&x, &y, 0.05, 10_000).unwrap();
        let (wu, bu) = fit(&x, &y, 0.95, 10_000).unwrap();
        let ok = (0..n)
            .filter(|&i| {
                let lo = bl + (0..3).map(|k| wl[k] * x[(i, k)]).sum::<f64>();
                let hi = bu + (0..3).map(|k| wu[k] * x[(i, k)]).sum::<f64>();
                lo <= hi
            })
            .count();
        assert!(ok as f64 >= 0.99 * n as f64, "{ok}");
    }
}
