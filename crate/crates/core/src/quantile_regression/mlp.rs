//! Small fully connected quantile network: `p -> h -> h -> 1` with ReLU,
//! dropout after each hidden layer, pinball loss and Adam.
//!
//! The epoch count is chosen on a hold-out split of the training rows; the
//! network is then retrained from the same initialization on all rows for
//! that many epochs. Inputs and response are standardized internally.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::QrHyper;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    n_in: usize,
    n_out: usize,
    /// Row-major `n_out x n_in`.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Dense {
    fn init<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        Dense {
            n_in,
            n_out,
            w: (0..n_in * n_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
            b: (0..n_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for o in 0..self.n_out {
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            out[o] = self.b[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// A trained network together with its input/output standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: [Dense; 3],
    x_mean: Vec<f64>,
    x_scale: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    epochs: usize,
}

impl Mlp {
    pub fn predict(&self, features: &[f64]) -> f64 {
        let x: Vec<f64> = features
            .iter()
            .zip(self.x_mean.iter().zip(&self.x_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let h = self.layers[0].n_out;
        let mut h1 = vec![0.0; h];
        let mut h2 = vec![0.0; h];
        let mut out = [0.0];
        self.layers[0].forward(&x, &mut h1);
        relu(&mut h1);
        self.layers[1].forward(&h1, &mut h2);
        relu(&mut h2);
        self.layers[2].forward(&h2, &mut out);
        self.y_mean + self.y_scale * out[0]
    }

    /// Epoch count selected on the hold-out split.
    pub fn epochs(&self) -> usize {
        self.epochs
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, layers: &mut [Dense; 3], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let mut k = 0;
        for layer in layers.iter_mut() {
            for p in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                let g = grads[k];
                self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * g;
                self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * g * g;
                *p -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
                k += 1;
            }
        }
    }
}

struct Standardized {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    x_mean: Vec<f64>,
    x_scale: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
}

fn standardize(x: &DMatrix<f64>, y: &[f64]) -> Standardized {
    let n = x.nrows() as f64;
    let p = x.ncols();
    let mut x_mean = vec![0.0; p];
    let mut x_scale = vec![1.0; p];
    for j in 0..p {
        let col = x.column(j);
        let m = col.sum() / n;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        x_mean[j] = m;
        x_scale[j] = if sd > 1e-12 { sd } else { 1.0 };
    }
    let y_mean = y.iter().sum::<f64>() / n;
    let y_sd = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n).sqrt();
    let y_scale = if y_sd > 1e-12 { y_sd } else { 1.0 };
    Standardized {
        x: (0..x.nrows())
            .map(|i| {
                (0..p)
                    .map(|j| (x[(i, j)] - x_mean[j]) / x_scale[j])
                    .collect()
            })
            .collect(),
        y: y.iter().map(|v| (v - y_mean) / y_scale).collect(),
        x_mean,
        x_scale,
        y_mean,
        y_scale,
    }
}

/// Forward + backward over one mini-batch; accumulates gradients of the mean
/// pinball loss into `grads` (layout: layer 0 w, b, layer 1 w, b, layer 2 w, b).
fn batch_gradient<R: Rng>(
    layers: &[Dense; 3],
    xs: &[&[f64]],
    ys: &[f64],
    tau: f64,
    dropout: f64,
    rng: &mut R,
    grads: &mut [f64],
) {
    grads.iter_mut().for_each(|g| *g = 0.0);
    let h = layers[0].n_out;
    let keep = 1.0 - dropout;
    let inv_b = 1.0 / xs.len() as f64;
    let off1 = layers[0].n_params();
    let off2 = off1 + layers[1].n_params();
    let (mut z1, mut a1, mut z2, mut a2) = (vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h]);
    let (mut d1, mut d2) = (vec![0.0; h], vec![0.0; h]);
    let mut drop1 = vec![0.0; h];
    let mut drop2 = vec![0.0; h];
    let mut out = [0.0];
    for (x, &y) in xs.iter().zip(ys) {
        layers[0].forward(x, &mut z1);
        for k in 0..h {
            drop1[k] = if dropout > 0.0 && rng.random::<f64>() < dropout {
                0.0
            } else {
                1.0 / keep
            };
            a1[k] = z1[k].max(0.0) * drop1[k];
        }
        layers[1].forward(&a1, &mut z2);
        for k in 0..h {
            drop2[k] = if dropout > 0.0 && rng.random::<f64>() < dropout {
                0.0
            } else {
                1.0 / keep
            };
            a2[k] = z2[k].max(0.0) * drop2[k];
        }
        layers[2].forward(&a2, &mut out);
        // d loss / d prediction
        let g_out = if y - out[0] >= 0.0 { -tau } else { 1.0 - tau } * inv_b;

        let l2 = &layers[2];
        for k in 0..h {
            grads[off2 + k] += g_out * a2[k];
            d2[k] = if z2[k] > 0.0 {
                g_out * l2.w[k] * drop2[k]
            } else {
                0.0
            };
        }
        grads[off2 + l2.w.len()] += g_out;

        let l1 = &layers[1];
        d1.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..h {
            if d2[o] == 0.0 {
                continue;
            }
            let row = o * h;
            for k in 0..h {
                grads[off1 + row + k] += d2[o] * a1[k];
                d1[k] += d2[o] * l1.w[row + k];
            }
            grads[off1 + l1.w.len() + o] += d2[o];
        }
        let l0 = &layers[0];
        let p = l0.n_in;
        for o in 0..h {
            let g = if z1[o] > 0.0 { d1[o] * drop1[o] } else { 0.0 };
            if g == 0.0 {
                continue;
            }
            for k in 0..p {
                grads[o * p + k] += g * x[k];
            }
            grads[l0.w.len() + o] += g;
        }
    }
}

fn eval_loss(layers: &[Dense; 3], xs: &[Vec<f64>], ys: &[f64], tau: f64) -> f64 {
    let h = layers[0].n_out;
    let (mut h1, mut h2, mut out) = (vec![0.0; h], vec![0.0; h], [0.0]);
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        layers[0].forward(x, &mut h1);
        relu(&mut h1);
        layers[1].forward(&h1, &mut h2);
        relu(&mut h2);
        layers[2].forward(&h2, &mut out);
        total += super::pinball_loss(y, out[0], tau);
    }
    total / ys.len() as f64
}

/// Trains for `epochs`, calling `on_epoch(epoch, layers)` after each one.
fn train(
    init: &[Dense; 3],
    xs: &[Vec<f64>],
    ys: &[f64],
    tau: f64,
    hyper: &QrHyper,
    epochs: usize,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &[Dense; 3]),
) -> [Dense; 3] {
    let mut layers = init.clone();
    let n_params: usize = layers.iter().map(Dense::n_params).sum();
    let mut adam = Adam::new(n_params, hyper.learning_rate);
    let mut grads = vec![0.0; n_params];
    let mut rng = rng::from_seed(seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let bx: Vec<&[f64]> = chunk.iter().map(|&i| xs[i].as_slice()).collect();
            let by: Vec<f64> = chunk.iter().map(|&i| ys[i]).collect();
            batch_gradient(&layers, &bx, &by, tau, hyper.dropout, &mut rng, &mut grads);
            adam.step(&mut layers, &grads);
        }
        on_epoch(epoch, &layers);
    }
    layers
}

pub(super) fn fit(x: &DMatrix<f64>, y: &[f64], tau: f64, hyper: &QrHyper) -> Mlp {
    let data = standardize(x, y);
    let p = x.ncols();
    let mut init_rng = rng::from_seed(rng::derive_seed(hyper.seed, 1));
    let init = [
        Dense::init(p, hyper.hidden, &mut init_rng),
        Dense::init(hyper.hidden, hyper.hidden, &mut init_rng),
        Dense::init(hyper.hidden, 1, &mut init_rng),
    ];

    let n = data.y.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::from_seed(rng::derive_seed(hyper.seed, 2)));
    let n_hold = ((hyper.holdout_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (hold, fit_idx) = idx.split_at(n_hold);
    let pick = |ids: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            ids.iter().map(|&i| data.x[i].clone()).collect(),
            ids.iter().map(|&i| data.y[i]).collect(),
        )
    };
    let (fx, fy) = pick(fit_idx);
    let (hx, hy) = pick(hold);

    let mut best = (f64::INFINITY, 1);
    train(
        &init,
        &fx,
        &fy,
        tau,
        hyper,
        hyper.max_epochs,
        rng::derive_seed(hyper.seed, 3),
        |e, l| {
            let loss = eval_loss(l, &hx, &hy, tau);
            if loss < best.0 {
                best = (loss, e);
            }
        },
    );
    let epochs = best.1;
    let layers = train(
        &init,
        &data.x,
        &data.y,
        tau,
        hyper,
        epochs,
        rng::derive_seed(hyper.seed, 4),
        |_, _| {},
    );
    Mlp {
        layers,
        x_mean: data.x_mean,
        x_scale: data.x_scale,
        y_mean: data.y_mean,
        y_scale: data.y_scale,
        epochs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Finite-difference check of the analytic gradient with dropout disabled.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng::from_seed(5);
        let layers = [
            Dense::init(3, 5, &mut rng),
            Dense::init(5, 5, &mut rng),
            Dense::init(5, 1, &mut rng),
        ];
        let xs: Vec<Vec<f64>> = (0..8)
            .map(|i| vec![i as f64 * 0.3 - 1.0, (i as f64).cos(), 0.5])
            .collect();
        let ys: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let bx: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let n_params: usize = layers.iter().map(Dense::n_params).sum();
        let mut grads = vec![0.0; n_params];
        batch_gradient(&layers, &bx, &ys, 0.3, 0.0, &mut rng, &mut grads);

        let h = 1e-6;
        let mut k = 0;
        for l in 0..3 {
            let count = layers[l].n_params();
            for idx in 0..count {
                let perturb = |delta: f64| {
                    let mut ls = layers.clone();
                    let wl = ls[l].w.len();
                    if idx < wl {
                        ls[l].w[idx] += delta;
                    } else {
                        ls[l].b[idx - wl] += delta;
                    }
                    eval_loss(&ls, &xs, &ys, 0.3)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                assert!(
                    (fd - grads[k]).abs() < 1e-5,
                    "param {k}: fd {fd} vs {}",
                    grads[k]
                );
                k += 1;
            }
        }
    }
}
