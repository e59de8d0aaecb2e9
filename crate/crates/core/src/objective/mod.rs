//! Second-order polynomial surrogates of the training loss, their
//! per-batch coefficients, Laplace perturbation of those coefficients, and
//! gradients of the perturbed surrogate.
//!
//! For one sample with last hidden representation `h` and output logit
//! `g = h . w` (per output column `w`), the surrogate is
//! `k0(y) + k1(y) g + k2 g^2`. Summing over a batch gives a polynomial in
//! the output-layer weights with coefficients `c0`, `c1[p]` and
//! `c2[p][q]`; those coefficients are what the noise perturbs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{clipped_relu_grad, sigmoid, Architecture, ModelParams, Task, Trace};
use crate::numerics::{Matrix, RngState};

/// Coefficients of the per-sample surrogate `k0 + k1 g + k2 g^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaylorCoeffs {
    pub k0: f64,
    pub k1: f64,
    pub k2: f64,
}

impl TaylorCoeffs {
    pub fn eval(&self, g: f64) -> f64 {
        self.k0 + self.k1 * g + self.k2 * g * g
    }
}

/// Expansion of `(sigmoid(g) - y)^2` around `g = 0`.
pub fn taylor_coeffs_regression(y: f64) -> TaylorCoeffs {
    TaylorCoeffs {
        k0: y * y - y + 0.25,
        k1: (1.0 - 2.0 * y) / 4.0,
        k2: 1.0 / 16.0,
    }
}

/// Expansion of the per-class binary cross-entropy around `g = 0`.
pub fn taylor_coeffs_classification(y: f64) -> TaylorCoeffs {
    TaylorCoeffs {
        k0: std::f64::consts::LN_2,
        k1: 0.5 - y,
        k2: 1.0 / 8.0,
    }
}

pub fn taylor_coeffs(task: Task, y: f64) -> TaylorCoeffs {
    match task {
        Task::Regression => taylor_coeffs_regression(y),
        Task::Classification => taylor_coeffs_classification(y),
    }
}

/// Exact per-sample loss the surrogate approximates.
pub fn exact_loss(task: Task, g: f64, y: f64) -> f64 {
    match task {
        Task::Regression => (sigmoid(g) - y).powi(2),
        // -[y ln s + (1 - y) ln(1 - s)] = softplus(-g) + (1 - y) g
        Task::Classification => {
            let softplus = if -g > 30.0 { -g } else { (-g).exp().ln_1p() };
            softplus + (1.0 - y) * g
        }
    }
}

/// A mini-batch of featurized rows and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Matrix,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Aggregated polynomial coefficients over a batch.
///
/// `c1` is `b x outputs`; `c2[j]` is the symmetric `b x b` quadratic block
/// of output column `j`. The polynomial in the output weights `W` is
/// `c0 + sum_j (c1[:, j] . W[:, j] + W[:, j]^T c2[j] W[:, j])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyLossCoeffs {
    pub task: Task,
    pub c0: f64,
    pub c1: Matrix,
    pub c2: Vec<Matrix>,
}

impl PolyLossCoeffs {
    pub fn zeros(task: Task, hidden: usize, outputs: usize) -> Self {
        PolyLossCoeffs {
            task,
            c0: 0.0,
            c1: Matrix::zeros(hidden, outputs),
            c2: vec![Matrix::zeros(hidden, hidden); outputs],
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.c1.rows()
    }

    pub fn outputs(&self) -> usize {
        self.c1.cols()
    }

    fn check_output_layer(&self, w: &Matrix) -> Result<()> {
        if w.shape() != self.c1.shape() {
            return Err(Error::Shape {
                op: "polynomial",
                left: self.c1.shape(),
                right: w.shape(),
            });
        }
        Ok(())
    }

    /// Polynomial value at output weights `w`.
    pub fn value(&self, w: &Matrix) -> Result<f64> {
        self.check_output_layer(w)?;
        let b = self.hidden_width();
        let mut total = self.c0;
        for (j, c2) in self.c2.iter().enumerate() {
            for p in 0..b {
                let wp = w.get(p, j);
                total += self.c1.get(p, j) * wp;
                let row = c2.row(p);
                let mut quad = 0.0;
                for q in 0..b {
                    quad += row[q] * w.get(q, j);
                }
                total += wp * quad;
            }
        }
        Ok(total)
    }

    /// Gradient of [`PolyLossCoeffs::value`]: `c1 + (c2 + c2^T) w` per column.
    pub fn output_gradient(&self, w: &Matrix) -> Result<Matrix> {
        self.check_output_layer(w)?;
        let b = self.hidden_width();
        let mut grad = self.c1.clone();
        for (j, c2) in self.c2.iter().enumerate() {
            for p in 0..b {
                let mut acc = 0.0;
                for q in 0..b {
                    acc += (c2.get(p, q) + c2.get(q, p)) * w.get(q, j);
                }
                grad.set(p, j, grad.get(p, j) + acc);
            }
        }
        Ok(grad)
    }

    /// L1 distance between the coefficients of each distinct monomial of
    /// degree >= 1. An off-diagonal pair `{p, q}` has coefficient
    /// `c2[p][q] + c2[q][p]`.
    pub fn monomial_l1_distance(&self, other: &PolyLossCoeffs) -> f64 {
        let b = self.hidden_width();
        let mut total: f64 = self
            .c1
            .as_slice()
            .iter()
            .zip(other.c1.as_slice())
            .map(|(a, b)| (a - b).abs())
            .sum();
        for (x, y) in self.c2.iter().zip(&other.c2) {
            for p in 0..b {
                total += (x.get(p, p) - y.get(p, p)).abs();
                for q in p + 1..b {
                    total += (x.get(p, q) + x.get(q, p) - y.get(p, q) - y.get(q, p)).abs();
                }
            }
        }
        total
    }

    fn check_same_shape(&self, other: &PolyLossCoeffs) -> Result<()> {
        if self.c1.shape() != other.c1.shape() || self.c2.len() != other.c2.len() {
            return Err(Error::Shape {
                op: "PolyLossCoeffs",
                left: self.c1.shape(),
                right: other.c1.shape(),
            });
        }
        Ok(())
    }

    /// Entrywise difference `self - other`.
    pub fn difference(&self, other: &PolyLossCoeffs) -> Result<PolyLossCoeffs> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        out.c0 -= other.c0;
        out.c1.axpy(-1.0, &other.c1)?;
        for (a, b) in out.c2.iter_mut().zip(&other.c2) {
            a.axpy(-1.0, b)?;
        }
        Ok(out)
    }

    pub fn is_symmetric(&self) -> bool {
        self.c2
            .iter()
            .all(|m| (0..m.rows()).all(|p| (0..p).all(|q| m.get(p, q) == m.get(q, p))))
    }
}

/// Sums the per-sample coefficients of a batch given each row's last hidden
/// representation (`n x b`) and labels (`n x outputs`).
pub fn coeffs_from_hidden(task: Task, hidden: &Matrix, labels: &Matrix) -> Result<PolyLossCoeffs> {
    let n = hidden.rows();
    if n == 0 {
        return Err(Error::Empty("batch_coeffs"));
    }
    if labels.rows() != n {
        return Err(Error::Shape {
            op: "batch_coeffs",
            left: hidden.shape(),
            right: labels.shape(),
        });
    }
    let outputs = labels.cols();
    let mut c0 = 0.0;
    // k1 for every (sample, output); k2 is label independent.
    let mut k1 = Matrix::zeros(n, outputs);
    let mut k2 = 0.0;
    for i in 0..n {
        for j in 0..outputs {
            let t = taylor_coeffs(task, labels.get(i, j));
            c0 += t.k0;
            k1.set(i, j, t.k1);
            k2 = t.k2;
        }
    }
    let ht = hidden.transpose();
    let c1 = ht.matmul(&k1)?;
    let mut gram = ht.matmul(hidden)?;
    gram.scale(k2);
    Ok(PolyLossCoeffs {
        task,
        c0,
        c1,
        c2: vec![gram; outputs],
    })
}

/// Coefficients of the surrogate over `batch` under the current hidden
/// layers of `params`.
pub fn batch_coeffs(task: Task, batch: &Batch, params: &ModelParams) -> Result<PolyLossCoeffs> {
    let trace = params.trace(&batch.features)?;
    coeffs_from_hidden(task, trace.last_hidden(), &batch.labels)
}

/// Global L1 sensitivity of the coefficient vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub value: f64,
    pub task: Task,
}

/// `b/2 + b^2/8` for regression and `M (b + b^2/4)` for `M`-class
/// classification, with `b` the width feeding the output layer.
pub fn sensitivity(arch: &Architecture) -> Sensitivity {
    let b = arch.last_hidden() as f64;
    let value = match arch.task {
        Task::Regression => b / 2.0 + b * b / 8.0,
        Task::Classification => arch.output_width as f64 * (b + b * b / 4.0),
    };
    Sensitivity { value, task: arch.task }
}

/// Independent Laplace(`sensitivity / epsilon`) noise for every monomial of
/// degree >= 1. An off-diagonal monomial's noise is split evenly between
/// `c2[p][q]` and `c2[q][p]`, keeping the blocks symmetric.
pub fn coefficient_noise(
    task: Task,
    hidden: usize,
    outputs: usize,
    sensitivity: Sensitivity,
    epsilon: f64,
    rng: &mut RngState,
) -> Result<PolyLossCoeffs> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::param("epsilon2", format!("must be > 0, got {epsilon}")));
    }
    let scale = sensitivity.value / epsilon;
    let mut noise = PolyLossCoeffs::zeros(task, hidden, outputs);
    for v in noise.c1.as_mut_slice() {
        *v = rng.laplace(scale)?;
    }
    for block in &mut noise.c2 {
        for p in 0..hidden {
            block.set(p, p, rng.laplace(scale)?);
            for q in p + 1..hidden {
                let half = rng.laplace(scale)? / 2.0;
                block.set(p, q, half);
                block.set(q, p, half);
            }
        }
    }
    Ok(noise)
}

/// Adds fresh coefficient noise to `coeffs`. `c0` is left as is: it
/// multiplies no weight.
pub fn perturb_coeffs(
    coeffs: &PolyLossCoeffs,
    sensitivity: Sensitivity,
    epsilon: f64,
    rng: &mut RngState,
) -> Result<PolyLossCoeffs> {
    let noise = coefficient_noise(
        coeffs.task,
        coeffs.hidden_width(),
        coeffs.outputs(),
        sensitivity,
        epsilon,
        rng,
    )?;
    let mut out = coeffs.clone();
    out.c1.axpy(1.0, &noise.c1)?;
    for (c, n) in out.c2.iter_mut().zip(&noise.c2) {
        c.axpy(1.0, n)?;
    }
    Ok(out)
}

/// Unperturbed surrogate summed over the batch, as a function of every layer.
pub fn surrogate_loss(task: Task, batch: &Batch, params: &ModelParams) -> Result<f64> {
    let trace = params.trace(&batch.features)?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        for j in 0..batch.labels.cols() {
            total += taylor_coeffs(task, batch.labels.get(i, j)).eval(trace.logits.get(i, j));
        }
    }
    Ok(total)
}

/// Perturbed surrogate: the batch surrogate plus the additive noise
/// polynomial in the output weights.
pub fn perturbed_loss(task: Task, batch: &Batch, params: &ModelParams, noise: &PolyLossCoeffs) -> Result<f64> {
    let structural = surrogate_loss(task, batch, params)?;
    Ok(structural + noise.value(params.output_layer())? - noise.c0)
}

/// Exact loss (squared error or cross-entropy) summed over the batch.
pub fn exact_batch_loss(task: Task, batch: &Batch, params: &ModelParams) -> Result<f64> {
    let trace = params.trace(&batch.features)?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        for j in 0..batch.labels.cols() {
            total += exact_loss(task, trace.logits.get(i, j), batch.labels.get(i, j));
        }
    }
    Ok(total)
}

/// Gradients with the same shapes as [`ModelParams::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Matrix>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|m| m.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradient of the perturbed surrogate.
///
/// The output layer gets `c1 + (c2 + c2^T) W` from the perturbed
/// coefficients. Hidden layers get the chain rule through the batch
/// surrogate; the additive noise does not depend on them. The clipped ReLU
/// contributes sub-gradient 0 at and beyond its kinks.
pub fn grad(perturbed: &PolyLossCoeffs, batch: &Batch, params: &ModelParams) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::Empty("grad"));
    }
    let trace = params.trace(&batch.features)?;
    grad_with_trace(perturbed, batch, params, &trace)
}

/// [`grad`] reusing a forward trace of `batch.features` under `params`.
pub fn grad_with_trace(
    perturbed: &PolyLossCoeffs,
    batch: &Batch,
    params: &ModelParams,
    trace: &Trace,
) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::Empty("grad"));
    }
    let out_w = params.output_layer();
    let output = perturbed.output_gradient(out_w)?;
    if trace.logits.shape() != batch.labels.shape() {
        return Err(Error::Shape {
            op: "grad",
            left: trace.logits.shape(),
            right: batch.labels.shape(),
        });
    }

    let hidden_count = params.layers.len() - 1;
    let mut layers = vec![Matrix::zeros(0, 0); params.layers.len()];
    layers[hidden_count] = output;
    if hidden_count == 0 {
        return Ok(Gradients { layers });
    }

    // d(surrogate)/d(logit) = k1 + 2 k2 g
    let mut delta = Matrix::from_fn(batch.len(), batch.labels.cols(), |i, j| {
        let t = taylor_coeffs(perturbed.task, batch.labels.get(i, j));
        t.k1 + 2.0 * t.k2 * trace.logits.get(i, j)
    });
    let mut upstream = out_w;
    for l in (0..hidden_count).rev() {
        let mut d_pre = delta.matmul(&upstream.transpose())?;
        let pre = &trace.pre[l];
        for (d, &z) in d_pre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            *d *= clipped_relu_grad(z);
        }
        layers[l] = trace.activations[l].transpose().matmul(&d_pre)?;
        upstream = &params.layers[l];
        delta = d_pre;
    }
    Ok(Gradients { layers })
}

#[cfg(test)]
mod tests;
