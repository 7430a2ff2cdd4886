//! Dense numeric kernel.
//!
//! The model only needs a handful of differentiable operations: affine maps,
//! ReLU, cosine similarity and a masked softmax. Each one comes with an
//! analytic backward pass here; [`grad_check`] verifies them against central
//! differences. Everything is `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{NamError, Result};

/// Norm floor used by [`cosine_forward`] and [`cosine_backward`].
pub const COSINE_EPS: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NamError::Shape {
                op: "matrix",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NamError::Shape {
                    op: "matrix",
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// A learnable array with its gradient accumulator.
///
/// Gradients accumulate across calls until [`Param::zero_grad`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Matrix", into = "Matrix")]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows, value.cols);
        Param { value, grad }
    }

    pub fn scalar(v: f64) -> Self {
        Param::new(Matrix {
            rows: 1,
            cols: 1,
            data: vec![v],
        })
    }

    pub fn len(&self) -> usize {
        self.value.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scalar_value(&self) -> f64 {
        self.value.data[0]
    }
}

impl From<Matrix> for Param {
    fn from(m: Matrix) -> Self {
        Param::new(m)
    }
}

impl From<Param> for Matrix {
    fn from(p: Param) -> Self {
        p.value
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

fn check_len(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(NamError::Shape { op, expected, got });
    }
    Ok(())
}

/// `W·x + b`.
pub fn linear_forward(w: &Matrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_len("linear_forward(x)", w.cols, x.len())?;
    check_len("linear_forward(b)", w.rows, b.len())?;
    Ok((0..w.rows).map(|r| dot(w.row(r), x) + b[r]).collect())
}

/// Gradients of [`linear_forward`]: `(upstream ⊗ x, upstream, Wᵀ·upstream)`.
pub fn linear_backward(
    w: &Matrix,
    b: &[f64],
    x: &[f64],
    upstream: &[f64],
) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    check_len("linear_backward(x)", w.cols, x.len())?;
    check_len("linear_backward(b)", w.rows, b.len())?;
    check_len("linear_backward(upstream)", w.rows, upstream.len())?;
    let mut dw = Matrix::zeros(w.rows, w.cols);
    let mut dx = vec![0.0; w.cols];
    for (r, &u) in upstream.iter().enumerate() {
        let wrow = w.row(r);
        let drow = &mut dw.data[r * w.cols..(r + 1) * w.cols];
        for c in 0..w.cols {
            drow[c] = u * x[c];
            dx[c] += wrow[c] * u;
        }
    }
    Ok((dw, upstream.to_vec(), dx))
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Passes `upstream` through where `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward(x: &[f64], upstream: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(upstream)
        .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
        .collect()
}

/// Cosine similarity with each norm floored at [`COSINE_EPS`].
pub fn cosine_forward(u: &[f64], v: &[f64]) -> Result<f64> {
    check_len("cosine", u.len(), v.len())?;
    let nu = norm(u).max(COSINE_EPS);
    let nv = norm(v).max(COSINE_EPS);
    Ok(dot(u, v) / (nu * nv))
}

/// Gradient of [`cosine_forward`] scaled by `upstream`.
///
/// When a norm sits below the floor the floor is a constant, so only the
/// numerator contributes for that side.
pub fn cosine_backward(u: &[f64], v: &[f64], upstream: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("cosine", u.len(), v.len())?;
    let raw_nu = norm(u);
    let raw_nv = norm(v);
    let nu = raw_nu.max(COSINE_EPS);
    let nv = raw_nv.max(COSINE_EPS);
    let denom = nu * nv;
    let c = dot(u, v) / denom;
    let u_active = raw_nu > COSINE_EPS;
    let v_active = raw_nv > COSINE_EPS;
    let du = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| {
            let mut g = vi / denom;
            if u_active {
                g -= c * ui / (nu * nu);
            }
            upstream * g
        })
        .collect();
    let dv = v
        .iter()
        .zip(u)
        .map(|(&vi, &ui)| {
            let mut g = ui / denom;
            if v_active {
                g -= c * vi / (nv * nv);
            }
            upstream * g
        })
        .collect();
    Ok((du, dv))
}

/// Softmax over the entries where `mask` is true; masked entries are exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    check_len("masked_softmax", logits.len(), mask.len())?;
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NamError::NoActiveView);
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Vector-Jacobian product of a softmax: `p ⊙ (upstream − ⟨p, upstream⟩)`.
///
/// Masked entries carry `p = 0` and therefore receive zero gradient.
pub fn softmax_backward(probs: &[f64], upstream: &[f64]) -> Vec<f64> {
    let mean = dot(probs, upstream);
    probs
        .iter()
        .zip(upstream)
        .map(|(&p, &u)| p * (u - mean))
        .collect()
}

pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(NamError::Domain("logsumexp of an empty vector".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Plain softmax; the gradient of [`logsumexp`].
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mask = vec![true; values.len()];
    masked_softmax(values, &mask).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one [`Param`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            config,
        }
    }

    pub fn for_param(param: &Param, config: AdamConfig) -> Self {
        AdamState::new(param.len(), config)
    }
}

/// One bias-corrected Adam update. The gradient is left untouched.
pub fn adam_step(param: &mut Param, state: &mut AdamState) {
    debug_assert_eq!(param.len(), state.m.len());
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    let values = param.value.as_mut_slice();
    let grads = param.grad.as_slice();
    for k in 0..values.len() {
        let g = grads[k];
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g;
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g;
        let m_hat = state.m[k] / bias1;
        let v_hat = state.v[k] / bias2;
        values[k] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// Relative errors below this magnitude are measured against it instead, so
/// that coordinates whose true gradient is ~0 are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub numeric: Vec<f64>,
    pub analytic: Vec<f64>,
    pub rel_errors: Vec<f64>,
    /// Coordinates whose relative error exceeds the tolerance.
    pub flagged: Vec<usize>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares `analytic` with central differences of `f` around `point`.
pub fn grad_check<F>(mut f: F, point: &[f64], analytic: &[f64], h: f64, tol: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(point.len(), analytic.len());
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + h;
        let plus = f(&x);
        x[k] = orig - h;
        let minus = f(&x);
        x[k] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .collect();
    let flagged = rel_errors
        .iter()
        .enumerate()
        .filter(|(_, &e)| !(e <= tol))
        .map(|(k, _)| k)
        .collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    GradCheckReport {
        numeric,
        analytic: analytic.to_vec(),
        rel_errors,
        flagged,
        max_rel_error,
    }
}
