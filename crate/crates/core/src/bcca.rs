//! Canonical mapping and batch canonical correlation.
//!
//! The canonical mapping projects each feature part to one scalar per sample,
//! `v_t = x_t · w_t`. The batch correlation of the two projections is
//!
//! ```text
//! ρ = (1/m) Σ (v_id − μ_id)(v_age − μ_age) / (√(σ²_id + ε) · √(σ²_age + ε))
//! ```
//!
//! with population statistics over the mini-batch of size `m`.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::math::{rng_normal, Matrix, Rng};

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CmmParams {
    /// `d_feat × 1`
    pub w_id: Matrix,
    /// `d_feat × 1`
    pub w_age: Matrix,
}

impl CmmParams {
    /// `N(0, 1/d_feat)` entries, redrawn while the norm is below 1e-8.
    pub fn new(d_feat: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / d_feat as f64).sqrt();
        let mut draw = || loop {
            let w = rng_normal(rng, d_feat, 1, 0.0, std);
            if w.norm() >= 1e-8 {
                break w;
            }
        };
        let w_id = draw();
        let w_age = draw();
        Self { w_id, w_age }
    }

    pub fn feature_dim(&self) -> usize {
        self.w_id.rows()
    }
}

/// Projections and statistics of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BccaBatch {
    pub v_id: Matrix,
    pub v_age: Matrix,
    pub mu_id: f64,
    pub mu_age: f64,
    pub var_id: f64,
    pub var_age: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl BccaBatch {
    pub fn batch_size(&self) -> usize {
        self.v_id.rows()
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let m = v.len() as f64;
    let mu = v.iter().sum::<f64>() / m;
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m;
    (mu, var)
}

/// Batch statistics and `ρ` from already projected variables.
pub fn correlate(v_id: Matrix, v_age: Matrix, epsilon: f64) -> Result<BccaBatch> {
    if v_id.shape() != v_age.shape() || v_id.cols() != 1 {
        return Err(Error::Shape {
            op: "correlate",
            left: v_id.shape(),
            right: v_age.shape(),
        });
    }
    let m = v_id.rows();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch correlation needs at least 2 samples, got {m}"
        )));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let (mu_id, var_id) = mean_var(v_id.as_slice());
    let (mu_age, var_age) = mean_var(v_age.as_slice());
    let cov = v_id
        .as_slice()
        .iter()
        .zip(v_age.as_slice())
        .map(|(a, b)| (a - mu_id) * (b - mu_age))
        .sum::<f64>()
        / m as f64;
    let rho = cov / ((var_id + epsilon).sqrt() * (var_age + epsilon).sqrt());
    Ok(BccaBatch {
        v_id,
        v_age,
        mu_id,
        mu_age,
        var_id,
        var_age,
        rho,
        epsilon,
    })
}

pub fn cmm_forward(
    cmm: &CmmParams,
    x_id: &Matrix,
    x_age: &Matrix,
    epsilon: f64,
) -> Result<BccaBatch> {
    if x_id.shape() != x_age.shape() {
        return Err(Error::Shape {
            op: "cmm forward",
            left: x_id.shape(),
            right: x_age.shape(),
        });
    }
    let v_id = x_id.matmul(&cmm.w_id)?;
    let v_age = x_age.matmul(&cmm.w_age)?;
    correlate(v_id, v_age, epsilon)
}

thread_local! {
    static GRAD_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`bcca_backward`] calls made on the current thread.
pub fn gradient_evaluations() -> u64 {
    GRAD_EVALS.with(Cell::get)
}

/// `∂ρ/∂v_id` and `∂ρ/∂v_age` for every sample of the batch.
pub fn bcca_backward(batch: &BccaBatch) -> (Matrix, Matrix) {
    backward_with_sign(batch, 1.0)
}

/// Variant whose ρ-term sign can be flipped; exists so the gradient checker
/// can prove it detects a corrupted derivative.
#[doc(hidden)]
pub fn bcca_backward_corrupted(batch: &BccaBatch) -> (Matrix, Matrix) {
    backward_with_sign(batch, -1.0)
}

fn backward_with_sign(batch: &BccaBatch, rho_term_sign: f64) -> (Matrix, Matrix) {
    GRAD_EVALS.with(|c| c.set(c.get() + 1));
    let m = batch.batch_size() as f64;
    let s_id = batch.var_id + batch.epsilon;
    let s_age = batch.var_age + batch.epsilon;
    let denom = s_id.sqrt() * s_age.sqrt();
    let rho = rho_term_sign * batch.rho;
    let mut g_id = Matrix::zeros(batch.batch_size(), 1);
    let mut g_age = Matrix::zeros(batch.batch_size(), 1);
    for i in 0..batch.batch_size() {
        let c_id = batch.v_id[(i, 0)] - batch.mu_id;
        let c_age = batch.v_age[(i, 0)] - batch.mu_age;
        g_id[(i, 0)] = (c_age / denom - c_id * rho / s_id) / m;
        g_age[(i, 0)] = (c_id / denom - c_age * rho / s_age) / m;
    }
    (g_id, g_age)
}

#[derive(Clone, Debug)]
pub struct CmmGrads {
    pub w_id: Matrix,
    pub w_age: Matrix,
    pub x_id: Matrix,
    pub x_age: Matrix,
}

/// Back through `v_t = x_t · w_t`.
pub fn cmm_backward(
    cmm: &CmmParams,
    x_id: &Matrix,
    x_age: &Matrix,
    grad_v_id: &Matrix,
    grad_v_age: &Matrix,
) -> Result<CmmGrads> {
    for (x, g) in [(x_id, grad_v_id), (x_age, grad_v_age)] {
        if g.shape() != (x.rows(), 1) || x.cols() != cmm.feature_dim() {
            return Err(Error::Shape {
                op: "cmm backward",
                left: x.shape(),
                right: g.shape(),
            });
        }
    }
    Ok(CmmGrads {
        w_id: x_id.t_matmul(grad_v_id)?,
        w_age: x_age.t_matmul(grad_v_age)?,
        x_id: grad_v_id.matmul_t(&cmm.w_id)?,
        x_age: grad_v_age.matmul_t(&cmm.w_age)?,
    })
}

/// `|ρ|` and the derivative `∂|ρ|/∂ρ = sign(ρ)`, with `sign(0) = 0`.
pub fn dal_objective(rho: f64) -> (f64, f64) {
    let sign = if rho > 0.0 {
        1.0
    } else if rho < 0.0 {
        -1.0
    } else {
        0.0
    };
    (rho.abs(), sign)
}
