//! Identity, age and combined training losses with their feature-space gradients.

use crate::data::{AgeGroup, NUM_AGE_GROUPS};
use crate::error::{Error, Result};
use crate::math::Matrix;

/// Guard added to every norm before normalizing.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosFaceConfig {
    pub margin: f64,
    pub scale: f64,
}

impl Default for CosFaceConfig {
    fn default() -> Self {
        Self {
            margin: 0.35,
            scale: 64.0,
        }
    }
}

impl CosFaceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::InvalidArgument(format!(
                "margin {} outside [0, 1)",
                self.margin
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale {} must be positive",
                self.scale
            )));
        }
        Ok(())
    }
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut probs = logits.clone();
    for i in 0..logits.rows() {
        let row = probs.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    probs
}

/// `lse(row) − row[y]`, accurate when the target dominates.
fn nll_row(row: &[f64], y: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &z)| (z - max).exp())
        .sum();
    let target = (row[y] - max).exp();
    if row[y] == max {
        (rest / target).ln_1p()
    } else {
        (max - row[y]) + (target + rest).ln()
    }
}

/// Forward state kept for the CosFace backward pass.
#[derive(Clone, Debug)]
pub struct CosFaceCache {
    pub cosines: Matrix,
    x: Matrix,
    x_hat: Matrix,
    x_norms: Vec<f64>,
    w: Matrix,
    w_hat: Matrix,
    w_norms: Vec<f64>,
    probs: Matrix,
    labels: Vec<usize>,
    scale: f64,
}

fn norms_checked(rows: impl Iterator<Item = f64>, what: &str) -> Result<Vec<f64>> {
    rows.enumerate()
        .map(|(i, n)| {
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::Degenerate(format!("{what} {i} has norm {n}")))
            }
        })
        .collect()
}

/// Mean large-margin cosine loss over the batch.
///
/// `x_id` is `batch × d`, `weight` is `d × n_classes`; the logit of class `j`
/// for sample `i` is `s · (cos θ_ij − m·[j = y_i])`.
pub fn cosface_forward(
    x_id: &Matrix,
    weight: &Matrix,
    labels: &[usize],
    cfg: &CosFaceConfig,
) -> Result<(f64, CosFaceCache)> {
    cfg.validate()?;
    if x_id.cols() != weight.rows() {
        return Err(Error::Shape {
            op: "cosface",
            left: x_id.shape(),
            right: weight.shape(),
        });
    }
    if labels.len() != x_id.rows() || x_id.rows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {}",
            labels.len(),
            x_id.rows()
        )));
    }
    let n_classes = weight.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "identity label {bad} outside [0, {n_classes})"
        )));
    }

    let x_norms = norms_checked(
        (0..x_id.rows()).map(|i| crate::math::dot(x_id.row(i), x_id.row(i)).sqrt()),
        "feature",
    )?;
    let wt = weight.transpose();
    let w_norms = norms_checked(
        (0..n_classes).map(|j| crate::math::dot(wt.row(j), wt.row(j)).sqrt()),
        "classifier column",
    )?;

    let mut x_hat = x_id.clone();
    for (i, &n) in x_norms.iter().enumerate() {
        x_hat
            .row_mut(i)
            .iter_mut()
            .for_each(|v| *v /= n + NORM_GUARD);
    }
    let mut w_hat = weight.clone();
    for r in 0..w_hat.rows() {
        for (v, &n) in w_hat.row_mut(r).iter_mut().zip(&w_norms) {
            *v /= n + NORM_GUARD;
        }
    }
    let cosines = x_hat.matmul(&w_hat)?;
    let mut logits = cosines.scale(cfg.scale);
    for (i, &y) in labels.iter().enumerate() {
        logits[(i, y)] -= cfg.scale * cfg.margin;
    }
    let probs = softmax_rows(&logits);
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| nll_row(logits.row(i), y))
        .sum::<f64>()
        / labels.len() as f64;
    Ok((
        loss,
        CosFaceCache {
            cosines,
            x: x_id.clone(),
            x_hat,
            x_norms,
            w: weight.clone(),
            w_hat,
            w_norms,
            probs,
            labels: labels.to_vec(),
            scale: cfg.scale,
        },
    ))
}

/// Back through `u ↦ u / (‖u‖ + τ)` for each row of `u`.
fn normalize_backward(u: &Matrix, norms: &[f64], grad_hat: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(u.rows(), u.cols());
    for (i, &r) in norms.iter().enumerate() {
        let n = r + NORM_GUARD;
        let proj = crate::math::dot(u.row(i), grad_hat.row(i));
        for ((o, &g), &x) in out.row_mut(i).iter_mut().zip(grad_hat.row(i)).zip(u.row(i)) {
            *o = g / n - x * proj / (n * n * r);
        }
    }
    out
}

/// Gradients of the mean CosFace loss wrt `x_id` and the classifier weights.
pub fn cosface_backward(cache: &CosFaceCache) -> Result<(Matrix, Matrix)> {
    let batch = cache.labels.len() as f64;
    let mut g_cos = cache.probs.clone();
    for (i, &y) in cache.labels.iter().enumerate() {
        g_cos[(i, y)] -= 1.0;
    }
    let g_cos = g_cos.scale(cache.scale / batch);
    let g_x_hat = g_cos.matmul_t(&cache.w_hat)?;
    let g_w_hat = cache.x_hat.t_matmul(&g_cos)?;
    let g_x = normalize_backward(&cache.x, &cache.x_norms, &g_x_hat);
    let g_w =
        normalize_backward(&cache.w.transpose(), &cache.w_norms, &g_w_hat.transpose()).transpose();
    Ok((g_x, g_w))
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() || labels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} rows of logits",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside [0, {})",
            logits.cols()
        )));
    }
    let batch = labels.len() as f64;
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss += nll_row(logits.row(i), y);
        grad[(i, y)] -= 1.0;
    }
    Ok((loss / batch, grad.scale(1.0 / batch)))
}

/// Age-group classification loss over 8 logits per sample.
pub fn softmax_ce(logits: &Matrix, labels: &[AgeGroup]) -> Result<(f64, Matrix)> {
    if logits.cols() != NUM_AGE_GROUPS {
        return Err(Error::Shape {
            op: "age softmax",
            left: logits.shape(),
            right: (logits.rows(), NUM_AGE_GROUPS),
        });
    }
    let idx: Vec<usize> = labels.iter().map(|g| g.index()).collect();
    softmax_cross_entropy(logits, &idx)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_id: f64,
    pub l_age: f64,
    pub rho_abs: f64,
    pub total: f64,
}

pub fn combine(l_id: f64, l_age: f64, rho_abs: f64, lambda1: f64, lambda2: f64) -> LossBreakdown {
    debug_assert!(lambda1 >= 0.0 && lambda2 >= 0.0);
    LossBreakdown {
        l_id,
        l_age,
        rho_abs,
        total: l_id + lambda1 * l_age + lambda2 * rho_abs,
    }
}
