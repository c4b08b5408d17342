//! Backbone, residual factorization and heads, with hand-written backward passes.
//!
//! The backbone maps inputs to features `x`; the factorization module maps
//! `x` to the age part `x_age = R(x)` and keeps the residual `x_id = x − x_age`
//! as the identity part. The age head classifies `x_age` into age groups and
//! the identity classifier holds one weight column per training identity.

use crate::data::NUM_AGE_GROUPS;
use crate::error::{Error, Result};
use crate::math::{rng_normal, Matrix, Rng};

/// Fully connected layer `y = x · weight + bias` on row batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `fan_in × fan_out`
    pub weight: Matrix,
    /// `1 × fan_out`
    pub bias: Matrix,
}

impl Dense {
    /// He initialization, zero bias.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: rng_normal(rng, fan_in, fan_out, 0.0, (2.0 / fan_in as f64).sqrt()),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Stack of dense layers with ReLU between them. The last layer is affine
/// unless `output_relu` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub output_relu: bool,
}

#[derive(Clone, Debug)]
pub struct MlpTape {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl MlpTape {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

/// NaN passes through so a poisoned layer cannot be masked.
fn relu(v: f64) -> f64 {
    if v > 0.0 || v.is_nan() {
        v
    } else {
        0.0
    }
}

impl Mlp {
    /// `dims = [input, hidden..., output]`.
    pub fn new(dims: &[usize], output_relu: bool, rng: &mut Rng) -> Self {
        assert!(
            dims.len() >= 2,
            "an MLP needs at least input and output dims"
        );
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| Dense::new(w[0], w[1], &mut rng.derive(l as u64)))
            .collect();
        Self {
            layers,
            output_relu,
        }
    }

    pub fn zeros(dims: &[usize], output_relu: bool) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            output_relu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.output_relu
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpTape)> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp forward",
                left: x.shape(),
                right: self.layers[0].weight.shape(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = h.matmul(&layer.weight)?.add_row_broadcast(&layer.bias)?;
            let out = if self.activated(l) {
                z.map(relu)
            } else {
                z.clone()
            };
            inputs.push(h);
            pre_activations.push(z);
            h = out;
        }
        Ok((
            h,
            MlpTape {
                inputs,
                pre_activations,
            },
        ))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Returns parameter gradients and the gradient wrt the input batch.
    pub fn backward(&self, tape: &MlpTape, grad_out: &Matrix) -> Result<(Vec<Dense>, Matrix)> {
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::InvalidArgument(
                "tape was recorded on a different network".into(),
            ));
        }
        if grad_out.shape() != (tape.batch_size(), self.output_dim()) {
            return Err(Error::Shape {
                op: "mlp backward",
                left: grad_out.shape(),
                right: (tape.batch_size(), self.output_dim()),
            });
        }
        let mut grads = vec![None; self.layers.len()];
        let mut g = grad_out.clone();
        for l in (0..self.layers.len()).rev() {
            if self.activated(l) {
                let z = &tape.pre_activations[l];
                for (gv, &zv) in g.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if zv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let weight = tape.inputs[l].t_matmul(&g)?;
            let bias = g.sum_rows();
            g = g.matmul_t(&self.layers[l].weight)?;
            grads[l] = Some(Dense { weight, bias });
        }
        Ok((grads.into_iter().map(Option::unwrap).collect(), g))
    }
}

/// Precision kept below the largest magnitude of a feature row. The remaining
/// 11 bits of the significand are headroom for `x_age` and `x_id`.
pub const FEATURE_GRID_BITS: i32 = 42;
const MIN_ROW_EXPONENT: i32 = -40;

fn row_grid(row: &[f64]) -> f64 {
    let max = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let exponent = if max > 0.0 && max.is_normal() {
        // max ∈ [2^(e−1), 2^e)
        ((max.to_bits() >> 52) & 0x7ff) as i32 - 1022
    } else {
        MIN_ROW_EXPONENT
    };
    2f64.powi(exponent.max(MIN_ROW_EXPONENT) - FEATURE_GRID_BITS)
}

fn snap(v: f64, grid: f64) -> f64 {
    (v / grid).round() * grid
}

thread_local! {
    static RECONSTRUCTION_CHECKS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Forward passes on the current thread whose reconstruction was verified.
pub fn reconstruction_checks() -> u64 {
    RECONSTRUCTION_CHECKS.with(std::cell::Cell::get)
}

/// `x = x_id + x_age` holds bitwise for every entry.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTriple {
    pub x: Matrix,
    pub x_id: Matrix,
    pub x_age: Matrix,
}

impl FeatureTriple {
    pub fn batch_size(&self) -> usize {
        self.x.rows()
    }

    pub fn reconstructs_exactly(&self) -> bool {
        self.x
            .as_slice()
            .iter()
            .zip(self.x_id.as_slice())
            .zip(self.x_age.as_slice())
            .all(|((&x, &i), &a)| (i + a).to_bits() == x.to_bits())
    }
}

/// Everything needed to replay one forward pass backwards.
#[derive(Clone, Debug)]
pub struct FactorTape {
    backbone: MlpTape,
    rfm: MlpTape,
}

impl FactorTape {
    pub fn batch_size(&self) -> usize {
        self.backbone.batch_size()
    }
}

/// The backbone `F` and residual factorization module `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorNet {
    pub backbone: Mlp,
    pub rfm: Mlp,
}

#[derive(Clone, Debug)]
pub struct FactorGrads {
    pub backbone: Vec<Dense>,
    pub rfm: Vec<Dense>,
}

impl FactorNet {
    pub fn feature_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    /// Features are snapped to a per-row power-of-two grid before and after
    /// `R`, which makes `x − x_age` exact and the reconstruction bitwise.
    /// Backward treats the snapping as identity.
    pub fn forward(&self, inputs: &Matrix) -> Result<(FeatureTriple, FactorTape)> {
        if inputs.rows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let (mut x, backbone) = self.backbone.forward(inputs)?;
        if x.cols() != self.rfm.input_dim() {
            return Err(Error::Shape {
                op: "factorization input",
                left: x.shape(),
                right: self.rfm.layers[0].weight.shape(),
            });
        }
        let grids: Vec<f64> = (0..x.rows()).map(|i| row_grid(x.row(i))).collect();
        for (i, &q) in grids.iter().enumerate() {
            x.row_mut(i).iter_mut().for_each(|v| *v = snap(*v, q));
        }
        let (mut x_age, rfm) = self.rfm.forward(&x)?;
        for (i, &q) in grids.iter().enumerate() {
            x_age.row_mut(i).iter_mut().for_each(|v| *v = snap(*v, q));
        }
        let x_id = x.sub(&x_age)?;
        let triple = FeatureTriple { x, x_id, x_age };
        if !triple.is_finite() {
            return Err(Error::NonFinite("factorized features".into()));
        }
        RECONSTRUCTION_CHECKS.with(|c| c.set(c.get() + 1));
        if !triple.reconstructs_exactly() {
            return Err(Error::Factorization(
                "x_age exceeds the exact range of its row grid (|x_age| ≥ 2048·max|x|)".into(),
            ));
        }
        Ok((triple, FactorTape { backbone, rfm }))
    }

    /// Chain rule through `x_id = x − R(x)`, `x_age = R(x)`:
    /// `∂L/∂x = g_id + J_Rᵀ (g_age − g_id)`.
    pub fn backward(
        &self,
        tape: &FactorTape,
        grad_x_id: &Matrix,
        grad_x_age: &Matrix,
    ) -> Result<FactorGrads> {
        let expected = (tape.batch_size(), self.feature_dim());
        for g in [grad_x_id, grad_x_age] {
            if g.shape() != expected {
                return Err(Error::Shape {
                    op: "factor backward",
                    left: g.shape(),
                    right: expected,
                });
            }
        }
        let (rfm, through_r) = self.rfm.backward(&tape.rfm, &grad_x_age.sub(grad_x_id)?)?;
        let grad_x = grad_x_id.add(&through_r)?;
        let (backbone, _) = self.backbone.backward(&tape.backbone, &grad_x)?;
        Ok(FactorGrads { backbone, rfm })
    }
}

impl FeatureTriple {
    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.x_id.is_finite() && self.x_age.is_finite()
    }
}

/// Identity classifier weights, one column per training identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdClassifier {
    /// `d_feat × n_id`
    pub weight: Matrix,
}

impl IdClassifier {
    /// Gaussian columns, redrawn until none is (numerically) zero.
    pub fn new(d_feat: usize, n_id: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / d_feat as f64).sqrt();
        let mut weight = rng_normal(rng, d_feat, n_id, 0.0, std);
        for j in 0..n_id {
            while (0..d_feat)
                .map(|i| weight[(i, j)].powi(2))
                .sum::<f64>()
                .sqrt()
                < 1e-8
            {
                for i in 0..d_feat {
                    weight[(i, j)] = std * rng.normal();
                }
            }
        }
        Self { weight }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Architecture {
    pub d_in: usize,
    pub hidden: usize,
    pub d_feat: usize,
    pub n_id: usize,
    pub rfm_output_relu: bool,
}

impl Architecture {
    /// Default widths: hidden 128, features 32.
    pub fn new(d_in: usize, n_id: usize) -> Self {
        Self {
            d_in,
            hidden: 128,
            d_feat: 32,
            n_id,
            rfm_output_relu: false,
        }
    }

    pub fn backbone_dims(&self) -> Vec<usize> {
        vec![self.d_in, self.hidden, self.hidden, self.d_feat]
    }

    /// Two FC layers; ReLU after the first.
    pub fn rfm_dims(&self) -> Vec<usize> {
        vec![self.d_feat, self.d_feat, self.d_feat]
    }

    /// Three FC layers ending in one logit per age group.
    pub fn age_head_dims(&self) -> Vec<usize> {
        vec![self.d_feat, self.d_feat, self.d_feat, NUM_AGE_GROUPS]
    }
}

/// Every parameter trained in the minimizing phase.
#[derive(Clone, Debug, PartialEq)]
pub struct DalModel {
    pub net: FactorNet,
    pub age_head: Mlp,
    pub id_classifier: IdClassifier,
}

/// Gradients laid out like [`DalModel::named_params`].
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub net: FactorGrads,
    pub age_head: Vec<Dense>,
    pub id_classifier: Matrix,
}

fn push_layers<'a>(out: &mut Vec<(String, &'a Matrix)>, prefix: &str, layers: &'a [Dense]) {
    for (l, d) in layers.iter().enumerate() {
        out.push((format!("{prefix}.{l}.weight"), &d.weight));
        out.push((format!("{prefix}.{l}.bias"), &d.bias));
    }
}

fn push_layers_mut<'a>(
    out: &mut Vec<(String, &'a mut Matrix)>,
    prefix: &str,
    layers: &'a mut [Dense],
) {
    for (l, d) in layers.iter_mut().enumerate() {
        out.push((format!("{prefix}.{l}.weight"), &mut d.weight));
        out.push((format!("{prefix}.{l}.bias"), &mut d.bias));
    }
}

impl DalModel {
    pub fn new(arch: &Architecture, rng: &Rng) -> Self {
        Self {
            net: FactorNet {
                backbone: Mlp::new(&arch.backbone_dims(), false, &mut rng.derive(0)),
                rfm: Mlp::new(&arch.rfm_dims(), arch.rfm_output_relu, &mut rng.derive(1)),
            },
            age_head: Mlp::new(&arch.age_head_dims(), false, &mut rng.derive(2)),
            id_classifier: IdClassifier::new(arch.d_feat, arch.n_id, &mut rng.derive(3)),
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            d_in: self.net.backbone.input_dim(),
            hidden: self.net.backbone.layers[0].fan_out(),
            d_feat: self.net.feature_dim(),
            n_id: self.id_classifier.num_classes(),
            rfm_output_relu: self.net.rfm.output_relu,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        push_layers(&mut out, "backbone", &self.net.backbone.layers);
        push_layers(&mut out, "rfm", &self.net.rfm.layers);
        push_layers(&mut out, "age_head", &self.age_head.layers);
        out.push(("id_classifier.weight".into(), &self.id_classifier.weight));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        push_layers_mut(&mut out, "backbone", &mut self.net.backbone.layers);
        push_layers_mut(&mut out, "rfm", &mut self.net.rfm.layers);
        push_layers_mut(&mut out, "age_head", &mut self.age_head.layers);
        out.push((
            "id_classifier.weight".into(),
            &mut self.id_classifier.weight,
        ));
        out
    }

    /// Identity features only, as used at test time.
    pub fn identity_features(&self, inputs: &Matrix) -> Result<Matrix> {
        self.net.forward(inputs).map(|(t, _)| t.x_id)
    }
}

impl ModelGrads {
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        push_layers(&mut out, "backbone", &self.net.backbone);
        push_layers(&mut out, "rfm", &self.net.rfm);
        push_layers(&mut out, "age_head", &self.age_head);
        out.push(("id_classifier.weight".into(), &self.id_classifier));
        out
    }
}

pub fn age_head_forward(head: &Mlp, x_age: &Matrix) -> Result<(Matrix, MlpTape)> {
    if head.output_dim() != NUM_AGE_GROUPS {
        return Err(Error::InvalidArgument(format!(
            "age head emits {} logits, expected {NUM_AGE_GROUPS}",
            head.output_dim()
        )));
    }
    head.forward(x_age)
}
