//! Alternating min-max training.
//!
//! The maximizing player is the canonical mapping `(w_id, w_age)`, which
//! ascends `|ρ|` with the network frozen. The minimizing player is the rest of
//! the model, which descends `L_id + λ1·L_age + λ2·|ρ|` with the mapping frozen.

use std::fmt;
use std::str::FromStr;

use crate::bcca::{
    bcca_backward, cmm_backward, cmm_forward, dal_objective, CmmParams, DEFAULT_EPSILON,
};
use crate::data::{AgeGroup, Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    combine, cosface_backward, cosface_forward, softmax_ce, CosFaceConfig, LossBreakdown,
};
use crate::math::{Matrix, Rng};
use crate::model::{age_head_forward, Architecture, DalModel, FactorGrads, ModelGrads};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Baseline,
    PlusAge,
    PlusAgeDal,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::PlusAge, Mode::PlusAgeDal];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::PlusAge => "plus_age",
            Mode::PlusAgeDal => "plus_age_dal",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown mode {s:?} (expected baseline, plus_age or plus_age_dal)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Max,
    Min,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Max => "max",
            Phase::Min => "min",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Phase::Max),
            "min" => Ok(Phase::Min),
            _ => Err(Error::InvalidArgument(format!(
                "unknown phase {s:?} (expected max or min)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub cosface: CosFaceConfig,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_phase_iters: usize,
    pub min_phase_iters: usize,
    pub epochs: usize,
    pub lr: f64,
    /// `(epoch, factor)`: from that epoch on the rate is multiplied by `factor`.
    pub lr_milestones: Vec<(usize, f64)>,
    pub seed: u64,
    pub mode: Mode,
    pub start_phase: Phase,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let epochs = 30;
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            cosface: CosFaceConfig::default(),
            epsilon: DEFAULT_EPSILON,
            batch_size: 64,
            max_phase_iters: 20,
            min_phase_iters: 50,
            epochs,
            lr: 0.05,
            lr_milestones: default_milestones(epochs),
            seed: 0,
            mode: Mode::PlusAgeDal,
            start_phase: Phase::Max,
        }
    }
}

/// ×0.1 at 55% and again at 82% of the run.
pub fn default_milestones(epochs: usize) -> Vec<(usize, f64)> {
    [0.55, 0.82]
        .iter()
        .map(|f| ((f * epochs as f64).round() as usize, 0.1))
        .collect()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.max_phase_iters == 0 || self.min_phase_iters == 0 {
            return bad("max_phase_iters and min_phase_iters must be at least 1");
        }
        if !(self.lambda1 >= 0.0
            && self.lambda1.is_finite()
            && self.lambda2 >= 0.0
            && self.lambda2.is_finite())
        {
            return bad("lambda1 and lambda2 must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self
            .lr_milestones
            .iter()
            .any(|&(_, f)| !(f > 0.0 && f.is_finite()))
        {
            return bad("lr milestone factors must be positive");
        }
        self.cosface.validate()
    }

    /// `(λ1, λ2)` after mode gating.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        match self.mode {
            Mode::Baseline => (0.0, 0.0),
            Mode::PlusAge => (self.lambda1, 0.0),
            Mode::PlusAgeDal => (self.lambda1, self.lambda2),
        }
    }

    /// Whether this run plays the adversarial game at all.
    pub fn adversarial(&self) -> bool {
        self.mode == Mode::PlusAgeDal
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_milestones
            .iter()
            .filter(|&&(at, _)| epoch >= at)
            .fold(self.lr, |lr, &(_, f)| lr * f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseState {
    pub phase: Phase,
    pub iter_in_phase: usize,
    pub global_step: usize,
}

impl PhaseState {
    pub fn start(config: &TrainConfig) -> Self {
        Self {
            phase: config.start_phase,
            iter_in_phase: 0,
            global_step: 0,
        }
    }

    pub fn advance(&mut self, config: &TrainConfig) {
        self.global_step += 1;
        self.iter_in_phase += 1;
        let length = match self.phase {
            Phase::Max => config.max_phase_iters,
            Phase::Min => config.min_phase_iters,
        };
        if self.iter_in_phase >= length {
            self.iter_in_phase = 0;
            self.phase = match self.phase {
                Phase::Max => Phase::Min,
                Phase::Min => Phase::Max,
            };
        }
    }
}

/// Training samples with identities remapped to classifier columns.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub age_groups: Vec<AgeGroup>,
    /// Original identity of each classifier column.
    pub class_identity: Vec<usize>,
}

impl TrainSet {
    pub fn from_samples(samples: &[Sample], d_in: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.input.len() != d_in) {
            return Err(Error::Shape {
                op: "training sample",
                left: (1, s.input.len()),
                right: (1, d_in),
            });
        }
        let mut class_identity: Vec<usize> = samples.iter().map(|s| s.identity).collect();
        class_identity.sort_unstable();
        class_identity.dedup();
        let labels = samples
            .iter()
            .map(|s| {
                class_identity
                    .binary_search(&s.identity)
                    .expect("identity collected above")
            })
            .collect();
        Ok(Self {
            inputs: Dataset::inputs(samples, d_in),
            labels,
            age_groups: samples.iter().map(|s| s.age_group).collect(),
            class_identity,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_identity.len()
    }

    pub fn d_in(&self) -> usize {
        self.inputs.cols()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            age_groups: indices.iter().map(|&i| self.age_groups[i]).collect(),
        }
    }

    pub fn full_batch(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub age_groups: Vec<AgeGroup>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxStepReport {
    pub rho_abs_before: f64,
    pub rho_abs_after: f64,
}

/// One gradient-ascent step of `|ρ|` on the canonical mapping only.
pub fn train_step_max(
    model: &DalModel,
    cmm: &mut CmmParams,
    batch: &Batch,
    epsilon: f64,
    lr: f64,
) -> Result<MaxStepReport> {
    let (triple, _) = model.net.forward(&batch.inputs)?;
    let stats = cmm_forward(cmm, &triple.x_id, &triple.x_age, epsilon)?;
    if !stats.rho.is_finite() {
        return Err(Error::NonFinite(format!(
            "rho in max step (mean {}/{}, variance {}/{})",
            stats.mu_id, stats.mu_age, stats.var_id, stats.var_age
        )));
    }
    let (before, sign) = dal_objective(stats.rho);
    let (g_id, g_age) = bcca_backward(&stats);
    let grads = cmm_backward(cmm, &triple.x_id, &triple.x_age, &g_id, &g_age)?;
    cmm.w_id.axpy(lr * sign, &grads.w_id)?;
    cmm.w_age.axpy(lr * sign, &grads.w_age)?;
    let after = cmm_forward(cmm, &triple.x_id, &triple.x_age, epsilon)?
        .rho
        .abs();
    Ok(MaxStepReport {
        rho_abs_before: before,
        rho_abs_after: after,
    })
}

/// Gradients of the total loss.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub model: ModelGrads,
    /// Same layout as the parameters; zero unless the DAL term is active.
    pub cmm: CmmParams,
}

impl Gradients {
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.model.named();
        out.push(("cmm.w_id".into(), &self.cmm.w_id));
        out.push(("cmm.w_age".into(), &self.cmm.w_age));
        out
    }
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    for (name, v) in [("l_id", b.l_id), ("l_age", b.l_age), ("rho_abs", b.rho_abs)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(())
}

/// Total loss and, if asked, its gradient wrt every parameter.
///
/// Terms with a zero weight are still evaluated for reporting but never
/// differentiated. Batches with fewer than two samples carry no DAL term.
pub fn objective(
    model: &DalModel,
    cmm: &CmmParams,
    batch: &Batch,
    config: &TrainConfig,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    let (lambda1, lambda2) = config.effective_lambdas();
    let (triple, tape) = model.net.forward(&batch.inputs)?;
    let (l_id, cos_cache) = cosface_forward(
        &triple.x_id,
        &model.id_classifier.weight,
        &batch.labels,
        &config.cosface,
    )?;
    let (logits, age_tape) = age_head_forward(&model.age_head, &triple.x_age)?;
    let (l_age, g_logits) = softmax_ce(&logits, &batch.age_groups)?;
    let stats = if batch.len() >= 2 {
        Some(cmm_forward(
            cmm,
            &triple.x_id,
            &triple.x_age,
            config.epsilon,
        )?)
    } else {
        None
    };
    let (rho_abs, sign) = stats.as_ref().map_or((0.0, 0.0), |s| dal_objective(s.rho));
    let breakdown = combine(l_id, l_age, rho_abs, lambda1, lambda2);
    check_finite(&breakdown)?;
    if !with_grads {
        return Ok((breakdown, None));
    }

    let (mut g_x_id, g_w) = cosface_backward(&cos_cache)?;
    let d = model.net.feature_dim();
    let mut g_x_age = Matrix::zeros(batch.len(), d);
    let age_head = if lambda1 > 0.0 {
        let (grads, g) = model
            .age_head
            .backward(&age_tape, &g_logits.scale(lambda1))?;
        g_x_age = g;
        grads
    } else {
        zero_like(&model.age_head.layers)
    };
    let mut cmm_grads = CmmParams {
        w_id: Matrix::zeros(d, 1),
        w_age: Matrix::zeros(d, 1),
    };
    if let (true, Some(stats)) = (lambda2 > 0.0, stats.as_ref()) {
        let (gv_id, gv_age) = bcca_backward(stats);
        let g = cmm_backward(cmm, &triple.x_id, &triple.x_age, &gv_id, &gv_age)?;
        let k = lambda2 * sign;
        g_x_id.axpy(k, &g.x_id)?;
        g_x_age.axpy(k, &g.x_age)?;
        cmm_grads.w_id = g.w_id.scale(k);
        cmm_grads.w_age = g.w_age.scale(k);
    }
    let net = model.net.backward(&tape, &g_x_id, &g_x_age)?;
    Ok((
        breakdown,
        Some(Gradients {
            model: ModelGrads {
                net,
                age_head,
                id_classifier: g_w,
            },
            cmm: cmm_grads,
        }),
    ))
}

fn zero_like(layers: &[crate::model::Dense]) -> Vec<crate::model::Dense> {
    layers
        .iter()
        .map(|l| crate::model::Dense::zeros(l.fan_in(), l.fan_out()))
        .collect()
}

/// `|ρ|` of the batch and its gradient wrt the backbone and residual module alone.
pub fn dal_term_grads(
    model: &DalModel,
    cmm: &CmmParams,
    batch: &Batch,
    epsilon: f64,
) -> Result<(f64, FactorGrads)> {
    let (triple, tape) = model.net.forward(&batch.inputs)?;
    let stats = cmm_forward(cmm, &triple.x_id, &triple.x_age, epsilon)?;
    let (rho_abs, sign) = dal_objective(stats.rho);
    let (gv_id, gv_age) = bcca_backward(&stats);
    let g = cmm_backward(cmm, &triple.x_id, &triple.x_age, &gv_id, &gv_age)?;
    let grads = model
        .net
        .backward(&tape, &g.x_id.scale(sign), &g.x_age.scale(sign))?;
    Ok((rho_abs, grads))
}

/// One descent step on the network and heads; the canonical mapping is read only.
pub fn train_step_min(
    model: &mut DalModel,
    cmm: &CmmParams,
    batch: &Batch,
    config: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let (breakdown, grads) = objective(model, cmm, batch, config, true)?;
    let grads = grads.expect("gradients requested");
    apply_model_grads(model, &grads.model, lr);
    Ok(breakdown)
}

fn apply_model_grads(model: &mut DalModel, grads: &ModelGrads, lr: f64) {
    let named = grads.named();
    for ((name, param), (gname, g)) in model.named_params_mut().into_iter().zip(named) {
        debug_assert_eq!(name, gname);
        param.axpy(-lr, g).expect("gradient has parameter shape");
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub phase: Phase,
    pub rho_abs: f64,
    pub l_id: f64,
    pub l_age: f64,
    pub total: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,phase,rho_abs,l_id,l_age,total,lr";

impl LogRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.phase, self.rho_abs, self.l_id, self.l_age, self.total, self.lr
        )
    }
}

pub fn log_to_csv(log: &[LogRecord]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Drives the schedule one mini-batch at a time.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a TrainSet,
    pub model: DalModel,
    pub cmm: CmmParams,
    state: PhaseState,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    shuffle_rng: Rng,
    log: Vec<LogRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a TrainSet) -> Result<Self> {
        let arch = Architecture::new(data.d_in(), data.num_classes());
        Self::with_architecture(config, data, arch)
    }

    pub fn with_architecture(
        config: TrainConfig,
        data: &'a TrainSet,
        arch: Architecture,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        if arch.d_in != data.d_in() || arch.n_id != data.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "architecture ({} inputs, {} classes) does not fit the data ({} inputs, {} classes)",
                arch.d_in,
                arch.n_id,
                data.d_in(),
                data.num_classes()
            )));
        }
        let root = Rng::new(config.seed);
        let model = DalModel::new(&arch, &root.derive(0));
        let cmm = CmmParams::new(arch.d_feat, &mut root.derive(1));
        Ok(Self {
            state: PhaseState::start(&config),
            order: (0..data.len()).collect(),
            cursor: 0,
            epoch: 0,
            shuffle_rng: root.derive(2),
            log: Vec::new(),
            config,
            data,
            model,
            cmm,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> PhaseState {
        self.state
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.data.steps_per_epoch(self.config.batch_size)
    }

    /// Runs the next iteration; `None` once all epochs are done.
    pub fn next_step(&mut self) -> Result<Option<LogRecord>> {
        if self.epoch >= self.config.epochs {
            return Ok(None);
        }
        if self.cursor == 0 {
            self.shuffle_rng.shuffle(&mut self.order);
        }
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let batch = self.data.batch(&self.order[self.cursor..end]);
        let lr = self.config.lr_at(self.epoch);
        let step = self.state.global_step;
        let record = self.run_phase(&batch, lr).map_err(|e| Error::Training {
            iteration: step,
            source: Box::new(e),
        })?;
        let record = LogRecord {
            step,
            phase: self.state.phase,
            rho_abs: record.rho_abs,
            l_id: record.l_id,
            l_age: record.l_age,
            total: record.total,
            lr,
        };
        self.log.push(record);
        self.state.advance(&self.config);
        self.cursor = end;
        if self.cursor >= self.order.len() {
            self.cursor = 0;
            self.epoch += 1;
        }
        Ok(Some(record))
    }

    /// Losses are those seen before the update.
    fn run_phase(&mut self, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
        match self.state.phase {
            Phase::Max => {
                let (before, _) = objective(&self.model, &self.cmm, batch, &self.config, false)?;
                if self.config.adversarial() && batch.len() >= 2 {
                    train_step_max(&self.model, &mut self.cmm, batch, self.config.epsilon, lr)?;
                }
                Ok(before)
            }
            Phase::Min => train_step_min(&mut self.model, &self.cmm, batch, &self.config, lr),
        }
    }

    pub fn run(&mut self) -> Result<()> {
        while self.next_step()?.is_some() {}
        Ok(())
    }

    pub fn finish(self) -> FitOutput {
        FitOutput {
            model: self.model,
            cmm: self.cmm,
            log: self.log,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub model: DalModel,
    pub cmm: CmmParams,
    pub log: Vec<LogRecord>,
}

pub fn fit(config: &TrainConfig, data: &TrainSet) -> Result<FitOutput> {
    let mut trainer = Trainer::new(config.clone(), data)?;
    trainer.run()?;
    Ok(trainer.finish())
}
