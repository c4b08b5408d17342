//! Finite-difference checks of every hand-written backward pass.

use crate::bcca::{
    bcca_backward, bcca_backward_corrupted, cmm_backward, cmm_forward, correlate, BccaBatch,
    CmmParams, DEFAULT_EPSILON,
};
use crate::data::{AgeGroup, NUM_AGE_GROUPS};
use crate::error::Result;
use crate::losses::{cosface_backward, cosface_forward, softmax_ce, CosFaceConfig};
use crate::math::{finite_diff_grad, relative_error, rng_normal, Matrix, Rng};
use crate::model::{Architecture, DalModel};
use crate::trainer::{objective, Batch, Mode, TrainConfig};

pub const STEP: f64 = 1e-5;
pub const BCCA_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub component: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub seed: u64,
    pub rows: Vec<GradRow>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(GradRow::passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<28} {:>12} {:>10}  result\n",
            "component", "max_rel_err", "tolerance"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<28} {:>12.3e} {:>10.0e}  {}\n",
                r.component,
                r.max_rel_error,
                r.tolerance,
                if r.passed() { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Switches for mutation testing of the checker itself.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default)]
pub struct Hooks {
    pub corrupt_bcca: bool,
}

fn bcca_cases(rng: &mut Rng) -> Result<Vec<(Matrix, Matrix)>> {
    let m = 16;
    let a = rng_normal(rng, m, 1, 0.0, 1.0);
    let b = rng_normal(rng, m, 1, 0.0, 1.0);
    let near_one = a.scale(2.0).add(&rng_normal(rng, m, 1, 0.0, 5e-2))?;
    let correlated = a.add(&b.scale(0.5))?;
    Ok(vec![
        (a.clone(), b),
        (a.clone(), near_one),
        (correlated, a.scale(-1.0)),
    ])
}

fn bcca_row(rng: &mut Rng, hooks: Hooks) -> Result<GradRow> {
    let backward = if hooks.corrupt_bcca {
        bcca_backward_corrupted
    } else {
        bcca_backward
    };
    let mut worst: f64 = 0.0;
    for (v_id, v_age) in bcca_cases(rng)? {
        let stats: BccaBatch = correlate(v_id.clone(), v_age.clone(), DEFAULT_EPSILON)?;
        let (g_id, g_age) = backward(&stats);
        let fd_id = finite_diff_grad(
            |v| correlate(v.clone(), v_age.clone(), DEFAULT_EPSILON).map_or(f64::NAN, |s| s.rho),
            &v_id,
            STEP,
        )?;
        let fd_age = finite_diff_grad(
            |v| correlate(v_id.clone(), v.clone(), DEFAULT_EPSILON).map_or(f64::NAN, |s| s.rho),
            &v_age,
            STEP,
        )?;
        worst = worst
            .max(relative_error(&g_id, &fd_id))
            .max(relative_error(&g_age, &fd_age));
    }
    Ok(GradRow {
        component: "bcca dρ/dv".into(),
        max_rel_error: worst,
        tolerance: BCCA_TOLERANCE,
    })
}

fn cmm_row(rng: &mut Rng) -> Result<GradRow> {
    let (m, d) = (12, 5);
    let x_id = rng_normal(rng, m, d, 0.0, 1.0);
    let x_age = x_id.scale(0.5).add(&rng_normal(rng, m, d, 0.0, 1.0))?;
    let cmm = CmmParams::new(d, rng);
    let stats = cmm_forward(&cmm, &x_id, &x_age, DEFAULT_EPSILON)?;
    let (gv_id, gv_age) = bcca_backward(&stats);
    let g = cmm_backward(&cmm, &x_id, &x_age, &gv_id, &gv_age)?;
    let rho = |c: &CmmParams, a: &Matrix, b: &Matrix| {
        cmm_forward(c, a, b, DEFAULT_EPSILON).map_or(f64::NAN, |s| s.rho)
    };
    let fds = [
        finite_diff_grad(
            |w| {
                rho(
                    &CmmParams {
                        w_id: w.clone(),
                        w_age: cmm.w_age.clone(),
                    },
                    &x_id,
                    &x_age,
                )
            },
            &cmm.w_id,
            STEP,
        )?,
        finite_diff_grad(
            |w| {
                rho(
                    &CmmParams {
                        w_id: cmm.w_id.clone(),
                        w_age: w.clone(),
                    },
                    &x_id,
                    &x_age,
                )
            },
            &cmm.w_age,
            STEP,
        )?,
        finite_diff_grad(|x| rho(&cmm, x, &x_age), &x_id, STEP)?,
        finite_diff_grad(|x| rho(&cmm, &x_id, x), &x_age, STEP)?,
    ];
    let worst = [&g.w_id, &g.w_age, &g.x_id, &g.x_age]
        .iter()
        .zip(&fds)
        .map(|(a, b)| relative_error(a, b))
        .fold(0.0, f64::max);
    Ok(GradRow {
        component: "cmm projection".into(),
        max_rel_error: worst,
        tolerance: BCCA_TOLERANCE,
    })
}

fn loss_rows(rng: &mut Rng) -> Result<Vec<GradRow>> {
    let (b, d, c) = (8, 5, 4);
    let x = rng_normal(rng, b, d, 0.0, 1.0);
    let w = rng_normal(rng, d, c, 0.0, 1.0);
    let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
    let cfg = CosFaceConfig::default();
    let (_, cache) = cosface_forward(&x, &w, &labels, &cfg)?;
    let (gx, gw) = cosface_backward(&cache)?;
    let f = |x: &Matrix, w: &Matrix| cosface_forward(x, w, &labels, &cfg).map_or(f64::NAN, |r| r.0);
    let fdx = finite_diff_grad(|m| f(m, &w), &x, STEP)?;
    let fdw = finite_diff_grad(|m| f(&x, m), &w, STEP)?;
    let cos_err = relative_error(&gx, &fdx).max(relative_error(&gw, &fdw));

    let logits = rng_normal(rng, b, NUM_AGE_GROUPS, 0.0, 2.0);
    let groups: Vec<AgeGroup> = (0..b)
        .map(|_| AgeGroup::new(rng.below(NUM_AGE_GROUPS)).expect("in range"))
        .collect();
    let (_, g) = softmax_ce(&logits, &groups)?;
    let fd = finite_diff_grad(
        |m| softmax_ce(m, &groups).map_or(f64::NAN, |r| r.0),
        &logits,
        STEP,
    )?;
    Ok(vec![
        GradRow {
            component: "cosface".into(),
            max_rel_error: cos_err,
            tolerance: END_TO_END_TOLERANCE,
        },
        GradRow {
            component: "age softmax".into(),
            max_rel_error: relative_error(&g, &fd),
            tolerance: END_TO_END_TOLERANCE,
        },
    ])
}

/// Small model and batch on which every parameter is perturbed.
pub fn small_problem(seed: u64) -> (DalModel, CmmParams, Batch, TrainConfig) {
    let mut rng = Rng::new(seed);
    let arch = Architecture {
        d_in: 10,
        hidden: 12,
        d_feat: 6,
        n_id: 4,
        rfm_output_relu: false,
    };
    let mut model = DalModel::new(&arch, &rng.derive(0));
    // Zero biases put rows with an all-dead ReLU layer exactly on the next kink.
    let mut jitter = rng.derive(2);
    for (name, p) in model.named_params_mut() {
        if name.ends_with(".bias") {
            *p = rng_normal(&mut jitter, p.rows(), p.cols(), 0.0, 0.1);
        }
    }
    let cmm = CmmParams::new(arch.d_feat, &mut rng.derive(1));
    let m = 12;
    let batch = Batch {
        inputs: rng_normal(&mut rng, m, arch.d_in, 0.0, 1.0),
        labels: (0..m).map(|i| i % arch.n_id).collect(),
        age_groups: (0..m)
            .map(|i| AgeGroup::new(i % NUM_AGE_GROUPS).expect("in range"))
            .collect(),
    };
    let config = TrainConfig {
        mode: Mode::PlusAgeDal,
        ..TrainConfig::default()
    };
    (model, cmm, batch, config)
}

/// Per-component maximum relative error of the total loss gradient.
fn end_to_end_rows(seed: u64) -> Result<Vec<GradRow>> {
    let (model, cmm, batch, config) = small_problem(seed);
    let (_, grads) = objective(&model, &cmm, &batch, &config, true)?;
    let grads = grads.expect("gradients requested");
    let total = |m: &DalModel, c: &CmmParams| {
        objective(m, c, &batch, &config, false).map_or(f64::NAN, |r| r.0.total)
    };

    let mut rows: Vec<GradRow> = Vec::new();
    let mut record = |component: &str, err: f64| {
        let name = format!("total wrt {component}");
        match rows.iter_mut().find(|r| r.component == name) {
            Some(r) => r.max_rel_error = r.max_rel_error.max(err),
            None => rows.push(GradRow {
                component: name,
                max_rel_error: err,
                tolerance: END_TO_END_TOLERANCE,
            }),
        }
    };
    let params: Vec<(String, Matrix)> = model
        .named_params()
        .into_iter()
        .map(|(n, m)| (n, m.clone()))
        .collect();
    for (idx, ((name, p0), (_, g))) in params.iter().zip(grads.model.named()).enumerate() {
        let fd = finite_diff_grad(
            |p| {
                let mut m = model.clone();
                *m.named_params_mut()[idx].1 = p.clone();
                total(&m, &cmm)
            },
            p0,
            STEP,
        )?;
        let component = name.split('.').next().unwrap_or(name);
        record(component, relative_error(g, &fd));
    }
    let fd_id = finite_diff_grad(
        |w| {
            total(
                &model,
                &CmmParams {
                    w_id: w.clone(),
                    w_age: cmm.w_age.clone(),
                },
            )
        },
        &cmm.w_id,
        STEP,
    )?;
    let fd_age = finite_diff_grad(
        |w| {
            total(
                &model,
                &CmmParams {
                    w_id: cmm.w_id.clone(),
                    w_age: w.clone(),
                },
            )
        },
        &cmm.w_age,
        STEP,
    )?;
    record(
        "cmm",
        relative_error(&grads.cmm.w_id, &fd_id).max(relative_error(&grads.cmm.w_age, &fd_age)),
    );
    Ok(rows)
}

#[doc(hidden)]
pub fn gradcheck_with(seed: u64, hooks: Hooks) -> Result<GradReport> {
    let rng = Rng::new(seed);
    let mut rows = vec![
        bcca_row(&mut rng.derive(0), hooks)?,
        cmm_row(&mut rng.derive(1))?,
    ];
    rows.extend(loss_rows(&mut rng.derive(2))?);
    rows.extend(end_to_end_rows(seed)?);
    Ok(GradReport { seed, rows })
}

pub fn gradcheck(seed: u64) -> Result<GradReport> {
    gradcheck_with(seed, Hooks::default())
}
