//! Identification, verification, residual correlation and per-age cosine statistics.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::bcca::{cmm_forward, CmmParams};
use crate::data::{AgeGroup, CrossAgeSplit, Dataset, Sample, NUM_AGE_GROUPS};
use crate::error::{Error, Result};
use crate::math::{dot, Matrix, Rng};
use crate::model::{DalModel, FeatureTriple};
use crate::trainer::{train_step_max, TrainSet};

pub const HISTOGRAM_BINS: usize = 20;
const COS_GUARD: f64 = 1e-12;

/// Runs the factorization over a list of samples.
pub fn features(model: &DalModel, samples: &[Sample]) -> Result<FeatureTriple> {
    let d_in = samples
        .first()
        .map(|s| s.input.len())
        .ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    model
        .net
        .forward(&Dataset::inputs(samples, d_in))
        .map(|(t, _)| t)
}

fn unit_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let n = dot(x.row(i), x.row(i)).sqrt() + COS_GUARD;
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / ((dot(a, a).sqrt() + COS_GUARD) * (dot(b, b).sqrt() + COS_GUARD))
}

/// Fraction of probes whose most similar gallery entry has their identity.
/// Ties go to the lowest gallery index.
pub fn rank1_from_features(
    probe: &Matrix,
    probe_ids: &[usize],
    gallery: &Matrix,
    gallery_ids: &[usize],
) -> Result<f64> {
    if probe.rows() == 0 || gallery.rows() == 0 {
        return Err(Error::InvalidArgument("empty probe or gallery set".into()));
    }
    if probe.rows() != probe_ids.len() || gallery.rows() != gallery_ids.len() {
        return Err(Error::InvalidArgument(
            "feature and identity counts differ".into(),
        ));
    }
    let mut g_sorted = gallery_ids.to_vec();
    g_sorted.sort_unstable();
    if g_sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument(
            "gallery must hold one entry per identity".into(),
        ));
    }
    let mut p_sorted = probe_ids.to_vec();
    p_sorted.sort_unstable();
    p_sorted.dedup();
    if p_sorted != g_sorted {
        return Err(Error::InvalidArgument(
            "probe and gallery identity sets differ".into(),
        ));
    }
    let scores = unit_rows(probe).matmul_t(&unit_rows(gallery))?;
    let mut correct = 0usize;
    for (i, &id) in probe_ids.iter().enumerate() {
        let row = scores.row(i);
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        correct += usize::from(gallery_ids[best] == id);
    }
    Ok(correct as f64 / probe_ids.len() as f64)
}

pub fn rank1_identify(model: &DalModel, probe: &[Sample], gallery: &[Sample]) -> Result<f64> {
    let p = features(model, probe)?;
    let g = features(model, gallery)?;
    let ids = |s: &[Sample]| s.iter().map(|s| s.identity).collect::<Vec<_>>();
    rank1_from_features(&p.x_id, &ids(probe), &g.x_id, &ids(gallery))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    /// Pairs scoring at or above the threshold are called "same".
    pub threshold: f64,
    pub accuracy: f64,
}

/// Best accuracy over every threshold that changes a decision: below all
/// scores, above all scores and each midpoint between distinct neighbours.
pub fn verification_accuracy(scores: &[f64], same: &[bool]) -> Result<Verification> {
    if scores.len() != same.len() {
        return Err(Error::InvalidArgument(
            "scores and labels differ in length".into(),
        ));
    }
    if scores.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 pairs, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("verification score".into()));
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = same.iter().filter(|&&s| s).count();
    // threshold below everything: all called "same"
    let mut correct = positives;
    let mut best = Verification {
        threshold: scores[order[0]] - 1.0,
        accuracy: correct as f64 / n as f64,
    };
    let mut k = 0;
    while k < n {
        // move every pair with this score to the "different" side
        let s = scores[order[k]];
        while k < n && scores[order[k]] == s {
            if same[order[k]] {
                correct -= 1;
            } else {
                correct += 1;
            }
            k += 1;
        }
        let threshold = if k < n {
            0.5 * (s + scores[order[k]])
        } else {
            s + 1.0
        };
        let accuracy = correct as f64 / n as f64;
        if accuracy > best.accuracy {
            best = Verification {
                threshold,
                accuracy,
            };
        }
    }
    Ok(best)
}

/// Positive pair `(probe_i, gallery_i)` and one negative `(probe_i, gallery_j)`, `j ≠ i`, per identity.
pub fn verification_pairs(n: usize, rng: &mut Rng) -> Vec<(usize, usize, bool)> {
    let mut pairs = Vec::with_capacity(2 * n);
    for i in 0..n {
        pairs.push((i, i, true));
        if n > 1 {
            let mut j = rng.below(n - 1);
            if j >= i {
                j += 1;
            }
            pairs.push((i, j, false));
        }
    }
    pairs
}

pub fn verify(
    model: &DalModel,
    probe: &[Sample],
    gallery: &[Sample],
    rng: &mut Rng,
) -> Result<Verification> {
    if probe.len() != gallery.len() {
        return Err(Error::InvalidArgument(
            "probe and gallery must be paired".into(),
        ));
    }
    let p = features(model, probe)?.x_id;
    let g = features(model, gallery)?.x_id;
    let pairs = verification_pairs(probe.len(), rng);
    let scores: Vec<f64> = pairs
        .iter()
        .map(|&(i, j, _)| cosine(p.row(i), g.row(j)))
        .collect();
    let same: Vec<bool> = pairs.iter().map(|p| p.2).collect();
    verification_accuracy(&scores, &same)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaResult {
    pub top: f64,
    /// Columns whose variance is no larger than the ridge.
    pub low_variance_columns: usize,
}

impl CcaResult {
    pub fn zero_variance_warning(&self) -> bool {
        self.low_variance_columns > 0
    }
}

fn centered_cov(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * b / a.nrows() as f64
}

fn center(m: &Matrix) -> DMatrix<f64> {
    let mut d = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    for mut col in d.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    d
}

fn inverse_sqrt(c: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(c);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0 && min > max * 1e-14) {
        return Err(Error::Degenerate(format!(
            "{what} covariance is singular even with the ridge (eigenvalues {min:e}..{max:e})"
        )));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Largest canonical correlation between the column blocks `x` and `y`,
/// with `ridge` added to both covariance diagonals.
pub fn top_canonical_correlation(x: &Matrix, y: &Matrix, ridge: f64) -> Result<CcaResult> {
    if x.rows() != y.rows() {
        return Err(Error::Shape {
            op: "canonical correlation",
            left: x.shape(),
            right: y.shape(),
        });
    }
    if ridge.is_nan() || ridge < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "ridge must be non-negative, got {ridge}"
        )));
    }
    if x.rows() < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite("canonical correlation input".into()));
    }
    let xc = center(x);
    let yc = center(y);
    let mut cxx = centered_cov(&xc, &xc);
    let mut cyy = centered_cov(&yc, &yc);
    let low_variance_columns = cxx
        .diagonal()
        .iter()
        .chain(cyy.diagonal().iter())
        .filter(|&&v| v <= ridge)
        .count();
    for i in 0..cxx.nrows() {
        cxx[(i, i)] += ridge;
    }
    for i in 0..cyy.nrows() {
        cyy[(i, i)] += ridge;
    }
    let kx = inverse_sqrt(cxx, "first block")?;
    let ky = inverse_sqrt(cyy, "second block")?;
    let t = kx * centered_cov(&xc, &yc) * ky;
    let top = t.singular_values().max().clamp(0.0, 1.0);
    Ok(CcaResult {
        top,
        low_variance_columns,
    })
}

/// Top canonical correlation between `x_id` and `x_age` over the given samples.
pub fn residual_correlation(model: &DalModel, samples: &[Sample], ridge: f64) -> Result<CcaResult> {
    let d = model.net.feature_dim();
    if samples.len() < 10 * d {
        return Err(Error::InvalidArgument(format!(
            "residual correlation needs at least {} samples, got {}",
            10 * d,
            samples.len()
        )));
    }
    let t = features(model, samples)?;
    top_canonical_correlation(&t.x_id, &t.x_age, ridge)
}

/// SGD estimate of the same quantity: full-batch ascent of the batch
/// correlation from the given mapping. Returns the final `|ρ|`.
pub fn max_phase_estimate(
    model: &DalModel,
    samples: &[Sample],
    mut cmm: CmmParams,
    steps: usize,
    lr: f64,
    epsilon: f64,
) -> Result<f64> {
    let d_in = samples
        .first()
        .map(|s| s.input.len())
        .ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    let batch = TrainSet::from_samples(samples, d_in)?.full_batch();
    let (t, _) = model.net.forward(&batch.inputs)?;
    let mut rho = cmm_forward(&cmm, &t.x_id, &t.x_age, epsilon)?.rho.abs();
    for _ in 0..steps {
        rho = train_step_max(model, &mut cmm, &batch, epsilon, lr)?.rho_abs_after;
    }
    Ok(rho)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCosStats {
    pub group: String,
    pub count: usize,
    /// `None` for an empty group.
    pub mean: Option<f64>,
    pub stddev: Option<f64>,
    pub histogram: [usize; HISTOGRAM_BINS],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineCenterStats {
    pub groups: Vec<GroupCosStats>,
    /// Identities left out because they have a single sample.
    pub excluded_singletons: usize,
    /// Identities left out because their center is (numerically) zero.
    pub excluded_degenerate: usize,
}

impl CosineCenterStats {
    pub fn means(&self) -> Vec<Option<f64>> {
        self.groups.iter().map(|g| g.mean).collect()
    }
}

pub fn histogram_bin(c: f64) -> usize {
    (((c + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

/// Cosine of each sample against its identity's mean feature, grouped by age.
pub fn cosine_center_stats(
    x_id: &Matrix,
    identities: &[usize],
    groups: &[AgeGroup],
) -> Result<CosineCenterStats> {
    if identities.len() != x_id.rows() || groups.len() != x_id.rows() {
        return Err(Error::InvalidArgument(
            "features, identities and groups differ in length".into(),
        ));
    }
    let mut members: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &id) in identities.iter().enumerate() {
        members.entry(id).or_default().push(i);
    }
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); NUM_AGE_GROUPS];
    let (mut singletons, mut degenerate) = (0, 0);
    for rows in members.values() {
        if rows.len() < 2 {
            singletons += 1;
            continue;
        }
        let mut center = vec![0.0; x_id.cols()];
        let mut scale = 0.0;
        for &r in rows {
            center
                .iter_mut()
                .zip(x_id.row(r))
                .for_each(|(c, v)| *c += v);
            scale += dot(x_id.row(r), x_id.row(r)).sqrt();
        }
        let n = rows.len() as f64;
        center.iter_mut().for_each(|c| *c /= n);
        if dot(&center, &center).sqrt() <= 1e-9 * (scale / n) || scale == 0.0 {
            degenerate += 1;
            continue;
        }
        for &r in rows {
            values[groups[r].index()].push(cosine(x_id.row(r), &center));
        }
    }
    let groups = AgeGroup::all()
        .zip(values)
        .map(|(g, vals)| {
            let mut histogram = [0; HISTOGRAM_BINS];
            vals.iter().for_each(|&c| histogram[histogram_bin(c)] += 1);
            let (mean, stddev) = if vals.is_empty() {
                (None, None)
            } else {
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
                (Some(mean), Some(var.sqrt()))
            };
            GroupCosStats {
                group: g.label().to_string(),
                count: vals.len(),
                mean,
                stddev,
                histogram,
            }
        })
        .collect();
    Ok(CosineCenterStats {
        groups,
        excluded_singletons: singletons,
        excluded_degenerate: degenerate,
    })
}

pub fn cosine_center_histograms(model: &DalModel, samples: &[Sample]) -> Result<CosineCenterStats> {
    let t = features(model, samples)?;
    let ids: Vec<usize> = samples.iter().map(|s| s.identity).collect();
    let groups: Vec<AgeGroup> = samples.iter().map(|s| s.age_group).collect();
    cosine_center_stats(&t.x_id, &ids, &groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub verif_acc_best_threshold: f64,
    pub verif_threshold: f64,
    pub residual_max_corr: f64,
    pub residual_low_variance_columns: usize,
    pub per_group_cos_stats: CosineCenterStats,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("report: {e}")))
    }

    /// One row per age group: `group,count,mean,stddev,bin_0..bin_19`.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("group,count,mean,stddev");
        for b in 0..HISTOGRAM_BINS {
            out.push_str(&format!(",bin_{b}"));
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for g in &self.per_group_cos_stats.groups {
            out.push_str(&format!(
                "{},{},{},{}",
                g.group,
                g.count,
                opt(g.mean),
                opt(g.stddev)
            ));
            for c in g.histogram {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Full evaluation: recognition on the cross-age pairs, cosine statistics on
/// the held-out pool and residual correlation on `correlation_samples`.
pub fn evaluate(
    model: &DalModel,
    split: &CrossAgeSplit,
    correlation_samples: &[Sample],
    ridge: f64,
    seed: u64,
) -> Result<EvalReport> {
    let rank1 = rank1_identify(model, &split.probe, &split.gallery)?;
    let verif = verify(model, &split.probe, &split.gallery, &mut Rng::new(seed))?;
    let cca = residual_correlation(model, correlation_samples, ridge)?;
    let cos = cosine_center_histograms(model, &split.held_out)?;
    Ok(EvalReport {
        rank1,
        verif_acc_best_threshold: verif.accuracy,
        verif_threshold: verif.threshold,
        residual_max_corr: cca.top,
        residual_low_variance_columns: cca.low_variance_columns,
        per_group_cos_stats: cos,
    })
}
