//! Synthetic entangled-factor faces.
//!
//! Every sample is built from an identity latent shared by all samples of
//! that identity and an age value, pushed through a fixed random nonlinear
//! mixing. Identity and age therefore have exact ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::math::{rng_normal, Matrix, Rng};

pub const NUM_AGE_GROUPS: usize = 8;

/// Lower edges (in years) of age groups 1..8; group 0 covers `[0, 13)`.
pub const AGE_GROUP_EDGES: [f64; NUM_AGE_GROUPS - 1] = [13.0, 19.0, 26.0, 36.0, 46.0, 56.0, 66.0];

const AGE_GROUP_LABELS: [&str; NUM_AGE_GROUPS] = [
    "0-12", "13-18", "19-25", "26-35", "36-45", "46-55", "56-65", ">=66",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgeGroup(u8);

impl AgeGroup {
    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_AGE_GROUPS {
            Ok(Self(index as u8))
        } else {
            Err(Error::InvalidArgument(format!(
                "age group {index} out of range"
            )))
        }
    }

    pub fn from_years(age: f64) -> Self {
        Self(AGE_GROUP_EDGES.iter().filter(|&&edge| age >= edge).count() as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn label(self) -> &'static str {
        AGE_GROUP_LABELS[self.index()]
    }

    pub fn all() -> impl Iterator<Item = AgeGroup> {
        (0..NUM_AGE_GROUPS as u8).map(AgeGroup)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub identity: usize,
    pub age_years: f64,
    pub age_group: AgeGroup,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub n_id: usize,
    pub samples_per_id: usize,
    pub d_latent_id: usize,
    pub d_in: usize,
    pub age_min: f64,
    pub age_max: f64,
    pub mixing_seed: u64,
    pub noise_stddev: f64,
    /// Scale of the age basis rows of the first mixing map relative to the
    /// identity rows.
    pub age_gain: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_id: 200,
            samples_per_id: 20,
            d_latent_id: 16,
            d_in: 64,
            age_min: 0.0,
            age_max: 80.0,
            mixing_seed: 7,
            noise_stddev: 0.1,
            age_gain: 4.0,
        }
    }
}

/// Number of age basis functions fed into the mixing.
pub const AGE_BASIS_DIM: usize = 3;

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::InvalidArgument(format!("{field}: {why}")));
        if self.n_id < 2 {
            return bad(
                "n_id",
                format!("need at least 2 identities, got {}", self.n_id),
            );
        }
        if self.samples_per_id < 2 {
            return bad(
                "samples_per_id",
                format!(
                    "need at least 2 samples per identity, got {}",
                    self.samples_per_id
                ),
            );
        }
        if self.d_latent_id == 0 {
            return bad("d_latent_id", "must be positive".into());
        }
        if self.d_in < self.d_latent_id + 1 {
            return bad(
                "d_in",
                format!(
                    "{} leaves no room for the age channel next to d_latent_id={}",
                    self.d_in, self.d_latent_id
                ),
            );
        }
        if !(self.age_min.is_finite() && self.age_max.is_finite()) || self.age_min < 0.0 {
            return bad("age_min", "ages must be finite and non-negative".into());
        }
        if self.age_min >= self.age_max {
            return bad(
                "age_max",
                format!("age range [{}, {}] is empty", self.age_min, self.age_max),
            );
        }
        if !(self.noise_stddev >= 0.0 && self.noise_stddev.is_finite()) {
            return bad(
                "noise_stddev",
                format!("{} is not a valid standard deviation", self.noise_stddev),
            );
        }
        if !(self.age_gain >= 0.0 && self.age_gain.is_finite()) {
            return bad(
                "age_gain",
                format!("{} must be finite and non-negative", self.age_gain),
            );
        }
        Ok(())
    }

    /// Age normalized to `[-1, 1]` over the configured range.
    pub fn normalized_age(&self, age: f64) -> f64 {
        2.0 * (age - self.age_min) / (self.age_max - self.age_min) - 1.0
    }

    /// Degree-3 polynomial age embedding.
    pub fn age_basis(&self, age: f64) -> [f64; AGE_BASIS_DIM] {
        let t = self.normalized_age(age);
        [t, t * t, t * t * t]
    }
}

/// Fixed two-layer mixing `W2 · tanh(W1 · r + b1) + b2`.
#[derive(Clone, Debug)]
pub struct Mixing {
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
}

impl Mixing {
    pub fn new(spec: &GenSpec) -> Self {
        let raw = spec.d_latent_id + AGE_BASIS_DIM;
        let rng = Rng::new(spec.mixing_seed);
        let mut w1 = rng_normal(
            &mut rng.derive(0),
            raw,
            spec.d_in,
            0.0,
            (1.0 / raw as f64).sqrt(),
        );
        for r in spec.d_latent_id..raw {
            w1.row_mut(r).iter_mut().for_each(|v| *v *= spec.age_gain);
        }
        let b1 = rng_normal(&mut rng.derive(1), 1, spec.d_in, 0.0, 0.5);
        let w2 = rng_normal(
            &mut rng.derive(2),
            spec.d_in,
            spec.d_in,
            0.0,
            (1.0 / spec.d_in as f64).sqrt(),
        );
        let b2 = rng_normal(&mut rng.derive(3), 1, spec.d_in, 0.0, 0.1);
        Self { w1, b1, w2, b2 }
    }

    pub fn apply(&self, raw: &Matrix) -> Result<Matrix> {
        let hidden = raw
            .matmul(&self.w1)?
            .add_row_broadcast(&self.b1)?
            .map(f64::tanh);
        hidden.matmul(&self.w2)?.add_row_broadcast(&self.b2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d_in: usize,
    pub n_id: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the inputs of the given samples into a batch matrix.
    pub fn inputs(samples: &[Sample], d_in: usize) -> Matrix {
        let mut data = Vec::with_capacity(samples.len() * d_in);
        for s in samples {
            data.extend_from_slice(&s.input);
        }
        Matrix::from_vec(samples.len(), d_in, data)
            .expect("sample dimension checked on construction")
    }

    pub fn age_group_counts(samples: &[Sample]) -> [usize; NUM_AGE_GROUPS] {
        let mut counts = [0; NUM_AGE_GROUPS];
        for s in samples {
            counts[s.age_group.index()] += 1;
        }
        counts
    }

    /// Text dump: header `d_in n_id`, then one sample per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{} {}", self.d_in, self.n_id).unwrap();
        for s in &self.samples {
            write!(
                out,
                "{} {} {}",
                s.identity,
                s.age_years,
                s.age_group.index()
            )
            .unwrap();
            for v in &s.input {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let fail = |line: usize, msg: String| Error::DatasetFormat(format!("line {line}: {msg}"));
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| fail(1, "missing header".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() != 2 {
            return Err(fail(
                1,
                format!("header must be `d_in n_id`, got {header:?}"),
            ));
        }
        let d_in: usize = head[0]
            .parse()
            .map_err(|_| fail(1, format!("bad d_in {:?}", head[0])))?;
        let n_id: usize = head[1]
            .parse()
            .map_err(|_| fail(1, format!("bad n_id {:?}", head[1])))?;
        let mut samples = Vec::new();
        for (idx, line) in lines {
            let ln = idx + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 + d_in {
                return Err(fail(
                    ln,
                    format!("expected {} fields, found {}", 3 + d_in, fields.len()),
                ));
            }
            let identity: usize = fields[0]
                .parse()
                .map_err(|_| fail(ln, format!("bad identity {:?}", fields[0])))?;
            if identity >= n_id {
                return Err(fail(ln, format!("identity {identity} outside [0, {n_id})")));
            }
            let age_years: f64 = fields[1]
                .parse()
                .map_err(|_| fail(ln, format!("bad age {:?}", fields[1])))?;
            let group: usize = fields[2]
                .parse()
                .map_err(|_| fail(ln, format!("bad age group {:?}", fields[2])))?;
            let age_group = AgeGroup::new(group).map_err(|e| fail(ln, e.to_string()))?;
            if AgeGroup::from_years(age_years) != age_group {
                return Err(fail(
                    ln,
                    format!("age group {group} inconsistent with age {age_years}"),
                ));
            }
            let input = fields[3..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| fail(ln, format!("bad value {f:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                input,
                identity,
                age_years,
                age_group,
            });
        }
        Ok(Self {
            d_in,
            n_id,
            samples,
        })
    }
}

/// Generated samples together with their identity latents (one row per identity).
#[derive(Clone, Debug)]
pub struct Generated {
    pub dataset: Dataset,
    pub latents: Matrix,
}

pub fn generate(spec: &GenSpec, rng: &Rng) -> Result<Dataset> {
    generate_with_latents(spec, rng).map(|g| g.dataset)
}

/// Identity `i` draws everything from stream `rng.derive(i)`, so output is
/// independent of generation order.
pub fn generate_with_latents(spec: &GenSpec, rng: &Rng) -> Result<Generated> {
    spec.validate()?;
    let mixing = Mixing::new(spec);
    let raw_dim = spec.d_latent_id + AGE_BASIS_DIM;
    let mut latents = Matrix::zeros(spec.n_id, spec.d_latent_id);
    let mut samples = Vec::with_capacity(spec.n_id * spec.samples_per_id);
    for id in 0..spec.n_id {
        let mut stream = rng.derive(id as u64);
        let z = rng_normal(&mut stream, 1, spec.d_latent_id, 0.0, 1.0);
        latents.row_mut(id).copy_from_slice(z.as_slice());
        let ages: Vec<f64> = (0..spec.samples_per_id)
            .map(|_| stream.uniform(spec.age_min, spec.age_max))
            .collect();
        let mut raw = Matrix::zeros(spec.samples_per_id, raw_dim);
        for (k, &age) in ages.iter().enumerate() {
            let row = raw.row_mut(k);
            row[..spec.d_latent_id].copy_from_slice(z.as_slice());
            row[spec.d_latent_id..].copy_from_slice(&spec.age_basis(age));
        }
        let mut mixed = mixing.apply(&raw)?;
        for v in mixed.as_mut_slice() {
            *v += spec.noise_stddev * stream.normal();
        }
        for (k, &age) in ages.iter().enumerate() {
            samples.push(Sample {
                input: mixed.row(k).to_vec(),
                identity: id,
                age_years: age,
                age_group: AgeGroup::from_years(age),
            });
        }
    }
    Ok(Generated {
        dataset: Dataset {
            d_in: spec.d_in,
            n_id: spec.n_id,
            samples,
        },
        latents,
    })
}

#[derive(Clone, Debug)]
pub struct CrossAgeSplit {
    pub train: Vec<Sample>,
    /// Youngest sample of each held-out identity, ordered by identity.
    pub probe: Vec<Sample>,
    /// Oldest sample of each held-out identity, same order as `probe`.
    pub gallery: Vec<Sample>,
    /// Every sample of the held-out identities.
    pub held_out: Vec<Sample>,
}

/// Holds out `round(test_fraction · n_identities)` identities; for each, the
/// pair with the largest age gap becomes one probe (younger) and one gallery
/// (older) entry.
pub fn split_cross_age(
    samples: &[Sample],
    rng: &mut Rng,
    test_fraction: f64,
) -> Result<CrossAgeSplit> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} outside [0, 1)"
        )));
    }
    let mut by_id: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        by_id.entry(s.identity).or_default().push(s);
    }
    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    let n_test = (ids.len() as f64 * test_fraction).round() as usize;
    rng.shuffle(&mut ids);
    let mut test_ids: Vec<usize> = ids[..n_test].to_vec();
    test_ids.sort_unstable();

    let mut probe = Vec::with_capacity(n_test);
    let mut gallery = Vec::with_capacity(n_test);
    let mut held_out = Vec::new();
    for &id in &test_ids {
        let group = &by_id[&id];
        if group.len() < 2 {
            return Err(Error::Degenerate(format!(
                "held-out identity {id} has {} sample(s); a probe/gallery pair needs 2",
                group.len()
            )));
        }
        let young = (0..group.len())
            .min_by(|&a, &b| group[a].age_years.total_cmp(&group[b].age_years))
            .unwrap();
        let old = (0..group.len())
            .filter(|&k| k != young)
            .max_by(|&a, &b| {
                group[a]
                    .age_years
                    .total_cmp(&group[b].age_years)
                    .then(b.cmp(&a))
            })
            .unwrap();
        probe.push(group[young].clone());
        gallery.push(group[old].clone());
        held_out.extend(group.iter().map(|s| (*s).clone()));
    }
    let train = samples
        .iter()
        .filter(|s| test_ids.binary_search(&s.identity).is_err())
        .cloned()
        .collect();
    Ok(CrossAgeSplit {
        train,
        probe,
        gallery,
        held_out,
    })
}
