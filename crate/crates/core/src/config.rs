//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every key
//! is optional and unknown keys are rejected, so a typo cannot silently fall
//! back to a default.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::GenSpec;
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::trainer::{default_milestones, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub gen: GenSpec,
    /// Seed of the per-identity sample streams.
    pub data_seed: u64,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub hidden: usize,
    pub d_feat: usize,
    pub rfm_output_relu: bool,
    pub train: TrainConfig,
    /// Diagonal ridge of the closed-form correlation oracle.
    pub ridge: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            gen: GenSpec::default(),
            data_seed: 0,
            test_fraction: 0.2,
            split_seed: 1,
            hidden: 128,
            d_feat: 32,
            rfm_output_relu: false,
            ridge: train.epsilon,
            train,
        }
    }
}

pub const KEYS: &[&str] = &[
    "n_id",
    "samples_per_id",
    "d_latent_id",
    "d_in",
    "age_min",
    "age_max",
    "mixing_seed",
    "noise_stddev",
    "age_gain",
    "data_seed",
    "test_fraction",
    "split_seed",
    "hidden",
    "d_feat",
    "rfm_output_relu",
    "mode",
    "seed",
    "lambda1",
    "lambda2",
    "margin",
    "scale",
    "epsilon",
    "batch_size",
    "max_phase_iters",
    "min_phase_iters",
    "epochs",
    "lr",
    "lr_milestones",
    "start_phase",
    "ridge",
];

fn parse_value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config {
        line,
        field: key.to_string(),
        message: format!("cannot parse {raw:?}"),
    })
}

/// `epoch:factor` pairs separated by commas; `none` for no decay.
fn parse_milestones(line: usize, raw: &str) -> Result<Vec<(usize, f64)>> {
    if raw == "none" {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|item| {
            let (e, f) = item.trim().split_once(':').ok_or_else(|| Error::Config {
                line,
                field: "lr_milestones".into(),
                message: format!("expected epoch:factor, got {:?}", item.trim()),
            })?;
            Ok((
                parse_value(line, "lr_milestones", e.trim())?,
                parse_value(line, "lr_milestones", f.trim())?,
            ))
        })
        .collect()
}

fn format_milestones(m: &[(usize, f64)]) -> String {
    if m.is_empty() {
        return "none".into();
    }
    m.iter()
        .map(|(e, f)| format!("{e}:{f}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Leading identifier of a validation message, used as the field name.
fn field_of(message: &str) -> String {
    message
        .chars()
        .take_while(|c| c.is_ascii_alphanumeric() || *c == '_')
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut lines: HashMap<String, usize> = HashMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                field: content.to_string(),
                message: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config {
                    line,
                    field: key.to_string(),
                    message: "unknown key".into(),
                });
            }
            if let Some(first) = lines.insert(key.to_string(), line) {
                return Err(Error::Config {
                    line,
                    field: key.to_string(),
                    message: format!("already set on line {first}"),
                });
            }
            cfg.set(line, key, value)?;
        }
        if lines.contains_key("epochs") && !lines.contains_key("lr_milestones") {
            cfg.train.lr_milestones = default_milestones(cfg.train.epochs);
        }
        cfg.validate_with(&lines)?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let g = &mut self.gen;
        let t = &mut self.train;
        match key {
            "n_id" => g.n_id = parse_value(line, key, v)?,
            "samples_per_id" => g.samples_per_id = parse_value(line, key, v)?,
            "d_latent_id" => g.d_latent_id = parse_value(line, key, v)?,
            "d_in" => g.d_in = parse_value(line, key, v)?,
            "age_min" => g.age_min = parse_value(line, key, v)?,
            "age_max" => g.age_max = parse_value(line, key, v)?,
            "mixing_seed" => g.mixing_seed = parse_value(line, key, v)?,
            "noise_stddev" => g.noise_stddev = parse_value(line, key, v)?,
            "age_gain" => g.age_gain = parse_value(line, key, v)?,
            "data_seed" => self.data_seed = parse_value(line, key, v)?,
            "test_fraction" => self.test_fraction = parse_value(line, key, v)?,
            "split_seed" => self.split_seed = parse_value(line, key, v)?,
            "hidden" => self.hidden = parse_value(line, key, v)?,
            "d_feat" => self.d_feat = parse_value(line, key, v)?,
            "rfm_output_relu" => self.rfm_output_relu = parse_value(line, key, v)?,
            "mode" => t.mode = parse_value(line, key, v)?,
            "seed" => t.seed = parse_value(line, key, v)?,
            "lambda1" => t.lambda1 = parse_value(line, key, v)?,
            "lambda2" => t.lambda2 = parse_value(line, key, v)?,
            "margin" => t.cosface.margin = parse_value(line, key, v)?,
            "scale" => t.cosface.scale = parse_value(line, key, v)?,
            "epsilon" => t.epsilon = parse_value(line, key, v)?,
            "batch_size" => t.batch_size = parse_value(line, key, v)?,
            "max_phase_iters" => t.max_phase_iters = parse_value(line, key, v)?,
            "min_phase_iters" => t.min_phase_iters = parse_value(line, key, v)?,
            "epochs" => t.epochs = parse_value(line, key, v)?,
            "lr" => t.lr = parse_value(line, key, v)?,
            "lr_milestones" => t.lr_milestones = parse_milestones(line, v)?,
            "start_phase" => t.start_phase = parse_value(line, key, v)?,
            "ridge" => self.ridge = parse_value(line, key, v)?,
            _ => unreachable!("key list and setter disagree on {key}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(&HashMap::new())
    }

    fn validate_with(&self, lines: &HashMap<String, usize>) -> Result<()> {
        let located = |message: String| {
            let field = field_of(&message);
            let message = message
                .strip_prefix(&format!("{field}: "))
                .map(str::to_string)
                .unwrap_or(message);
            Error::Config {
                line: lines.get(&field).copied().unwrap_or(0),
                field,
                message,
            }
        };
        let relabel = |e: Error| match e {
            Error::InvalidArgument(m) => located(m),
            other => other,
        };
        self.gen.validate().map_err(relabel)?;
        self.train.validate().map_err(relabel)?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(located(format!(
                "test_fraction {} outside [0, 1)",
                self.test_fraction
            )));
        }
        if self.hidden == 0 {
            return Err(located("hidden must be at least 1".into()));
        }
        if self.d_feat == 0 {
            return Err(located("d_feat must be at least 1".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(located(format!(
                "ridge {} must be finite and non-negative",
                self.ridge
            )));
        }
        Ok(())
    }

    pub fn architecture(&self, d_in: usize, n_id: usize) -> Architecture {
        Architecture {
            d_in,
            n_id,
            hidden: self.hidden,
            d_feat: self.d_feat,
            rfm_output_relu: self.rfm_output_relu,
        }
    }

    /// Every key with its value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let g = &self.gen;
        let t = &self.train;
        let values: Vec<(&str, String)> = vec![
            ("n_id", g.n_id.to_string()),
            ("samples_per_id", g.samples_per_id.to_string()),
            ("d_latent_id", g.d_latent_id.to_string()),
            ("d_in", g.d_in.to_string()),
            ("age_min", g.age_min.to_string()),
            ("age_max", g.age_max.to_string()),
            ("mixing_seed", g.mixing_seed.to_string()),
            ("noise_stddev", g.noise_stddev.to_string()),
            ("age_gain", g.age_gain.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("hidden", self.hidden.to_string()),
            ("d_feat", self.d_feat.to_string()),
            ("rfm_output_relu", self.rfm_output_relu.to_string()),
            ("mode", t.mode.to_string()),
            ("seed", t.seed.to_string()),
            ("lambda1", t.lambda1.to_string()),
            ("lambda2", t.lambda2.to_string()),
            ("margin", t.cosface.margin.to_string()),
            ("scale", t.cosface.scale.to_string()),
            ("epsilon", t.epsilon.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("max_phase_iters", t.max_phase_iters.to_string()),
            ("min_phase_iters", t.min_phase_iters.to_string()),
            ("epochs", t.epochs.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_milestones", format_milestones(&t.lr_milestones)),
            ("start_phase", t.start_phase.to_string()),
            ("ridge", self.ridge.to_string()),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in values {
            writeln!(out, "{k} = {v}").expect("writing to a string");
        }
        out
    }
}
