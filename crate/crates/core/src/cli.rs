//! The `dal` command line.
//!
//! Exit codes: 0 success, 1 check failure, 2 config error, 3 training
//! failure, 4 I/O or shape error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bcca::CmmParams;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{generate, split_cross_age, AgeGroup, CrossAgeSplit, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, max_phase_estimate, residual_correlation};
use crate::gradcheck::gradcheck;
use crate::math::Rng;
use crate::model::DalModel;
use crate::trainer::{log_to_csv, Mode, TrainSet, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const PROBE_STEPS: usize = 500;
pub const PROBE_LR: f64 = 0.5;

#[derive(Parser, Debug)]
#[command(
    name = "dal",
    version,
    about = "Decorrelated adversarial learning on synthetic entangled-factor data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and print its age distribution.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file to write.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model; writes checkpoint, log and manifest into `--out`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Evaluate a checkpoint; writes report.json and histograms.csv into `--out`.
    Eval {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Residual correlation of a checkpoint, closed form and by SGD.
    CcaProbe {
        #[command(flatten)]
        target: Target,
    },
}

#[derive(Args, Debug)]
struct Target {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Overrides `split_seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Debug)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    /// Full configuration after command-line overrides, in config syntax.
    pub config: String,
    pub dataset: String,
    pub duration_seconds: f64,
    pub steps: usize,
    pub outputs: Vec<String>,
}

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Training { .. } => EXIT_TRAINING,
        _ => EXIT_IO,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Gen { config, out, seed } => cmd_gen(config.as_deref(), &out, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
            mode,
        } => cmd_train(config.as_deref(), &data, &out, seed, mode),
        Command::Eval { target, out } => cmd_eval(&target, &out),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::CcaProbe { target } => cmd_cca_probe(&target),
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_text(&read_to_string(path)?)
}

/// Writes through a sibling temporary file and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::Io(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn split(cfg: &RunConfig, dataset: &Dataset) -> Result<CrossAgeSplit> {
    split_cross_age(
        &dataset.samples,
        &mut Rng::new(cfg.split_seed),
        cfg.test_fraction,
    )
}

pub fn age_table(dataset: &Dataset) -> String {
    let counts = Dataset::age_group_counts(&dataset.samples);
    let mut out = format!("{:<6} {:<8} {:>7}\n", "group", "ages", "count");
    for g in AgeGroup::all() {
        out.push_str(&format!(
            "{:<6} {:<8} {:>7}\n",
            g.index(),
            g.label(),
            counts[g.index()]
        ));
    }
    out.push_str(&format!("{:<15} {:>7}\n", "total", dataset.len()));
    out
}

fn cmd_gen(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<i32> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.data_seed = s;
    }
    let dataset = generate(&cfg.gen, &Rng::new(cfg.data_seed))?;
    write_atomic(out, dataset.to_text().as_bytes())?;
    print!("{}", age_table(&dataset));
    Ok(EXIT_OK)
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    mode: Option<Mode>,
) -> Result<i32> {
    let started = Instant::now();
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    let dataset = load_dataset(data)?;
    let split = split(&cfg, &dataset)?;
    let set = TrainSet::from_samples(&split.train, dataset.d_in)?;
    let arch = cfg.architecture(dataset.d_in, set.num_classes());
    let mut trainer = Trainer::with_architecture(cfg.train.clone(), &set, arch)?;

    create_dir(out)?;
    let log_path = out.join("log.csv");
    let outcome = loop {
        match trainer.next_step() {
            Ok(Some(_)) => {}
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        }
    };
    write_atomic(&log_path, log_to_csv(trainer.log()).as_bytes())?;
    outcome?;

    let steps = trainer.log().len();
    let fitted = trainer.finish();
    let ckpt_path = out.join("model.ckpt");
    let config_path = out.join("config.txt");
    write_atomic(&ckpt_path, &checkpoint::encode(&fitted.model, &fitted.cmm))?;
    write_atomic(&config_path, cfg.to_text().as_bytes())?;
    let manifest = RunManifest {
        version: version_string(),
        command: "train".into(),
        config: cfg.to_text(),
        dataset: data.display().to_string(),
        duration_seconds: started.elapsed().as_secs_f64(),
        steps,
        outputs: [&ckpt_path, &log_path, &config_path]
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest is serializable");
    write_atomic(&out.join("manifest.json"), json.as_bytes())?;
    let last = fitted.log.last();
    println!(
        "trained {} for {} steps ({} mode); final |rho| {}, l_id {}",
        data.display(),
        steps,
        cfg.train.mode,
        last.map_or(f64::NAN, |r| r.rho_abs),
        last.map_or(f64::NAN, |r| r.l_id)
    );
    Ok(EXIT_OK)
}

fn load_target(target: &Target) -> Result<(RunConfig, Dataset, CrossAgeSplit, DalModel)> {
    let mut cfg = load_config(target.config.as_deref())?;
    if let Some(s) = target.seed {
        cfg.split_seed = s;
    }
    let dataset = load_dataset(&target.data)?;
    let (model, _) = checkpoint::load(&target.checkpoint)?;
    checkpoint::check_input_dim(&model, dataset.d_in)?;
    let split = split(&cfg, &dataset)?;
    Ok((cfg, dataset, split, model))
}

fn cmd_eval(target: &Target, out: &Path) -> Result<i32> {
    let (cfg, _, split, model) = load_target(target)?;
    let report = evaluate(&model, &split, &split.train, cfg.ridge, cfg.split_seed)?;
    create_dir(out)?;
    write_atomic(&out.join("report.json"), report.to_json().as_bytes())?;
    write_atomic(
        &out.join("histograms.csv"),
        report.histogram_csv().as_bytes(),
    )?;
    println!("rank-1 identification  {}", report.rank1);
    println!(
        "verification accuracy  {} (threshold {})",
        report.verif_acc_best_threshold, report.verif_threshold
    );
    println!("residual correlation   {}", report.residual_max_corr);
    println!("{:<8} {:>6} {:>10}", "ages", "count", "mean cos");
    for g in &report.per_group_cos_stats.groups {
        let mean = g.mean.map_or("-".to_string(), |m| format!("{m:.4}"));
        println!("{:<8} {:>6} {:>10}", g.group, g.count, mean);
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(seed: u64) -> Result<i32> {
    let report = gradcheck(seed)?;
    print!("{}", report.table());
    Ok(if report.passed() {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    })
}

fn cmd_cca_probe(target: &Target) -> Result<i32> {
    let (cfg, _, split, model) = load_target(target)?;
    let oracle = residual_correlation(&model, &split.train, cfg.ridge)?;
    let cmm = CmmParams::new(model.net.feature_dim(), &mut Rng::new(cfg.split_seed));
    let sgd = max_phase_estimate(
        &model,
        &split.train,
        cmm,
        PROBE_STEPS,
        PROBE_LR,
        cfg.train.epsilon,
    )?;
    println!("residual correlation (closed form)   {}", oracle.top);
    println!("max-phase estimate ({PROBE_STEPS} SGD steps)   {sgd}");
    if oracle.zero_variance_warning() {
        println!(
            "warning: {} feature columns have variance at or below the ridge {}",
            oracle.low_variance_columns, cfg.ridge
        );
    }
    Ok(EXIT_OK)
}
