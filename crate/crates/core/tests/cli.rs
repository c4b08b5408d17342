use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dal_core::bcca::CmmParams;
use dal_core::checkpoint;
use dal_core::config::RunConfig;
use dal_core::data::Dataset;
use dal_core::eval::EvalReport;
use dal_core::math::{Matrix, Rng};
use dal_core::model::{Architecture, DalModel};
use tempfile::TempDir;

const TINY: &str = "\
n_id = 30
samples_per_id = 8
d_latent_id = 6
d_in = 16
hidden = 16
d_feat = 4
batch_size = 32
max_phase_iters = 3
min_phase_iters = 5
epochs = 2
";

fn dal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new(config: &str) -> Self {
        let dir = TempDir::new().unwrap();
        let config_path = dir.path().join("run.conf");
        fs::write(&config_path, config).unwrap();
        let data = dir.path().join("data.txt");
        let o = dal(&["gen", "--config", s(&config_path), "--out", s(&data)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        Self {
            dir,
            config: config_path,
            data,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out);
        let mut args = vec![
            "train",
            "--config",
            s(&self.config),
            "--data",
            s(&self.data),
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        dal(&args)
    }

    fn target_args<'a>(&'a self, ckpt: &'a Path) -> Vec<&'a str> {
        vec![
            "--config",
            s(&self.config),
            "--data",
            s(&self.data),
            "--checkpoint",
            s(ckpt),
        ]
    }
}

fn read_log(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn gen_default_config_has_default_header() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.conf");
    fs::write(&empty, "# defaults only\n").unwrap();
    let out = dir.path().join("d.txt");
    let o = dal(&["gen", "--config", s(&empty), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next(), Some("64 200"));
    assert_eq!(text.lines().count(), 1 + 200 * 20);
    let table = stdout(&o);
    assert!(table.contains(">=66") && table.contains("4000"), "{table}");
}

#[test]
fn gen_rejects_empty_age_range_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "age_min = 60\nage_max = 20\n").unwrap();
    let o = dal(&[
        "gen",
        "--config",
        s(&conf),
        "--out",
        s(&dir.path().join("d.txt")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("age_max"), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 2"));
}

#[test]
fn gen_rejects_unknown_keys() {
    let dir = TempDir::new().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "lamda2 = 0.1\n").unwrap();
    let o = dal(&[
        "gen",
        "--config",
        s(&conf),
        "--out",
        s(&dir.path().join("d.txt")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lamda2"));
}

#[test]
fn gen_is_byte_identical_for_a_seed() {
    let f = Fixture::new(TINY);
    let again = f.path("again.txt");
    let other = f.path("other.txt");
    assert_eq!(
        dal(&["gen", "--config", s(&f.config), "--out", s(&again)])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        dal(&[
            "gen",
            "--config",
            s(&f.config),
            "--out",
            s(&other),
            "--seed",
            "5"
        ])
        .status
        .code(),
        Some(0)
    );
    assert_eq!(fs::read(&f.data).unwrap(), fs::read(&again).unwrap());
    assert_ne!(fs::read(&f.data).unwrap(), fs::read(&other).unwrap());
}

#[test]
fn train_writes_artifacts_with_expected_row_count() {
    let f = Fixture::new(TINY);
    let o = f.train("run", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["model.ckpt", "log.csv", "config.txt", "manifest.json"] {
        assert!(f.path("run").join(name).exists(), "{name}");
    }
    assert!(!f.path("run").join("manifest.json.tmp").exists());
    // 24 training identities × 8 samples, batches of 32, 2 epochs
    let log = read_log(&f.path("run/log.csv"));
    assert_eq!(log.len(), 6 * 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["steps"], 12);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
    assert!(manifest["version"].as_str().unwrap().starts_with('v'));
}

#[test]
fn manifest_config_reproduces_the_log() {
    let f = Fixture::new(TINY);
    assert_eq!(
        f.train("first", &["--seed", "9", "--mode", "plus_age"])
            .status
            .code(),
        Some(0)
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("first/manifest.json")).unwrap()).unwrap();
    let snapshot = f.path("snapshot.conf");
    fs::write(&snapshot, manifest["config"].as_str().unwrap()).unwrap();
    let cfg = RunConfig::parse(&fs::read_to_string(&snapshot).unwrap()).unwrap();
    assert_eq!(cfg.train.seed, 9);
    let second = f.path("second");
    let o = dal(&[
        "train",
        "--config",
        s(&snapshot),
        "--data",
        s(&f.data),
        "--out",
        s(&second),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        fs::read(f.path("first/log.csv")).unwrap(),
        fs::read(second.join("log.csv")).unwrap()
    );
    assert_eq!(
        fs::read(f.path("first/model.ckpt")).unwrap(),
        fs::read(second.join("model.ckpt")).unwrap()
    );
}

#[test]
fn baseline_and_dal_logs_part_after_the_first_update() {
    let f = Fixture::new(TINY);
    assert_eq!(
        f.train("base", &["--mode", "baseline"]).status.code(),
        Some(0)
    );
    assert_eq!(
        f.train("dal", &["--mode", "plus_age_dal"]).status.code(),
        Some(0)
    );
    let base = read_log(&f.path("base/log.csv"));
    let dal = read_log(&f.path("dal/log.csv"));
    assert_eq!(base.len(), dal.len());
    // step, phase, rho_abs, l_id, l_age agree before the adversary has moved
    assert_eq!(base[0][..5], dal[0][..5]);
    assert_ne!(base[1][2], dal[1][2]);
}

#[test]
fn divergence_exits_3_and_keeps_the_partial_log() {
    let f = Fixture::new(&format!("{TINY}lr = 1e300\nstart_phase = min\n"));
    let o = f.train("run", &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("iteration"));
    let log = read_log(&f.path("run/log.csv"));
    assert!(!log.is_empty() && log.len() < 12, "{}", log.len());
    assert!(!f.path("run/model.ckpt").exists());
    assert!(!f.path("run/manifest.json").exists());
}

#[test]
fn unknown_mode_is_a_usage_error() {
    let f = Fixture::new(TINY);
    assert_eq!(
        f.train("run", &["--mode", "adversarial"]).status.code(),
        Some(2)
    );
}

#[test]
fn eval_is_repeatable_and_histograms_cover_groups() {
    let f = Fixture::new(TINY);
    assert_eq!(f.train("run", &[]).status.code(), Some(0));
    let ckpt = f.path("run/model.ckpt");
    for out in ["ev1", "ev2"] {
        let mut args = vec!["eval"];
        let out_path = f.path(out);
        args.extend(f.target_args(&ckpt));
        args.extend(["--out", s(&out_path)]);
        let o = dal(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let a = fs::read_to_string(f.path("ev1/report.json")).unwrap();
    assert_eq!(a, fs::read_to_string(f.path("ev2/report.json")).unwrap());
    assert_eq!(
        fs::read(f.path("ev1/histograms.csv")).unwrap(),
        fs::read(f.path("ev2/histograms.csv")).unwrap()
    );

    let report = EvalReport::from_json(&a).unwrap();
    assert!((0.0..=1.0).contains(&report.rank1));
    let csv = fs::read_to_string(f.path("ev1/histograms.csv")).unwrap();
    let mut total = 0;
    for row in csv.lines().skip(1) {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 4 + 20);
        let count: usize = cells[1].parse().unwrap();
        let binned: usize = cells[4..].iter().map(|c| c.parse::<usize>().unwrap()).sum();
        assert_eq!(count, binned, "{row}");
        total += count;
    }
    let stats = &report.per_group_cos_stats;
    // 6 held-out identities × 8 samples
    assert_eq!(
        total + stats.excluded_singletons + stats.excluded_degenerate,
        48
    );
}

#[test]
fn corrupted_checkpoint_exits_4() {
    let f = Fixture::new(TINY);
    assert_eq!(f.train("run", &[]).status.code(), Some(0));
    let ckpt = f.path("run/model.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    let bad = f.path("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let mut args = vec!["eval"];
    let out = f.path("ev");
    args.extend(f.target_args(&bad));
    args.extend(["--out", s(&out)]);
    let o = dal(&args);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn dimension_mismatch_names_the_group() {
    let f = Fixture::new(TINY);
    let arch = Architecture {
        hidden: 16,
        d_feat: 4,
        ..Architecture::new(20, 24)
    };
    let ckpt = f.path("wide.ckpt");
    checkpoint::save(
        &ckpt,
        &DalModel::new(&arch, &Rng::new(0)),
        &CmmParams::new(4, &mut Rng::new(1)),
    )
    .unwrap();
    let mut args = vec!["cca-probe"];
    args.extend(f.target_args(&ckpt));
    let o = dal(&args);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("backbone.0.weight"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_exits_4() {
    let f = Fixture::new(TINY);
    let out = f.path("run");
    let o = dal(&[
        "train",
        "--data",
        s(&f.path("nowhere.txt")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn gradcheck_passes_and_repeats() {
    let a = dal(&["gradcheck", "--seed", "11"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    let table = stdout(&a);
    for part in [
        "bcca",
        "backbone",
        "rfm",
        "age_head",
        "id_classifier",
        "cmm",
    ] {
        assert!(table.contains(part), "{part}");
    }
    assert!(!table.contains("FAIL"));
    assert_eq!(table, stdout(&dal(&["gradcheck", "--seed", "11"])));
}

fn probe_values(o: &Output) -> (f64, f64) {
    let text = stdout(o);
    let value = |prefix: &str| -> f64 {
        let line = text
            .lines()
            .find(|l| l.starts_with(prefix))
            .unwrap_or_else(|| panic!("{text}"));
        line.split_whitespace().last().unwrap().parse().unwrap()
    };
    (value("residual correlation"), value("max-phase estimate"))
}

#[test]
fn probe_estimates_agree_on_an_untrained_model() {
    let f = Fixture::new(TINY);
    let text = fs::read_to_string(&f.data).unwrap();
    let data = Dataset::from_text(&text).unwrap();
    let arch = Architecture {
        hidden: 16,
        d_feat: 4,
        ..Architecture::new(data.d_in, 24)
    };
    let ckpt = f.path("init.ckpt");
    checkpoint::save(
        &ckpt,
        &DalModel::new(&arch, &Rng::new(3)),
        &CmmParams::new(4, &mut Rng::new(4)),
    )
    .unwrap();
    let mut args = vec!["cca-probe"];
    args.extend(f.target_args(&ckpt));
    let o = dal(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (oracle, sgd) = probe_values(&o);
    assert!((oracle - sgd).abs() <= 2e-2, "{oracle} vs {sgd}");
}

#[test]
fn probe_reports_zero_for_a_vanishing_age_branch() {
    let f = Fixture::new(TINY);
    let arch = Architecture {
        hidden: 16,
        d_feat: 4,
        ..Architecture::new(16, 24)
    };
    let mut model = DalModel::new(&arch, &Rng::new(3));
    let last = model.net.rfm.layers.last_mut().unwrap();
    last.weight = Matrix::zeros(last.weight.rows(), last.weight.cols());
    last.bias = Matrix::zeros(1, last.bias.cols());
    let ckpt = f.path("copy.ckpt");
    checkpoint::save(&ckpt, &model, &CmmParams::new(4, &mut Rng::new(4))).unwrap();
    let mut args = vec!["cca-probe"];
    args.extend(f.target_args(&ckpt));
    let o = dal(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (oracle, sgd) = probe_values(&o);
    assert_eq!(oracle, 0.0);
    assert_eq!(sgd, 0.0);
    assert!(stdout(&o).contains("warning"), "{}", stdout(&o));
}

#[test]
fn dal_checkpoint_probes_lower_than_its_pair() {
    let f = Fixture::new("epochs = 30\n");
    let mut values = Vec::new();
    for mode in ["plus_age", "plus_age_dal"] {
        let o = f.train(mode, &["--mode", mode]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let ckpt = f.path(mode).join("model.ckpt");
        let mut args = vec!["cca-probe"];
        args.extend(f.target_args(&ckpt));
        let o = dal(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        values.push(probe_values(&o).0);
    }
    assert!(values[1] < values[0], "{values:?}");
}
