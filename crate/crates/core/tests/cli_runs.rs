use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rugosity_core::augment::LossSpec;
use rugosity_core::cli::{load_splits, ExperimentConfig};
use rugosity_core::linalg::{frobenius_norm, Matrix};
use rugosity_core::network::{ActivationKind, Layer, Network};
use rugosity_core::train::evaluate;

const BIN: &str = env!("CARGO_BIN_EXE_rugosity");

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, json: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, json).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN).args(args).current_dir(self.dir.path()).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn csv_column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(k).unwrap().to_string()).collect()
}

#[test]
fn generate_is_deterministic_and_shaped() {
    let sb = Sandbox::new();
    let circle = sb.config("c.json", r#"{"dataset": {"kind": "circle", "params": {"n_train": 100, "n_test": 20}, "seed": 7}}"#);
    sb.ok(&["generate", "--config", s(&circle), "--out", "a"]);
    sb.ok(&["generate", "--config", s(&circle), "--out", "b"]);
    for f in ["train.csv", "test.csv", "meta.json", "train_tangents.csv"] {
        assert_eq!(read(sb.path("a/dataset").join(f)), read(sb.path("b/dataset").join(f)), "{f}");
    }

    let spirals = sb.config("s.json", r#"{"dataset": {"kind": "spirals", "params": {"n_train": 500, "n_test": 10}}}"#);
    sb.ok(&["generate", "--config", s(&spirals), "--out", "sp"]);
    let train = read(sb.path("sp/dataset/train.csv"));
    assert_eq!(train.lines().count(), 501);
    let labels = csv_column(&train, "label");
    assert!(labels.iter().all(|l| l == "0.0000000000000000e0" || l == "1.0000000000000000e0"));

    let roll = sb.config("r.json", r#"{"dataset": {"kind": "swiss_roll", "params": {"n_train": 2000, "n_test": 10}}}"#);
    sb.ok(&["generate", "--config", s(&roll), "--out", "roll"]);
    let meta: serde_json::Value = serde_json::from_str(&read(sb.path("roll/dataset/meta.json"))).unwrap();
    assert_eq!(meta["d"], 2);
    assert_eq!(meta["D"], 3);
}

#[test]
fn unknown_keys_are_rejected_with_their_path() {
    let sb = Sandbox::new();
    let cfg = sb.config("bad.json", r#"{"rugosity": {"epsilon": 0.1}}"#);
    let out = sb.run(&["train", "--config", s(&cfg)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("rugosity") && err.contains("epsilon"), "{err}");
}

#[test]
fn trained_network_reproduces_final_row() {
    let sb = Sandbox::new();
    let cfg = sb.config(
        "t.json",
        r#"{"dataset": {"kind": "spirals", "params": {"n_train": 80, "n_test": 40}, "seed": 2},
            "train": {"epochs": 25, "seed": 4}}"#,
    );
    sb.ok(&["train", "--config", s(&cfg), "--out", "run"]);
    let trace = read(sb.path("run/trace.csv"));
    let net = Network::load(sb.path("run/network.txt")).unwrap();
    let resolved = ExperimentConfig::load(sb.path("run/config.resolved.json")).unwrap();
    let splits = load_splits(&resolved.dataset).unwrap();
    let loss = resolved.loss.unwrap_or_else(LossSpec::softmax_cross_entropy);
    let ev = evaluate(&net, &splits.train, &loss).unwrap();
    let fmt = rugosity_core::network::fmt_f64;
    assert_eq!(csv_column(&trace, "train_loss").last().unwrap(), &fmt(ev.loss));
    assert_eq!(csv_column(&trace, "train_acc").last().unwrap(), &fmt(ev.accuracy.unwrap()));
    let test = evaluate(&net, &splits.test, &loss).unwrap();
    assert_eq!(csv_column(&trace, "test_acc").last().unwrap(), &fmt(test.accuracy.unwrap()));
    assert!(csv_column(&trace, "c_hat").iter().all(|c| c.is_empty()));
}

#[test]
fn translation_flag_on_idx_data_fills_c_hat() {
    let sb = Sandbox::new();
    let data = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data");
    let cfg = sb.config(
        "m.json",
        &format!(
            r#"{{"dataset": {{"kind": "idx", "params": {{
                   "train_images": "{data}/mnist-train-images-idx3-ubyte",
                   "train_labels": "{data}/mnist-train-labels-idx1-ubyte",
                   "test_images": "{data}/mnist-t10k-images-idx3-ubyte",
                   "test_labels": "{data}/mnist-t10k-labels-idx1-ubyte",
                   "n_train": 40, "n_test": 20}}}},
                "network": {{"widths": [16]}},
                "train": {{"epochs": 1}},
                "rugosity": {{"m": 2}}}}"#
        ),
    );
    sb.ok(&["train", "--config", s(&cfg), "--augment", "translation:2", "--out", "run"]);
    let trace = read(sb.path("run/trace.csv"));
    let c = csv_column(&trace, "c_hat");
    assert!(!c.last().unwrap().is_empty());
    let resolved = read(sb.path("run/config.resolved.json"));
    assert!(resolved.contains("\"translation\""), "{resolved}");
}

fn write_affine_net(path: &Path) -> Matrix {
    let a = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.25]]).unwrap();
    let net = Network::new(vec![Layer::new(a.clone(), vec![0.3, -0.1], ActivationKind::Identity).unwrap()]).unwrap();
    net.save(path).unwrap();
    a
}

#[test]
fn measure_on_affine_network() {
    let sb = Sandbox::new();
    let a = write_affine_net(&sb.path("affine.txt"));
    let cfg = sb.config(
        "m.json",
        r#"{"dataset": {"kind": "spirals", "params": {"n_train": 30, "n_test": 30}},
            "augmentation": {"kind": "tangent_jitter", "params": {"m": 3, "eps": 0.05}}}"#,
    );
    let out = sb.ok(&["measure", "--config", s(&cfg), "--network", s(&sb.path("affine.txt")), "--out", "m1"]);
    let csv = read(sb.path("m1/measure.csv"));
    assert_eq!(String::from_utf8_lossy(&out.stdout), csv);
    let names = csv_column(&csv, "estimator");
    let values = csv_column(&csv, "value");
    let fro = frobenius_norm(&a).unwrap();
    for (name, value) in names.iter().zip(&values) {
        let v: f64 = value.parse().unwrap();
        if name.starts_with("jacobian_norm") {
            assert!((v - fro).abs() < 1e-12, "{name}: {v} vs {fro}");
        } else {
            assert_eq!(v, 0.0, "{name}");
        }
    }
    assert_eq!(names.len(), 10);
    sb.ok(&["measure", "--config", s(&cfg), "--network", s(&sb.path("affine.txt")), "--out", "m2"]);
    assert_eq!(csv, read(sb.path("m2/measure.csv")));
}

#[test]
fn rescale_flag_halves_every_measure() {
    let sb = Sandbox::new();
    let cfg = sb.config(
        "t.json",
        r#"{"dataset": {"kind": "spirals", "params": {"n_train": 60, "n_test": 60}, "seed": 5},
            "train": {"epochs": 20},
            "augmentation": {"kind": "tangent_jitter", "params": {"m": 3, "eps": 0.05}},
            "train": {"epochs": 20, "aug_in_loss": false}}"#,
    );
    // Duplicate keys are a JSON error surfaced as a config error.
    assert!(!sb.run(&["train", "--config", s(&cfg)]).status.success());
    let cfg = sb.config(
        "t.json",
        r#"{"dataset": {"kind": "spirals", "params": {"n_train": 60, "n_test": 60}, "seed": 5},
            "train": {"epochs": 20, "aug_in_loss": false},
            "augmentation": {"kind": "tangent_jitter", "params": {"m": 3, "eps": 0.05}}}"#,
    );
    sb.ok(&["train", "--config", s(&cfg), "--out", "run"]);
    let net = sb.path("run/network.txt");
    sb.ok(&["measure", "--config", s(&cfg), "--network", s(&net), "--out", "full"]);
    sb.ok(&["measure", "--config", s(&cfg), "--network", s(&net), "--rescale", "0.5", "--out", "half"]);
    let full = csv_column(&read(sb.path("full/measure.csv")), "value");
    let half = csv_column(&read(sb.path("half/measure.csv")), "value");
    for (f, h) in full.iter().zip(&half) {
        let (f, h): (f64, f64) = (f.parse().unwrap(), h.parse().unwrap());
        assert!((h - 0.5 * f).abs() <= 1e-9 * f.abs().max(1.0), "{h} vs {f}/2");
    }
    assert!(!sb.run(&["measure", "--config", s(&cfg), "--network", s(&net), "--rescale", "-1"]).status.success());
}

#[test]
fn estimator_mismatch_is_a_config_error() {
    let sb = Sandbox::new();
    let cfg = sb.config(
        "t.json",
        r#"{"dataset": {"kind": "circle", "params": {"n_train": 20, "n_test": 20}},
            "rugosity": {"estimator": "smooth_mc"}}"#,
    );
    write_affine_net(&sb.path("affine.txt"));
    let out = sb.run(&["measure", "--config", s(&cfg), "--network", s(&sb.path("affine.txt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
}

#[test]
fn bound_reports_and_exit_codes() {
    let sb = Sandbox::new();
    let cfg = sb.config(
        "t.json",
        r#"{"dataset": {"kind": "spirals", "params": {"n_train": 60, "n_test": 20}, "seed": 1},
            "train": {"epochs": 30},
            "augmentation": {"kind": "tangent_jitter", "params": {"m": 4, "eps": 0.02}}}"#,
    );
    sb.ok(&["train", "--config", s(&cfg), "--out", "run"]);
    let net = sb.path("run/network.txt");
    sb.ok(&["bound", "--config", s(&cfg), "--network", s(&net), "--out", "b"]);
    let report: serde_json::Value = serde_json::from_str(&read(sb.path("b/bound.json"))).unwrap();
    assert!(report["residual_min"].as_f64().unwrap() >= -1e-9);
    assert_eq!(report["first_order_holds"], true);

    sb.ok(&["bound", "--config", s(&cfg), "--network", s(&net), "--augment", "tangent_jitter:4:0", "--out", "zero"]);
    let zero: serde_json::Value = serde_json::from_str(&read(sb.path("zero/bound.json"))).unwrap();
    assert_eq!(zero["rhs"], zero["L"]);

    write_affine_net(&sb.path("affine.txt"));
    sb.ok(&["bound", "--config", s(&cfg), "--network", s(&sb.path("affine.txt")), "--out", "aff"]);
    let aff: serde_json::Value = serde_json::from_str(&read(sb.path("aff/bound.json"))).unwrap();
    assert_eq!(aff["term_A"].as_f64(), Some(0.0));

    let none = sb.run(&["bound", "--config", s(&cfg), "--network", s(&net), "--augment", "none"]);
    assert!(!none.status.success());
    let flip = sb.run(&["bound", "--config", s(&cfg), "--network", s(&net), "--augment", "flip"]);
    assert!(!flip.status.success());
}

#[test]
fn divergence_exits_nonzero_with_epoch() {
    let sb = Sandbox::new();
    let cfg = sb.config(
        "d.json",
        r#"{"dataset": {"kind": "swiss_roll", "params": {"n_train": 50, "n_test": 10}},
            "train": {"epochs": 400, "optimizer": {"kind": "sgd", "lr": 10.0}, "lr_schedule": []}}"#,
    );
    let out = sb.run(&["train", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged at epoch"));
}

#[test]
fn sweep_rows_and_single_run_equivalence() {
    let sb = Sandbox::new();
    let cfg = sb.config(
        "s.json",
        r#"{"dataset": {"kind": "spirals", "params": {"n_train": 60, "n_test": 30}, "seed": 3},
            "train": {"epochs": 15, "seed": 2, "aug_in_loss": false},
            "augmentation": {"kind": "tangent_jitter", "params": {"m": 3, "eps": 0.01}},
            "sweep": {"lambdas": [0.0, 0.1], "seeds": [1, 2, 3, 4, 5]}}"#,
    );
    sb.ok(&["sweep", "--config", s(&cfg), "--out", "sw"]);
    let csv = read(sb.path("sw/sweep.csv"));
    let settings = csv_column(&csv, "setting");
    let seeds = csv_column(&csv, "seed");
    for setting in ["lambda=0|aug=tangent_jitter:3:0.01", "lambda=0.1|aug=tangent_jitter:3:0.01"] {
        let rows: Vec<&String> = settings.iter().zip(&seeds).filter(|(s, k)| *s == setting && *k != "median").map(|(_, k)| k).collect();
        assert_eq!(rows.len(), 5, "{setting}");
        assert_eq!(settings.iter().zip(&seeds).filter(|(s, k)| *s == setting && *k == "median").count(), 1);
    }

    // The seed-2 run of the λ = 0 setting is the same run `train` performs.
    sb.ok(&["train", "--config", s(&cfg), "--out", "single"]);
    let single = read(sb.path("single/trace.csv"));
    let from_sweep = read(sb.path("sw/runs/lambda-0_aug-tangent_jitter-3-0.01_seed2/trace.csv"));
    assert_eq!(single, from_sweep);
}

#[test]
fn sweep_thread_cap_does_not_change_results() {
    let sb = Sandbox::new();
    let cfg = sb.config(
        "s.json",
        r#"{"dataset": {"kind": "circle", "params": {"n_train": 40, "n_test": 20}},
            "train": {"epochs": 5, "aug_in_loss": false},
            "augmentation": {"kind": "tangent_jitter", "params": {"m": 2, "eps": 0.01}},
            "sweep": {"seeds": [1, 2, 3]}}"#,
    );
    let one = Command::new(BIN)
        .args(["sweep", "--config", s(&cfg), "--out", s(&sb.path("one"))])
        .env("RUGOSITY_THREADS", "1")
        .output()
        .unwrap();
    assert!(one.status.success());
    let three = Command::new(BIN)
        .args(["sweep", "--config", s(&cfg), "--out", s(&sb.path("three"))])
        .env("RUGOSITY_THREADS", "3")
        .output()
        .unwrap();
    assert!(three.status.success());
    assert_eq!(read(sb.path("one/sweep.csv")), read(sb.path("three/sweep.csv")));
    // Default λ grid when neither λ nor augmentation lists are given.
    let lambdas = csv_column(&read(sb.path("one/sweep.csv")), "lambda");
    assert_eq!(lambdas.len(), 5 * 3 + 5);
    let bad = Command::new(BIN)
        .args(["sweep", "--config", s(&cfg), "--out", s(&sb.path("bad"))])
        .env("RUGOSITY_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
