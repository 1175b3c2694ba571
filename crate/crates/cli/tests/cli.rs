use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn poe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poe"))
        .args(args)
        .output()
        .expect("spawn poe")
}

fn ok(args: &[&str]) -> Output {
    let out = poe(args);
    assert!(
        out.status.success(),
        "poe {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_json(out: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {line}"))
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let w = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        w.write("data.toml", "n_samples = 240\nseed = 4\n");
        w.write(
            "train.toml",
            "embed_dim = 6\nhidden = [16]\nsamples = 4\nepochs = 2\nbatch_size = 24\nlearning_rate = 1e-3\n",
        );
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn write(&self, name: &str, text: &str) {
        fs::write(self.path(name), text).unwrap();
    }

    fn generate(&self, out: &str) {
        ok(&[
            "generate",
            "--config",
            &self.arg("data.toml"),
            "--out",
            &self.arg(out),
        ]);
    }

    fn train(&self, data: &str, out: &str, extra: &[&str]) {
        let (c, d, o) = (self.arg("train.toml"), self.arg(data), self.arg(out));
        let mut args = vec!["train", "--config", &c, "--data", &d, "--out", &o];
        args.extend_from_slice(extra);
        ok(&args);
    }
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_writes_the_requested_rows_and_is_reproducible() {
    let w = Workspace::new();
    w.generate("a.csv");
    w.generate("b.csv");
    let text = fs::read_to_string(w.path("a.csv")).unwrap();
    assert_eq!(text.lines().count(), 241);
    let (ma, mb) = (
        manifest(&w.path("a.csv.manifest.json")),
        manifest(&w.path("b.csv.manifest.json")),
    );
    assert_eq!(ma["status"], "complete");
    assert_eq!(ma["dataset_sha256"], mb["dataset_sha256"]);
    assert_eq!(ma["config"]["n_samples"], 240);
    assert_eq!(
        fs::read(w.path("a.csv")).unwrap(),
        fs::read(w.path("b.csv")).unwrap()
    );
}

#[test]
fn unknown_config_keys_are_named() {
    let w = Workspace::new();
    w.write("bad.toml", "n_samples = 10\nnoize = 0.3\n");
    let out = poe(&[
        "generate",
        "--config",
        &w.arg("bad.toml"),
        "--out",
        &w.arg("x.csv"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("noize"), "{err}");
}

#[test]
fn usage_errors_exit_with_code_two() {
    let out = poe(&[
        "train", "--data", "x.csv", "--out", "m.poe", "--mode", "nonsense",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");
}

#[test]
fn zero_epochs_write_the_initial_model() {
    let w = Workspace::new();
    w.generate("d.csv");
    w.write(
        "zero.toml",
        "embed_dim = 6\nhidden = [16]\nepochs = 0\nseed = 3\n",
    );
    ok(&[
        "train",
        "--config",
        &w.arg("zero.toml"),
        "--data",
        &w.arg("d.csv"),
        "--out",
        &w.arg("m.poe"),
    ]);
    let model = poe_core::model::PoeModel::load(&w.path("m.poe")).unwrap();
    let fresh = poe_core::model::PoeModel::new(model.input_dim, model.config.clone()).unwrap();
    assert_eq!(model.to_bytes(), fresh.to_bytes());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(w.path("m.poe.report.json")).unwrap()).unwrap();
    assert_eq!(report["training"]["total_steps"], 0);
    assert_eq!(report["test_examples"], 60);
}

#[test]
fn eval_is_repeatable_and_honours_the_corruption_list() {
    let w = Workspace::new();
    w.generate("d.csv");
    w.train("d.csv", "m.poe", &[]);
    let run = |out: &str, levels: &str| {
        ok(&[
            "eval",
            "--model",
            &w.arg("m.poe"),
            "--data",
            &w.arg("d.csv"),
            "--out",
            &w.arg(out),
            "--corruption",
            levels,
        ]);
        fs::read_to_string(w.path(out).join("report.json")).unwrap()
    };
    let single: serde_json::Value = serde_json::from_str(&run("e0", "0")).unwrap();
    assert_eq!(
        single["per_corruption_uncertainty"]
            .as_array()
            .unwrap()
            .len(),
        1
    );
    let a = run("e1", "0,0.5,1");
    let b = run("e2", "0,0.5,1");
    assert_eq!(a, b);
    for f in ["bins.csv", "uncertainty.csv"] {
        assert_eq!(
            fs::read(w.path("e1").join(f)).unwrap(),
            fs::read(w.path("e2").join(f)).unwrap()
        );
    }
    assert_eq!(
        fs::read_to_string(w.path("e1/uncertainty.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
    assert_eq!(manifest(&w.path("e1/manifest.json"))["status"], "complete");
}

#[test]
fn eval_of_a_missing_model_reports_the_path() {
    let w = Workspace::new();
    w.generate("d.csv");
    let out = poe(&[
        "eval",
        "--model",
        &w.arg("nope.poe"),
        "--data",
        &w.arg("d.csv"),
        "--out",
        &w.arg("e"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["error"], "io");
    assert!(
        err["message"].as_str().unwrap().contains("nope.poe"),
        "{err}"
    );
}

fn sweep_rows(w: &Workspace, axis: &str, values: &str, out: &str) -> Vec<Vec<String>> {
    ok(&[
        "sweep",
        "--config",
        &w.arg("train.toml"),
        "--data",
        &w.arg("d.csv"),
        "--axis",
        axis,
        "--values",
        values,
        "--out",
        &w.arg(out),
    ]);
    let text = fs::read_to_string(w.path(out)).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("axis,value,test_mae,test_accuracy,seconds")
    );
    lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn margin_sweep_has_one_row_per_value() {
    let w = Workspace::new();
    w.generate("d.csv");
    let rows = sweep_rows(&w, "margin", "1,2,5,10", "margin.csv");
    assert_eq!(rows.len(), 4);
    for (row, v) in rows.iter().zip(["1", "2", "5", "10"]) {
        assert_eq!(row[0], "margin");
        assert_eq!(row[1], v);
        assert!(row[2].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn sample_count_sweep_cost_grows_with_samples() {
    let w = Workspace::new();
    w.generate("d.csv");
    w.write(
        "train.toml",
        "embed_dim = 6\nhidden = [16]\nepochs = 10\nbatch_size = 24\n",
    );
    let rows = sweep_rows(&w, "T", "1,10,50", "t.csv");
    let secs: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(secs[0] <= secs[1] && secs[1] <= secs[2], "{secs:?}");
}

#[test]
fn large_alpha_sweep_completes() {
    let w = Workspace::new();
    w.generate("d.csv");
    let rows = sweep_rows(&w, "alpha", "1e-2", "alpha.csv");
    assert_eq!(rows.len(), 1);
    assert!(rows[0][2].parse::<f64>().unwrap().is_finite());
}
