use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dgm_core::odegen::{integrate, linspace, Dataset};
use serde_json::Value;

const SHORT: &str = r#"{"phases": {"transition": 6, "training": 0, "finetune": 2}}"#;

fn dgm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgm"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("run dgm")
}

fn ok(args: &[&str]) -> String {
    let out = dgm(args);
    assert!(
        out.status.success(),
        "dgm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Work {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("short.json"), SHORT).unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn data(&self, preset: &str, seed: u64) -> PathBuf {
        let p = self.path(&format!("{preset}-{seed}.json"));
        ok(&["gen-data", "--preset", preset, "--seed", &seed.to_string(), "--out", s(&p)]);
        p
    }

    fn trained(&self, data: &Path) -> PathBuf {
        let ck = self.path("ckpt.json");
        ok(&["train", "--data", s(data), "--config", s(&self.path("short.json")), "--seed", "0", "--out", s(&ck)]);
        ck
    }
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_the_lv100_grid() {
    let w = Work::new();
    let p = w.data("lv100", 0);
    let d = Dataset::load(&p).unwrap();
    assert_eq!(d.num_trajectories(), 100);
    assert_eq!(d.num_observations(), 500);
    let again = w.path("again.json");
    ok(&["gen-data", "--preset", "lv100", "--seed", "0", "--out", s(&again)]);
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn train_eval_predict_round_trip() {
    let w = Work::new();
    let data = w.data("lv1", 0);
    let ck = w.trained(&data);
    assert!(ck.exists());
    let history = json(&w.path("ckpt.history.json"));
    assert_eq!(history["steps"].as_array().unwrap().len(), 8);
    assert!(history["args"].as_array().unwrap().iter().any(|a| a == "train"));

    let report = w.path("report.json");
    let stdout = ok(&["eval", "--ckpt", s(&ck), "--mode", "generalization", "--seed", "1", "--out", s(&report)]);
    assert!(stdout.contains("mean_ll="), "{stdout}");
    let r = json(&report);
    assert!(r["mean_ll"].as_f64().unwrap().is_finite());
    assert_eq!(r["mode"], "generalization");
    assert_eq!(r["per_trajectory"].as_array().unwrap().len(), 10);
    assert!(r["args"].as_array().unwrap().iter().any(|a| a == "--seed"));

    let pred = w.path("pred.json");
    ok(&["predict", "--ckpt", s(&ck), "--x0", "1.0,1.5", "--times", "0,0.5,1", "--out", s(&pred)]);
    let p = json(&pred);
    assert_eq!(p["mean"].as_array().unwrap().len(), 3);
    assert!(p["var"][0].as_array().unwrap().iter().all(|v| v.as_f64().unwrap() >= 0.0));
}

#[test]
fn training_is_reproducible_from_flags() {
    let w = Work::new();
    let data = w.data("lv1", 4);
    let a = w.trained(&data);
    let first = std::fs::read(&a).unwrap();
    let b = w.trained(&data);
    assert_eq!(first, std::fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        vec!["train"],
        vec!["gen-data", "--preset", "nonsense", "--out", "x.json"],
        vec!["eval", "--ckpt", "c.json", "--mode", "test"],
        vec!["frobnicate"],
        vec!["gen-data", "--preset", "lv1", "--out", "x.json", "--bogus"],
    ] {
        assert_eq!(dgm(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_with_one() {
    let w = Work::new();
    let missing = w.path("missing.json");
    let out = dgm(&["eval", "--ckpt", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    let data = w.data("lv1", 0);
    let bad = w.path("bad.json");
    std::fs::write(&bad, "{\"lr_main\": -1}").unwrap();
    let out = dgm(&["train", "--data", s(&data), "--config", s(&bad), "--out", s(&w.path("c.json"))]);
    assert_eq!(out.status.code(), Some(1));

    let out = dgm(&["train", "--data", s(&data), "--features", "7", "--out", s(&w.path("c.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("even"));
}

#[test]
fn lambda_ablation_dedups_and_zero_matches_sequential_cell() {
    let w = Work::new();
    let data = w.data("lvgrid2", 0);
    let cfg = w.path("short.json");
    let table = w.path("lambda.csv");
    ok(&[
        "ablate-lambda", "--data", s(&data), "--config", s(&cfg), "--lambda-grid", "0,0.25,1,1,4", "--out", s(&table),
    ]);
    let mut rdr = csv::Reader::from_path(&table).unwrap();
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers, ["ratio", "lambda", "mean_ll", "std"]);
    let rows: Vec<Vec<f64>> = rdr
        .records()
        .map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![0.0, 0.25, 1.0, 4.0]);

    let joint = w.path("joint.json");
    ok(&["ablate-joint", "--data", s(&data), "--config", s(&cfg), "--out", s(&joint)]);
    let j = json(&joint);
    let seq = j["cells"].as_array().expect("cell list");
    let sequential = seq
        .iter()
        .find(|c| c["joint_smoother"] == true && c["matching"] == false)
        .expect("sequential cell");
    assert_eq!(sequential["mean_ll"].as_f64().unwrap(), rows[0][2]);
}

#[test]
fn export_plot_bands_and_observations() {
    let w = Work::new();
    let data_path = w.data("lv1", 0);
    let ck = w.trained(&data_path);
    let out = w.path("plots");
    ok(&["export-plot", "--ckpt", s(&ck), "--out", s(&out)]);
    let data = Dataset::load(&data_path).unwrap();

    let mut bands = csv::Reader::from_path(out.join("bands.csv")).unwrap();
    let headers: Vec<String> = bands.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers, ["traj", "t", "dim", "mean", "lower2sigma", "upper2sigma", "truth"]);
    let times = linspace(0.0, data.horizon(), 100);
    let truth = integrate(&data.spec.system, &data.trajectories[0].x0, &times).unwrap();
    let mut n = 0;
    for rec in bands.records() {
        let r: Vec<f64> = rec.unwrap().iter().map(|v| v.parse().unwrap()).collect();
        assert!(r[4] <= r[3] && r[3] <= r[5]);
        let (i, d) = (n / 2, n % 2);
        assert_eq!(r[6].to_bits(), truth[i][d].to_bits());
        n += 1;
    }
    assert_eq!(n, 200);

    let obs = csv::Reader::from_path(out.join("observations.csv")).unwrap().records().count();
    assert_eq!(obs, data.num_observations() * data.state_dim());
}
