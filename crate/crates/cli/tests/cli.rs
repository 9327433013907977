use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ctmc_diffusion::harness::verify::VerifyReport;

const TOY: &str = "\
seed = 7
schedule.states = 3
dataset.probs = 0.7, 0.3, 0
optim.lr = 0.04
optim.batch = 256
optim.steps = 4000
optim.lr_decay = cosine
train.log_every = 500
sampler.samples = 4000
sampler.steps = 256
";

fn ctmcd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctmcd")).current_dir(dir).args(args).output().expect("spawn ctmcd")
}

fn write_config(dir: &Path, name: &str, extra: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, format!("{TOY}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn read_tokens(path: &Path) -> Vec<usize> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.trim().parse().unwrap()).collect()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = dir.path().join("bad.conf");
    fs::write(&bad_key, "seed = 1\nschedule.colour = blue\n").unwrap();
    let no_seed = dir.path().join("noseed.conf");
    fs::write(&no_seed, "schedule.states = 3\n").unwrap();
    for args in [
        vec!["sample", "--bogus"],
        vec!["sample", "--config", bad_key.to_str().unwrap()],
        vec!["sample", "--config", no_seed.to_str().unwrap()],
        vec!["sample", "--seed", "1", "--scheme", "midpoint"],
        vec!["frobnicate"],
    ] {
        let out = ctmcd(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn sampling_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.txt", "b.txt"] {
        let out = ctmcd(dir.path(), &["sample", "--scheme", "tau", "--steps", "64", "--seed", "7", "--out", name]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(dir.path().join("a.txt")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.txt")).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a.txt.json")).unwrap(),
        fs::read(dir.path().join("b.txt.json")).unwrap()
    );
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a.txt.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 7);
    assert_eq!(meta["steps"], 64);
}

#[test]
fn train_then_sample_recovers_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "toy.conf", "");
    let out = ctmcd(dir.path(), &["train", "--config", &config, "--out", "m.ckpt"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.path().join("m.ckpt.metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 8);
    let summary = fs::read_to_string(dir.path().join("m.ckpt.summary.csv")).unwrap();
    assert!(summary.starts_with("step,loss,poisson,direction,constant,lr\n"));

    let sample_config = write_config(dir.path(), "sample.conf", "model.checkpoint = m.ckpt\n");
    let out = ctmcd(dir.path(), &["sample", "--config", &sample_config, "--out", "s.txt"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tokens = read_tokens(&dir.path().join("s.txt"));
    assert_eq!(tokens.len(), 4000);
    let mut h = [0.0; 3];
    for &x in &tokens {
        h[x] += 1.0 / tokens.len() as f64;
    }
    let tv = 0.5 * ((h[0] - 0.7).abs() + (h[1] - 0.3).abs() + h[2]);
    assert!(tv <= 0.05, "TV {tv}, histogram {h:?}");
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "toy.conf", "");
    for out in ["a.ckpt", "b.ckpt"] {
        let o = ctmcd(dir.path(), &["train", "--config", &config, "--steps", "300", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for suffix in ["", ".metrics.jsonl", ".summary.csv"] {
        let a = fs::read(dir.path().join(format!("a.ckpt{suffix}"))).unwrap();
        let b = fs::read(dir.path().join(format!("b.ckpt{suffix}"))).unwrap();
        assert_eq!(a, b, "a.ckpt{suffix}");
    }
}

#[test]
fn verify_default_suites_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctmcd(dir.path(), &["verify", "--out", "report.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = VerifyReport::parse(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report.passed);
    assert!(report.suites.iter().any(|s| s.name == "decomposition"));
}

#[test]
fn verify_reports_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("fault.conf");
    fs::write(&config, "verify.inject_fault = decomposition\n").unwrap();
    let out = ctmcd(dir.path(), &["verify", "--config", config.to_str().unwrap(), "decomposition"]);
    assert_eq!(out.status.code(), Some(1));
    let report = VerifyReport::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert!(!report.passed);
}

#[test]
fn simulate_writes_path_records() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "toy.conf", "simulate.paths = 20\nsimulate.x0 = 1\n");
    let out = ctmcd(dir.path(), &["simulate", "--config", &config]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 20);
    for line in text.lines() {
        let fields: Vec<&str> = line.split(' ').collect();
        assert_eq!(fields[0], "1");
        let n: usize = fields[2].parse().unwrap();
        assert_eq!(fields.len(), 3 + 2 * n);
    }
}

#[test]
fn export_marginals_rows_are_distributions() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "toy.conf", "export.times = 0.25, 0.75\n");
    let out = ctmcd(dir.path(), &["export-marginals", "--config", &config]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<f64>> = text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 6);
    for t in [0.25, 0.75] {
        let q: f64 = rows.iter().filter(|r| r[0] == t).map(|r| r[2]).sum();
        assert!((q - 1.0).abs() < 1e-12);
    }
    for r in &rows {
        assert!((r[3..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
