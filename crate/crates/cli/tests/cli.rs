use std::path::Path;
use std::process::{Command, Output};

use metastop_core::envgen::DistributionSpec;
use metastop_core::experiment::ExperimentConfig;

fn metastop(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metastop"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("METASTOP_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.distributions = vec![DistributionSpec::random_blocks()];
    c.n_envs = 20;
    c.t_steps = 20;
    c.budget_iters = 200;
    c.long_budget_iters = 2000;
    c.train_profiles = 16;
    c.test_profiles = 4;
    c.test_runs_per_env = 2;
    c.classifier_hidden = vec![8];
    c.classifier_train.epochs = 2;
    c.rnn_hidden = 4;
    c.rnn_train.epochs = 2;
    c
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, tiny_config().to_json()).unwrap();
    let out = metastop(dir.path(), &["run", "--config", cfg.to_str().unwrap(), "--w", "0.8,0.4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "config.json",
        "envs/manifest.csv",
        "profiles/train.csv",
        "profiles/test.csv",
        "transition/ground_truth.csv",
        "policies/ground_truth/w0.8/model_based.txt",
        "policies/ground_truth/w0.4/rnn.txt",
        "policies/ground_truth/w0.4/fixed_quality.txt",
        "eval/ground_truth_w0.8.json",
        "report/comparison.csv",
        "report/comparison.md",
        "report/transition.csv",
    ] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("report/comparison.csv")).unwrap();
    // header, then oracle plus five policies for each of two weights
    assert_eq!(csv.lines().count(), 1 + 2 * 6);

    // later subcommands pick up config.json from the directory
    let again = metastop(dir.path(), &["report", "--w", "0.8,0.4"]);
    assert!(again.status.success());
    let csv2 = std::fs::read_to_string(dir.path().join("report/comparison.csv")).unwrap();
    assert_eq!(csv, csv2);
}

#[test]
fn missing_inputs_fail_with_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = metastop(dir.path(), &["solve-dp"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.lines().any(|l| l.starts_with("error kind=MissingInput message=")), "{err}");

    let out = metastop(dir.path(), &["gen-envs", "--w", "1.5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error kind=InvalidInput"));

    let out = metastop(dir.path(), &["evaluate", "--normalizer", "oracle"]);
    assert!(!out.status.success());
}
