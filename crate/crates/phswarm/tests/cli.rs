//! End-to-end runs of the `phswarm` binary.

use std::path::Path;
use std::process::{Command, Output};

use phswarm::formats;
use phswarm_core::policy::{init_params, PolicyConfig};

fn phswarm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phswarm")).current_dir(dir).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_dataset(dir: &Path) {
    let out = phswarm(dir, &["generate", "--task", "fixed_swap", "--n", "4", "--L", "3", "--K", "40", "--seed", "5", "--out", "data"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_writes_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let (manifest, data) = formats::read_dataset(&dir.path().join("data")).unwrap();
    assert_eq!(manifest.trajectories, 3);
    assert_eq!(data.trajectories[0].len(), 41);
}

#[test]
fn invalid_arguments_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = phswarm(dir.path(), &["generate", "--L", "0", "--out", "data"]);
    assert_eq!(out.status.code(), Some(1));
    let out = phswarm(dir.path(), &["generate", "--task", "circus"]);
    assert_eq!(out.status.code(), Some(1));
    let out = phswarm(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(dir.path().join("bad.toml"), "[train]\nepochz = 3\n").unwrap();
    let out = phswarm(dir.path(), &["--config", "bad.toml", "train", "--params-only"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn params_only_prints_the_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = phswarm(dir.path(), &["train", "--params-only"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "2208");
}

#[test]
fn zero_epochs_saves_the_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let out = phswarm(dir.path(), &["train", "--data", "data", "--model", "m.json", "--loss-csv", "loss.csv", "--epochs", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = formats::read_model(&dir.path().join("m.json")).unwrap();
    let expected = init_params(&PolicyConfig::appendix(2), 0).unwrap();
    assert_eq!(model.params().unwrap().to_flat(), expected.to_flat());
}

#[test]
fn expert_reproduces_its_own_dataset() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let out = phswarm(dir.path(), &["eval", "--expert", "--data", "data", "--out", "expert.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: phswarm::commands::EvalMetrics = formats::read_json(&dir.path().join("expert.json")).unwrap();
    assert_eq!(metrics.controller, "expert");
    assert!(metrics.loss_mean < 1e-20, "{}", metrics.loss_mean);
}

#[test]
fn deploy_checks_against_the_centralized_policy() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let out = phswarm(dir.path(), &["train", "--data", "data", "--model", "m.json", "--loss-csv", "loss.csv", "--epochs", "0"]);
    assert!(out.status.success());
    let out = phswarm(
        dir.path(),
        &[
            "deploy",
            "--model",
            "m.json",
            "--n",
            "12",
            "--horizon",
            "10",
            "--check-centralized",
            "--compare-stale",
            "--plot",
            "swarm.svg",
            "--trajectory-csv",
            "traj.csv",
            "--metrics",
            "deploy.json",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("centralized check passed"));
    let (_, traj) = formats::read_trajectory_csv(&dir.path().join("traj.csv")).unwrap();
    assert_eq!(traj.len(), 251);
    assert_eq!(traj[0].n(), 12);
    let metrics: phswarm::commands::DeployMetricsFile = formats::read_json(&dir.path().join("deploy.json")).unwrap();
    assert!(metrics.centralized_checked);
    assert!(metrics.stale_max_deviation.is_some());
    assert_eq!(metrics.messages_round1, metrics.messages_round3);
    let svg = std::fs::read_to_string(dir.path().join("swarm.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn refuses_to_overwrite_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    std::fs::create_dir(dir.path().join("taken")).unwrap();
    let out = phswarm(dir.path(), &["eval", "--expert", "--data", "data", "--out", "taken"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn desk_scale_training_improves_the_held_out_loss() {
    let dir = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.toml");
    let config = config.to_str().unwrap();
    let out = phswarm(dir.path(), &["--config", config, "generate"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = phswarm(dir.path(), &["--config", config, "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (hash, history) = formats::read_loss_csv(&dir.path().join("quick/loss.csv")).unwrap();
    let model = formats::read_model(&dir.path().join("quick/model.json")).unwrap();
    assert_eq!(hash, model.config_hash);
    assert_eq!(history.last().unwrap().epoch, 40);
    let evals: Vec<f64> = history.iter().map(|r| r.eval_loss).collect();
    let rises = evals.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 2, "eval loss {evals:?}");
    assert!(evals.last().unwrap() < &evals[0], "eval loss {evals:?}");

    let out = phswarm(dir.path(), &["--config", config, "eval"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = phswarm(dir.path(), &["--config", config, "deploy", "--check-centralized"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
