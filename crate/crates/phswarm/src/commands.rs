//! The four commands behind the CLI, usable as a library.

use std::path::Path;

use phswarm_core::deploy::{deploy, DeployOptions};
use phswarm_core::dynamics::{simulate, JointState, PortHamiltonianBase};
use phswarm_core::error::{Error as CoreError, TensorError};
use phswarm_core::expert::{generate_dataset, initial_state, task_goals, TrajectoryDataset};
use phswarm_core::policy::init_params;
use phswarm_core::training::{loss, rollout, train, LossRecord};
use phswarm_core::exec::ParallelMap;
use serde::{Deserialize, Serialize};

use crate::config::{check_output_path, config_hash, DeploySection, PolicySection, RunConfig, TaskSection};
use crate::exec::Rayon;
use crate::formats::{self, DatasetManifest, ModelFile, FORMAT_VERSION};
use crate::plot::trajectory_svg;

#[derive(Debug, thiserror::Error)]
pub enum CmdError {
    #[error("{0}")]
    Usage(String),
    #[error("{0:#}")]
    Config(anyhow::Error),
    #[error("numerical failure: {0}")]
    Numerical(CoreError),
    #[error("{0}")]
    Oracle(CoreError),
}

impl CmdError {
    /// 1 usage or configuration, 2 numerical failure, 3 oracle mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) | CmdError::Config(_) => 1,
            CmdError::Numerical(_) => 2,
            CmdError::Oracle(_) => 3,
        }
    }
}

impl From<anyhow::Error> for CmdError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<CoreError>() {
            Ok(core) => core.into(),
            Err(e) => CmdError::Config(e),
        }
    }
}

impl From<CoreError> for CmdError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::OracleMismatch { .. } => CmdError::Oracle(e),
            CoreError::NonFiniteRollout { .. }
            | CoreError::Divergence { .. }
            | CoreError::Tensor(TensorError::NonFinite(_) | TensorError::RankDeficient(_)) => CmdError::Numerical(e),
            other => CmdError::Config(other.into()),
        }
    }
}

pub type CmdResult<T> = Result<T, CmdError>;

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub manifest: DatasetManifest,
    pub min_pairwise_distance: f64,
}

fn dataset_min_distance(data: &TrajectoryDataset) -> f64 {
    data.trajectories.iter().flatten().map(JointState::min_pairwise_distance).fold(f64::INFINITY, f64::min)
}

/// Rolls out the task expert and writes the dataset into `out_dir`.
pub fn cmd_generate(task: &TaskSection, out_dir: &Path) -> CmdResult<GenerateSummary> {
    let cfg = task.to_task_config()?;
    let data = generate_dataset(&cfg, &Rayon)?;
    let manifest = formats::write_dataset(out_dir, &data)?;
    Ok(GenerateSummary { manifest, min_pairwise_distance: dataset_min_distance(&data) })
}

/// Parameter count of a policy configuration for `m`-dimensional robots.
pub fn cmd_params_only(policy: &PolicySection, m: usize) -> CmdResult<usize> {
    Ok(policy.to_policy_config(m)?.param_count()?)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: ModelFile,
    pub history: Vec<LossRecord>,
    pub skipped: Vec<usize>,
}

/// Trains a fresh policy on the dataset in `dataset_dir`, writing the model
/// and its loss history.
pub fn cmd_train(
    cfg: &RunConfig,
    dataset_dir: &Path,
    model_path: &Path,
    loss_csv: &Path,
    progress: impl FnMut(&LossRecord),
) -> CmdResult<TrainSummary> {
    check_output_path(model_path)?;
    check_output_path(loss_csv)?;
    let (manifest, data) = formats::read_dataset(dataset_dir)?;
    let policy = cfg.policy.to_policy_config(data.config.m)?;
    let train_cfg = cfg.train.to_train_config()?;
    let init = init_params(&policy, cfg.policy.init_seed)?;
    let outcome = train(&data, init, &train_cfg, &Rayon, progress)?;
    let model = ModelFile::new(manifest.task, cfg.policy.clone(), cfg.train.clone(), cfg.train.epochs, &outcome.params);
    formats::write_model(model_path, &model)?;
    formats::write_loss_csv(loss_csv, &model.config_hash, &outcome.history)?;
    Ok(TrainSummary { model, history: outcome.history, skipped: outcome.skipped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub format_version: u32,
    /// Hash of the evaluated model, or of the dataset task for the expert.
    pub config_hash: String,
    pub controller: String,
    pub trajectories: usize,
    /// Per-trajectory trajectory-matching loss divided by the robot count.
    pub per_trajectory: Vec<f64>,
    pub loss_mean: f64,
    pub loss_std: f64,
    /// Over every state of every generated rollout.
    pub min_pairwise_distance: f64,
}

pub enum Evaluated<'a> {
    Model(&'a ModelFile),
    Expert,
}

/// Rolls the controller out from each demonstration's initial state for the
/// full horizon and compares against the demonstration.
pub fn cmd_eval(controller: Evaluated<'_>, dataset_dir: &Path) -> CmdResult<EvalMetrics> {
    let (manifest, data) = formats::read_dataset(dataset_dir)?;
    let cfg = &data.config;
    let n = cfg.n;
    let steps = cfg.samples;
    let topology = cfg.topology();
    let runs: Vec<Result<Vec<JointState>, CoreError>> = match controller {
        Evaluated::Model(model) => {
            let params = model.params()?;
            if params.config.state_dim != 2 * cfg.m {
                return Err(CmdError::Config(anyhow::anyhow!(
                    "model state dimension {} does not match the dataset's {}",
                    params.config.state_dim,
                    2 * cfg.m
                )));
            }
            let base = PortHamiltonianBase::double_integrator(cfg.m);
            Rayon.map_indexed(data.len(), |l| rollout(&params, &base, &data.trajectories[l][0], &data.goals[l], steps, cfg.dt, topology))
        }
        Evaluated::Expert => {
            let expert = cfg.expert();
            let goals = task_goals(cfg);
            Rayon.map_indexed(data.len(), |l| simulate(&expert, &data.trajectories[l][0], &goals, topology, steps, cfg.dt, cfg.integrator))
        }
    };
    let mut per_trajectory = Vec::with_capacity(data.len());
    let mut min_pairwise_distance = f64::INFINITY;
    for (l, run) in runs.into_iter().enumerate() {
        let generated = run.map_err(|e| match e {
            CoreError::NonFiniteRollout { step, .. } => CoreError::NonFiniteRollout { trajectory: l, step },
            other => other,
        })?;
        min_pairwise_distance = generated.iter().map(JointState::min_pairwise_distance).fold(min_pairwise_distance, f64::min);
        per_trajectory.push(loss(&[generated], std::slice::from_ref(&data.trajectories[l]))? / n as f64);
    }
    let count = per_trajectory.len().max(1) as f64;
    let loss_mean = per_trajectory.iter().sum::<f64>() / count;
    let loss_std = (per_trajectory.iter().map(|v| (v - loss_mean).powi(2)).sum::<f64>() / count).sqrt();
    let (name, hash) = match controller {
        Evaluated::Model(m) => ("model", m.config_hash.clone()),
        Evaluated::Expert => ("expert", manifest.config_hash.clone()),
    };
    Ok(EvalMetrics {
        format_version: FORMAT_VERSION,
        config_hash: hash,
        controller: name.into(),
        trajectories: per_trajectory.len(),
        per_trajectory,
        loss_mean,
        loss_std,
        min_pairwise_distance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeployMetricsFile {
    pub format_version: u32,
    pub config_hash: String,
    pub model_hash: String,
    pub robots: usize,
    pub steps: usize,
    pub dt: f64,
    pub min_pairwise_distance: f64,
    pub max_speed: f64,
    pub max_position: f64,
    pub initial_spread: f64,
    pub final_goal_loss: f64,
    pub messages_round1: usize,
    pub messages_round2: usize,
    pub messages_round3: usize,
    pub centralized_checked: bool,
    pub centralized_max_diff: Option<f64>,
    pub stale_max_deviation: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct DeploySummary {
    pub metrics: DeployMetricsFile,
    pub trajectory: Vec<JointState>,
    pub goals: JointState,
}

#[derive(Serialize)]
struct DeployKey<'a> {
    model: &'a str,
    deploy: &'a DeploySection,
}

pub struct DeployOutputs<'a> {
    pub trajectory_csv: &'a Path,
    pub metrics: &'a Path,
    pub plot: Option<&'a Path>,
}

/// Runs the distributed simulator with `deploy.n` robots from a seeded start
/// of the model's task.
pub fn cmd_deploy(model: &ModelFile, deploy_cfg: &DeploySection, out: &DeployOutputs<'_>) -> CmdResult<DeploySummary> {
    for p in [Some(out.trajectory_csv), Some(out.metrics), out.plot].into_iter().flatten() {
        check_output_path(p)?;
    }
    if deploy_cfg.n == 0 {
        return Err(CmdError::Usage("deploy needs at least one robot".into()));
    }
    let params = model.params()?;
    let mut task = model.task.to_task_config()?;
    task.n = deploy_cfg.n;
    task.seed = deploy_cfg.seed;
    let dt = deploy_cfg.dt.unwrap_or(task.dt);
    if !(dt > 0.0 && deploy_cfg.horizon > 0.0) {
        return Err(CmdError::Usage("deploy horizon and step size must be positive".into()));
    }
    let steps = (deploy_cfg.horizon / dt).round() as usize;
    let x0 = initial_state(&task, 0);
    let goals = task_goals(&task);
    let base = PortHamiltonianBase::double_integrator(task.m);
    let opts = DeployOptions {
        steps,
        dt,
        topology: task.topology(),
        check_centralized: deploy_cfg.check_centralized,
        compare_stale: deploy_cfg.compare_stale,
    };
    let report = deploy(&params, &base, &x0, &goals, &opts)?;
    let m = &report.metrics;
    let hash = config_hash(&DeployKey { model: &model.config_hash, deploy: deploy_cfg });
    let metrics = DeployMetricsFile {
        format_version: FORMAT_VERSION,
        config_hash: hash.clone(),
        model_hash: model.config_hash.clone(),
        robots: task.n,
        steps,
        dt,
        min_pairwise_distance: m.min_pairwise_distance,
        max_speed: m.max_speed,
        max_position: m.max_position,
        initial_spread: m.initial_spread,
        final_goal_loss: m.final_goal_loss,
        messages_round1: m.messages[0],
        messages_round2: m.messages[1],
        messages_round3: m.messages[2],
        centralized_checked: m.oracle_max_diff.is_some(),
        centralized_max_diff: m.oracle_max_diff,
        stale_max_deviation: m.stale_max_deviation,
    };
    formats::write_trajectory_csv(out.trajectory_csv, &hash, &report.trajectory, dt)?;
    formats::write_json(out.metrics, &metrics)?;
    if let Some(plot) = out.plot {
        let title = format!("{} robots, {} steps", task.n, steps);
        std::fs::write(plot, trajectory_svg(&report.trajectory, Some(&goals), &title))
            .map_err(|e| CmdError::Config(anyhow::anyhow!("writing {}: {e}", plot.display())))?;
    }
    Ok(DeploySummary { metrics, trajectory: report.trajectory, goals })
}
