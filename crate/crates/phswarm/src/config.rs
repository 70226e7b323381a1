//! Run configuration: a TOML file with `task`, `policy`, `train`, `deploy`
//! and `output` sections. Every key is optional and unknown keys are
//! rejected.
//!
//! ```toml
//! task.task = "fixed_swap"
//! task.n = 4
//! task.trajectories = 20
//! policy.structure = "strict_psd"
//! train.epochs = 500
//! train.optimizer = "adam"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use phswarm_core::dynamics::Integrator;
use phswarm_core::expert::{FlockingParams, InitialConditions, Task, TaskConfig};
use phswarm_core::policy::{HeadConfig, PolicyConfig, Structure};
use phswarm_core::training::{GradientMethod, OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskSection,
    pub policy: PolicySection,
    pub train: TrainSection,
    pub deploy: DeploySection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    /// `fixed_swap`, `tv_swap` or `flocking`.
    pub task: String,
    pub n: usize,
    /// `L`
    pub trajectories: usize,
    /// `K`, samples after the initial state.
    pub samples: usize,
    /// `T` in seconds.
    pub dt: f64,
    pub seed: u64,
    /// `euler` or `rk4`.
    pub integrator: String,
    pub c1: f64,
    pub c2: f64,
    pub sigma: f64,
    pub comm_radius: f64,
    pub lambda: f64,
    pub flocking: FlockingSection,
    pub init: InitSection,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self::from_task_config(&TaskConfig::new(Task::FixedSwap, 4))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlockingSection {
    pub d: f64,
    pub r: f64,
    pub eps: f64,
    pub h: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for FlockingSection {
    fn default() -> Self {
        let f = FlockingParams::default();
        Self { d: f.d, r: f.r, eps: f.eps, h: f.h, a: f.a, b: f.b }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    pub half_width: f64,
    pub row_spacing: f64,
    pub jitter: f64,
    pub flock_side: f64,
    pub flock_speed: f64,
}

impl Default for InitSection {
    fn default() -> Self {
        let i = InitialConditions::default();
        Self {
            half_width: i.half_width,
            row_spacing: i.row_spacing,
            jitter: i.jitter,
            flock_side: i.flock_side,
            flock_speed: i.flock_speed,
        }
    }
}

fn integrator_name(i: Integrator) -> &'static str {
    match i {
        Integrator::Euler => "euler",
        Integrator::Rk4 => "rk4",
    }
}

impl TaskSection {
    pub fn from_task_config(c: &TaskConfig) -> Self {
        let f = &c.flocking;
        let i = &c.init;
        Self {
            task: c.task.name().into(),
            n: c.n,
            trajectories: c.trajectories,
            samples: c.samples,
            dt: c.dt,
            seed: c.seed,
            integrator: integrator_name(c.integrator).into(),
            c1: c.c1,
            c2: c.c2,
            sigma: c.sigma,
            comm_radius: c.l,
            lambda: c.lambda,
            flocking: FlockingSection { d: f.d, r: f.r, eps: f.eps, h: f.h, a: f.a, b: f.b },
            init: InitSection {
                half_width: i.half_width,
                row_spacing: i.row_spacing,
                jitter: i.jitter,
                flock_side: i.flock_side,
                flock_speed: i.flock_speed,
            },
        }
    }

    pub fn to_task_config(&self) -> anyhow::Result<TaskConfig> {
        let task = Task::from_name(&self.task).with_context(|| format!("unknown task.task {:?}", self.task))?;
        let integrator = match self.integrator.as_str() {
            "euler" => Integrator::Euler,
            "rk4" => Integrator::Rk4,
            other => bail!("unknown task.integrator {other:?} (expected euler or rk4)"),
        };
        let f = &self.flocking;
        let i = &self.init;
        let cfg = TaskConfig {
            task,
            n: self.n,
            m: 2,
            c1: self.c1,
            c2: self.c2,
            sigma: self.sigma,
            l: self.comm_radius,
            lambda: self.lambda,
            flocking: FlockingParams { d: f.d, r: f.r, eps: f.eps, h: f.h, a: f.a, b: f.b },
            init: InitialConditions {
                half_width: i.half_width,
                row_spacing: i.row_spacing,
                jitter: i.jitter,
                flock_side: i.flock_side,
                flock_speed: i.flock_speed,
            },
            samples: self.samples,
            dt: self.dt,
            trajectories: self.trajectories,
            seed: self.seed,
            integrator,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    /// `joint` (one M head emitting kinetic weights and potential terms) or
    /// `split` (separate M and U heads).
    pub wiring: String,
    /// `verbatim` or `strict_psd`.
    pub structure: String,
    pub hops: usize,
    /// Layer overrides as `[h, r, d]` triples.
    pub r_layers: Option<Vec<[usize; 3]>>,
    pub j_layers: Option<Vec<[usize; 3]>>,
    pub m_layers: Option<Vec<[usize; 3]>>,
    pub u_layers: Option<Vec<[usize; 3]>>,
    /// Seed of the parameter initialisation.
    pub init_seed: u64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            wiring: "joint".into(),
            structure: Structure::Verbatim.name().into(),
            hops: 1,
            r_layers: None,
            j_layers: None,
            m_layers: None,
            u_layers: None,
            init_seed: 0,
        }
    }
}

fn layers(spec: &[[usize; 3]]) -> HeadConfig {
    let triples: Vec<(usize, usize, usize)> = spec.iter().map(|&[h, r, d]| (h, r, d)).collect();
    HeadConfig::new(&triples)
}

impl PolicySection {
    pub fn to_policy_config(&self, m: usize) -> anyhow::Result<PolicyConfig> {
        let mut cfg = match self.wiring.as_str() {
            "joint" => PolicyConfig::appendix(m),
            "split" => PolicyConfig::split(m),
            other => bail!("unknown policy.wiring {other:?} (expected joint or split)"),
        };
        cfg.structure = Structure::from_name(&self.structure).with_context(|| format!("unknown policy.structure {:?}", self.structure))?;
        cfg.hops = self.hops;
        if let Some(l) = &self.r_layers {
            cfg.r_head = layers(l);
        }
        if let Some(l) = &self.j_layers {
            cfg.j_head = layers(l);
        }
        if let Some(l) = &self.m_layers {
            cfg.m_head = layers(l);
        }
        if let Some(l) = &self.u_layers {
            if cfg.u_head.is_none() {
                bail!("policy.u_layers needs policy.wiring = \"split\"");
            }
            cfg.u_head = Some(layers(l));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub rebatch_every: usize,
    pub subtraj_len: usize,
    /// `sgd` or `adam`.
    pub optimizer: String,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_fraction: f64,
    /// `unrolled` or `adjoint`.
    pub gradient: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            rebatch_every: t.rebatch_every,
            subtraj_len: t.subtraj_len,
            optimizer: t.optimizer.name().into(),
            seed: t.seed,
            eval_every: t.eval_every,
            eval_fraction: t.eval_fraction,
            gradient: "unrolled".into(),
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> anyhow::Result<TrainConfig> {
        let gradient = match self.gradient.as_str() {
            "unrolled" => GradientMethod::Unrolled,
            "adjoint" => GradientMethod::Adjoint,
            other => bail!("unknown train.gradient {other:?} (expected unrolled or adjoint)"),
        };
        let cfg = TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            rebatch_every: self.rebatch_every,
            subtraj_len: self.subtraj_len,
            optimizer: OptimizerKind::from_name(&self.optimizer).with_context(|| format!("unknown train.optimizer {:?}", self.optimizer))?,
            seed: self.seed,
            eval_every: self.eval_every,
            eval_fraction: self.eval_fraction,
            gradient,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeploySection {
    pub n: usize,
    /// Simulated time in seconds.
    pub horizon: f64,
    /// Step size; the model's sampling interval when absent.
    pub dt: Option<f64>,
    /// Seed of the initial condition.
    pub seed: u64,
    pub check_centralized: bool,
    pub compare_stale: bool,
}

impl Default for DeploySection {
    fn default() -> Self {
        Self { n: 12, horizon: 10.0, dt: None, seed: 0, check_centralized: false, compare_stale: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub loss_csv: PathBuf,
    pub metrics: PathBuf,
    pub trajectory_csv: PathBuf,
    pub plot: Option<PathBuf>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dataset: "dataset".into(),
            model: "model.json".into(),
            loss_csv: "loss.csv".into(),
            metrics: "metrics.json".into(),
            trajectory_csv: "trajectory.csv".into(),
            plot: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Checks every section converts to a valid core configuration.
    pub fn validate(&self) -> anyhow::Result<()> {
        let task = self.task.to_task_config()?;
        self.policy.to_policy_config(task.m)?;
        self.train.to_train_config()?;
        if self.deploy.n == 0 {
            bail!("deploy.n must be at least 1");
        }
        if !(self.deploy.horizon > 0.0) || self.deploy.dt.is_some_and(|dt| !(dt > 0.0)) {
            bail!("deploy.horizon and deploy.dt must be positive");
        }
        Ok(())
    }
}

/// Hex SHA-256 of the JSON encoding of `value`. Field order is fixed by the
/// struct definitions, so equal configurations hash equally.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configuration serialises");
    hex::encode(Sha256::digest(&json))
}

/// Fails early when the parent directory of an output path is missing.
pub fn check_output_path(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            bail!("output directory {} does not exist", dir.display())
        }
        _ => Ok(()),
    }
}
