//! Argument parsing and dispatch. Flags override the configuration file.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{cmd_deploy, cmd_eval, cmd_generate, cmd_params_only, cmd_train, CmdError, DeployOutputs, Evaluated};
use crate::config::RunConfig;
use crate::formats;

#[derive(Debug, Parser)]
#[command(name = "phswarm", version, about = "Learn, evaluate and deploy distributed port-Hamiltonian swarm controllers")]
pub struct Cli {
    /// TOML run configuration (sections task, policy, train, deploy, output).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the task expert and write a dataset.
    Generate(GenerateArgs),
    /// Train a policy on a dataset.
    Train(TrainArgs),
    /// Compare rollouts of a model (or the expert) against a dataset.
    Eval(EvalArgs),
    /// Run the distributed message-passing simulator with a trained model.
    Deploy(DeployArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// fixed_swap, tv_swap or flocking.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Trajectory count.
    #[arg(long = "L")]
    pub trajectories: Option<usize>,
    /// Samples per trajectory after the initial state.
    #[arg(long = "K")]
    pub samples: Option<usize>,
    /// Sampling interval in seconds.
    #[arg(long = "T")]
    pub dt: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// sgd or adam.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// verbatim or strict_psd.
    #[arg(long)]
    pub structure: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Print the parameter count of the configured policy and exit.
    #[arg(long)]
    pub params_only: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model file; defaults to `output.model` of the configuration.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Evaluate the dataset's expert instead of a model.
    #[arg(long, conflicts_with = "model")]
    pub expert: bool,
    /// Metrics JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DeployArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Simulated time in seconds.
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long = "T")]
    pub dt: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Compare every step against the centralised policy.
    #[arg(long)]
    pub check_centralized: bool,
    /// Also run the stale-message protocol and report its deviation.
    #[arg(long)]
    pub compare_stale: bool,
    /// Write an SVG of the trajectories.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[arg(long)]
    pub trajectory_csv: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CmdError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Generate(a) => {
            let t = &mut cfg.task;
            set(&mut t.task, a.task);
            set(&mut t.n, a.n);
            set(&mut t.trajectories, a.trajectories);
            set(&mut t.samples, a.samples);
            set(&mut t.dt, a.dt);
            set(&mut t.seed, a.seed);
            let out = a.out.unwrap_or(cfg.output.dataset.clone());
            let s = cmd_generate(&cfg.task, &out)?;
            println!(
                "wrote {} trajectories of {} samples to {} (min pairwise distance {:.4})",
                s.manifest.trajectories,
                s.manifest.states,
                out.display(),
                s.min_pairwise_distance
            );
        }
        Command::Train(a) => {
            set(&mut cfg.policy.structure, a.structure);
            if a.params_only {
                let m = cfg.task.to_task_config()?.m;
                println!("{}", cmd_params_only(&cfg.policy, m)?);
                return Ok(());
            }
            let t = &mut cfg.train;
            set(&mut t.epochs, a.epochs);
            set(&mut t.learning_rate, a.lr);
            set(&mut t.batch_size, a.batch);
            set(&mut t.optimizer, a.optimizer);
            set(&mut t.seed, a.seed);
            set(&mut t.eval_every, a.eval_every);
            cfg.validate()?;
            let data = a.data.unwrap_or(cfg.output.dataset.clone());
            let model = a.model.unwrap_or(cfg.output.model.clone());
            let loss_csv = a.loss_csv.unwrap_or(cfg.output.loss_csv.clone());
            let s = cmd_train(&cfg, &data, &model, &loss_csv, |r| {
                eprintln!("epoch {:>6}  train {:.6e}  eval {:.6e}", r.epoch, r.train_loss, r.eval_loss);
            })?;
            match s.history.last() {
                Some(r) => println!("final train loss {:.6e}, eval loss {:.6e}", r.train_loss, r.eval_loss),
                None => println!("no training epochs; wrote the initial parameters"),
            }
            if !s.skipped.is_empty() {
                println!("skipped {} diverging steps", s.skipped.len());
            }
            println!("wrote {} and {}", model.display(), loss_csv.display());
        }
        Command::Eval(a) => {
            let data = a.data.unwrap_or(cfg.output.dataset.clone());
            let model = match a.expert {
                true => None,
                false => Some(formats::read_model(a.model.as_ref().unwrap_or(&cfg.output.model))?),
            };
            let target = match &model {
                Some(m) => Evaluated::Model(m),
                None => Evaluated::Expert,
            };
            let metrics = cmd_eval(target, &data)?;
            let out = a.out.unwrap_or(cfg.output.metrics.clone());
            crate::config::check_output_path(&out)?;
            formats::write_json(&out, &metrics)?;
            println!(
                "loss/n {:.6e} ± {:.6e} over {} trajectories, min pairwise distance {:.4}",
                metrics.loss_mean, metrics.loss_std, metrics.trajectories, metrics.min_pairwise_distance
            );
        }
        Command::Deploy(a) => {
            let d = &mut cfg.deploy;
            set(&mut d.n, a.n);
            set(&mut d.horizon, a.horizon);
            if a.dt.is_some() {
                d.dt = a.dt;
            }
            set(&mut d.seed, a.seed);
            d.check_centralized |= a.check_centralized;
            d.compare_stale |= a.compare_stale;
            let model_path = a.model.unwrap_or(cfg.output.model.clone());
            let model = formats::read_model(&model_path)?;
            let trajectory_csv = a.trajectory_csv.unwrap_or(cfg.output.trajectory_csv.clone());
            let metrics = a.metrics.unwrap_or(cfg.output.metrics.clone());
            let plot = a.plot.or(cfg.output.plot.clone());
            let out = DeployOutputs { trajectory_csv: &trajectory_csv, metrics: &metrics, plot: plot.as_deref() };
            let s = cmd_deploy(&model, &cfg.deploy, &out)?;
            let m = &s.metrics;
            println!(
                "{} robots, {} steps: min pairwise distance {:.4}, max speed {:.3}, final goal loss {:.4e}",
                m.robots, m.steps, m.min_pairwise_distance, m.max_speed, m.final_goal_loss
            );
            println!("messages per round: {} / {} / {}", m.messages_round1, m.messages_round2, m.messages_round3);
            if let Some(diff) = m.centralized_max_diff {
                println!("centralized check passed (max |diff| {diff:e})");
            }
        }
    }
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
