//! On-disk formats. Every artifact carries `format_version` and the hash of
//! the configuration that produced it.
//!
//! * dataset: `manifest.json` plus `data.bin`, raw little-endian `f64`,
//!   trajectory by trajectory, state by state, robot by robot as `[p; v]`,
//!   followed by one goal state per trajectory,
//! * model: JSON with the task and policy configuration and flat parameters,
//! * CSV tables (loss history, deployment trajectories) with a `#` header line,
//! * metrics: JSON objects.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use phswarm_core::dynamics::JointState;
use phswarm_core::expert::TrajectoryDataset;
use phswarm_core::policy::PolicyParams;
use phswarm_core::training::LossRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{config_hash, PolicySection, TaskSection, TrainSection};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";

/// Layout description stored in every manifest.
pub const DATASET_LAYOUT: &str =
    "f64 little-endian; trajectories x states x robots x [p; v], then one goal state per trajectory";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub task: TaskSection,
    pub robots: usize,
    pub state_dim: usize,
    pub trajectories: usize,
    /// States per trajectory (`K + 1`).
    pub states: usize,
    pub dt: f64,
    pub layout: String,
    pub data_file: String,
    pub data_bytes: u64,
    pub data_sha256: String,
}

fn push_state(buf: &mut Vec<u8>, x: &JointState) {
    for v in x.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn dataset_bytes(data: &TrajectoryDataset) -> Vec<u8> {
    let per_state = data.config.n * 2 * data.config.m;
    let states: usize = data.trajectories.iter().map(Vec::len).sum::<usize>() + data.goals.len();
    let mut buf = Vec::with_capacity(states * per_state * 8);
    for traj in &data.trajectories {
        for x in traj {
            push_state(&mut buf, x);
        }
    }
    for g in &data.goals {
        push_state(&mut buf, g);
    }
    buf
}

/// Writes `manifest.json` and `data.bin` into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, data: &TrajectoryDataset) -> anyhow::Result<DatasetManifest> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let bytes = dataset_bytes(data);
    let task = TaskSection::from_task_config(&data.config);
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        config_hash: config_hash(&task),
        robots: data.config.n,
        state_dim: 2 * data.config.m,
        trajectories: data.trajectories.len(),
        states: data.trajectories.first().map_or(0, Vec::len),
        dt: data.config.dt,
        layout: DATASET_LAYOUT.into(),
        data_file: DATA_FILE.into(),
        data_bytes: bytes.len() as u64,
        data_sha256: hex::encode(Sha256::digest(&bytes)),
        task,
    };
    write_file(&dir.join(DATA_FILE), &bytes)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> anyhow::Result<(DatasetManifest, TrajectoryDataset)> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    ensure!(
        manifest.format_version == FORMAT_VERSION,
        "dataset format version {} is not supported",
        manifest.format_version
    );
    ensure!(manifest.config_hash == config_hash(&manifest.task), "dataset manifest hash does not match its task section");
    let config = manifest.task.to_task_config()?;
    ensure!(
        config.n == manifest.robots && 2 * config.m == manifest.state_dim && config.trajectories == manifest.trajectories,
        "dataset manifest counts disagree with its task section"
    );
    ensure!(manifest.states == config.samples + 1, "dataset manifest stores {} states per trajectory", manifest.states);
    let path = dir.join(&manifest.data_file);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(bytes.len() as u64 == manifest.data_bytes, "dataset binary has {} bytes, manifest says {}", bytes.len(), manifest.data_bytes);
    ensure!(hex::encode(Sha256::digest(&bytes)) == manifest.data_sha256, "dataset binary does not match the manifest checksum");
    let per_state = manifest.robots * manifest.state_dim;
    let expected = (manifest.trajectories * (manifest.states + 1)) * per_state * 8;
    ensure!(bytes.len() == expected, "dataset binary should hold {expected} bytes");

    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut states = values.chunks_exact(per_state).map(|c| JointState::new(config.m, c.to_vec()));
    let mut trajectories = Vec::with_capacity(manifest.trajectories);
    for _ in 0..manifest.trajectories {
        trajectories.push((0..manifest.states).map(|_| states.next().expect("sized above")).collect::<Result<Vec<_>, _>>()?);
    }
    let goals = states.collect::<Result<Vec<_>, _>>()?;
    let data = TrajectoryDataset { config, trajectories, goals };
    data.validate()?;
    Ok((manifest, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub config_hash: String,
    pub task: TaskSection,
    pub policy: PolicySection,
    pub train: TrainSection,
    pub epochs_trained: usize,
    pub param_count: usize,
    pub params: Vec<f64>,
}

#[derive(Serialize)]
struct ModelKey<'a> {
    task: &'a TaskSection,
    policy: &'a PolicySection,
    train: &'a TrainSection,
}

impl ModelFile {
    pub fn new(task: TaskSection, policy: PolicySection, train: TrainSection, epochs_trained: usize, params: &PolicyParams) -> Self {
        let config_hash = config_hash(&ModelKey { task: &task, policy: &policy, train: &train });
        let flat = params.to_flat();
        Self {
            format_version: FORMAT_VERSION,
            config_hash,
            task,
            policy,
            train,
            epochs_trained,
            param_count: flat.len(),
            params: flat,
        }
    }

    pub fn params(&self) -> anyhow::Result<PolicyParams> {
        let task = self.task.to_task_config()?;
        let config = self.policy.to_policy_config(task.m)?;
        ensure!(self.params.len() == self.param_count, "model lists {} parameters but says {}", self.params.len(), self.param_count);
        Ok(PolicyParams::from_flat(&config, &self.params)?)
    }
}

pub fn write_model(path: &Path, model: &ModelFile) -> anyhow::Result<()> {
    write_json(path, model)
}

pub fn read_model(path: &Path) -> anyhow::Result<ModelFile> {
    let model: ModelFile = read_json(path)?;
    ensure!(model.format_version == FORMAT_VERSION, "model format version {} is not supported", model.format_version);
    let key = ModelKey { task: &model.task, policy: &model.policy, train: &model.train };
    ensure!(model.config_hash == config_hash(&key), "model config hash does not match its sections");
    model.params()?;
    Ok(model)
}

/// Header line of every CSV table.
fn csv_header(kind: &str, hash: &str) -> String {
    format!("# phswarm {kind} format_version={FORMAT_VERSION} config_hash={hash}\n")
}

fn parse_header(line: &str, kind: &str) -> anyhow::Result<String> {
    let rest = line
        .strip_prefix(&format!("# phswarm {kind} format_version={FORMAT_VERSION} config_hash="))
        .with_context(|| format!("not a version {FORMAT_VERSION} {kind} table"))?;
    Ok(rest.trim().to_string())
}

fn csv_body<F>(header: &[&str], rows: usize, mut row: F) -> anyhow::Result<Vec<u8>>
where
    F: FnMut(usize, &mut Vec<String>),
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    let mut buf = Vec::new();
    for r in 0..rows {
        buf.clear();
        row(r, &mut buf);
        w.write_record(&buf)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

/// Shortest decimal that parses back to the same `f64`.
fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn write_loss_csv(path: &Path, hash: &str, history: &[LossRecord]) -> anyhow::Result<()> {
    let body = csv_body(&["epoch", "train_loss", "eval_loss"], history.len(), |r, out| {
        let h = &history[r];
        out.extend([h.epoch.to_string(), num(h.train_loss), num(h.eval_loss)]);
    })?;
    let mut text = csv_header("loss", hash).into_bytes();
    text.extend(body);
    write_file(path, &text)
}

fn split_header<'a>(text: &'a str, kind: &str) -> anyhow::Result<(String, &'a str)> {
    let (first, rest) = text.split_once('\n').context("empty table")?;
    Ok((parse_header(first, kind)?, rest))
}

pub fn read_loss_csv(path: &Path) -> anyhow::Result<(String, Vec<LossRecord>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (hash, body) = split_header(&text, "loss")?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        ensure!(rec.len() == 3, "loss rows have three fields");
        out.push(LossRecord { epoch: rec[0].parse()?, train_loss: rec[1].parse()?, eval_loss: rec[2].parse()? });
    }
    Ok((hash, out))
}

/// `step, time, robot, p_0 .. p_{m-1}, v_0 .. v_{m-1}`, one row per robot and step.
pub fn write_trajectory_csv(path: &Path, hash: &str, trajectory: &[JointState], dt: f64) -> anyhow::Result<()> {
    let Some(first) = trajectory.first() else { bail!("empty trajectory") };
    let (n, m) = (first.n(), first.m());
    let mut header: Vec<String> = vec!["step".into(), "time".into(), "robot".into()];
    header.extend((0..m).map(|d| format!("p{d}")));
    header.extend((0..m).map(|d| format!("v{d}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let body = csv_body(&header_refs, trajectory.len() * n, |r, out| {
        let (step, robot) = (r / n, r % n);
        out.extend([step.to_string(), num(step as f64 * dt), robot.to_string()]);
        out.extend(trajectory[step].robot(robot).iter().map(|&v| num(v)));
    })?;
    let mut text = csv_header("trajectory", hash).into_bytes();
    text.extend(body);
    write_file(path, &text)
}

pub fn read_trajectory_csv(path: &Path) -> anyhow::Result<(String, Vec<JointState>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (hash, body) = split_header(&text, "trajectory")?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let m = (r.headers()?.len().checked_sub(3).context("trajectory header too short")?) / 2;
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals = rec.iter().skip(3).map(str::parse::<f64>).collect::<Result<Vec<_>, _>>()?;
        rows.push((rec[0].parse()?, rec[2].parse()?, vals));
    }
    let steps = rows.last().map_or(0, |r| r.0 + 1);
    ensure!(steps > 0 && rows.len().is_multiple_of(steps), "ragged trajectory table");
    let n = rows.len() / steps;
    let mut out = Vec::with_capacity(steps);
    for (s, chunk) in rows.chunks(n).enumerate() {
        ensure!(chunk.iter().enumerate().all(|(i, r)| r.0 == s && r.1 == i), "trajectory rows out of order at step {s}");
        out.push(JointState::new(m, chunk.iter().flat_map(|r| r.2.iter().copied()).collect())?);
    }
    Ok((hash, out))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_file(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Path of a dataset's binary, for callers comparing files.
pub fn data_path(dir: &Path) -> PathBuf {
    dir.join(DATA_FILE)
}
