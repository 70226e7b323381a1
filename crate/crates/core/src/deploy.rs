//! Simulated distributed execution of a trained policy.
//!
//! Every robot is a [`RobotNode`] that only knows its own state, its goal and
//! the shared parameters. A control step runs three synchronous message
//! rounds over the communication graph:
//!
//! 1. neighbours exchange states; each node evaluates its heads and `H^(i)`,
//! 2. neighbours exchange `∂H^(j)/∂x_i`, `Z^J_ji` and `Z^R_ji`; each node
//!    assembles its rows of `J` and `R` and its team energy gradient,
//! 3. neighbours exchange team energy gradients; each node computes `u_i`.
//!
//! Received values enter each node's tape as leaves and go through the same
//! functions as the centralised evaluation in [`crate::policy`], so the
//! controls agree bit for bit with [`policy_control`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

use crate::autodiff::{Tape, Var};
use crate::dynamics::{ida_pbc_control, JointState, PortHamiltonianBase};
use crate::error::{Error, Result};
use crate::graph::{CommGraph, Topology};
use crate::policy::{assemble_row, local_terms, policy_control, LocalTerms, PolicyParams, Reciprocal};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Round {
    States = 1,
    Reciprocals = 2,
    Gradients = 3,
}

impl Round {
    pub const ALL: [Round; 3] = [Round::States, Round::Reciprocals, Round::Gradients];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(r: u8) -> Option<Self> {
        match r {
            1 => Some(Round::States),
            2 => Some(Round::Reciprocals),
            3 => Some(Round::Gradients),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// `x_j`
    State(Vec<f64>),
    /// `∂H^(j)/∂x_i`, `Z^J_ji` (absent for a symplectic J head) and `Z^R_ji`.
    Reciprocal { energy_grad: Vec<f64>, z_j: Option<Tensor>, z_r: Tensor },
    /// `∂H_θ/∂x_j`
    EnergyGradient(Vec<f64>),
}

impl Payload {
    pub fn round(&self) -> Round {
        match self {
            Payload::State(_) => Round::States,
            Payload::Reciprocal { .. } => Round::Reciprocals,
            Payload::EnergyGradient(_) => Round::Gradients,
        }
    }

    /// Number of scalars carried.
    pub fn len(&self) -> usize {
        match self {
            Payload::State(x) | Payload::EnergyGradient(x) => x.len(),
            Payload::Reciprocal { energy_grad, z_j, z_r } => {
                energy_grad.len() + z_j.as_ref().map_or(0, Tensor::len) + z_r.len()
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    pub payload: Payload,
}

impl Message {
    pub fn round(&self) -> Round {
        self.payload.round()
    }
}

/// Round-1 results kept as plain values.
#[derive(Clone, Debug, PartialEq)]
struct LocalValues {
    neighbors: Vec<usize>,
    z_r: BTreeMap<usize, Tensor>,
    z_j: BTreeMap<usize, Tensor>,
    energy: f64,
    energy_grads: BTreeMap<usize, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
struct ReciprocalValues {
    energy_grad: Tensor,
    z_j: Option<Tensor>,
    z_r: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
struct RowValues {
    j_blocks: BTreeMap<usize, Tensor>,
    r_blocks: BTreeMap<usize, Tensor>,
    energy_grad: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Idle,
    Done(Round),
}

/// Counters exposed for protocol audits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AccessCounters {
    /// Reads of this node's state through its public accessor.
    pub external_state_reads: usize,
    pub messages_sent: usize,
    pub messages_received: usize,
}

/// One robot of the simulated team.
#[derive(Debug)]
pub struct RobotNode {
    id: usize,
    params: Arc<PolicyParams>,
    base: Arc<PortHamiltonianBase>,
    state: Vec<f64>,
    goal: Vec<f64>,
    mailbox: Vec<Message>,
    transcript: Vec<Message>,
    stage: Stage,
    neighbors: Vec<usize>,
    local: Option<LocalValues>,
    row: Option<RowValues>,
    control: Option<Vec<f64>>,
    steps: usize,
    stale: bool,
    reciprocal_cache: BTreeMap<usize, ReciprocalValues>,
    gradient_cache: BTreeMap<usize, Tensor>,
    external_reads: Cell<usize>,
    sent: usize,
    received: usize,
}

impl RobotNode {
    pub fn new(id: usize, params: Arc<PolicyParams>, base: Arc<PortHamiltonianBase>, state: Vec<f64>, goal: Vec<f64>) -> Result<Self> {
        let nx = params.config.state_dim;
        if state.len() != nx || goal.len() != nx || base.state_dim() != nx {
            return Err(Error::Config(format!(
                "node {id}: state of length {} and goal of length {} for a policy with n_x = {nx}",
                state.len(),
                goal.len()
            )));
        }
        Ok(Self {
            id,
            params,
            base,
            state,
            goal,
            mailbox: Vec::new(),
            transcript: Vec::new(),
            stage: Stage::Idle,
            neighbors: Vec::new(),
            local: None,
            row: None,
            control: None,
            steps: 0,
            stale: false,
            reciprocal_cache: BTreeMap::new(),
            gradient_cache: BTreeMap::new(),
            external_reads: Cell::new(0),
            sent: 0,
            received: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// The node's own state. Counted, so audits can prove the protocol never
    /// looks at another node's state.
    pub fn state(&self) -> &[f64] {
        self.external_reads.set(self.external_reads.get() + 1);
        &self.state
    }

    /// Overwrites the node's own state, as a sensor reading would.
    pub fn sense(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != self.state.len() {
            return Err(Error::Config(format!("node {}: sensed state has length {}", self.id, state.len())));
        }
        self.state.copy_from_slice(state);
        Ok(())
    }

    pub fn control(&self) -> Option<&[f64]> {
        self.control.as_deref()
    }

    pub fn counters(&self) -> AccessCounters {
        AccessCounters {
            external_state_reads: self.external_reads.get(),
            messages_sent: self.sent,
            messages_received: self.received,
        }
    }

    /// Every message received during the current control step.
    pub fn transcript(&self) -> &[Message] {
        &self.transcript
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn expect_stage(&self, round: Round) -> Result<()> {
        let ok = match (round, self.stage) {
            (Round::States, Stage::Idle | Stage::Done(Round::Gradients)) => true,
            (Round::Reciprocals, Stage::Done(Round::States)) => true,
            (Round::Gradients, Stage::Done(Round::Reciprocals)) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Protocol(format!("node {}: round {} out of order after {:?}", self.id, round.number(), self.stage)))
        }
    }

    fn outbox(&mut self, round: Round, graph: &CommGraph) -> Result<Vec<Message>> {
        self.expect_stage(round)?;
        if round == Round::States {
            self.neighbors = graph.khop_neighbors(self.id, self.params.config.hops)?.into_iter().filter(|&j| j != self.id).collect();
            self.transcript.clear();
        }
        let mut out = Vec::with_capacity(self.neighbors.len());
        for &j in &self.neighbors {
            let payload = match round {
                Round::States => Payload::State(self.state.clone()),
                Round::Reciprocals => {
                    let local = self.local.as_ref().ok_or_else(|| self.missing("local terms"))?;
                    let block = |map: &BTreeMap<usize, Tensor>| map.get(&j).cloned();
                    Payload::Reciprocal {
                        energy_grad: block(&local.energy_grads).ok_or_else(|| self.missing("energy gradient"))?.into_vec(),
                        z_j: block(&local.z_j),
                        z_r: block(&local.z_r).ok_or_else(|| self.missing("Z^R"))?,
                    }
                }
                Round::Gradients => {
                    let row = self.row.as_ref().ok_or_else(|| self.missing("row"))?;
                    Payload::EnergyGradient(row.energy_grad.data().to_vec())
                }
            };
            out.push(Message { from: self.id, to: j, payload });
        }
        self.sent += out.len();
        Ok(out)
    }

    fn missing(&self, what: &str) -> Error {
        Error::Protocol(format!("node {} has no {what}", self.id))
    }

    fn deliver(&mut self, msg: Message) {
        self.received += 1;
        self.mailbox.push(msg);
    }

    /// Takes this round's messages, one per neighbour in ascending order.
    fn collect(&mut self, round: Round) -> Result<Vec<Message>> {
        let mut got: BTreeMap<usize, Message> = BTreeMap::new();
        for msg in self.mailbox.drain(..) {
            if msg.round() != round || !self.neighbors.contains(&msg.from) {
                return Err(Error::Protocol(format!(
                    "node {} received an unexpected round-{} message from {}",
                    self.id,
                    msg.round().number(),
                    msg.from
                )));
            }
            if got.insert(msg.from, msg).is_some() {
                return Err(Error::Protocol(format!("node {}: duplicate round-{} message", self.id, round.number())));
            }
        }
        if let Some(&j) = self.neighbors.iter().find(|j| !got.contains_key(j)) {
            return Err(Error::Protocol(format!("node {} is missing the round-{} message from {j}", self.id, round.number())));
        }
        let msgs: Vec<Message> = got.into_values().collect();
        self.transcript.extend(msgs.iter().cloned());
        Ok(msgs)
    }

    fn process(&mut self, round: Round) -> Result<()> {
        let msgs = self.collect(round)?;
        match round {
            Round::States => self.round_one(&msgs)?,
            Round::Reciprocals => self.round_two(&msgs)?,
            Round::Gradients => self.round_three(&msgs)?,
        }
        self.stage = Stage::Done(round);
        Ok(())
    }

    fn round_one(&mut self, msgs: &[Message]) -> Result<()> {
        let tape = Tape::new();
        let pv = self.params.on_tape(&tape);
        let x = tape.column(&self.state);
        let goal = tape.column(&self.goal);
        let mut nb = Vec::with_capacity(msgs.len());
        for m in msgs {
            match &m.payload {
                Payload::State(s) => nb.push((m.from, tape.column(s))),
                _ => return Err(self.missing("neighbour state")),
            }
        }
        let t = local_terms(&tape, &pv, self.id, x, goal, &nb)?;
        let values = |map: &BTreeMap<usize, Var<'_>>| map.iter().map(|(&j, v)| (j, v.value())).collect();
        self.local = Some(LocalValues {
            neighbors: t.neighbors.clone(),
            z_r: values(&t.z_r),
            z_j: values(&t.z_j),
            energy: t.energy.value().data()[0],
            energy_grads: values(&t.energy_grads),
        });
        self.row = None;
        self.control = None;
        Ok(())
    }

    fn round_two(&mut self, msgs: &[Message]) -> Result<()> {
        let mut fresh = BTreeMap::new();
        for m in msgs {
            match &m.payload {
                Payload::Reciprocal { energy_grad, z_j, z_r } => {
                    fresh.insert(
                        m.from,
                        ReciprocalValues { energy_grad: Tensor::column(energy_grad), z_j: z_j.clone(), z_r: z_r.clone() },
                    );
                }
                _ => return Err(self.missing("reciprocal payload")),
            }
        }
        // A stale node answers with last step's payloads and keeps today's
        // for the next step; neighbours it has never heard from are fresh.
        let used = if self.stale {
            let mut used = BTreeMap::new();
            for (&j, v) in &fresh {
                used.insert(j, self.reciprocal_cache.get(&j).unwrap_or(v).clone());
            }
            used
        } else {
            fresh.clone()
        };
        self.reciprocal_cache = fresh;

        let local = self.local.as_ref().ok_or_else(|| self.missing("local terms"))?;
        let tape = Tape::new();
        let pv = self.params.on_tape(&tape);
        let leaves = |map: &BTreeMap<usize, Tensor>| -> BTreeMap<usize, Var<'_>> {
            map.iter().map(|(&j, t)| (j, tape.leaf(t.clone()))).collect()
        };
        let own = LocalTerms {
            robot: self.id,
            neighbors: local.neighbors.clone(),
            z_r: leaves(&local.z_r),
            z_j: leaves(&local.z_j),
            energy: tape.scalar(local.energy),
            energy_grads: leaves(&local.energy_grads),
        };
        let recv: BTreeMap<usize, Reciprocal<'_>> = used
            .iter()
            .map(|(&j, v)| {
                let r = Reciprocal {
                    energy_grad: tape.leaf(v.energy_grad.clone()),
                    z_j: v.z_j.as_ref().map(|z| tape.leaf(z.clone())),
                    z_r: tape.leaf(v.z_r.clone()),
                };
                (j, r)
            })
            .collect();
        let row = assemble_row(&pv, &own, &recv)?;
        let take = |map: &BTreeMap<(usize, usize), Var<'_>>| map.iter().map(|(&(_, j), v)| (j, v.value())).collect();
        self.row = Some(RowValues {
            j_blocks: take(&row.j_blocks),
            r_blocks: take(&row.r_blocks),
            energy_grad: row.energy_grad.value(),
        });
        Ok(())
    }

    fn round_three(&mut self, msgs: &[Message]) -> Result<()> {
        let mut fresh = BTreeMap::new();
        for m in msgs {
            match &m.payload {
                Payload::EnergyGradient(g) => {
                    fresh.insert(m.from, Tensor::column(g));
                }
                _ => return Err(self.missing("energy gradient payload")),
            }
        }
        let used = if self.stale {
            fresh.iter().map(|(&j, g)| (j, self.gradient_cache.get(&j).unwrap_or(g).clone())).collect()
        } else {
            fresh.clone()
        };
        self.gradient_cache = fresh;

        let row = self.row.as_ref().ok_or_else(|| self.missing("row"))?;
        let i = self.id;
        let tape = Tape::new();
        let blocks = |map: &BTreeMap<usize, Tensor>| map.iter().map(|(&j, t)| ((i, j), tape.leaf(t.clone()))).collect();
        let j_blocks = blocks(&row.j_blocks);
        let r_blocks = blocks(&row.r_blocks);
        let mut dh: BTreeMap<usize, Var<'_>> = used.iter().map(|(&j, g): (&usize, &Tensor)| (j, tape.leaf(g.clone()))).collect();
        dh.insert(i, tape.leaf(row.energy_grad.clone()));
        let x = tape.column(&self.state);
        let u = ida_pbc_control(&tape, &self.base, i, &j_blocks, &r_blocks, &dh, x)?;
        self.control = Some(u.value().into_vec());
        Ok(())
    }

    /// Euler update of the node's own state with its latest control.
    fn advance(&mut self, dt: f64) -> Result<()> {
        let u = self.control.as_ref().ok_or_else(|| self.missing("control"))?;
        let rate = self.base.open_loop_rhs(&self.state, u)?;
        for (x, d) in self.state.iter_mut().zip(rate) {
            *x += dt * d;
        }
        self.steps += 1;
        Ok(())
    }
}

/// One node per robot, all sharing `params` and `base`.
pub fn make_nodes(params: &PolicyParams, base: &PortHamiltonianBase, x: &JointState, goals: &JointState) -> Result<Vec<RobotNode>> {
    if goals.n() != x.n() || goals.m() != x.m() {
        return Err(Error::Config(format!("{} robots but {} goals", x.n(), goals.n())));
    }
    let params = Arc::new(params.clone());
    let base = Arc::new(base.clone());
    (0..x.n())
        .map(|i| RobotNode::new(i, params.clone(), base.clone(), x.robot(i).to_vec(), goals.robot(i).to_vec()))
        .collect()
}

/// Delivers one round of messages and lets every node process them.
/// Returns the number of messages delivered.
pub fn run_round(nodes: &mut [RobotNode], graph: &CommGraph, round: u8) -> Result<usize> {
    let round = Round::from_number(round).ok_or_else(|| Error::Protocol(format!("there is no round {round}")))?;
    if graph.len() != nodes.len() {
        return Err(Error::Config(format!("graph on {} robots for {} nodes", graph.len(), nodes.len())));
    }
    if let Some((k, node)) = nodes.iter().enumerate().find(|(k, n)| n.id != *k) {
        return Err(Error::Protocol(format!("node at slot {k} has id {}", node.id)));
    }
    let mut wire = Vec::new();
    for node in nodes.iter_mut() {
        wire.extend(node.outbox(round, graph)?);
    }
    let count = wire.len();
    for msg in wire {
        let to = msg.to;
        nodes.get_mut(to).ok_or(Error::IndexOutOfRange { index: to, n: graph.len() })?.deliver(msg);
    }
    for node in nodes.iter_mut() {
        node.process(round)?;
    }
    Ok(count)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub state: JointState,
    /// `n * n_u` controls, robot by robot.
    pub controls: Vec<f64>,
    /// Messages delivered in rounds 1, 2 and 3.
    pub messages: [usize; 3],
}

fn step(nodes: &mut [RobotNode], graph: &CommGraph, dt: f64, stale: bool) -> Result<StepOutput> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    let first = nodes.first().ok_or(Error::Empty("team"))?;
    let m = first.state.len() / 2;
    for node in nodes.iter_mut() {
        node.stale = stale;
    }
    let mut messages = [0; 3];
    for r in Round::ALL {
        messages[r as usize - 1] = run_round(nodes, graph, r.number())?;
    }
    let mut controls = Vec::with_capacity(nodes.len() * m);
    for node in nodes.iter() {
        controls.extend_from_slice(node.control.as_deref().ok_or_else(|| node.missing("control"))?);
    }
    let mut data = Vec::with_capacity(nodes.len() * 2 * m);
    for node in nodes.iter_mut() {
        node.advance(dt)?;
        data.extend_from_slice(&node.state);
    }
    let state = JointState::new(m, data)?;
    if !state.is_finite() {
        return Err(Error::NonFiniteRollout { trajectory: 0, step: nodes[0].steps });
    }
    Ok(StepOutput { state, controls, messages })
}

/// Three message rounds with fresh data, then an Euler step of every node.
pub fn distributed_step(nodes: &mut [RobotNode], graph: &CommGraph, dt: f64) -> Result<StepOutput> {
    step(nodes, graph, dt, false)
}

/// Like [`distributed_step`], but rounds 2 and 3 use the payloads each node
/// received during the previous step. States (round 1) are always fresh.
pub fn stale_step(nodes: &mut [RobotNode], graph: &CommGraph, dt: f64) -> Result<StepOutput> {
    if let Some(n) = nodes.iter().find(|n| n.steps == 0) {
        return Err(Error::Protocol(format!("stale step needs a previous step, node {} has none", n.id)));
    }
    step(nodes, graph, dt, true)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeployOptions {
    pub steps: usize,
    pub dt: f64,
    pub topology: Topology,
    /// Compare every step's controls with [`policy_control`].
    pub check_centralized: bool,
    /// Run a shadow team with [`stale_step`] along the same trajectory.
    pub compare_stale: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeployMetrics {
    pub steps: usize,
    pub min_pairwise_distance: f64,
    pub max_speed: f64,
    pub max_position: f64,
    /// Initial largest distance of a robot from the team centroid.
    pub initial_spread: f64,
    /// `Σ_i ‖x_i(end) - goal_i‖² / n`
    pub final_goal_loss: f64,
    /// Total messages delivered per round.
    pub messages: [usize; 3],
    /// Largest centralised disagreement seen, when checked.
    pub oracle_max_diff: Option<f64>,
    /// Largest per-step control deviation of the stale protocol, when run.
    pub stale_max_deviation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeployReport {
    /// `steps + 1` states.
    pub trajectory: Vec<JointState>,
    /// Per-step controls.
    pub controls: Vec<Vec<f64>>,
    pub metrics: DeployMetrics,
}

fn spread(x: &JointState) -> f64 {
    let m = x.m();
    let n = x.n().max(1) as f64;
    let mut centre = vec![0.0; m];
    for i in 0..x.n() {
        for (c, p) in centre.iter_mut().zip(x.position(i)) {
            *c += p / n;
        }
    }
    (0..x.n()).map(|i| norm_diff(x.position(i), &centre)).fold(0.0, f64::max)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    crate::math::sqrt(sq_dist(a, b))
}

fn norm(a: &[f64]) -> f64 {
    crate::math::sqrt(a.iter().map(|x| x * x).sum())
}

/// Runs the distributed simulator for `opts.steps` steps.
pub fn deploy(
    params: &PolicyParams,
    base: &PortHamiltonianBase,
    x0: &JointState,
    goals: &JointState,
    opts: &DeployOptions,
) -> Result<DeployReport> {
    let mut nodes = make_nodes(params, base, x0, goals)?;
    let mut shadow = if opts.compare_stale { Some(make_nodes(params, base, x0, goals)?) } else { None };
    let mut trajectory = Vec::with_capacity(opts.steps + 1);
    let mut controls = Vec::with_capacity(opts.steps);
    let mut messages = [0; 3];
    let mut oracle: Option<f64> = opts.check_centralized.then_some(0.0);
    let mut stale_dev: Option<f64> = shadow.as_ref().map(|_| 0.0);
    let mut x = x0.clone();
    trajectory.push(x.clone());

    for k in 0..opts.steps {
        let graph = opts.topology.build(&x.positions())?;
        let out = distributed_step(&mut nodes, &graph, opts.dt)?;
        if let Some(worst) = oracle.as_mut() {
            let central = policy_control(&x, &graph, params, goals, base)?;
            let nu = base.input_dim();
            for (idx, (a, b)) in out.controls.iter().zip(&central).enumerate() {
                let diff = (a - b).abs();
                if !(diff <= 1e-12) {
                    return Err(Error::OracleMismatch { step: k, robot: idx / nu, diff });
                }
                *worst = worst.max(diff);
            }
        }
        if let (Some(team), Some(worst)) = (shadow.as_mut(), stale_dev.as_mut()) {
            for (node, i) in team.iter_mut().zip(0..) {
                node.sense(x.robot(i))?;
            }
            let shadow_out = if k == 0 { distributed_step(team, &graph, opts.dt)? } else { stale_step(team, &graph, opts.dt)? };
            let dev = out.controls.iter().zip(&shadow_out.controls).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            *worst = worst.max(dev);
        }
        for (total, c) in messages.iter_mut().zip(out.messages) {
            *total += c;
        }
        controls.push(out.controls);
        x = out.state;
        trajectory.push(x.clone());
    }

    let min_pairwise_distance = trajectory.iter().map(JointState::min_pairwise_distance).fold(f64::INFINITY, f64::min);
    let mut max_speed: f64 = 0.0;
    let mut max_position: f64 = 0.0;
    for s in &trajectory {
        for i in 0..s.n() {
            max_speed = max_speed.max(norm(s.velocity(i)));
            max_position = max_position.max(norm(s.position(i)));
        }
    }
    let last = trajectory.last().expect("trajectory holds x0");
    let n = last.n().max(1) as f64;
    let final_goal_loss = (0..last.n()).map(|i| sq_dist(last.robot(i), goals.robot(i))).sum::<f64>() / n;
    Ok(DeployReport {
        metrics: DeployMetrics {
            steps: opts.steps,
            min_pairwise_distance,
            max_speed,
            max_position,
            initial_spread: spread(x0),
            final_goal_loss,
            messages,
            oracle_max_diff: oracle,
            stale_max_deviation: stale_dev,
        },
        trajectory,
        controls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, PolicyConfig, Structure};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(n: usize, rng: &mut ChaCha8Rng, scale: f64) -> JointState {
        JointState::new(2, (0..4 * n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    fn setup(n: usize, seed: u64, structure: Structure) -> (PolicyParams, PortHamiltonianBase, JointState, JointState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = PolicyConfig::appendix(2);
        cfg.structure = structure;
        let params = init_params(&cfg, seed).unwrap();
        let x = random_state(n, &mut rng, 2.0);
        let goals = random_state(n, &mut rng, 2.0);
        (params, PortHamiltonianBase::double_integrator(2), x, goals)
    }

    #[test]
    fn ring_rounds_deliver_two_messages_per_robot() {
        let (params, base, x, goals) = setup(5, 1, Structure::Verbatim);
        let mut nodes = make_nodes(&params, &base, &x, &goals).unwrap();
        let out = distributed_step(&mut nodes, &CommGraph::ring(5).unwrap(), 0.04).unwrap();
        assert_eq!(out.messages, [10, 10, 10]);
        for node in &nodes {
            assert_eq!(node.counters().messages_sent, 6);
            assert_eq!(node.counters().messages_received, 6);
        }
    }

    #[test]
    fn message_count_matches_neighbourhood_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (params, base, _, _) = setup(6, 3, Structure::Verbatim);
        let x = random_state(6, &mut rng, 1.5);
        let graph = CommGraph::proximity(&x.positions(), 1.6, 2.0).unwrap();
        let expected: usize = (0..6).map(|i| graph.khop_neighbors(i, 1).unwrap().len() - 1).sum();
        let mut nodes = make_nodes(&params, &base, &x, &x).unwrap();
        let out = distributed_step(&mut nodes, &graph, 0.04).unwrap();
        assert_eq!(out.messages, [expected; 3]);
    }

    #[test]
    fn isolated_robots_exchange_nothing_but_still_act() {
        let (params, base, x, goals) = setup(3, 2, Structure::Verbatim);
        let mut nodes = make_nodes(&params, &base, &x, &goals).unwrap();
        let out = distributed_step(&mut nodes, &CommGraph::isolated(3), 0.04).unwrap();
        assert_eq!(out.messages, [0, 0, 0]);
        let central = policy_control(&x, &CommGraph::isolated(3), &params, &goals, &base).unwrap();
        assert_eq!(out.controls, central);
    }

    #[test]
    fn controls_match_centralised_policy_bitwise() {
        for seed in 0..6 {
            let structure = if seed % 2 == 0 { Structure::Verbatim } else { Structure::StrictPsd };
            let (params, base, x, goals) = setup(4 + seed as usize, seed, structure);
            let graph = CommGraph::proximity(&x.positions(), 2.0, 2.0).unwrap();
            let mut nodes = make_nodes(&params, &base, &x, &goals).unwrap();
            let out = distributed_step(&mut nodes, &graph, 0.04).unwrap();
            assert_eq!(out.controls, policy_control(&x, &graph, &params, &goals, &base).unwrap());
            let rate = crate::dynamics::double_integrator_rate(&x, &out.controls);
            assert_eq!(out.state, x.add_scaled(&rate, 0.04));
        }
    }

    #[test]
    fn zero_policy_at_rest_stays_put() {
        let cfg = PolicyConfig::appendix(2);
        let params = PolicyParams::zeros(&cfg).unwrap();
        let base = PortHamiltonianBase::double_integrator(2);
        let x = JointState::new(2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.0, 0.0, -1.0, 0.2, 0.0, 0.0]).unwrap();
        let mut nodes = make_nodes(&params, &base, &x, &x).unwrap();
        let out = distributed_step(&mut nodes, &CommGraph::ring(3).unwrap(), 0.04).unwrap();
        assert_eq!(out.state, x);
    }

    #[test]
    fn nodes_never_read_each_other() {
        let (params, base, x, goals) = setup(4, 4, Structure::StrictPsd);
        let mut nodes = make_nodes(&params, &base, &x, &goals).unwrap();
        let graph = CommGraph::ring(4).unwrap();
        for _ in 0..3 {
            distributed_step(&mut nodes, &graph, 0.04).unwrap();
        }
        for node in &nodes {
            assert_eq!(node.counters().external_state_reads, 0);
            assert!(node.transcript().iter().all(|m| m.to == node.id() && graph.connected(node.id(), m.from)));
        }
    }

    #[test]
    fn rounds_must_run_in_order() {
        let (params, base, x, goals) = setup(3, 5, Structure::Verbatim);
        let graph = CommGraph::ring(3).unwrap();
        let mut nodes = make_nodes(&params, &base, &x, &goals).unwrap();
        assert!(matches!(run_round(&mut nodes, &graph, 2), Err(Error::Protocol(_))));
        let mut nodes = make_nodes(&params, &base, &x, &goals).unwrap();
        run_round(&mut nodes, &graph, 1).unwrap();
        assert!(matches!(run_round(&mut nodes, &graph, 3), Err(Error::Protocol(_))));
        assert!(matches!(run_round(&mut nodes, &graph, 4), Err(Error::Protocol(_))));
    }

    #[test]
    fn payload_sizes_follow_the_round() {
        let (params, base, x, goals) = setup(4, 6, Structure::Verbatim);
        let graph = CommGraph::ring(4).unwrap();
        let mut nodes = make_nodes(&params, &base, &x, &goals).unwrap();
        distributed_step(&mut nodes, &graph, 0.04).unwrap();
        for m in nodes[0].transcript() {
            let expected = match m.round() {
                Round::States | Round::Gradients => 4,
                // energy gradient, 4x4 Z^R; the symplectic J head sends nothing
                Round::Reciprocals => 4 + 16,
            };
            assert_eq!(m.payload.len(), expected);
        }
    }

    #[test]
    fn round_one_and_two_data_stay_within_two_hops() {
        // Robot 0 on a ring of 8: robots 3, 4 and 5 are more than two hops away.
        let (params, base, x, goals) = setup(8, 7, Structure::Verbatim);
        let graph = CommGraph::ring(8).unwrap();
        let mut moved = x.clone();
        for j in [3, 4, 5] {
            for v in moved.robot_mut(j) {
                *v += 0.7;
            }
        }
        let transcript = |state: &JointState| {
            let mut nodes = make_nodes(&params, &base, state, &goals).unwrap();
            distributed_step(&mut nodes, &graph, 0.04).unwrap();
            nodes[0].transcript().iter().filter(|m| m.round() != Round::Gradients).cloned().collect::<Vec<_>>()
        };
        assert_eq!(transcript(&x), transcript(&moved));
    }

    #[test]
    fn stale_step_needs_history() {
        let (params, base, x, goals) = setup(3, 8, Structure::Verbatim);
        let mut nodes = make_nodes(&params, &base, &x, &goals).unwrap();
        let graph = CommGraph::ring(3).unwrap();
        assert!(matches!(stale_step(&mut nodes, &graph, 0.04), Err(Error::Protocol(_))));
        distributed_step(&mut nodes, &graph, 0.04).unwrap();
        stale_step(&mut nodes, &graph, 0.04).unwrap();
    }

    #[test]
    fn stale_equals_fresh_at_equilibrium() {
        let cfg = PolicyConfig::appendix(2);
        let params = PolicyParams::zeros(&cfg).unwrap();
        let base = PortHamiltonianBase::double_integrator(2);
        let x = JointState::new(2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let graph = CommGraph::ring(3).unwrap();
        let mut fresh = make_nodes(&params, &base, &x, &x).unwrap();
        let mut stale = make_nodes(&params, &base, &x, &x).unwrap();
        distributed_step(&mut fresh, &graph, 0.04).unwrap();
        distributed_step(&mut stale, &graph, 0.04).unwrap();
        assert_eq!(distributed_step(&mut fresh, &graph, 0.04).unwrap(), stale_step(&mut stale, &graph, 0.04).unwrap());
    }

    #[test]
    fn deploy_reports_metrics() {
        let (params, base, x, goals) = setup(4, 9, Structure::StrictPsd);
        let opts = DeployOptions {
            steps: 5,
            dt: 0.04,
            topology: Topology::Ring,
            check_centralized: true,
            compare_stale: true,
        };
        let report = deploy(&params, &base, &x, &goals, &opts).unwrap();
        assert_eq!(report.trajectory.len(), 6);
        assert_eq!(report.controls.len(), 5);
        assert_eq!(report.metrics.messages, [40, 40, 40]);
        assert_eq!(report.metrics.oracle_max_diff, Some(0.0));
        let dev = report.metrics.stale_max_deviation.unwrap();
        assert!(dev.is_finite() && dev > 0.0);
        assert!(report.metrics.min_pairwise_distance > 0.0);
    }
}
