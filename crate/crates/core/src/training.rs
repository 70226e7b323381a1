//! Neural-ODE training: rollouts through the learned closed loop, the
//! trajectory-matching loss, unrolled and adjoint gradients, optimisers and
//! the epoch loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::dynamics::{JointState, PortHamiltonianBase};
use crate::error::{Error, Result, TensorError};
use crate::exec::ParallelMap;
use crate::expert::TrajectoryDataset;
use crate::graph::Topology;
use crate::policy::{evaluate_team, ParamVars, PolicyConfig, PolicyParams};
use crate::tensor::Tensor;

/// States beyond this magnitude count as a diverging rollout.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// `(1/(K L)) Σ_l Σ_r ‖x^l(rT) − x̄^l(rT)‖²` over `L` trajectories of `K` samples.
pub fn loss(generated: &[Vec<JointState>], demonstrated: &[Vec<JointState>]) -> Result<f64> {
    if generated.len() != demonstrated.len() || generated.is_empty() {
        return Err(Error::Config(format!(
            "loss needs matching non-empty trajectory lists, got {} and {}",
            generated.len(),
            demonstrated.len()
        )));
    }
    let samples = generated[0].len();
    let mut total = 0.0;
    for (g, d) in generated.iter().zip(demonstrated) {
        if g.len() != samples || d.len() != samples {
            return Err(Error::Config("every trajectory must have the same sample count".into()));
        }
        for (a, b) in g.iter().zip(d) {
            if a.as_slice().len() != b.as_slice().len() {
                return Err(TensorError::ShapeMismatch { op: "loss", lhs: (a.as_slice().len(), 1), rhs: (b.as_slice().len(), 1) }.into());
            }
            total += a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
    }
    Ok(total / (samples * generated.len()) as f64)
}

/// A parameterised vector field `ẋ = f(x, θ)` recorded on a tape.
pub trait VectorField {
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>], theta: &[Var<'t>]) -> Result<Vec<Var<'t>>>;
}

/// Robots driven by the policy: `x_i' = (J_s − R_s) Q x_i + F u_i(x, θ)`.
pub struct PolicyField<'a> {
    pub config: &'a PolicyConfig,
    pub base: &'a PortHamiltonianBase,
    pub goals: &'a JointState,
    pub topology: Topology,
}

impl VectorField for PolicyField<'_> {
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>], theta: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let pv = ParamVars::from_leaves(self.config, tape, theta.to_vec())?;
        let values: Vec<Tensor> = x.iter().map(|v| v.value()).collect();
        let m = self.config.state_dim / 2;
        let positions: Vec<&[f64]> = values.iter().map(|t| &t.data()[..m]).collect();
        let graph = self.topology.build(&positions)?;
        let goals: Vec<Var<'t>> = (0..self.goals.n()).map(|i| tape.column(self.goals.robot(i))).collect();
        let team = evaluate_team(tape, &pv, self.base, x, &goals, &graph)?;
        let drift = tape.leaf(
            self.base.interconnection().sub(self.base.dissipation())?.matmul(self.base.energy_hessian())?,
        );
        let gain = tape.leaf(self.base.input_gain().clone());
        x.iter()
            .zip(&team.controls)
            .map(|(xi, ui)| Ok(drift.matmul(*xi)?.add(gain.matmul(*ui)?)?))
            .collect()
    }
}

/// Explicit Euler rollout on the tape; returns `steps + 1` states.
pub fn rollout_on_tape<'t, F: VectorField + ?Sized>(
    tape: &'t Tape,
    field: &F,
    x0: Vec<Var<'t>>,
    theta: &[Var<'t>],
    steps: usize,
    dt: f64,
) -> Result<Vec<Vec<Var<'t>>>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x0);
    for _ in 0..steps {
        let x = out.last().expect("initial state");
        let rate = field.eval(tape, x, theta)?;
        let next = x.iter().zip(&rate).map(|(xi, fi)| xi.add(fi.scale(dt))).collect::<Result<Vec<_>, _>>()?;
        out.push(next);
    }
    Ok(out)
}

fn robot_columns<'t>(tape: &'t Tape, x: &JointState) -> Vec<Var<'t>> {
    (0..x.n()).map(|i| tape.column(x.robot(i))).collect()
}

fn to_joint(m: usize, states: &[Var<'_>]) -> Result<JointState> {
    JointState::new(m, states.iter().flat_map(|v| v.value().into_vec()).collect())
}

/// Numeric rollout of the learned closed loop from `x0`.
pub fn rollout(
    params: &PolicyParams,
    base: &PortHamiltonianBase,
    x0: &JointState,
    goals: &JointState,
    steps: usize,
    dt: f64,
    topology: Topology,
) -> Result<Vec<JointState>> {
    if steps == 0 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    let field = PolicyField { config: &params.config, base, goals, topology };
    let mut out = vec![x0.clone()];
    for step in 0..steps {
        let tape = Tape::new();
        let pv = params.on_tape(&tape);
        let x = robot_columns(&tape, out.last().expect("state"));
        let next = rollout_on_tape(&tape, &field, x, &pv.flat(), 1, dt)?;
        let state = to_joint(x0.m(), &next[1])?;
        if !state.is_finite() {
            return Err(Error::NonFiniteRollout { trajectory: 0, step: step + 1 });
        }
        out.push(state);
    }
    Ok(out)
}

/// One demonstrated sub-trajectory: its first sample starts the rollout and
/// every sample is a target.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub targets: &'a [JointState],
    pub goals: &'a JointState,
}

/// Gradient method used by [`train`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradientMethod {
    #[default]
    Unrolled,
    Adjoint,
}

/// Loss of a batch, its gradient in flat parameter order, and the largest
/// state magnitude seen in any rollout.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub max_state: f64,
}

struct MemberResult {
    loss: f64,
    grad: Vec<Tensor>,
    max_state: f64,
}

fn unrolled_member(params: &PolicyParams, base: &PortHamiltonianBase, topology: Topology, s: &Sample<'_>, dt: f64) -> Result<MemberResult> {
    let tape = Tape::new();
    let pv = params.on_tape(&tape);
    let theta = pv.flat();
    let field = PolicyField { config: &params.config, base, goals: s.goals, topology };
    let x0 = robot_columns(&tape, &s.targets[0]);
    let states = rollout_on_tape(&tape, &field, x0, &theta, s.targets.len() - 1, dt)?;
    let mut terms = Vec::new();
    let mut max_state: f64 = 0.0;
    for (x, target) in states.iter().zip(s.targets).skip(1) {
        for (i, xi) in x.iter().enumerate() {
            max_state = max_state.max(xi.with_value(|t| if t.is_finite() { t.max_abs() } else { f64::INFINITY }));
            terms.push(xi.sub(tape.column(target.robot(i)))?.square().sum());
        }
    }
    let total = if terms.is_empty() { tape.scalar(0.0) } else { tape.sum_all(&terms)? };
    let grads = tape.backward(total)?;
    Ok(MemberResult { loss: total.item(), grad: theta.iter().map(|v| grads.get(v)).collect(), max_state })
}

fn adjoint_member(params: &PolicyParams, base: &PortHamiltonianBase, topology: Topology, s: &Sample<'_>, dt: f64, point: JacobianPoint) -> Result<MemberResult> {
    let field = PolicyField { config: &params.config, base, goals: s.goals, topology };
    let theta: Vec<Tensor> = params.heads.iter().flatten().flat_map(|l| [l.q.clone(), l.k.clone(), l.v.clone(), l.z.clone()]).collect();
    let x0: Vec<Tensor> = (0..s.targets[0].n()).map(|i| Tensor::column(s.targets[0].robot(i))).collect();
    let steps = s.targets.len() - 1;
    let observe = |r: usize, x: &[Tensor]| -> Vec<Tensor> {
        x.iter().enumerate().map(|(i, xi)| {
            let d: Vec<f64> = xi.data().iter().zip(s.targets[r].robot(i)).map(|(a, b)| 2.0 * (a - b)).collect();
            Tensor::column(&d)
        }).collect()
    };
    let run = adjoint_gradient(&field, &theta, &x0, steps, dt, point, observe)?;
    let mut loss = 0.0;
    let mut max_state: f64 = 0.0;
    for (x, target) in run.states.iter().zip(s.targets).skip(1) {
        for (i, xi) in x.iter().enumerate() {
            max_state = max_state.max(if xi.is_finite() { xi.max_abs() } else { f64::INFINITY });
            loss += xi.data().iter().zip(target.robot(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(MemberResult { loss, grad: run.theta_grad, max_state })
}

fn reduce(results: Vec<Result<MemberResult>>, normaliser: f64) -> Result<BatchGradient> {
    let mut loss = 0.0;
    let mut grad: Vec<f64> = Vec::new();
    let mut max_state: f64 = 0.0;
    for r in results {
        let r = r?;
        loss += r.loss;
        max_state = max_state.max(r.max_state);
        let flat = r.grad.iter().flat_map(|t| t.data().iter().copied());
        if grad.is_empty() {
            grad = flat.collect();
        } else {
            for (g, v) in grad.iter_mut().zip(flat) {
                *g += v;
            }
        }
    }
    for g in &mut grad {
        *g /= normaliser;
    }
    Ok(BatchGradient { loss: loss / normaliser, grad, max_state })
}

fn batch_normaliser(batch: &[Sample<'_>]) -> Result<f64> {
    let first = batch.first().ok_or(Error::Empty("batch"))?;
    let samples = first.targets.len();
    if samples < 2 || batch.iter().any(|s| s.targets.len() != samples) {
        return Err(Error::Config("batch members need the same number of samples, at least 2".into()));
    }
    Ok((samples * batch.len()) as f64)
}

/// Exact gradient of the batch loss through the unrolled Euler steps.
pub fn unrolled_grad<P: ParallelMap>(
    params: &PolicyParams,
    base: &PortHamiltonianBase,
    batch: &[Sample<'_>],
    dt: f64,
    topology: Topology,
    exec: &P,
) -> Result<BatchGradient> {
    let norm = batch_normaliser(batch)?;
    reduce(exec.map_indexed(batch.len(), |b| unrolled_member(params, base, topology, &batch[b], dt)), norm)
}

/// Batch-loss gradient from the reverse-time adjoint system.
pub fn adjoint_grad<P: ParallelMap>(
    params: &PolicyParams,
    base: &PortHamiltonianBase,
    batch: &[Sample<'_>],
    dt: f64,
    topology: Topology,
    point: JacobianPoint,
    exec: &P,
) -> Result<BatchGradient> {
    let norm = batch_normaliser(batch)?;
    reduce(exec.map_indexed(batch.len(), |b| adjoint_member(params, base, topology, &batch[b], dt, point)), norm)
}

/// Where the reverse Euler step evaluates the Jacobian-vector products over
/// `[t_r, t_{r+1}]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum JacobianPoint {
    /// At the stored forward state `x_r`; the discrete adjoint of the Euler grid.
    #[default]
    Checkpoint,
    /// At `x_{r+1}`, the current point of an explicit step in reverse time.
    ReverseExplicit,
}

/// Output of [`adjoint_gradient`].
pub struct AdjointRun {
    /// Forward states `x_0 ... x_R`.
    pub states: Vec<Vec<Tensor>>,
    /// `dL/dx_0`
    pub initial_adjoint: Vec<Tensor>,
    /// `dL/dθ`, one tensor per parameter.
    pub theta_grad: Vec<Tensor>,
}

/// Adjoint sensitivities of `L = Σ_r ℓ_r(x_r)` for the Euler discretisation
/// of `ẋ = f(x, θ)`. `observe(r, x_r)` returns `∂ℓ_r/∂x_r`.
///
/// The augmented state `(y, g)` is integrated backwards with
/// `y ← y + dt yᵀ∂f/∂x` and `g ← g + dt yᵀ∂f/∂θ`; the products come from one
/// seeded reverse sweep per step.
pub fn adjoint_gradient<F, O>(
    field: &F,
    theta: &[Tensor],
    x0: &[Tensor],
    steps: usize,
    dt: f64,
    point: JacobianPoint,
    observe: O,
) -> Result<AdjointRun>
where
    F: VectorField + ?Sized,
    O: Fn(usize, &[Tensor]) -> Vec<Tensor>,
{
    let mut states = vec![x0.to_vec()];
    for _ in 0..steps {
        let tape = Tape::new();
        let x: Vec<Var<'_>> = states.last().expect("state").iter().map(|t| tape.leaf(t.clone())).collect();
        let th: Vec<Var<'_>> = theta.iter().map(|t| tape.leaf(t.clone())).collect();
        let f = field.eval(&tape, &x, &th)?;
        let next = x
            .iter()
            .zip(&f)
            .map(|(xi, fi)| xi.with_value(|a| fi.with_value(|b| a.add(&b.scale(dt)))))
            .collect::<Result<Vec<_>, _>>()?;
        states.push(next);
    }

    let mut y = observe(steps, &states[steps]);
    let mut g: Vec<Tensor> = theta.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
    for r in (0..steps).rev() {
        let at = match point {
            JacobianPoint::Checkpoint => &states[r],
            JacobianPoint::ReverseExplicit => &states[r + 1],
        };
        let tape = Tape::new();
        let x: Vec<Var<'_>> = at.iter().map(|t| tape.leaf(t.clone())).collect();
        let th: Vec<Var<'_>> = theta.iter().map(|t| tape.leaf(t.clone())).collect();
        let f = field.eval(&tape, &x, &th)?;
        let seeds: Vec<(Var<'_>, Tensor)> = f.iter().copied().zip(y.iter().cloned()).collect();
        let sweep = tape.backward_seeded(&seeds)?;
        for (yi, xi) in y.iter_mut().zip(&x) {
            *yi = yi.add(&sweep.get(xi).scale(dt))?;
        }
        for (gk, tk) in g.iter_mut().zip(&th) {
            *gk = gk.add(&sweep.get(tk).scale(dt))?;
        }
        for (yi, oi) in y.iter_mut().zip(observe(r, &states[r])) {
            *yi = yi.add(&oi)?;
        }
    }
    Ok(AdjointRun { states, initial_adjoint: y, theta_grad: g })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

/// First-order optimiser over a flat parameter vector.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, t: i32, m: Vec<f64>, v: Vec<f64> },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] },
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr,
        }
    }

    pub fn set_lr(&mut self, value: f64) {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr = value,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, t, m, v } => {
                *t += 1;
                let c1 = 1.0 - libm::pow(*beta1, *t as f64);
                let c2 = 1.0 - libm::pow(*beta2, *t as f64);
                for k in 0..params.len() {
                    m[k] = *beta1 * m[k] + (1.0 - *beta1) * grad[k];
                    v[k] = *beta2 * v[k] + (1.0 - *beta2) * grad[k] * grad[k];
                    params[k] -= *lr * (m[k] / c1) / (libm::sqrt(v[k] / c2) + *eps);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub rebatch_every: usize,
    /// Samples per sub-trajectory.
    pub subtraj_len: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub eval_every: usize,
    /// Share of trajectories (taken from the end) held out for evaluation.
    pub eval_fraction: f64,
    pub gradient: GradientMethod,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10_000,
            learning_rate: 1e-3,
            batch_size: 200,
            rebatch_every: 100,
            subtraj_len: 5,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            eval_every: 100,
            eval_fraction: 0.1,
            gradient: GradientMethod::Unrolled,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subtraj_len < 2 {
            return Err(Error::Config("train.subtraj_len must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.rebatch_every == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, rebatch_every and eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config("train.eval_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A window `[start, start + len)` of trajectory `traj`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
    pub len: usize,
}

/// Consecutive non-overlapping windows of `len` samples; a shorter tail is
/// kept when it still has two samples.
pub fn split_windows(traj: usize, samples: usize, len: usize) -> Vec<Window> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < samples {
        let take = len.min(samples - start);
        if take >= 2 {
            out.push(Window { traj, start, len: take });
        }
        start += take;
    }
    out
}

/// Indices of training and held-out trajectories.
pub fn split_dataset(count: usize, eval_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    if count < 2 {
        return ((0..count).collect(), (0..count).collect());
    }
    let held = (libm::round(count as f64 * eval_fraction) as usize).clamp(1, count - 1);
    ((0..count - held).collect(), (count - held..count).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub history: Vec<LossRecord>,
    /// Epochs whose step was skipped because a rollout left the divergence bound.
    pub skipped: Vec<usize>,
}

fn samples_of<'a>(data: &'a TrajectoryDataset, windows: &[Window]) -> Vec<Sample<'a>> {
    windows
        .iter()
        .map(|w| Sample { targets: &data.trajectories[w.traj][w.start..w.start + w.len], goals: &data.goals[w.traj] })
        .collect()
}

/// Mean loss of the held-out windows, grouped by length so that each group
/// uses the batch normalisation.
pub fn evaluation_loss<P: ParallelMap>(params: &PolicyParams, base: &PortHamiltonianBase, data: &TrajectoryDataset, windows: &[Window], exec: &P) -> Result<f64> {
    let topology = data.config.topology();
    let dt = data.config.dt;
    let samples = samples_of(data, windows);
    let losses = exec.map_indexed(samples.len(), |b| -> Result<(f64, usize)> {
        let s = &samples[b];
        let traj = rollout(params, base, &s.targets[0], s.goals, s.targets.len() - 1, dt, topology)?;
        let sq: f64 = traj.iter().zip(s.targets).map(|(a, t)| a.as_slice().iter().zip(t.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).sum();
        Ok((sq, s.targets.len()))
    });
    let mut total = 0.0;
    let mut count = 0;
    for l in losses {
        let (sq, n) = l?;
        total += sq;
        count += n;
    }
    if count == 0 {
        return Err(Error::Empty("evaluation windows"));
    }
    Ok(total / count as f64)
}

/// Trains `init` on `data`. `progress` sees every logged record.
pub fn train<P: ParallelMap>(
    data: &TrajectoryDataset,
    init: PolicyParams,
    cfg: &TrainConfig,
    exec: &P,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if init.config.state_dim != 2 * data.config.m {
        return Err(Error::Config("policy state dimension does not match the dataset".into()));
    }
    let base = PortHamiltonianBase::double_integrator(data.config.m);
    let topology = data.config.topology();
    let dt = data.config.dt;
    let (train_ids, eval_ids) = split_dataset(data.len(), cfg.eval_fraction);
    let samples = data.config.samples + 1;
    let train_windows: Vec<Window> = train_ids
        .iter()
        .flat_map(|&l| split_windows(l, samples, cfg.subtraj_len))
        .filter(|w| w.len == cfg.subtraj_len)
        .collect();
    let eval_windows: Vec<Window> = eval_ids.iter().flat_map(|&l| split_windows(l, samples, cfg.subtraj_len)).collect();
    if train_windows.is_empty() {
        return Err(Error::Empty("training windows"));
    }

    let mut params = init;
    let mut history = Vec::new();
    let mut skipped = Vec::new();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { params, history, skipped });
    }
    let mut flat = params.to_flat();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batch: Vec<Window> = Vec::new();
    let mut halved = false;

    for epoch in 0..cfg.epochs {
        if epoch % cfg.rebatch_every == 0 {
            batch = (0..cfg.batch_size).map(|_| train_windows[rng.gen_range(0..train_windows.len())]).collect();
        }
        let members = samples_of(data, &batch);
        let step = match cfg.gradient {
            GradientMethod::Unrolled => unrolled_grad(&params, &base, &members, dt, topology, exec),
            GradientMethod::Adjoint => adjoint_grad(&params, &base, &members, dt, topology, JacobianPoint::Checkpoint, exec),
        };
        let step = match step {
            Ok(s) => s,
            Err(Error::NonFiniteRollout { .. }) | Err(Error::Tensor(TensorError::NonFinite(_))) => {
                return Err(Error::Divergence { epoch })
            }
            Err(e) => return Err(e),
        };
        let logged = epoch % cfg.eval_every == 0;
        if logged {
            let record = LossRecord { epoch, train_loss: step.loss, eval_loss: evaluation_loss(&params, &base, data, &eval_windows, exec)? };
            progress(&record);
            history.push(record);
        }
        if !(step.max_state <= DIVERGENCE_BOUND) {
            skipped.push(epoch);
            if !halved {
                opt.set_lr(opt.lr() / 2.0);
                halved = true;
            }
            continue;
        }
        if !step.loss.is_finite() || step.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        opt.step(&mut flat, &step.grad);
        params = PolicyParams::from_flat(&params.config, &flat)?;
    }
    let last = LossRecord {
        epoch: cfg.epochs,
        train_loss: {
            let members = samples_of(data, &batch);
            let norm = batch_normaliser(&members)?;
            let tot: f64 = exec
                .map_indexed(members.len(), |b| {
                    let s = &members[b];
                    rollout(&params, &base, &s.targets[0], s.goals, s.targets.len() - 1, dt, topology).map(|traj| {
                        traj.iter()
                            .zip(s.targets)
                            .map(|(a, t)| a.as_slice().iter().zip(t.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                            .sum::<f64>()
                    })
                })
                .into_iter()
                .sum::<Result<f64>>()?;
            tot / norm
        },
        eval_loss: evaluation_loss(&params, &base, data, &eval_windows, exec)?,
    };
    progress(&last);
    history.push(last);
    Ok(TrainOutcome { params, history, skipped })
}
