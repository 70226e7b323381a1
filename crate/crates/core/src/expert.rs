//! Analytic expert controllers and demonstration datasets.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{simulate, Controller, Integrator, JointState};
use crate::error::{Error, Result};
use crate::exec::ParallelMap;
use crate::graph::{CommGraph, Topology};
use crate::math::{self, sqrt};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    FixedSwap,
    TvSwap,
    Flocking,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::FixedSwap => "fixed_swap",
            Task::TvSwap => "tv_swap",
            Task::Flocking => "flocking",
        }
    }

    pub fn from_name(s: &str) -> Option<Task> {
        match s {
            "fixed_swap" => Some(Task::FixedSwap),
            "tv_swap" => Some(Task::TvSwap),
            "flocking" => Some(Task::Flocking),
            _ => None,
        }
    }
}

/// Lattice-flocking constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlockingParams {
    /// Desired inter-robot distance.
    pub d: f64,
    /// Interaction range.
    pub r: f64,
    /// σ-norm parameter.
    pub eps: f64,
    /// Bump-function plateau.
    pub h: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for FlockingParams {
    fn default() -> Self {
        Self { d: 1.0, r: 1.2, eps: 0.1, h: 0.2, a: 5.0, b: 5.0 }
    }
}

/// Initial-condition sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitialConditions {
    /// Swapping columns sit at `x = ±half_width`.
    pub half_width: f64,
    pub row_spacing: f64,
    /// Uniform position jitter half-range for swapping starts.
    pub jitter: f64,
    /// Flocking positions are uniform in a square of this side, centred on 0.
    pub flock_side: f64,
    /// Flocking velocity components are uniform in `±flock_speed`.
    pub flock_speed: f64,
}

impl Default for InitialConditions {
    fn default() -> Self {
        Self { half_width: 1.5, row_spacing: 1.0, jitter: 0.1, flock_side: 4.0, flock_speed: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub task: Task,
    pub n: usize,
    pub m: usize,
    pub c1: f64,
    pub c2: f64,
    pub sigma: f64,
    /// Communication radius of the proximity graph.
    pub l: f64,
    /// Slope of the proximity weights.
    pub lambda: f64,
    pub flocking: FlockingParams,
    pub init: InitialConditions,
    /// Samples per trajectory after the initial state (`K`).
    pub samples: usize,
    /// Sampling interval `T` in seconds.
    pub dt: f64,
    /// Trajectory count (`L`).
    pub trajectories: usize,
    pub seed: u64,
    pub integrator: Integrator,
}

impl TaskConfig {
    pub fn new(task: Task, n: usize) -> Self {
        Self {
            task,
            n,
            m: 2,
            c1: 0.8,
            c2: 1.0,
            sigma: 0.1,
            l: 2.4,
            lambda: 2.0,
            flocking: FlockingParams::default(),
            init: InitialConditions::default(),
            samples: 250,
            dt: 0.04,
            trajectories: 400,
            seed: 0,
            integrator: Integrator::Euler,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        if self.n == 0 {
            return fail("task.n must be at least 1");
        }
        if self.task == Task::FixedSwap && self.n < 2 {
            return fail("fixed swapping uses a ring graph and needs n >= 2");
        }
        if self.m < 2 && self.task != Task::Flocking {
            return fail("swapping layouts need m >= 2");
        }
        if self.m == 0 {
            return fail("task.m must be at least 1");
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return fail("expert gains c1 and c2 must be positive");
        }
        if !(self.sigma >= 0.0) {
            return fail("task.sigma must be nonnegative");
        }
        if !(self.dt > 0.0) {
            return fail("sampling interval T must be positive");
        }
        if self.samples == 0 {
            return fail("K must be at least 1");
        }
        if self.trajectories == 0 {
            return fail("L must be at least 1");
        }
        if !(self.l > 0.0) {
            return fail("communication radius l must be positive");
        }
        let f = &self.flocking;
        if !(f.h > 0.0 && f.h < 1.0) {
            return fail("bump plateau h must lie in (0, 1)");
        }
        if !(f.eps > 0.0 && f.r > 0.0 && f.d > 0.0) {
            return fail("flocking eps, r and d must be positive");
        }
        Ok(())
    }

    /// Graph rule used by the expert (and by the learner on this task).
    pub fn topology(&self) -> Topology {
        match self.task {
            Task::FixedSwap => Topology::Ring,
            Task::TvSwap => Topology::Proximity { radius: self.l, slope: self.lambda },
            Task::Flocking => Topology::Proximity { radius: self.flocking.r, slope: self.lambda },
        }
    }

    pub fn expert(&self) -> Expert {
        match self.task {
            Task::FixedSwap | Task::TvSwap => Expert::Swap(SwappingExpert { c1: self.c1, c2: self.c2, sigma: self.sigma }),
            Task::Flocking => Expert::Flock(FlockingExpert { c1: self.c1, c2: self.c2, params: self.flocking }),
        }
    }
}

/// `(1/ε)(√(1 + ε‖z‖²) − 1)`
pub fn sigma_norm(z: &[f64], eps: f64) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    (sqrt(1.0 + eps * sq) - 1.0) / eps
}

/// Gradient of [`sigma_norm`]: `z / √(1 + ε‖z‖²)`.
pub fn sigma_gradient(z: &[f64], eps: f64) -> Vec<f64> {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    let s = 1.0 / sqrt(1.0 + eps * sq);
    z.iter().map(|v| v * s).collect()
}

/// Smooth cut-off: 1 on `[0, h)`, cosine taper on `[h, 1]`, 0 elsewhere.
pub fn bump(z: f64, h: f64) -> f64 {
    if !(0.0..=1.0).contains(&z) {
        0.0
    } else if z < h {
        1.0
    } else {
        0.5 * (1.0 + math::cos(core::f64::consts::PI * (z - h) / (1.0 - h)))
    }
}

/// Pairwise action function of the lattice potential.
pub fn pair_action(z: f64, p: &FlockingParams) -> f64 {
    let r_s = sigma_norm(&[p.r], p.eps);
    let d_s = sigma_norm(&[p.d], p.eps);
    let y = z - d_s;
    let s1 = y / sqrt(1.0 + y * y);
    bump(z / r_s, p.h) * ((p.a + p.b) * s1 / 2.0 + (p.a - p.b) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwappingExpert {
    pub c1: f64,
    pub c2: f64,
    pub sigma: f64,
}

impl Controller for SwappingExpert {
    /// `u_i = −c1 e_i − c2 v_i − Σ_j (e_i − e_j)/√(1 + σ‖e_i − e_j‖²)` with
    /// goal-relative positions `e = p − p_goal`.
    fn controls(&self, x: &JointState, graph: &CommGraph, goals: &JointState) -> Result<Vec<f64>> {
        let (n, m) = (x.n(), x.m());
        check_team(x, graph, goals)?;
        let err = |i: usize| -> Vec<f64> { x.position(i).iter().zip(goals.position(i)).map(|(p, g)| p - g).collect() };
        let mut u = vec![0.0; n * m];
        for i in 0..n {
            let ei = err(i);
            let ui = &mut u[i * m..(i + 1) * m];
            for k in 0..m {
                ui[k] = -self.c1 * ei[k] - self.c2 * x.velocity(i)[k];
            }
            for j in graph.neighbors(i)? {
                let ej = err(j);
                let diff: Vec<f64> = ei.iter().zip(&ej).map(|(a, b)| a - b).collect();
                let scale = 1.0 / sqrt(1.0 + self.sigma * diff.iter().map(|d| d * d).sum::<f64>());
                for k in 0..m {
                    ui[k] -= diff[k] * scale;
                }
            }
        }
        Ok(u)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlockingExpert {
    pub c1: f64,
    pub c2: f64,
    pub params: FlockingParams,
}

impl Controller for FlockingExpert {
    /// Lattice flocking toward the origin; `goals` is ignored.
    fn controls(&self, x: &JointState, graph: &CommGraph, _goals: &JointState) -> Result<Vec<f64>> {
        let (n, m) = (x.n(), x.m());
        check_team(x, graph, x)?;
        let p = &self.params;
        let r_s = sigma_norm(&[p.r], p.eps);
        let mut u = vec![0.0; n * m];
        for i in 0..n {
            let ui = &mut u[i * m..(i + 1) * m];
            for k in 0..m {
                ui[k] = -self.c1 * x.position(i)[k] - self.c2 * x.velocity(i)[k];
            }
            for j in graph.neighbors(i)? {
                let dp: Vec<f64> = x.position(j).iter().zip(x.position(i)).map(|(a, b)| a - b).collect();
                let z = sigma_norm(&dp, p.eps);
                let dir = sigma_gradient(&dp, p.eps);
                let gradient_gain = pair_action(z, p);
                let consensus_gain = bump(z / r_s, p.h);
                for k in 0..m {
                    ui[k] += gradient_gain * dir[k] + consensus_gain * (x.velocity(j)[k] - x.velocity(i)[k]);
                }
            }
        }
        Ok(u)
    }
}

fn check_team(x: &JointState, graph: &CommGraph, goals: &JointState) -> Result<()> {
    if graph.len() != x.n() || goals.n() != x.n() || goals.m() != x.m() {
        return Err(Error::Config(format!(
            "team size mismatch: state {}, graph {}, goals {}",
            x.n(),
            graph.len(),
            goals.n()
        )));
    }
    Ok(())
}

/// Expert for any task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Expert {
    Swap(SwappingExpert),
    Flock(FlockingExpert),
}

impl Controller for Expert {
    fn controls(&self, x: &JointState, graph: &CommGraph, goals: &JointState) -> Result<Vec<f64>> {
        match self {
            Expert::Swap(e) => e.controls(x, graph, goals),
            Expert::Flock(e) => e.controls(x, graph, goals),
        }
    }
}

pub fn flocking_control(x: &JointState, graph: &CommGraph, cfg: &TaskConfig) -> Result<Vec<f64>> {
    FlockingExpert { c1: cfg.c1, c2: cfg.c2, params: cfg.flocking }.controls(x, graph, x)
}

pub fn swapping_control(x: &JointState, graph: &CommGraph, cfg: &TaskConfig, goal: &JointState) -> Result<Vec<f64>> {
    SwappingExpert { c1: cfg.c1, c2: cfg.c2, sigma: cfg.sigma }.controls(x, graph, goal)
}

/// Nominal swapping start slots: two columns at `x = ±half_width`, rows centred on 0.
pub fn swap_slots(n: usize, m: usize, init: &InitialConditions) -> Vec<Vec<f64>> {
    let left = n.div_ceil(2);
    (0..n)
        .map(|k| {
            let (column, row, count) = if k < left { (0, k, left) } else { (1, k - left, n - left) };
            let mut p = vec![0.0; m];
            p[0] = if column == 0 { -init.half_width } else { init.half_width };
            if m > 1 {
                p[1] = (row as f64 - (count as f64 - 1.0) / 2.0) * init.row_spacing;
            }
            p
        })
        .collect()
}

/// Task-level targets: diagonally opposite slots at rest for swapping, the
/// origin for flocking.
pub fn task_goals(cfg: &TaskConfig) -> JointState {
    let mut goals = JointState::zeros(cfg.n, cfg.m);
    if cfg.task != Task::Flocking {
        for (i, slot) in swap_slots(cfg.n, cfg.m, &cfg.init).into_iter().enumerate() {
            for (g, s) in goals.robot_mut(i).iter_mut().zip(&slot) {
                *g = -s;
            }
        }
    }
    goals
}

/// Random start for trajectory `index`, from a per-trajectory stream of the master seed.
pub fn initial_state(cfg: &TaskConfig, index: usize) -> JointState {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (n, m) = (cfg.n, cfg.m);
    let mut x = JointState::zeros(n, m);
    match cfg.task {
        Task::FixedSwap | Task::TvSwap => {
            let jitter = cfg.init.jitter;
            for (i, slot) in swap_slots(n, m, &cfg.init).into_iter().enumerate() {
                let row = x.robot_mut(i);
                for k in 0..m {
                    let noise = if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
                    row[k] = slot[k] + noise;
                }
            }
        }
        Task::Flocking => {
            let half = cfg.init.flock_side / 2.0;
            let speed = cfg.init.flock_speed;
            for i in 0..n {
                let row = x.robot_mut(i);
                for k in 0..m {
                    row[k] = rng.gen_range(-half..=half);
                    row[m + k] = if speed > 0.0 { rng.gen_range(-speed..=speed) } else { 0.0 };
                }
            }
        }
    }
    x
}

/// `L` demonstrations of `K + 1` joint states each.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub config: TaskConfig,
    pub trajectories: Vec<Vec<JointState>>,
    /// Final demonstrated state of every trajectory, used as the learner's goal.
    pub goals: Vec<JointState>,
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, k) = (self.config.n, self.config.m, self.config.samples);
        if self.goals.len() != self.trajectories.len() {
            return Err(Error::Config("one goal state per trajectory is required".into()));
        }
        for (l, traj) in self.trajectories.iter().enumerate() {
            if traj.len() != k + 1 {
                return Err(Error::Config(format!("trajectory {l} has {} states, expected {}", traj.len(), k + 1)));
            }
            for (step, x) in traj.iter().enumerate() {
                if x.n() != n || x.m() != m {
                    return Err(Error::Config(format!("trajectory {l} step {step} has the wrong shape")));
                }
                if !x.is_finite() {
                    return Err(Error::NonFiniteRollout { trajectory: l, step });
                }
            }
        }
        Ok(())
    }
}

/// Rolls out the task expert from seeded starts.
pub fn generate_dataset<P: ParallelMap>(cfg: &TaskConfig, exec: &P) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    let expert = cfg.expert();
    let goals = task_goals(cfg);
    let topology = cfg.topology();
    let runs = exec.map_indexed(cfg.trajectories, |l| {
        let x0 = initial_state(cfg, l);
        simulate(&expert, &x0, &goals, topology, cfg.samples, cfg.dt, cfg.integrator).map_err(|e| match e {
            Error::NonFiniteRollout { step, .. } => Error::NonFiniteRollout { trajectory: l, step },
            other => other,
        })
    });
    let trajectories = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let goals = trajectories.iter().map(|t| t.last().expect("K + 1 states").clone()).collect();
    Ok(TrajectoryDataset { config: cfg.clone(), trajectories, goals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Sequential;

    fn state(rows: &[[f64; 4]]) -> JointState {
        JointState::new(2, rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn sigma_norm_values() {
        assert_eq!(sigma_norm(&[0.0, 0.0], 0.1), 0.0);
        assert!((sigma_norm(&[1.0, 1.0, 1.0], 1.0) - 1.0).abs() < 1e-15);
        assert_eq!(sigma_gradient(&[0.0, 0.0], 0.1), vec![0.0, 0.0]);
    }

    #[test]
    fn bump_values() {
        assert_eq!(bump(0.0, 0.2), 1.0);
        assert!(bump(1.0, 0.2).abs() < 1e-15);
        assert!((bump(0.6, 0.2) - 0.5).abs() < 1e-15);
        assert_eq!(bump(1.5, 0.2), 0.0);
        assert_eq!(bump(-0.1, 0.2), 0.0);
    }

    #[test]
    fn lattice_distance_is_a_root_of_the_action() {
        let p = FlockingParams::default();
        let d_s = sigma_norm(&[p.d], p.eps);
        assert!(pair_action(d_s, &p).abs() < 1e-15);
        // bisection oracle for the sign change
        let (mut lo, mut hi) = (0.1, sigma_norm(&[p.r], p.eps) * 0.99);
        assert!(pair_action(lo, &p) < 0.0 && pair_action(hi, &p) > 0.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if pair_action(mid, &p) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((lo - d_s).abs() < 1e-12);
    }

    #[test]
    fn single_robot_at_rest_gets_no_input() {
        let mut cfg = TaskConfig::new(Task::Flocking, 1);
        cfg.n = 1;
        let x = JointState::zeros(1, 2);
        let g = CommGraph::isolated(1);
        assert_eq!(flocking_control(&x, &g, &cfg).unwrap(), vec![0.0, 0.0]);
        assert_eq!(swapping_control(&x, &g, &cfg, &x).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn lattice_pair_with_equal_velocities_has_only_pd_terms() {
        let cfg = TaskConfig::new(Task::Flocking, 2);
        let x = state(&[[0.0, 0.0, 0.3, 0.1], [1.0, 0.0, 0.3, 0.1]]);
        let g = CommGraph::ring(2).unwrap();
        let u = flocking_control(&x, &g, &cfg).unwrap();
        let pd = [-0.3, -0.1, -0.8 - 0.3, -0.1];
        for (a, b) in u.iter().zip(pd) {
            assert!((a - b).abs() < 1e-15, "{u:?}");
        }
    }

    #[test]
    fn symmetric_pair_gets_opposite_controls() {
        let cfg = TaskConfig::new(Task::Flocking, 2);
        let x = state(&[[0.4, -0.2, 0.1, 0.3], [-0.4, 0.2, -0.1, -0.3]]);
        let g = CommGraph::ring(2).unwrap();
        let u = flocking_control(&x, &g, &cfg).unwrap();
        for k in 0..2 {
            assert!((u[k] + u[2 + k]).abs() < 1e-15);
        }
        let zero = JointState::zeros(2, 2);
        let s = swapping_control(&x, &g, &cfg, &zero).unwrap();
        for k in 0..2 {
            assert!((s[k] + s[2 + k]).abs() < 1e-15);
        }
    }

    #[test]
    fn swapping_coupling_values() {
        let cfg = TaskConfig::new(Task::FixedSwap, 2);
        let g = CommGraph::ring(2).unwrap();
        let zero = JointState::zeros(2, 2);
        // coincident robots: the coupling is 0/1
        let x = state(&[[0.5, 0.5, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0]]);
        let u = swapping_control(&x, &g, &cfg, &zero).unwrap();
        assert_eq!(u, vec![-0.4, -0.4, -0.4, -0.4]);
        // separation 3 along x: coupling magnitude 3/√1.9
        let x = state(&[[0.0, 0.0, 0.0, 0.0], [3.0, 0.0, 0.0, 0.0]]);
        let u = swapping_control(&x, &g, &cfg, &x).unwrap();
        assert_eq!(u, vec![0.0, 0.0, 0.0, 0.0]);
        let u = swapping_control(&x, &g, &cfg, &zero).unwrap();
        let coupling = 3.0 / libm::sqrt(1.9);
        assert!((u[0] - coupling).abs() < 1e-15);
        assert!((u[2] - (-0.8 * 3.0 - coupling)).abs() < 1e-14);
    }

    #[test]
    fn swap_goals_are_reflected_slots() {
        let cfg = TaskConfig::new(Task::FixedSwap, 4);
        let slots = swap_slots(4, 2, &cfg.init);
        assert_eq!(slots, vec![vec![-1.5, -0.5], vec![-1.5, 0.5], vec![1.5, -0.5], vec![1.5, 0.5]]);
        let goals = task_goals(&cfg);
        assert_eq!(goals.position(0), &[1.5, 0.5]);
        assert_eq!(goals.velocity(0), &[0.0, 0.0]);
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let mut cfg = TaskConfig::new(Task::TvSwap, 4);
        cfg.trajectories = 2;
        cfg.samples = 10;
        let a = generate_dataset(&cfg, &Sequential).unwrap();
        assert_eq!(a.len(), 2);
        assert!(a.trajectories.iter().all(|t| t.len() == 11));
        a.validate().unwrap();
        assert_eq!(a, generate_dataset(&cfg, &Sequential).unwrap());
        assert_ne!(a.trajectories[0][0], a.trajectories[1][0]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = TaskConfig::new(Task::FixedSwap, 4);
        cfg.trajectories = 0;
        assert!(generate_dataset(&cfg, &Sequential).is_err());
        let mut cfg = TaskConfig::new(Task::FixedSwap, 4);
        cfg.flocking.h = 1.0;
        assert!(cfg.validate().is_err());
    }
}
