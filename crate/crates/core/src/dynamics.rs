//! Port-Hamiltonian robot models, IDA-PBC control and fixed-step integration.
//!
//! Each robot state is `x_i = [p_i; v_i]` with `m` position and `m` velocity
//! components; the team state stores robots one after the other.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result, TensorError};
use crate::graph::{CommGraph, Topology};
use crate::linalg;
use crate::tensor::Tensor;

/// Blocks `[M]_ij` of a team-level matrix, keyed by robot pair.
pub type BlockMap<'t> = BTreeMap<(usize, usize), Var<'t>>;

#[derive(Clone, Debug, PartialEq)]
pub struct RobotState {
    pub p: Vec<f64>,
    pub v: Vec<f64>,
}

impl RobotState {
    pub fn new(p: Vec<f64>, v: Vec<f64>) -> Self {
        Self { p, v }
    }

    pub fn at_rest(p: Vec<f64>) -> Self {
        let m = p.len();
        Self { p, v: vec![0.0; m] }
    }
}

/// Stacked team state `x = [x_1; ...; x_n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    m: usize,
    data: Vec<f64>,
}

impl JointState {
    pub fn new(m: usize, data: Vec<f64>) -> Result<Self> {
        if m == 0 || !data.len().is_multiple_of(2 * m) {
            return Err(Error::Config(format!("state length {} is not a multiple of 2m = {}", data.len(), 2 * m)));
        }
        Ok(Self { m, data })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self { m, data: vec![0.0; 2 * m * n] }
    }

    pub fn from_robots(robots: &[RobotState]) -> Result<Self> {
        let m = robots.first().map_or(0, |r| r.p.len());
        let mut data = Vec::with_capacity(robots.len() * 2 * m);
        for r in robots {
            if r.p.len() != m || r.v.len() != m {
                return Err(Error::Config("robots must share the position dimension".into()));
            }
            data.extend_from_slice(&r.p);
            data.extend_from_slice(&r.v);
        }
        Self::new(m, data)
    }

    pub fn n(&self) -> usize {
        self.data.len() / (2 * self.m)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Per-robot state dimension `n_x = 2m`.
    pub fn state_dim(&self) -> usize {
        2 * self.m
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn robot(&self, i: usize) -> &[f64] {
        let nx = self.state_dim();
        &self.data[i * nx..(i + 1) * nx]
    }

    pub fn robot_mut(&mut self, i: usize) -> &mut [f64] {
        let nx = self.state_dim();
        &mut self.data[i * nx..(i + 1) * nx]
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.robot(i)[..self.m]
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.robot(i)[self.m..]
    }

    pub fn positions(&self) -> Vec<&[f64]> {
        (0..self.n()).map(|i| self.position(i)).collect()
    }

    pub fn robot_state(&self, i: usize) -> RobotState {
        RobotState::new(self.position(i).to_vec(), self.velocity(i).to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `self + dt * rate`
    pub fn add_scaled(&self, rate: &JointState, dt: f64) -> JointState {
        let data = self.data.iter().zip(&rate.data).map(|(x, d)| x + dt * d).collect();
        JointState { m: self.m, data }
    }

    /// Reorders robots: robot `k` of the result is robot `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> JointState {
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.robot(p));
        }
        JointState { m: self.m, data }
    }

    /// Smallest distance between two robots' positions (infinite for n < 2).
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.n() {
            for j in i + 1..self.n() {
                best = best.min(crate::math::dist(self.position(i), self.position(j)));
            }
        }
        best
    }
}

/// Known per-robot dynamics `x' = (J_s - R_s) dH_s/dx + F_s u` with the
/// quadratic energy `H_s = ½ xᵀ Q x`.
#[derive(Clone, Debug, PartialEq)]
pub struct PortHamiltonianBase {
    interconnection: Tensor,
    dissipation: Tensor,
    input_gain: Tensor,
    energy_hessian: Tensor,
    input_pinv: Tensor,
}

impl PortHamiltonianBase {
    pub fn new(interconnection: Tensor, dissipation: Tensor, input_gain: Tensor, energy_hessian: Tensor) -> Result<Self> {
        let nx = interconnection.rows();
        for (name, t) in [("J_s", &interconnection), ("R_s", &dissipation), ("Q", &energy_hessian)] {
            if t.shape() != (nx, nx) {
                return Err(Error::Config(format!("{name} must be {nx}x{nx}, got {:?}", t.shape())));
            }
        }
        if input_gain.rows() != nx {
            return Err(Error::Config(format!("F_s must have {nx} rows, got {}", input_gain.rows())));
        }
        let jt = interconnection.transpose();
        if interconnection.add(&jt)?.max_abs() > 1e-12 {
            return Err(Error::Config("J_s must be skew-symmetric".into()));
        }
        if dissipation.sub(&dissipation.transpose())?.max_abs() > 1e-12 {
            return Err(Error::Config("R_s must be symmetric".into()));
        }
        let min_eig = linalg::symmetric_eigenvalues(&dissipation)?[0];
        if min_eig < -1e-12 {
            return Err(Error::Config(format!("R_s must be positive semidefinite (eigenvalue {min_eig})")));
        }
        let input_pinv = pseudo_inverse(&input_gain)?;
        Ok(Self { interconnection, dissipation, input_gain, energy_hessian, input_pinv })
    }

    /// `H_s = ½ vᵀv`, `R_s = 0`, `J_s = [[0, I], [-I, 0]]`, `F_s = [0; I]`.
    pub fn double_integrator(m: usize) -> Self {
        let nx = 2 * m;
        let mut j = Tensor::zeros(nx, nx);
        let mut f = Tensor::zeros(nx, m);
        let mut q = Tensor::zeros(nx, nx);
        for k in 0..m {
            j.set(k, m + k, 1.0);
            j.set(m + k, k, -1.0);
            f.set(m + k, k, 1.0);
            q.set(m + k, m + k, 1.0);
        }
        Self::new(j, Tensor::zeros(nx, nx), f, q).expect("double integrator is a valid port-Hamiltonian model")
    }

    pub fn state_dim(&self) -> usize {
        self.interconnection.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.input_gain.cols()
    }

    pub fn interconnection(&self) -> &Tensor {
        &self.interconnection
    }

    pub fn dissipation(&self) -> &Tensor {
        &self.dissipation
    }

    pub fn input_gain(&self) -> &Tensor {
        &self.input_gain
    }

    pub fn input_pinv(&self) -> &Tensor {
        &self.input_pinv
    }

    pub fn energy_hessian(&self) -> &Tensor {
        &self.energy_hessian
    }

    /// `dH_s/dx_i = Q x_i`
    pub fn energy_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.energy_hessian.matmul(&Tensor::column(x))?.into_vec())
    }

    /// Open-loop `x_i'` for state `x` and input `u`.
    pub fn open_loop_rhs(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let drift = self
            .interconnection
            .sub(&self.dissipation)?
            .matmul(&self.energy_hessian)?
            .matmul(&Tensor::column(x))?;
        let forced = self.input_gain.matmul(&Tensor::column(u))?;
        Ok(drift.add(&forced)?.into_vec())
    }

    /// `(J_s - R_s) Q` as a constant on `tape`.
    fn drift_matrix<'t>(&self, tape: &'t Tape) -> Result<Var<'t>> {
        Ok(tape.leaf(self.interconnection.sub(&self.dissipation)?.matmul(&self.energy_hessian)?))
    }
}

/// `(FᵀF)⁻¹ Fᵀ`, rejecting matrices whose Gram matrix has an eigenvalue below 1e-12.
pub fn pseudo_inverse(f: &Tensor) -> Result<Tensor> {
    let ft = f.transpose();
    let gram = ft.matmul(f)?;
    let smallest = linalg::symmetric_eigenvalues(&gram)?.first().copied().unwrap_or(0.0);
    if smallest <= 1e-12 {
        return Err(TensorError::RankDeficient(smallest).into());
    }
    Ok(linalg::inverse(&gram)?.matmul(&ft)?)
}

/// IDA-PBC input of robot `i`:
/// `u_i = F†( Σ_j ([J]_ij - [R]_ij) dH/dx_j - (J_s - R_s) dH_s/dx_i )`.
///
/// The sum runs over every `j` that has a block in row `i` of either map, in
/// ascending order. `dh` maps robots to `dH/dx_j`.
pub fn ida_pbc_control<'t>(
    tape: &'t Tape,
    base: &PortHamiltonianBase,
    i: usize,
    j_blocks: &BlockMap<'t>,
    r_blocks: &BlockMap<'t>,
    dh: &BTreeMap<usize, Var<'t>>,
    x_i: Var<'t>,
) -> Result<Var<'t>> {
    let mut cols: Vec<usize> = j_blocks
        .range((i, 0)..=(i, usize::MAX))
        .chain(r_blocks.range((i, 0)..=(i, usize::MAX)))
        .map(|(&(_, j), _)| j)
        .collect();
    cols.sort_unstable();
    cols.dedup();

    let mut terms = Vec::with_capacity(cols.len());
    for j in cols {
        let g = *dh.get(&j).ok_or(Error::MissingBlock { what: "energy gradient", i, j })?;
        let block = match (j_blocks.get(&(i, j)), r_blocks.get(&(i, j))) {
            (Some(jb), Some(rb)) => jb.sub(*rb)?,
            (Some(jb), None) => *jb,
            (None, Some(rb)) => rb.neg(),
            (None, None) => unreachable!(),
        };
        terms.push(block.matmul(g)?);
    }
    let open = base.drift_matrix(tape)?.matmul(x_i)?;
    let shaped = if terms.is_empty() { open.neg() } else { tape.sum_all(&terms)?.sub(open)? };
    Ok(tape.leaf(base.input_pinv.clone()).matmul(shaped)?)
}

/// Desired closed loop `x' = (J - R) dH/dx`, evaluated blockwise.
pub fn closed_loop_rhs(
    n: usize,
    m: usize,
    j_blocks: &BTreeMap<(usize, usize), Tensor>,
    r_blocks: &BTreeMap<(usize, usize), Tensor>,
    dh: &[Vec<f64>],
) -> Result<JointState> {
    let nx = 2 * m;
    let mut out = JointState::zeros(n, m);
    for (&(i, j), b) in j_blocks.iter() {
        let g = dh.get(j).ok_or(Error::MissingBlock { what: "energy gradient", i, j })?;
        let t = b.matmul(&Tensor::column(g))?;
        for (o, v) in out.robot_mut(i).iter_mut().zip(t.data()) {
            *o += v;
        }
    }
    for (&(i, j), b) in r_blocks.iter() {
        let g = dh.get(j).ok_or(Error::MissingBlock { what: "energy gradient", i, j })?;
        let t = b.matmul(&Tensor::column(g))?;
        for (o, v) in out.robot_mut(i).iter_mut().zip(t.data()) {
            *o -= v;
        }
    }
    debug_assert_eq!(out.state_dim(), nx);
    Ok(out)
}

/// `x + dt * rhs(x)`
pub fn euler_step(rhs: impl FnOnce(&JointState) -> Result<JointState>, x: &JointState, dt: f64) -> Result<JointState> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    let d = rhs(x)?;
    if !d.is_finite() {
        return Err(TensorError::NonFinite("euler_step derivative").into());
    }
    Ok(x.add_scaled(&d, dt))
}

/// Classical fourth-order Runge-Kutta step.
pub fn rk4_step(mut rhs: impl FnMut(&JointState) -> Result<JointState>, x: &JointState, dt: f64) -> Result<JointState> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    let k1 = rhs(x)?;
    let k2 = rhs(&x.add_scaled(&k1, dt / 2.0))?;
    let k3 = rhs(&x.add_scaled(&k2, dt / 2.0))?;
    let k4 = rhs(&x.add_scaled(&k3, dt))?;
    let mut out = x.clone();
    for (idx, o) in out.data.iter_mut().enumerate() {
        *o += dt / 6.0 * (k1.data[idx] + 2.0 * k2.data[idx] + 2.0 * k3.data[idx] + k4.data[idx]);
    }
    if !out.is_finite() {
        return Err(TensorError::NonFinite("rk4_step").into());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

/// A team feedback law `u = π(x)`, returning `n * m` inputs robot by robot.
pub trait Controller {
    fn controls(&self, x: &JointState, graph: &CommGraph, goals: &JointState) -> Result<Vec<f64>>;
}

/// Open-loop double integrator rate `[v_i; u_i]` for every robot.
pub fn double_integrator_rate(x: &JointState, u: &[f64]) -> JointState {
    let m = x.m();
    let mut d = JointState::zeros(x.n(), m);
    for i in 0..x.n() {
        let row = d.robot_mut(i);
        row[..m].copy_from_slice(x.velocity(i));
        row[m..].copy_from_slice(&u[i * m..(i + 1) * m]);
    }
    d
}

/// Closed-loop rollout of double-integrator robots under `controller`,
/// rebuilding the graph from positions before every step. Returns the
/// `steps + 1` visited states.
pub fn simulate<C: Controller + ?Sized>(
    controller: &C,
    x0: &JointState,
    goals: &JointState,
    topology: Topology,
    steps: usize,
    dt: f64,
    integrator: Integrator,
) -> Result<Vec<JointState>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x0.clone());
    let mut x = x0.clone();
    for step in 0..steps {
        let graph = topology.build(&x.positions())?;
        let rhs = |s: &JointState| -> Result<JointState> {
            let u = controller.controls(s, &graph, goals)?;
            Ok(double_integrator_rate(s, &u))
        };
        let next = match integrator {
            Integrator::Euler => euler_step(rhs, &x, dt),
            Integrator::Rk4 => rk4_step(rhs, &x, dt),
        };
        x = match next {
            Ok(s) if s.is_finite() => s,
            Ok(_) | Err(Error::Tensor(TensorError::NonFinite(_))) => {
                return Err(Error::NonFiniteRollout { trajectory: 0, step: step + 1 })
            }
            Err(e) => return Err(e),
        };
        out.push(x.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_integrator_drift_and_input() {
        let base = PortHamiltonianBase::double_integrator(2);
        let x = [0.3, -0.2, 1.0, 2.0];
        assert_eq!(base.open_loop_rhs(&x, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0, 0.0, 0.0]);
        let rest = [0.0, 0.0, 0.0, 0.0];
        assert_eq!(base.open_loop_rhs(&rest, &[3.0, -1.0]).unwrap(), vec![0.0, 0.0, 3.0, -1.0]);
    }

    #[test]
    fn symplectic_block_product() {
        // J_s dH_s/dx = [[0, I], [-I, 0]] [0; v] = [v; 0]
        let base = PortHamiltonianBase::double_integrator(2);
        for x in [[1.0, 2.0, 3.0, 4.0], [-0.5, 0.25, 7.0, -2.0]] {
            let g = base.energy_gradient(&x).unwrap();
            let jg = base.interconnection().matmul(&Tensor::column(&g)).unwrap();
            assert_eq!(jg.data(), &[x[2], x[3], 0.0, 0.0]);
        }
    }

    #[test]
    fn pseudo_inverse_selects_velocity_rows() {
        let base = PortHamiltonianBase::double_integrator(2);
        let expected = Tensor::from_rows(&[&[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(base.input_pinv(), &expected);
        assert_eq!(pseudo_inverse(&Tensor::identity(3)).unwrap(), Tensor::identity(3));
        let rank_one = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 4.0], &[0.0, 0.0]]).unwrap();
        assert!(pseudo_inverse(&rank_one).is_err());
    }

    #[test]
    fn base_validation_rejects_non_skew_interconnection() {
        let bad = Tensor::identity(2);
        let r = PortHamiltonianBase::new(bad, Tensor::zeros(2, 2), Tensor::identity(2), Tensor::identity(2));
        assert!(r.is_err());
    }

    #[test]
    fn euler_on_constant_and_linear_fields() {
        let x = JointState::new(1, vec![0.5, -1.0]).unwrap();
        let same = euler_step(|s| Ok(JointState::zeros(s.n(), 1)), &x, 0.1).unwrap();
        assert_eq!(same, x);
        assert!(euler_step(|s| Ok(s.clone()), &x, 0.0).is_err());

        let moving = JointState::new(2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let next = euler_step(|s| Ok(double_integrator_rate(s, &[0.0, 0.0])), &moving, 0.04).unwrap();
        assert_eq!(next.position(0), &[0.04, 0.0]);

        let mut y = JointState::new(1, vec![1.0, 1.0]).unwrap();
        for _ in 0..100 {
            y = euler_step(|s| Ok(JointState::new(1, s.as_slice().iter().map(|v| -v).collect()).unwrap()), &y, 0.01).unwrap();
        }
        assert!((y.as_slice()[0] - libm::exp(-1.0)).abs() < 1e-2);
    }

    #[test]
    fn euler_rejects_non_finite_rates() {
        let x = JointState::new(1, vec![0.0, 0.0]).unwrap();
        let r = euler_step(|_| JointState::new(1, vec![f64::NAN, 0.0]), &x, 0.1);
        assert!(matches!(r, Err(Error::Tensor(TensorError::NonFinite(_)))));
    }

    #[test]
    fn rk4_matches_exponential() {
        let mut y = JointState::new(1, vec![1.0, 1.0]).unwrap();
        for _ in 0..10 {
            y = rk4_step(|s| Ok(JointState::new(1, s.as_slice().iter().map(|v| -v).collect()).unwrap()), &y, 0.1).unwrap();
        }
        assert!((y.as_slice()[0] - libm::exp(-1.0)).abs() < 1e-6);
    }

    #[test]
    fn zero_blocks_at_rest_give_zero_input() {
        let tape = Tape::new();
        let base = PortHamiltonianBase::double_integrator(2);
        let x = tape.column(&[0.4, -0.3, 0.0, 0.0]);
        let zero = tape.leaf(Tensor::zeros(4, 4));
        let mut jb = BlockMap::new();
        jb.insert((0, 0), zero);
        let rb = jb.clone();
        let mut dh = BTreeMap::new();
        dh.insert(0, tape.column(&[0.0; 4]));
        let u = ida_pbc_control(&tape, &base, 0, &jb, &rb, &dh, x).unwrap();
        assert_eq!(u.value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn missing_gradient_is_reported() {
        let tape = Tape::new();
        let base = PortHamiltonianBase::double_integrator(1);
        let mut jb = BlockMap::new();
        jb.insert((0, 1), tape.leaf(Tensor::zeros(2, 2)));
        let r = ida_pbc_control(&tape, &base, 0, &jb, &BlockMap::new(), &BTreeMap::new(), tape.column(&[0.0, 0.0]));
        assert!(matches!(r, Err(Error::MissingBlock { i: 0, j: 1, .. })));
    }

    #[test]
    fn matched_open_loop_gives_zero_input() {
        // J_θ = J_s, R_θ = 0, H_θ = H_s  =>  u = 0
        let tape = Tape::new();
        let base = PortHamiltonianBase::double_integrator(2);
        for x in [[0.1, 0.2, -0.7, 1.3], [2.0, -1.0, 0.5, 0.25]] {
            let xv = tape.column(&x);
            let mut jb = BlockMap::new();
            jb.insert((0, 0), tape.leaf(base.interconnection().clone()));
            let mut dh = BTreeMap::new();
            dh.insert(0, tape.column(&base.energy_gradient(&x).unwrap()));
            let u = ida_pbc_control(&tape, &base, 0, &jb, &BlockMap::new(), &dh, xv).unwrap();
            assert_eq!(u.value().data(), &[0.0, 0.0]);
        }
    }
}
