//! Self-attention port-Hamiltonian policy.
//!
//! Four attention heads, shared by every robot, read a robot's neighbourhood
//! and produce the blocks `[J]_ij`, `[R]_ij` and the local energy `H^(i)`.
//! Blocks are assembled so that `J` is skew and `R` keeps the dissipative
//! structure, then fed to the IDA-PBC law.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::dynamics::{ida_pbc_control, BlockMap, JointState, PortHamiltonianBase};
use crate::error::{Error, Result};
use crate::graph::CommGraph;
use crate::math::sqrt;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Swish,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Swish => "swish",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "sigmoid" => Some(Activation::Sigmoid),
            "swish" => Some(Activation::Swish),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Sigmoid => x.sigmoid(),
            Activation::Swish => x.swish(),
            Activation::Identity => x,
        }
    }
}

/// Sizes of one attention layer: `A_Q, A_K, A_V` are `r x h`, `A_Z` is `d x r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub h: usize,
    pub r: usize,
    pub d: usize,
}

impl LayerShape {
    pub const fn new(h: usize, r: usize, d: usize) -> Self {
        Self { h, r, d }
    }

    pub fn param_count(&self) -> usize {
        3 * self.r * self.h + self.d * self.r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub layers: Vec<LayerShape>,
    /// Applied to `Q`, `K` and `V`.
    pub beta: Activation,
    /// Applied to the attention output.
    pub gamma: Activation,
    /// Applied after `A_Z`.
    pub alpha: Activation,
}

impl HeadConfig {
    /// Head with sigmoid `β` and swish `γ`, `α`.
    pub fn new(layers: &[(usize, usize, usize)]) -> Self {
        Self {
            layers: layers.iter().map(|&(h, r, d)| LayerShape::new(h, r, d)).collect(),
            beta: Activation::Sigmoid,
            gamma: Activation::Swish,
            alpha: Activation::Swish,
        }
    }

    pub fn validate(&self, head: &'static str) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config(format!("head {head} needs at least one layer")));
        }
        for (w, pair) in self.layers.windows(2).enumerate() {
            if pair[1].h != pair[0].d {
                return Err(Error::LayerChain { head, layer: w + 1, expected: pair[0].d, found: pair[1].h });
            }
        }
        if self.layers.iter().any(|l| l.h == 0 || l.r == 0 || l.d == 0) {
            return Err(Error::Config(format!("head {head} has a zero-sized layer")));
        }
        Ok(())
    }

    pub fn input_rows(&self) -> usize {
        self.layers[0].h
    }

    pub fn output_rows(&self) -> usize {
        self.layers[self.layers.len() - 1].d
    }

    /// `Σ_w 3 r_w h_w + d_w r_w`, rejecting broken layer chains.
    pub fn param_count(&self, head: &'static str) -> Result<usize> {
        self.validate(head)?;
        Ok(self.layers.iter().map(LayerShape::param_count).sum())
    }
}

/// How the dissipation and interconnection blocks are built from head outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Structure {
    /// `R_ij = −(Z_ij + Z_ji)`, `J_ij = Z_ij − Z_ji`.
    #[default]
    Verbatim,
    /// Sigmoid-gated Laplacian `R` plus a softplus diagonal, `J_ij = Z_ij − Z_jiᵀ`.
    StrictPsd,
}

impl Structure {
    pub fn name(self) -> &'static str {
        match self {
            Structure::Verbatim => "verbatim",
            Structure::StrictPsd => "strict_psd",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "verbatim" => Some(Structure::Verbatim),
            "strict_psd" => Some(Structure::StrictPsd),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum HeadKind {
    R,
    J,
    M,
    U,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::R => "R",
            HeadKind::J => "J",
            HeadKind::M => "M",
            HeadKind::U => "U",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    /// Per-robot state dimension `n_x`.
    pub state_dim: usize,
    pub r_head: HeadConfig,
    pub j_head: HeadConfig,
    /// Energy head; with no `u_head` its extra output rows carry the potential.
    pub m_head: HeadConfig,
    pub u_head: Option<HeadConfig>,
    pub structure: Structure,
    pub hops: usize,
}

impl PolicyConfig {
    /// Head sizes of the reference configuration (2208 parameters for `m = 2`).
    pub fn appendix(m: usize) -> Self {
        let nx = 2 * m;
        Self {
            state_dim: nx,
            r_head: HeadConfig::new(&[(nx, 8, 8), (8, 8, 8), (8, 8, nx * nx)]),
            j_head: HeadConfig::new(&[(nx, 8, 8), (8, 8, 8), (8, 8, 1)]),
            m_head: HeadConfig::new(&[(nx + 2, 8, 8), (8, 8, 8), (8, 8, 25)]),
            u_head: None,
            structure: Structure::Verbatim,
            hops: 1,
        }
    }

    /// Separate kinetic (`M`) and potential (`U`) heads.
    pub fn split(m: usize) -> Self {
        let nx = 2 * m;
        Self {
            m_head: HeadConfig::new(&[(nx + 2, 8, 8), (8, 8, 8), (8, 8, nx + 2)]),
            u_head: Some(HeadConfig::new(&[(nx + 2, 8, 8), (8, 8, 8), (8, 8, 1)])),
            ..Self::appendix(m)
        }
    }

    pub fn heads(&self) -> Vec<(HeadKind, &HeadConfig)> {
        let mut out = vec![(HeadKind::R, &self.r_head), (HeadKind::J, &self.j_head), (HeadKind::M, &self.m_head)];
        if let Some(u) = &self.u_head {
            out.push((HeadKind::U, u));
        }
        out
    }

    /// Rows of the energy-head input: the state offset plus two distance features.
    pub fn energy_input_rows(&self) -> usize {
        self.state_dim + 2
    }

    /// Whether `J` is the scaled symplectic form (one output per robot).
    pub fn symplectic_j(&self) -> bool {
        self.j_head.output_rows() == 1
    }

    pub fn validate(&self) -> Result<()> {
        let nx = self.state_dim;
        if nx == 0 || !nx.is_multiple_of(2) {
            return Err(Error::Config(format!("state dimension must be even and positive, got {nx}")));
        }
        let expect = |what: &str, found: usize, want: &str| -> Result<()> {
            Err(Error::Config(format!("{what} is {found}, expected {want}")))
        };
        for (kind, head) in self.heads() {
            head.validate(kind.name())?;
        }
        if self.r_head.input_rows() != nx {
            return expect("R head input rows", self.r_head.input_rows(), "n_x");
        }
        if self.r_head.output_rows() != nx * nx {
            return expect("R head output rows", self.r_head.output_rows(), "n_x^2");
        }
        if self.j_head.input_rows() != nx {
            return expect("J head input rows", self.j_head.input_rows(), "n_x");
        }
        let jd = self.j_head.output_rows();
        if jd != 1 && jd != nx * nx {
            return expect("J head output rows", jd, "1 or n_x^2");
        }
        let eh = self.energy_input_rows();
        if self.m_head.input_rows() != eh {
            return expect("M head input rows", self.m_head.input_rows(), "n_x + 2");
        }
        match &self.u_head {
            None if self.m_head.output_rows() <= eh => {
                expect("joint energy head output rows", self.m_head.output_rows(), "more than n_x + 2")
            }
            Some(_) if self.m_head.output_rows() != eh => {
                expect("M head output rows", self.m_head.output_rows(), "n_x + 2")
            }
            Some(u) if u.input_rows() != eh => expect("U head input rows", u.input_rows(), "n_x + 2"),
            _ => Ok(()),
        }
    }

    pub fn param_count(&self) -> Result<usize> {
        self.heads().iter().map(|(k, h)| h.param_count(k.name())).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub z: Tensor,
}

impl LayerParams {
    fn zeros(s: &LayerShape) -> Self {
        Self {
            q: Tensor::zeros(s.r, s.h),
            k: Tensor::zeros(s.r, s.h),
            v: Tensor::zeros(s.r, s.h),
            z: Tensor::zeros(s.d, s.r),
        }
    }

    fn matrices(&self) -> [&Tensor; 4] {
        [&self.q, &self.k, &self.v, &self.z]
    }

    fn matrices_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.z]
    }
}

/// Learnable parameters `θ`, heads in the order R, J, M, U.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub heads: Vec<Vec<LayerParams>>,
}

impl PolicyParams {
    pub fn zeros(config: &PolicyConfig) -> Result<Self> {
        config.validate()?;
        let heads = config.heads().iter().map(|(_, h)| h.layers.iter().map(LayerParams::zeros).collect()).collect();
        Ok(Self { config: config.clone(), heads })
    }

    pub fn param_count(&self) -> usize {
        self.heads.iter().flatten().map(|l| l.matrices().iter().map(|m| m.len()).sum::<usize>()).sum()
    }

    /// Flat copy: heads R, J, M, U; per layer Q, K, V, Z; each row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.heads.iter().flatten() {
            for m in layer.matrices() {
                out.extend_from_slice(m.data());
            }
        }
        out
    }

    pub fn from_flat(config: &PolicyConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if flat.len() != p.param_count() {
            return Err(Error::Config(format!("expected {} parameters, got {}", p.param_count(), flat.len())));
        }
        let mut at = 0;
        for layer in p.heads.iter_mut().flatten() {
            for m in layer.matrices_mut() {
                let len = m.len();
                m.data_mut().copy_from_slice(&flat[at..at + len]);
                at += len;
            }
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.heads.iter().flatten().all(|l| l.matrices().iter().all(|m| m.is_finite()))
    }

    /// Shapes of the parameter matrices in flat order.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.heads.iter().flatten().flat_map(|l| l.matrices().map(|m| m.shape())).collect()
    }

    /// Copies every matrix onto `tape` as a leaf.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        let leaves = self.heads.iter().flatten().flat_map(|l| l.matrices()).map(|m| tape.leaf(m.clone())).collect();
        ParamVars::from_leaves(&self.config, tape, leaves).expect("shapes follow the config")
    }
}

/// Entries uniform in `±1/√h_w` from a seeded stream.
pub fn init_params(config: &PolicyConfig, seed: u64) -> Result<PolicyParams> {
    let mut p = PolicyParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in p.heads.iter_mut().flatten() {
        let bound = 1.0 / sqrt(layer.q.cols() as f64);
        for m in layer.matrices_mut() {
            for v in m.data_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
        }
    }
    Ok(p)
}

/// Parameters of one head on a tape, `[A_Q, A_K, A_V, A_Z]` per layer.
pub type HeadVars<'t> = Vec<[Var<'t>; 4]>;

/// Parameters and shared constants recorded on one tape.
pub struct ParamVars<'t> {
    pub config: PolicyConfig,
    pub heads: Vec<HeadVars<'t>>,
    identity: Var<'t>,
    symplectic: Var<'t>,
    pad: Var<'t>,
}

impl<'t> ParamVars<'t> {
    /// Wraps variables given in flat order (see [`PolicyParams::to_flat`]).
    pub fn from_leaves(config: &PolicyConfig, tape: &'t Tape, leaves: Vec<Var<'t>>) -> Result<Self> {
        let mut it = leaves.into_iter();
        let mut heads = Vec::new();
        for (kind, head) in config.heads() {
            let mut layers = Vec::new();
            for s in &head.layers {
                let mut take = |rows: usize, cols: usize| -> Result<Var<'t>> {
                    let v = it.next().ok_or(Error::Config(format!("too few parameter matrices for head {}", kind.name())))?;
                    if v.shape() != (rows, cols) {
                        return Err(Error::Config(format!("head {} matrix has shape {:?}", kind.name(), v.shape())));
                    }
                    Ok(v)
                };
                layers.push([take(s.r, s.h)?, take(s.r, s.h)?, take(s.r, s.h)?, take(s.d, s.r)?]);
            }
            heads.push(layers);
        }
        if it.next().is_some() {
            return Err(Error::Config("too many parameter matrices".into()));
        }
        let nx = config.state_dim;
        let m = nx / 2;
        let mut s = Tensor::zeros(nx, nx);
        for k in 0..m {
            s.set(k, m + k, 1.0);
            s.set(m + k, k, -1.0);
        }
        Ok(Self {
            config: config.clone(),
            heads,
            identity: tape.leaf(Tensor::identity(nx)),
            symplectic: tape.leaf(s),
            pad: tape.leaf(Tensor::zeros(2, 1)),
        })
    }

    /// All parameter variables in flat order.
    pub fn flat(&self) -> Vec<Var<'t>> {
        self.heads.iter().flatten().flat_map(|l| l.iter().copied()).collect()
    }

    fn head(&self, kind: HeadKind) -> &HeadVars<'t> {
        &self.heads[kind as usize]
    }
}

/// One attention head applied to the `h_1 x C` input.
pub fn sa_forward<'t>(input: Var<'t>, cfg: &HeadConfig, layers: &[[Var<'t>; 4]]) -> Result<Var<'t>> {
    let (rows, cols) = input.shape();
    if rows != cfg.input_rows() || layers.len() != cfg.layers.len() {
        return Err(Error::Config(format!("head expects {} input rows, got {rows}", cfg.input_rows())));
    }
    let inv_sqrt_c = 1.0 / sqrt(cols as f64);
    let mut x = input;
    for [aq, ak, av, az] in layers {
        let q = cfg.beta.apply(aq.matmul(x)?);
        let k = cfg.beta.apply(ak.matmul(x)?);
        let v = cfg.beta.apply(av.matmul(x)?);
        let scores = q.matmul(k.transpose())?.scale(inv_sqrt_c);
        let y = cfg.gamma.apply(scores.softmax_rows().matmul(v)?);
        x = cfg.alpha.apply(az.matmul(y)?);
    }
    Ok(x)
}

/// Attention input for the R and J heads: `[x_i − x̄_i, x_i − x_j1, ...]`.
pub fn rj_input<'t>(tape: &'t Tape, x_self: Var<'t>, goal: Var<'t>, neighbors: &[Var<'t>]) -> Result<Var<'t>> {
    let mut cols = Vec::with_capacity(neighbors.len() + 1);
    cols.push(x_self.sub(goal)?);
    for xj in neighbors {
        cols.push(x_self.sub(*xj)?);
    }
    Ok(tape.concat_cols(&cols)?)
}

/// Energy-head input: `[x_i − x̄_i; 0; 0]` then `[Δx_ij; ‖Δx_ij‖^¼; ‖Δx_ij‖]`.
pub fn energy_input<'t>(tape: &'t Tape, pv: &ParamVars<'t>, x_self: Var<'t>, goal: Var<'t>, neighbors: &[Var<'t>]) -> Result<Var<'t>> {
    let mut cols = Vec::with_capacity(neighbors.len() + 1);
    cols.push(tape.concat_rows(&[x_self.sub(goal)?, pv.pad])?);
    for xj in neighbors {
        let d = x_self.sub(*xj)?;
        let dist = d.l2_norm();
        cols.push(tape.concat_rows(&[d, dist.pow(0.25)?, dist])?);
    }
    Ok(tape.concat_cols(&cols)?)
}

/// `H^(i)` from an energy-head input.
pub fn hamiltonian_i<'t>(pv: &ParamVars<'t>, input: Var<'t>) -> Result<Var<'t>> {
    let rows = pv.config.energy_input_rows();
    let cols = input.shape().1;
    let z = sa_forward(input, &pv.config.m_head, pv.head(HeadKind::M))?;
    let weights = z.slice(0, 0, rows, cols)?;
    let kinetic = weights.mul(input)?.mul(input)?.sum();
    let potential = match &pv.config.u_head {
        None => z.slice(rows, 0, z.shape().0 - rows, cols)?.sum(),
        Some(u) => sa_forward(input, u, pv.head(HeadKind::U))?.sum(),
    };
    Ok(kinetic.add(potential)?)
}

/// Everything robot `i` computes from its own neighbourhood (round 1).
pub struct LocalTerms<'t> {
    pub robot: usize,
    /// Neighbours in ascending order, without `i`.
    pub neighbors: Vec<usize>,
    /// `Z^R_ij` for `j = i` and every neighbour.
    pub z_r: BTreeMap<usize, Var<'t>>,
    /// `Z^J_ij`; only `j = i` (a `1 x 1` gain) in symplectic mode.
    pub z_j: BTreeMap<usize, Var<'t>>,
    pub energy: Var<'t>,
    /// `∂H^(i)/∂x_j` for `j = i` and every neighbour.
    pub energy_grads: BTreeMap<usize, Var<'t>>,
}

/// Round-1 computation of robot `i` given its state, goal and neighbour states
/// (ascending robot id, self excluded).
pub fn local_terms<'t>(
    tape: &'t Tape,
    pv: &ParamVars<'t>,
    i: usize,
    x_self: Var<'t>,
    goal: Var<'t>,
    neighbors: &[(usize, Var<'t>)],
) -> Result<LocalTerms<'t>> {
    let nx = pv.config.state_dim;
    let ids: Vec<usize> = neighbors.iter().map(|(j, _)| *j).collect();
    let states: Vec<Var<'t>> = neighbors.iter().map(|(_, v)| *v).collect();
    let cols: Vec<usize> = core::iter::once(i).chain(ids.iter().copied()).collect();

    let rj = rj_input(tape, x_self, goal, &states)?;
    let out_r = sa_forward(rj, &pv.config.r_head, pv.head(HeadKind::R))?;
    let out_j = sa_forward(rj, &pv.config.j_head, pv.head(HeadKind::J))?;
    let mut z_r = BTreeMap::new();
    let mut z_j = BTreeMap::new();
    for (c, &j) in cols.iter().enumerate() {
        z_r.insert(j, out_r.col(c)?.vec_inv(nx, nx)?);
        if pv.config.symplectic_j() {
            if c == 0 {
                z_j.insert(j, out_j.slice(0, 0, 1, 1)?);
            }
        } else {
            z_j.insert(j, out_j.col(c)?.vec_inv(nx, nx)?);
        }
    }

    let input = energy_input(tape, pv, x_self, goal, &states)?;
    let energy = hamiltonian_i(pv, input)?;
    let wrt: Vec<Var<'t>> = core::iter::once(x_self).chain(states.iter().copied()).collect();
    let grads = tape.grad(energy, &wrt)?;
    let energy_grads = cols.iter().copied().zip(grads).collect();
    Ok(LocalTerms { robot: i, neighbors: ids, z_r, z_j, energy, energy_grads })
}

/// What robot `i` receives from neighbour `j` in round 2.
#[derive(Clone, Copy)]
pub struct Reciprocal<'t> {
    /// `∂H^(j)/∂x_i`
    pub energy_grad: Var<'t>,
    /// `Z^J_ji`, absent in symplectic mode.
    pub z_j: Option<Var<'t>>,
    /// `Z^R_ji`
    pub z_r: Var<'t>,
}

/// Row `i` of `J` and `R` and the team energy gradient `∂H/∂x_i` (round 2).
pub struct RobotRow<'t> {
    pub j_blocks: BlockMap<'t>,
    pub r_blocks: BlockMap<'t>,
    pub energy_grad: Var<'t>,
}

fn gate<'t>(z: Var<'t>, nx: usize) -> Result<Var<'t>> {
    Ok(z.diag_extract()?.sum().scale(1.0 / nx as f64).sigmoid())
}

pub fn assemble_row<'t>(pv: &ParamVars<'t>, own: &LocalTerms<'t>, recv: &BTreeMap<usize, Reciprocal<'t>>) -> Result<RobotRow<'t>> {
    let i = own.robot;
    let nx = pv.config.state_dim;
    let structure = pv.config.structure;
    let tape = own.energy.tape();
    let missing = |what, j| Error::MissingBlock { what, i, j };
    let get = |j: usize| recv.get(&j).ok_or_else(|| missing("reciprocal message", j));
    let own_block = |map: &BTreeMap<usize, Var<'t>>, what, j| map.get(&j).copied().ok_or_else(|| missing(what, j));

    // ∂H/∂x_i = Σ_j ∂H^(j)/∂x_i over {i} ∪ neighbours, ascending
    let mut terms = Vec::with_capacity(own.neighbors.len() + 1);
    let mut order: Vec<usize> = own.neighbors.clone();
    order.push(i);
    order.sort_unstable();
    for &j in &order {
        terms.push(if j == i { own_block(&own.energy_grads, "energy gradient", i)? } else { get(j)?.energy_grad });
    }
    let energy_grad = tape.sum_all(&terms)?;

    let mut r_blocks = BlockMap::new();
    let z_ii = own_block(&own.z_r, "Z^R", i)?;
    match structure {
        Structure::Verbatim => {
            let mut diag = z_ii;
            for &j in &own.neighbors {
                let s = own_block(&own.z_r, "Z^R", j)?.add(get(j)?.z_r)?;
                r_blocks.insert((i, j), s.neg());
                diag = diag.add(s)?;
            }
            r_blocks.insert((i, i), diag);
        }
        Structure::StrictPsd => {
            let mut diag = z_ii.diag_extract()?.softplus().diag_from_vec()?;
            for &j in &own.neighbors {
                let w = gate(own_block(&own.z_r, "Z^R", j)?, nx)?.add(gate(get(j)?.z_r, nx)?)?;
                let block = pv.identity.scale_by(w)?;
                r_blocks.insert((i, j), block.neg());
                diag = diag.add(block)?;
            }
            r_blocks.insert((i, i), diag);
        }
    }

    let mut j_blocks = BlockMap::new();
    if pv.config.symplectic_j() {
        let z = own_block(&own.z_j, "Z^J", i)?;
        j_blocks.insert((i, i), pv.symplectic.scale_by(z)?);
    } else {
        for &j in &order {
            let zij = own_block(&own.z_j, "Z^J", j)?;
            let zji = if j == i { zij } else { get(j)?.z_j.ok_or_else(|| missing("Z^J", j))? };
            let block = match structure {
                Structure::Verbatim => zij.sub(zji)?,
                Structure::StrictPsd => zij.sub(zji.transpose())?,
            };
            j_blocks.insert((i, j), block);
        }
    }
    Ok(RobotRow { j_blocks, r_blocks, energy_grad })
}

/// Neighbour lists (ascending, self excluded) for the policy's hop count.
pub fn neighborhoods(graph: &CommGraph, hops: usize) -> Result<Vec<Vec<usize>>> {
    (0..graph.len())
        .map(|i| Ok(graph.khop_neighbors(i, hops)?.into_iter().filter(|&j| j != i).collect()))
        .collect()
}

/// Every per-robot quantity of a centralised evaluation, all on one tape.
pub struct TeamEvaluation<'t> {
    pub terms: Vec<LocalTerms<'t>>,
    pub rows: Vec<RobotRow<'t>>,
    /// `u_i` as `n_u x 1` columns.
    pub controls: Vec<Var<'t>>,
}

/// Centralised evaluation of the whole team from per-robot state variables.
pub fn evaluate_team<'t>(
    tape: &'t Tape,
    pv: &ParamVars<'t>,
    base: &PortHamiltonianBase,
    states: &[Var<'t>],
    goals: &[Var<'t>],
    graph: &CommGraph,
) -> Result<TeamEvaluation<'t>> {
    let n = states.len();
    if graph.len() != n || goals.len() != n {
        return Err(Error::Config(format!("team of {n} robots with {} goals and a graph on {}", goals.len(), graph.len())));
    }
    if base.state_dim() != pv.config.state_dim {
        return Err(Error::Config("base and policy state dimensions differ".into()));
    }
    let hoods = neighborhoods(graph, pv.config.hops)?;
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let nb: Vec<(usize, Var<'t>)> = hoods[i].iter().map(|&j| (j, states[j])).collect();
        terms.push(local_terms(tape, pv, i, states[i], goals[i], &nb)?);
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut recv = BTreeMap::new();
        for &j in &terms[i].neighbors {
            let tj = &terms[j];
            let energy_grad = *tj.energy_grads.get(&i).ok_or(Error::MissingBlock { what: "energy gradient", i: j, j: i })?;
            let z_r = *tj.z_r.get(&i).ok_or(Error::MissingBlock { what: "Z^R", i: j, j: i })?;
            recv.insert(j, Reciprocal { energy_grad, z_j: tj.z_j.get(&i).copied(), z_r });
        }
        rows.push(assemble_row(pv, &terms[i], &recv)?);
    }
    let mut controls = Vec::with_capacity(n);
    for i in 0..n {
        let mut dh = BTreeMap::new();
        dh.insert(i, rows[i].energy_grad);
        for &j in &terms[i].neighbors {
            dh.insert(j, rows[j].energy_grad);
        }
        controls.push(ida_pbc_control(tape, base, i, &rows[i].j_blocks, &rows[i].r_blocks, &dh, states[i])?);
    }
    Ok(TeamEvaluation { terms, rows, controls })
}

fn robot_leaves<'t>(tape: &'t Tape, x: &JointState) -> Vec<Var<'t>> {
    (0..x.n()).map(|i| tape.column(x.robot(i))).collect()
}

fn check_shapes(x: &JointState, goals: &JointState, params: &PolicyParams) -> Result<()> {
    if x.state_dim() != params.config.state_dim || goals.n() != x.n() || goals.m() != x.m() {
        return Err(Error::Config(format!(
            "state of {} robots with n_x = {} does not fit goals of {} robots or a policy with n_x = {}",
            x.n(),
            x.state_dim(),
            goals.n(),
            params.config.state_dim
        )));
    }
    Ok(())
}

/// Controls of every robot, `n * n_u` values robot by robot.
pub fn policy_control(
    x: &JointState,
    graph: &CommGraph,
    params: &PolicyParams,
    goals: &JointState,
    base: &PortHamiltonianBase,
) -> Result<Vec<f64>> {
    check_shapes(x, goals, params)?;
    let tape = Tape::new();
    let pv = params.on_tape(&tape);
    let states = robot_leaves(&tape, x);
    let goal_vars = robot_leaves(&tape, goals);
    let team = evaluate_team(&tape, &pv, base, &states, &goal_vars, graph)?;
    let mut out = Vec::with_capacity(x.n() * base.input_dim());
    for u in &team.controls {
        out.extend(u.value().into_vec());
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(crate::error::TensorError::NonFinite("policy_control").into());
    }
    Ok(out)
}

/// Energy gradients of a centralised evaluation.
pub struct EnergyGradients {
    /// `∂H/∂x_i` per robot.
    pub total: Vec<Vec<f64>>,
    /// `∂H^(i)/∂x_j` keyed by `(i, j)`.
    pub local: BTreeMap<(usize, usize), Vec<f64>>,
    /// `H^(i)` per robot.
    pub energies: Vec<f64>,
}

pub fn hamiltonian_gradients(x: &JointState, graph: &CommGraph, params: &PolicyParams, goals: &JointState) -> Result<EnergyGradients> {
    check_shapes(x, goals, params)?;
    let tape = Tape::new();
    let pv = params.on_tape(&tape);
    let states = robot_leaves(&tape, x);
    let goal_vars = robot_leaves(&tape, goals);
    let base = PortHamiltonianBase::double_integrator(params.config.state_dim / 2);
    let team = evaluate_team(&tape, &pv, &base, &states, &goal_vars, graph)?;
    let mut local = BTreeMap::new();
    for t in &team.terms {
        for (&j, g) in &t.energy_grads {
            local.insert((t.robot, j), g.value().into_vec());
        }
    }
    Ok(EnergyGradients {
        total: team.rows.iter().map(|r| r.energy_grad.value().into_vec()).collect(),
        local,
        energies: team.terms.iter().map(|t| t.energy.item()).collect(),
    })
}

/// Dense team matrices `J`, `R` (both `n n_x x n n_x`) and `∂H/∂x`.
pub struct GlobalSystem {
    pub j: Tensor,
    pub r: Tensor,
    pub energy_grad: Vec<f64>,
    pub energy: f64,
}

pub fn assemble_global(x: &JointState, graph: &CommGraph, params: &PolicyParams, goals: &JointState) -> Result<GlobalSystem> {
    check_shapes(x, goals, params)?;
    let tape = Tape::new();
    let pv = params.on_tape(&tape);
    let states = robot_leaves(&tape, x);
    let goal_vars = robot_leaves(&tape, goals);
    let base = PortHamiltonianBase::double_integrator(params.config.state_dim / 2);
    let team = evaluate_team(&tape, &pv, &base, &states, &goal_vars, graph)?;
    let (n, nx) = (x.n(), params.config.state_dim);
    let mut j = Tensor::zeros(n * nx, n * nx);
    let mut r = Tensor::zeros(n * nx, n * nx);
    for row in &team.rows {
        for (dst, blocks) in [(&mut j, &row.j_blocks), (&mut r, &row.r_blocks)] {
            for (&(bi, bj), b) in blocks {
                let v = b.value();
                for a in 0..nx {
                    for c in 0..nx {
                        dst.set(bi * nx + a, bj * nx + c, v.get(a, c));
                    }
                }
            }
        }
    }
    Ok(GlobalSystem {
        j,
        r,
        energy_grad: team.rows.iter().flat_map(|r| r.energy_grad.value().into_vec()).collect(),
        energy: team.terms.iter().map(|t| t.energy.item()).sum(),
    })
}

/// Value-level view of a robot's head inputs, for inspection and tests.
pub fn build_inputs(i: usize, x: &JointState, graph: &CommGraph, goal: &[f64], params: &PolicyParams) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let pv = params.on_tape(&tape);
    let nb: Vec<Var<'_>> = neighborhoods(graph, params.config.hops)?[i].iter().map(|&j| tape.column(x.robot(j))).collect();
    let xi = tape.column(x.robot(i));
    let g = tape.column(goal);
    Ok((rj_input(&tape, xi, g, &nb)?.value(), energy_input(&tape, &pv, xi, g, &nb)?.value()))
}

/// Human-readable one-line summary of the head sizes.
pub fn describe(config: &PolicyConfig) -> String {
    let mut s = String::new();
    for (kind, head) in config.heads() {
        let sizes: Vec<String> = head.layers.iter().map(|l| format!("({},{},{})", l.h, l.r, l.d)).collect();
        s.push_str(&format!("{}: {} ", kind.name(), sizes.join(" ")));
    }
    s.push_str(&format!("structure={} hops={}", config.structure.name(), config.hops));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;

    fn random_state(n: usize, seed: u64, scale: f64) -> JointState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        JointState::new(2, (0..4 * n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn appendix_parameter_count() {
        let cfg = PolicyConfig::appendix(2);
        assert_eq!(cfg.r_head.param_count("R").unwrap(), 736);
        assert_eq!(cfg.j_head.param_count("J").unwrap(), 616);
        assert_eq!(cfg.m_head.param_count("M").unwrap(), 856);
        assert_eq!(cfg.param_count().unwrap(), 2208);
        assert_eq!(init_params(&cfg, 0).unwrap().param_count(), 2208);
        assert_eq!(HeadConfig::new(&[(2, 3, 4)]).param_count("x").unwrap(), 30);
    }

    #[test]
    fn broken_layer_chain_is_rejected() {
        let h = HeadConfig::new(&[(4, 8, 8), (6, 8, 8)]);
        assert!(matches!(h.param_count("R"), Err(Error::LayerChain { layer: 1, expected: 8, found: 6, .. })));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = PolicyConfig::appendix(2);
        let a = init_params(&cfg, 11).unwrap();
        assert_eq!(a, init_params(&cfg, 11).unwrap());
        assert_ne!(a, init_params(&cfg, 12).unwrap());
        for (head, (_, hc)) in a.heads.iter().zip(cfg.heads()) {
            for (layer, shape) in head.iter().zip(&hc.layers) {
                let bound = 1.0 / libm::sqrt(shape.h as f64);
                assert!(layer.matrices().iter().all(|m| m.max_abs() <= bound));
            }
        }
    }

    #[test]
    fn flat_round_trip() {
        let cfg = PolicyConfig::split(2);
        let p = init_params(&cfg, 3).unwrap();
        assert_eq!(PolicyParams::from_flat(&cfg, &p.to_flat()).unwrap(), p);
        assert!(PolicyParams::from_flat(&cfg, &[0.0; 3]).is_err());
    }

    #[test]
    fn input_layout() {
        let params = PolicyParams::zeros(&PolicyConfig::appendix(2)).unwrap();
        // robot at its goal with zero velocity and no neighbours
        let x = JointState::new(2, vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        let (rj, _) = build_inputs(0, &x, &CommGraph::isolated(1), &[1.0, 2.0, 0.0, 0.0], &params).unwrap();
        assert_eq!(rj, Tensor::zeros(4, 1));

        let x = JointState::new(2, vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let (_, h) = build_inputs(0, &x, &CommGraph::ring(2).unwrap(), &[0.0; 4], &params).unwrap();
        assert_eq!(h.shape(), (6, 2));
        assert_eq!(h.col(0), vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((h.get(4, 1) - libm::pow(5.0, 0.25)).abs() < 1e-15);
        assert_eq!(h.get(5, 1), 5.0);
    }

    #[test]
    fn neighbor_columns_are_ascending() {
        let mut adj = vec![0.0; 64];
        for i in 0..8 {
            adj[i * 8 + i] = 1.0;
        }
        for (a, b) in [(0, 7), (0, 2)] {
            adj[a * 8 + b] = 1.0;
            adj[b * 8 + a] = 1.0;
        }
        let g = CommGraph::from_adjacency(8, adj).unwrap();
        let x = JointState::new(2, (0..32).map(|v| v as f64).collect()).unwrap();
        let params = PolicyParams::zeros(&PolicyConfig::appendix(2)).unwrap();
        let (rj, _) = build_inputs(0, &x, &g, &[0.0; 4], &params).unwrap();
        assert_eq!(rj.col(1), vec![-8.0; 4]);
        assert_eq!(rj.col(2), vec![-28.0; 4]);
    }

    #[test]
    fn attention_output_shape_and_equivariance() {
        let cfg = PolicyConfig::appendix(2);
        let params = init_params(&cfg, 5).unwrap();
        let tape = Tape::new();
        let pv = params.on_tape(&tape);
        let cols = [[0.3, -0.1, 0.2, 0.5], [1.0, 0.4, -0.7, 0.0], [-0.2, 0.9, 0.1, -0.4]];
        let make = |order: &[usize]| {
            let vars: Vec<Var<'_>> = order.iter().map(|&c| tape.column(&cols[c])).collect();
            tape.concat_cols(&vars).unwrap()
        };
        let a = sa_forward(make(&[0, 1, 2]), &cfg.r_head, pv.head(HeadKind::R)).unwrap().value();
        assert_eq!(a.shape(), (16, 3));
        let b = sa_forward(make(&[0, 2, 1]), &cfg.r_head, pv.head(HeadKind::R)).unwrap().value();
        for r in 0..16 {
            assert!((a.get(r, 1) - b.get(r, 2)).abs() < 1e-14);
            assert!((a.get(r, 2) - b.get(r, 1)).abs() < 1e-14);
            assert!((a.get(r, 0) - b.get(r, 0)).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_policy_is_inert() {
        let params = PolicyParams::zeros(&PolicyConfig::appendix(2)).unwrap();
        let base = PortHamiltonianBase::double_integrator(2);
        let mut x = random_state(4, 1, 1.0);
        for i in 0..4 {
            x.robot_mut(i)[2] = 0.0;
            x.robot_mut(i)[3] = 0.0;
        }
        let g = CommGraph::ring(4).unwrap();
        let goals = JointState::zeros(4, 2);
        assert!(policy_control(&x, &g, &params, &goals, &base).unwrap().iter().all(|&u| u == 0.0));
        let eg = hamiltonian_gradients(&x, &g, &params, &goals).unwrap();
        assert!(eg.energies.iter().all(|&h| h == 0.0));
        assert!(eg.total.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn energy_gradient_sums_local_contributions() {
        let params = init_params(&PolicyConfig::appendix(2), 2).unwrap();
        let x = random_state(5, 3, 1.5);
        let g = CommGraph::ring(5).unwrap();
        let goals = random_state(5, 4, 1.0);
        let eg = hamiltonian_gradients(&x, &g, &params, &goals).unwrap();

        // oracle: one backward pass over Σ_i H^(i)
        let tape = Tape::new();
        let pv = params.on_tape(&tape);
        let states: Vec<Var<'_>> = (0..5).map(|i| tape.column(x.robot(i))).collect();
        let gv: Vec<Var<'_>> = (0..5).map(|i| tape.column(goals.robot(i))).collect();
        let hoods = neighborhoods(&g, 1).unwrap();
        let mut energies = Vec::new();
        for i in 0..5 {
            let nb: Vec<Var<'_>> = hoods[i].iter().map(|&j| states[j]).collect();
            energies.push(hamiltonian_i(&pv, energy_input(&tape, &pv, states[i], gv[i], &nb).unwrap()).unwrap());
        }
        let total = tape.sum_all(&energies).unwrap();
        let oracle = tape.gradients(total, &states).unwrap();
        for i in 0..5 {
            for (a, b) in eg.total[i].iter().zip(oracle[i].data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_robot_energy_gradient_is_its_own() {
        let params = init_params(&PolicyConfig::appendix(2), 9).unwrap();
        let x = random_state(1, 3, 1.0);
        let eg = hamiltonian_gradients(&x, &CommGraph::isolated(1), &params, &JointState::zeros(1, 2)).unwrap();
        assert_eq!(eg.total[0], eg.local[&(0, 0)]);
    }

    #[test]
    fn structural_identities() {
        for structure in [Structure::Verbatim, Structure::StrictPsd] {
            let mut cfg = PolicyConfig::appendix(2);
            cfg.structure = structure;
            cfg.j_head = HeadConfig::new(&[(4, 8, 8), (8, 8, 16)]);
            let params = init_params(&cfg, 21).unwrap();
            let x = random_state(4, 8, 1.0);
            let g = CommGraph::ring(4).unwrap();
            let sys = assemble_global(&x, &g, &params, &JointState::zeros(4, 2)).unwrap();
            let nx = 4;
            for bi in 0..4 {
                for bj in 0..4 {
                    for a in 0..nx {
                        for c in 0..nx {
                            let jij = sys.j.get(bi * nx + a, bj * nx + c);
                            let jji = sys.j.get(bj * nx + a, bi * nx + c);
                            let jt = sys.j.get(bj * nx + c, bi * nx + a);
                            match structure {
                                Structure::Verbatim if bi != bj => assert_eq!(jij, -jji),
                                Structure::Verbatim => {}
                                Structure::StrictPsd => assert_eq!(jij, -jt),
                            }
                        }
                    }
                }
            }
            if structure == Structure::StrictPsd {
                let sym = sys.r.sub(&sys.r.transpose()).unwrap();
                assert_eq!(sym.max_abs(), 0.0);
                assert!(linalg::symmetric_eigenvalues(&sys.r).unwrap()[0] >= -1e-9);
            }
        }
    }

    #[test]
    fn symplectic_j_is_scaled_canonical_block() {
        let params = init_params(&PolicyConfig::appendix(2), 4).unwrap();
        let x = random_state(3, 2, 1.0);
        let sys = assemble_global(&x, &CommGraph::ring(3).unwrap(), &params, &JointState::zeros(3, 2)).unwrap();
        assert_eq!(sys.j.add(&sys.j.transpose()).unwrap().max_abs(), 0.0);
        // off-diagonal blocks vanish
        for a in 0..4 {
            for c in 0..4 {
                assert_eq!(sys.j.get(a, 4 + c), 0.0);
            }
        }
        let z = sys.j.get(0, 2);
        assert_eq!(sys.j.get(2, 0), -z);
        assert_eq!(sys.j.get(0, 0), 0.0);
    }
}
