//! Define-by-run reverse-mode automatic differentiation.
//!
//! Operations on [`Var`] handles are recorded on a [`Tape`] in execution order,
//! so every node's inputs precede it. Two reverse sweeps are available:
//!
//! * [`Tape::grad`] emits the backward pass as ordinary tape nodes. The
//!   returned gradients are themselves differentiable, which is how the policy
//!   differentiates `dH/dx` with respect to the parameters.
//! * [`Tape::backward`] computes plain numeric adjoints for every node. It is
//!   the fast path for the outermost gradient of a training loss.
//!
//! A tape is single-owner (`!Sync`); independent rollouts use independent tapes.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

use crate::error::TensorError;
use crate::math;
use crate::tensor::Tensor;

type Res<T> = Result<T, TensorError>;

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    Swish,
    Square,
    Abs,
    /// Piecewise constant, zero derivative everywhere.
    Sign,
    Pow(f64),
    /// `1/x`, and 0 at the origin.
    SafeRecip,
    Softplus,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => math::sigmoid(x),
            Unary::Swish => math::swish(x),
            Unary::Square => x * x,
            Unary::Abs => math::fabs(x),
            Unary::Sign => math::sign(x),
            Unary::Pow(q) => math::powf(x, q),
            Unary::SafeRecip => math::safe_recip(x),
            Unary::Softplus => math::softplus(x),
        }
    }

    /// Derivative at input `x` with output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Swish => math::swish_derivative(x),
            Unary::Square => 2.0 * x,
            Unary::Abs => math::sign(x),
            Unary::Sign => 0.0,
            Unary::Pow(q) => q * math::powf(x, q - 1.0),
            Unary::SafeRecip => -(y * y),
            Unary::Softplus => math::sigmoid(x),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64, f64),
    Unary(usize, Unary),
    SoftmaxRows(usize),
    SumRows(usize),
    BroadcastCols(usize, usize),
    Sum(usize),
    BroadcastScalar(usize, usize, usize),
    Transpose(usize),
    Reshape(usize, usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Slice { src: usize, r0: usize, c0: usize, rows: usize, cols: usize },
    Embed { src: usize, r0: usize, c0: usize, rows: usize, cols: usize },
    DiagFromVec(usize),
    DiagExtract(usize),
    L2Norm(usize),
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(usize)) {
        match self {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                f(*a);
                f(*b);
            }
            Op::ConcatCols(ids) | Op::ConcatRows(ids) => ids.iter().for_each(|&i| f(i)),
            Op::Affine(a, ..)
            | Op::Unary(a, _)
            | Op::SoftmaxRows(a)
            | Op::SumRows(a)
            | Op::BroadcastCols(a, _)
            | Op::Sum(a)
            | Op::BroadcastScalar(a, ..)
            | Op::Transpose(a)
            | Op::Reshape(a, ..)
            | Op::DiagFromVec(a)
            | Op::DiagExtract(a)
            | Op::L2Norm(a)
            | Op::Slice { src: a, .. }
            | Op::Embed { src: a, .. } => f(*a),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value())
    }
}

fn shape_err(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> TensorError {
    TensorError::ShapeMismatch { op, lhs, rhs }
}

fn compute<'a>(op: &Op, val: impl Fn(usize) -> &'a Tensor) -> Res<Tensor> {
    Ok(match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => val(*a).matmul(val(*b))?,
        Op::Add(a, b) => val(*a).add(val(*b))?,
        Op::Sub(a, b) => val(*a).sub(val(*b))?,
        Op::Mul(a, b) => val(*a).zip_map(val(*b), "mul", |x, y| x * y)?,
        Op::Affine(a, c, d) => val(*a).map(|x| c * x + d),
        Op::Unary(a, u) => {
            let x = val(*a);
            if let Unary::Pow(q) = u {
                if !math::is_integer(*q) {
                    if let Some(&bad) = x.data().iter().find(|&&v| v < 0.0) {
                        return Err(TensorError::NegativeBase { value: bad, exponent: *q });
                    }
                }
            }
            x.map(|v| u.apply(v))
        }
        Op::SoftmaxRows(a) => val(*a).softmax_rows(),
        Op::SumRows(a) => {
            let x = val(*a);
            let data = (0..x.rows()).map(|r| x.data()[r * x.cols()..(r + 1) * x.cols()].iter().sum()).collect();
            Tensor::from_vec(x.rows(), 1, data)?
        }
        Op::BroadcastCols(a, n) => {
            let x = val(*a);
            if x.cols() != 1 {
                return Err(shape_err("broadcast_cols", x.shape(), (x.rows(), 1)));
            }
            let data = x.data().iter().flat_map(|&v| core::iter::repeat_n(v, *n)).collect();
            Tensor::from_vec(x.rows(), *n, data)?
        }
        Op::Sum(a) => Tensor::scalar(val(*a).data().iter().sum()),
        Op::BroadcastScalar(a, r, c) => {
            let x = val(*a);
            if x.shape() != (1, 1) {
                return Err(shape_err("broadcast_scalar", x.shape(), (1, 1)));
            }
            Tensor::filled(*r, *c, x.item())
        }
        Op::Transpose(a) => val(*a).transpose(),
        Op::Reshape(a, r, c) => {
            let x = val(*a);
            if x.len() != r * c {
                return Err(shape_err("reshape", x.shape(), (*r, *c)));
            }
            x.reshape(*r, *c)?
        }
        Op::ConcatCols(ids) => {
            let rows = val(ids[0]).rows();
            let mut cols = 0;
            for &i in ids {
                let x = val(i);
                if x.rows() != rows {
                    return Err(shape_err("concat_cols", (rows, cols), x.shape()));
                }
                cols += x.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &i in ids {
                    let x = val(i);
                    data.extend_from_slice(&x.data()[r * x.cols()..(r + 1) * x.cols()]);
                }
            }
            Tensor::from_vec(rows, cols, data)?
        }
        Op::ConcatRows(ids) => {
            let cols = val(ids[0]).cols();
            let mut rows = 0;
            let mut data = Vec::new();
            for &i in ids {
                let x = val(i);
                if x.cols() != cols {
                    return Err(shape_err("concat_rows", (rows, cols), x.shape()));
                }
                rows += x.rows();
                data.extend_from_slice(x.data());
            }
            Tensor::from_vec(rows, cols, data)?
        }
        Op::Slice { src, r0, c0, rows, cols } => {
            let x = val(*src);
            if r0 + rows > x.rows() || c0 + cols > x.cols() {
                return Err(shape_err("slice", x.shape(), (r0 + rows, c0 + cols)));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in *r0..r0 + rows {
                data.extend_from_slice(&x.data()[r * x.cols() + c0..r * x.cols() + c0 + cols]);
            }
            Tensor::from_vec(*rows, *cols, data)?
        }
        Op::Embed { src, r0, c0, rows, cols } => {
            let x = val(*src);
            if r0 + x.rows() > *rows || c0 + x.cols() > *cols {
                return Err(shape_err("embed", x.shape(), (*rows, *cols)));
            }
            let mut out = Tensor::zeros(*rows, *cols);
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    out.set(r0 + r, c0 + c, x.get(r, c));
                }
            }
            out
        }
        Op::DiagFromVec(a) => {
            let x = val(*a);
            if x.cols() != 1 {
                return Err(shape_err("diag_from_vec", x.shape(), (x.rows(), 1)));
            }
            let n = x.rows();
            let mut out = Tensor::zeros(n, n);
            for i in 0..n {
                out.set(i, i, x.data()[i]);
            }
            out
        }
        Op::DiagExtract(a) => {
            let x = val(*a);
            if x.rows() != x.cols() {
                return Err(shape_err("diag_extract", x.shape(), (x.rows(), x.rows())));
            }
            Tensor::column(&(0..x.rows()).map(|i| x.get(i, i)).collect::<Vec<_>>())
        }
        Op::L2Norm(a) => Tensor::scalar(math::norm(val(*a).data())),
    })
}

/// `g * b^T`
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (g.rows(), g.cols(), b.rows());
    let mut out = Tensor::zeros(m, k);
    for i in 0..m {
        let gi = &g.data()[i * n..(i + 1) * n];
        for p in 0..k {
            let bp = &b.data()[p * n..(p + 1) * n];
            out.data_mut()[i * k + p] = gi.iter().zip(bp).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * g`
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), g.cols());
    let mut out = Tensor::zeros(k, n);
    for i in 0..m {
        let gi = &g.data()[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a.data()[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let dst = &mut out.data_mut()[p * n..(p + 1) * n];
            for (d, &x) in dst.iter_mut().zip(gi) {
                *d += a_ip * x;
            }
        }
    }
    out
}

fn slice_of(x: &Tensor, r0: usize, c0: usize, rows: usize, cols: usize) -> Tensor {
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            out.set(r, c, x.get(r0 + r, c0 + c));
        }
    }
    out
}

fn embed_into(x: &Tensor, r0: usize, c0: usize, rows: usize, cols: usize) -> Tensor {
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            out.set(r0 + r, c0 + c, x.get(r, c));
        }
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&t),
        None => *slot = Some(t),
    }
}

/// Numeric vector-Jacobian product of one node.
fn vjp_numeric(op: &Op, out: &Tensor, g: &Tensor, nodes: &[Node], adj: &mut [Option<Tensor>]) {
    let v = |i: usize| &nodes[i].value;
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            accumulate(&mut adj[*a], matmul_nt(g, v(*b)));
            accumulate(&mut adj[*b], matmul_tn(v(*a), g));
        }
        Op::Add(a, b) => {
            accumulate(&mut adj[*a], g.clone());
            accumulate(&mut adj[*b], g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(&mut adj[*a], g.clone());
            accumulate(&mut adj[*b], g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (v(*a), v(*b));
            let ga = Tensor::from_vec(g.rows(), g.cols(), g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect());
            let gb = Tensor::from_vec(g.rows(), g.cols(), g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect());
            accumulate(&mut adj[*a], ga.expect("shape checked on record"));
            accumulate(&mut adj[*b], gb.expect("shape checked on record"));
        }
        Op::Affine(a, c, _) => accumulate(&mut adj[*a], g.scale(*c)),
        Op::Unary(a, u) => {
            if *u == Unary::Sign {
                return;
            }
            let x = v(*a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(out.data())
                .map(|((gi, &xi), &yi)| gi * u.derivative(xi, yi))
                .collect();
            accumulate(&mut adj[*a], Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape"));
        }
        Op::SoftmaxRows(a) => {
            let (m, n) = out.shape();
            let mut ga = Tensor::zeros(m, n);
            for r in 0..m {
                let y = &out.data()[r * n..(r + 1) * n];
                let gr = &g.data()[r * n..(r + 1) * n];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for c in 0..n {
                    ga.data_mut()[r * n + c] = y[c] * (gr[c] - dot);
                }
            }
            accumulate(&mut adj[*a], ga);
        }
        Op::SumRows(a) => {
            let n = v(*a).cols();
            let data = g.data().iter().flat_map(|&x| core::iter::repeat_n(x, n)).collect();
            accumulate(&mut adj[*a], Tensor::from_vec(g.rows(), n, data).expect("shape"));
        }
        Op::BroadcastCols(a, n) => {
            let data = (0..g.rows()).map(|r| g.data()[r * n..(r + 1) * n].iter().sum()).collect();
            accumulate(&mut adj[*a], Tensor::from_vec(g.rows(), 1, data).expect("shape"));
        }
        Op::Sum(a) => {
            let (r, c) = v(*a).shape();
            accumulate(&mut adj[*a], Tensor::filled(r, c, g.item()));
        }
        Op::BroadcastScalar(a, ..) => accumulate(&mut adj[*a], Tensor::scalar(g.data().iter().sum())),
        Op::Transpose(a) => accumulate(&mut adj[*a], g.transpose()),
        Op::Reshape(a, ..) => {
            let (r, c) = v(*a).shape();
            accumulate(&mut adj[*a], g.reshape(r, c).expect("same length"));
        }
        Op::ConcatCols(ids) => {
            let mut c0 = 0;
            for &i in ids {
                let (r, c) = v(i).shape();
                accumulate(&mut adj[i], slice_of(g, 0, c0, r, c));
                c0 += c;
            }
        }
        Op::ConcatRows(ids) => {
            let mut r0 = 0;
            for &i in ids {
                let (r, c) = v(i).shape();
                accumulate(&mut adj[i], slice_of(g, r0, 0, r, c));
                r0 += r;
            }
        }
        Op::Slice { src, r0, c0, .. } => {
            let (r, c) = v(*src).shape();
            accumulate(&mut adj[*src], embed_into(g, *r0, *c0, r, c));
        }
        Op::Embed { src, r0, c0, .. } => {
            let (r, c) = v(*src).shape();
            accumulate(&mut adj[*src], slice_of(g, *r0, *c0, r, c));
        }
        Op::DiagFromVec(a) => {
            let n = g.rows();
            accumulate(&mut adj[*a], Tensor::column(&(0..n).map(|i| g.get(i, i)).collect::<Vec<_>>()));
        }
        Op::DiagExtract(a) => {
            let n = g.rows();
            let mut d = Tensor::zeros(n, n);
            for i in 0..n {
                d.set(i, i, g.data()[i]);
            }
            accumulate(&mut adj[*a], d);
        }
        Op::L2Norm(a) => {
            let s = g.item() * math::safe_recip(out.item());
            accumulate(&mut adj[*a], v(*a).scale(s));
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input (parameter, state or constant).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: Op::Leaf, value });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    pub fn column(&self, values: &[f64]) -> Var<'_> {
        self.leaf(Tensor::column(values))
    }

    fn push(&self, op: Op) -> Res<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            compute(&op, |i| &nodes[i].value)?
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    fn owns(&self, v: &Var<'_>) -> bool {
        core::ptr::eq(self, v.tape) && v.id < self.len()
    }

    fn check(&self, vars: &[Var<'_>]) -> Res<()> {
        if vars.iter().all(|v| self.owns(v)) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Res<Var<'t>> {
        self.check(parts)?;
        if parts.is_empty() {
            return Err(TensorError::InvalidShape { op: "concat_cols", detail: "no inputs".into() });
        }
        self.push(Op::ConcatCols(parts.iter().map(|v| v.id).collect()))
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Res<Var<'t>> {
        self.check(parts)?;
        if parts.is_empty() {
            return Err(TensorError::InvalidShape { op: "concat_rows", detail: "no inputs".into() });
        }
        self.push(Op::ConcatRows(parts.iter().map(|v| v.id).collect()))
    }

    /// Sum of a non-empty list of same-shape variables, left to right.
    pub fn sum_all<'t>(&'t self, parts: &[Var<'t>]) -> Res<Var<'t>> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| TensorError::InvalidShape { op: "sum_all", detail: "no inputs".into() })?;
        rest.iter().try_fold(*first, |acc, v| acc.add(*v))
    }

    /// Differentiable gradients of the scalar `output` with respect to `wrt`.
    ///
    /// The `wrt` variables are treated as independent inputs: propagation stops
    /// at them, so partial derivatives are returned even when one `wrt` node is
    /// computed from another. The backward pass is recorded on the tape, so
    /// the results can be differentiated again.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Res<Vec<Var<'t>>> {
        self.check(&[output])?;
        self.check(wrt)?;
        if output.shape() != (1, 1) {
            return Err(TensorError::NonScalarOutput(output.shape()));
        }
        let out = output.id;
        let lo = wrt.iter().map(|v| v.id).min().unwrap_or(out + 1);
        if lo > out {
            return Ok(wrt.iter().map(|v| self.leaf(Tensor::zeros(v.shape().0, v.shape().1))).collect());
        }
        let span = out + 1 - lo;
        let mut is_wrt = vec![false; span];
        for v in wrt {
            if v.id <= out {
                is_wrt[v.id - lo] = true;
            }
        }
        let mut depends = vec![false; span];
        let mut needed = vec![false; span];
        {
            let nodes = self.nodes.borrow();
            for id in lo..=out {
                let k = id - lo;
                if is_wrt[k] {
                    depends[k] = true;
                    continue;
                }
                let mut d = false;
                nodes[id].op.for_each_input(|i| d |= i >= lo && depends[i - lo]);
                depends[k] = d;
            }
            needed[out - lo] = depends[out - lo];
            for id in (lo..=out).rev() {
                let k = id - lo;
                if !needed[k] || is_wrt[k] {
                    continue;
                }
                nodes[id].op.for_each_input(|i| {
                    if i >= lo && depends[i - lo] {
                        needed[i - lo] = true;
                    }
                });
            }
        }

        let mut adj: Vec<Option<Var<'t>>> = vec![None; span];
        if needed[out - lo] {
            adj[out - lo] = Some(self.scalar(1.0));
        }
        for id in (lo..=out).rev() {
            let k = id - lo;
            if !needed[k] || is_wrt[k] {
                continue;
            }
            let Some(g) = adj[k] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            let want = |i: usize| i >= lo && needed[i - lo];
            let mut contribs: Vec<(usize, Var<'t>)> = Vec::new();
            self.vjp_symbolic(&op, Var { tape: self, id }, g, &want, &mut contribs)?;
            for (i, c) in contribs {
                let slot = &mut adj[i - lo];
                *slot = Some(match *slot {
                    Some(acc) => acc.add(c)?,
                    None => c,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|v| match adj.get(v.id.wrapping_sub(lo)).copied().flatten() {
                Some(g) if v.id <= out => g,
                _ => self.leaf(Tensor::zeros(v.shape().0, v.shape().1)),
            })
            .collect())
    }

    fn vjp_symbolic<'t>(
        &'t self,
        op: &Op,
        out: Var<'t>,
        g: Var<'t>,
        want: &dyn Fn(usize) -> bool,
        emit: &mut Vec<(usize, Var<'t>)>,
    ) -> Res<()> {
        let var = |id: usize| Var { tape: self, id };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    emit.push((*a, g.matmul(var(*b).transpose())?));
                }
                if want(*b) {
                    emit.push((*b, var(*a).transpose().matmul(g)?));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    emit.push((*a, g));
                }
                if want(*b) {
                    emit.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    emit.push((*a, g));
                }
                if want(*b) {
                    emit.push((*b, g.scale(-1.0)));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    emit.push((*a, g.mul(var(*b))?));
                }
                if want(*b) {
                    emit.push((*b, g.mul(var(*a))?));
                }
            }
            Op::Affine(a, c, _) => {
                if want(*a) {
                    emit.push((*a, g.scale(*c)));
                }
            }
            Op::Unary(a, u) => {
                if !want(*a) {
                    return Ok(());
                }
                let x = var(*a);
                let d = match u {
                    Unary::Sigmoid => out.mul(out.affine(-1.0, 1.0))?,
                    Unary::Swish => {
                        let s = x.sigmoid();
                        s.mul(x.mul(s.affine(-1.0, 1.0))?.affine(1.0, 1.0))?
                    }
                    Unary::Square => x.scale(2.0),
                    Unary::Abs => x.sign(),
                    Unary::Sign => return Ok(()),
                    Unary::Pow(q) => x.pow(q - 1.0)?.scale(*q),
                    Unary::SafeRecip => out.square().scale(-1.0),
                    Unary::Softplus => x.sigmoid(),
                };
                emit.push((*a, g.mul(d)?));
            }
            Op::SoftmaxRows(a) => {
                if want(*a) {
                    let n = out.shape().1;
                    let dot = g.mul(out)?.sum_rows().broadcast_cols(n)?;
                    emit.push((*a, out.mul(g.sub(dot)?)?));
                }
            }
            Op::SumRows(a) => {
                if want(*a) {
                    emit.push((*a, g.broadcast_cols(var(*a).shape().1)?));
                }
            }
            Op::BroadcastCols(a, _) => {
                if want(*a) {
                    emit.push((*a, g.sum_rows()));
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    let (r, c) = var(*a).shape();
                    emit.push((*a, g.broadcast_scalar(r, c)?));
                }
            }
            Op::BroadcastScalar(a, ..) => {
                if want(*a) {
                    emit.push((*a, g.sum()));
                }
            }
            Op::Transpose(a) => {
                if want(*a) {
                    emit.push((*a, g.transpose()));
                }
            }
            Op::Reshape(a, ..) => {
                if want(*a) {
                    let (r, c) = var(*a).shape();
                    emit.push((*a, g.reshape(r, c)?));
                }
            }
            Op::ConcatCols(ids) => {
                let mut c0 = 0;
                for &i in ids {
                    let (r, c) = var(i).shape();
                    if want(i) {
                        emit.push((i, g.slice(0, c0, r, c)?));
                    }
                    c0 += c;
                }
            }
            Op::ConcatRows(ids) => {
                let mut r0 = 0;
                for &i in ids {
                    let (r, c) = var(i).shape();
                    if want(i) {
                        emit.push((i, g.slice(r0, 0, r, c)?));
                    }
                    r0 += r;
                }
            }
            Op::Slice { src, r0, c0, .. } => {
                if want(*src) {
                    let (r, c) = var(*src).shape();
                    emit.push((*src, g.embed(*r0, *c0, r, c)?));
                }
            }
            Op::Embed { src, r0, c0, .. } => {
                if want(*src) {
                    let (r, c) = var(*src).shape();
                    emit.push((*src, g.slice(*r0, *c0, r, c)?));
                }
            }
            Op::DiagFromVec(a) => {
                if want(*a) {
                    emit.push((*a, g.diag_extract()?));
                }
            }
            Op::DiagExtract(a) => {
                if want(*a) {
                    emit.push((*a, g.diag_from_vec()?));
                }
            }
            Op::L2Norm(a) => {
                if want(*a) {
                    let s = g.mul(out.safe_recip())?;
                    emit.push((*a, var(*a).scale_by(s)?));
                }
            }
        }
        Ok(())
    }

    /// Numeric adjoints of every node with respect to the scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Res<Gradients> {
        self.backward_seeded(&[(output, Tensor::scalar(1.0))])
    }

    /// Numeric adjoints of `Σ_k <seed_k, var_k>`; seeds must match the shapes
    /// of their variables.
    pub fn backward_seeded(&self, seeds: &[(Var<'_>, Tensor)]) -> Res<Gradients> {
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut top = 0;
        for (v, seed) in seeds {
            if !core::ptr::eq(self, v.tape) || v.id >= nodes.len() {
                return Err(TensorError::ForeignVar);
            }
            if nodes[v.id].value.shape() != seed.shape() {
                return Err(shape_err("backward seed", nodes[v.id].value.shape(), seed.shape()));
            }
            accumulate(&mut adj[v.id], seed.clone());
            top = top.max(v.id);
        }
        if seeds.is_empty() {
            return Ok(Gradients { adj });
        }
        for id in (0..=top).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            vjp_numeric(&node.op, &node.value, &g, &nodes, &mut adj);
            adj[id] = Some(g);
        }
        Ok(Gradients { adj })
    }

    /// Numeric gradients of `output` with respect to `wrt`, zero where `output`
    /// does not depend on a variable.
    pub fn gradients(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Res<Vec<Tensor>> {
        self.check(wrt)?;
        if output.shape() != (1, 1) {
            return Err(TensorError::NonScalarOutput(output.shape()));
        }
        let g = self.backward(output)?;
        Ok(wrt.iter().map(|v| g.get(v)).collect())
    }

    /// Re-evaluates every recorded operation from the leaf values.
    pub fn replay(&self) -> Res<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                op => compute(op, |i| &values[i])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Values of all nodes as recorded.
    pub fn recorded_values(&self) -> Vec<Tensor> {
        self.nodes.borrow().iter().map(|n| n.value.clone()).collect()
    }
}

/// Result of a numeric reverse sweep.
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`, zeros when the output does not depend on it.
    pub fn get(&self, v: &Var<'_>) -> Tensor {
        match self.adj.get(v.id).and_then(|a| a.as_ref()) {
            Some(t) => t.clone(),
            None => {
                let (r, c) = v.shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.with_value(|t| t.shape())
    }

    /// Value of a `1 x 1` variable.
    pub fn item(&self) -> f64 {
        self.with_value(|t| t.data()[0])
    }

    fn same_tape(&self, other: &Var<'t>) -> Res<()> {
        if core::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    fn unary(&self, u: Unary) -> Var<'t> {
        self.tape.push(Op::Unary(self.id, u)).expect("elementwise op is total")
    }

    pub fn matmul(&self, other: Var<'t>) -> Res<Var<'t>> {
        self.same_tape(&other)?;
        self.tape.push(Op::MatMul(self.id, other.id))
    }

    pub fn add(&self, other: Var<'t>) -> Res<Var<'t>> {
        self.same_tape(&other)?;
        self.tape.push(Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Res<Var<'t>> {
        self.same_tape(&other)?;
        self.tape.push(Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Res<Var<'t>> {
        self.same_tape(&other)?;
        self.tape.push(Op::Mul(self.id, other.id))
    }

    /// `c * x + d` elementwise.
    pub fn affine(&self, c: f64, d: f64) -> Var<'t> {
        self.tape.push(Op::Affine(self.id, c, d)).expect("affine is total")
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.affine(c, 0.0)
    }

    pub fn neg(&self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    /// Multiplies every entry by the `1 x 1` variable `s`.
    pub fn scale_by(&self, s: Var<'t>) -> Res<Var<'t>> {
        let (r, c) = self.shape();
        self.mul(s.broadcast_scalar(r, c)?)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn swish(&self) -> Var<'t> {
        self.unary(Unary::Swish)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    pub fn sign(&self) -> Var<'t> {
        self.unary(Unary::Sign)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    pub fn safe_recip(&self) -> Var<'t> {
        self.unary(Unary::SafeRecip)
    }

    /// `x^q`; non-integer exponents require nonnegative inputs.
    pub fn pow(&self, q: f64) -> Res<Var<'t>> {
        self.tape.push(Op::Unary(self.id, Unary::Pow(q)))
    }

    /// Softmax along each row.
    pub fn softmax_rows(&self) -> Var<'t> {
        self.tape.push(Op::SoftmaxRows(self.id)).expect("softmax is total")
    }

    /// Row sums as an `m x 1` column.
    pub fn sum_rows(&self) -> Var<'t> {
        self.tape.push(Op::SumRows(self.id)).expect("row sum is total")
    }

    /// Repeats an `m x 1` column `n` times.
    pub fn broadcast_cols(&self, n: usize) -> Res<Var<'t>> {
        self.tape.push(Op::BroadcastCols(self.id, n))
    }

    /// Sum of all entries as a `1 x 1` scalar.
    pub fn sum(&self) -> Var<'t> {
        self.tape.push(Op::Sum(self.id)).expect("sum is total")
    }

    pub fn broadcast_scalar(&self, rows: usize, cols: usize) -> Res<Var<'t>> {
        self.tape.push(Op::BroadcastScalar(self.id, rows, cols))
    }

    pub fn transpose(&self) -> Var<'t> {
        self.tape.push(Op::Transpose(self.id)).expect("transpose is total")
    }

    /// Row-major reshape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Res<Var<'t>> {
        self.tape.push(Op::Reshape(self.id, rows, cols))
    }

    /// Row-major flattening into a column.
    pub fn vec(&self) -> Var<'t> {
        let (r, c) = self.shape();
        self.reshape(r * c, 1).expect("same length")
    }

    /// Inverse of [`Var::vec`]: reshapes a vector into a `rows x cols` matrix.
    pub fn vec_inv(&self, rows: usize, cols: usize) -> Res<Var<'t>> {
        self.reshape(rows, cols)
    }

    pub fn slice(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Res<Var<'t>> {
        self.tape.push(Op::Slice { src: self.id, r0, c0, rows, cols })
    }

    pub fn col(&self, c: usize) -> Res<Var<'t>> {
        let r = self.shape().0;
        self.slice(0, c, r, 1)
    }

    /// Places `self` at `(r0, c0)` inside a zero `rows x cols` matrix.
    pub fn embed(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Res<Var<'t>> {
        self.tape.push(Op::Embed { src: self.id, r0, c0, rows, cols })
    }

    pub fn diag_from_vec(&self) -> Res<Var<'t>> {
        self.tape.push(Op::DiagFromVec(self.id))
    }

    pub fn diag_extract(&self) -> Res<Var<'t>> {
        self.tape.push(Op::DiagExtract(self.id))
    }

    /// Euclidean norm of all entries, as a `1 x 1` scalar.
    pub fn l2_norm(&self) -> Var<'t> {
        self.tape.push(Op::L2Norm(self.id)).expect("norm is total")
    }

    /// `<self, other>` as a `1 x 1` scalar.
    pub fn dot(&self, other: Var<'t>) -> Res<Var<'t>> {
        Ok(self.mul(other)?.sum())
    }
}
