use alloc::string::String;
use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Failures of the tensor kernels and the autodiff tape.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("non-integer power {exponent} of negative value {value}")]
    NegativeBase { value: f64, exponent: f64 },
    #[error("gradient output must be a 1x1 scalar, got {0:?}")]
    NonScalarOutput((usize, usize)),
    #[error("variable is not recorded on this tape")]
    ForeignVar,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("matrix is singular or rank deficient (smallest eigenvalue {0:e})")]
    RankDeficient(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("robot index {index} out of range for {n} robots")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("missing {what} for robot pair ({i}, {j})")]
    MissingBlock { what: &'static str, i: usize, j: usize },
    #[error("inconsistent layer chain in head {head}: layer {layer} expects {expected} inputs but previous layer emits {found}")]
    LayerChain {
        head: &'static str,
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite state in trajectory {trajectory} at step {step}")]
    NonFiniteRollout { trajectory: usize, step: usize },
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("distributed controls differ from the centralized policy at step {step} (robot {robot}, |diff| = {diff:e})")]
    OracleMismatch { step: usize, robot: usize, diff: f64 },
}
