//! Learning distributed multi-robot control policies from demonstrations.
//!
//! The crate is `no_std` (with `alloc`). It holds every numerical piece of the
//! pipeline: a dense tensor type with a taped reverse-mode autodiff engine that
//! supports gradients of gradients, communication graphs, port-Hamiltonian
//! robot dynamics with IDA-PBC control, analytic expert controllers that
//! produce demonstrations, the self-attention port-Hamiltonian policy, the
//! neural-ODE training loop and a round-based message-passing simulator used
//! to deploy a trained policy one robot at a time.
//!
//! IO, file formats, threading and the CLI live in the `phswarm` crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod deploy;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod expert;
pub mod graph;
pub mod linalg;
pub mod math;
pub mod policy;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result, TensorError};
pub use graph::CommGraph;
pub use tensor::Tensor;
