//! Pluggable execution of independent jobs (trajectories, batch members).
//!
//! The core crate only knows the sequential strategy; the `phswarm` crate
//! provides a thread-pool implementation. Results always come back in index
//! order, so any reduction over them is deterministic.

use alloc::vec::Vec;

pub trait ParallelMap: Sync {
    fn map_indexed<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl ParallelMap for Sequential {
    fn map_indexed<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}
