//! Thread-pool execution of independent jobs.

use phswarm_core::exec::ParallelMap;
use rayon::prelude::*;

/// Runs jobs on the global rayon pool. Results come back in index order.
#[derive(Clone, Copy, Debug, Default)]
pub struct Rayon;

impl ParallelMap for Rayon {
    fn map_indexed<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }
}
