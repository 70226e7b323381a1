//! Undirected communication graphs and k-hop neighborhoods.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Weighted adjacency of the robot team.
///
/// Symmetric, weights in `[0, 1]`, strictly positive diagonal. A pair of
/// robots communicates iff its weight is strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct CommGraph {
    n: usize,
    weights: Vec<f64>,
}

impl CommGraph {
    pub fn from_adjacency(n: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != n * n {
            return Err(Error::Config(format!("adjacency needs {} entries, got {}", n * n, weights.len())));
        }
        for i in 0..n {
            if !(weights[i * n + i] > 0.0) {
                return Err(Error::Config(format!("robot {i} has no self-loop")));
            }
            for j in 0..n {
                let w = weights[i * n + j];
                if !(0.0..=1.0).contains(&w) || w != weights[j * n + i] {
                    return Err(Error::Config(format!("invalid weight {w} at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, weights })
    }

    /// Ring where robot `i` talks to `(i ± 1) mod n`.
    pub fn ring(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("ring needs at least 2 robots, got {n}")));
        }
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
            w[i * n + (i + 1) % n] = 1.0;
            w[i * n + (i + n - 1) % n] = 1.0;
        }
        Ok(Self { n, weights: w })
    }

    /// Distance-gated graph: `sigmoid(λ (d - l/2))` for pairs closer than `l`,
    /// zero otherwise, unit diagonal. Positions are `n` points of equal dimension.
    pub fn proximity(positions: &[&[f64]], l: f64, lambda: f64) -> Result<Self> {
        if !(l > 0.0) {
            return Err(Error::Config(format!("communication radius must be positive, got {l}")));
        }
        let n = positions.len();
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
            for j in i + 1..n {
                let d = math::dist(positions[i], positions[j]);
                let wij = if d < l { math::sigmoid(lambda * (d - l / 2.0)) } else { 0.0 };
                w[i * n + j] = wij;
                w[j * n + i] = wij;
            }
        }
        Ok(Self { n, weights: w })
    }

    /// Graph with self-loops only.
    pub fn isolated(n: usize) -> Self {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        Self { n, weights: w }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.weights
    }

    pub fn connected(&self, i: usize, j: usize) -> bool {
        self.weight(i, j) > 0.0
    }

    fn check(&self, i: usize) -> Result<()> {
        if i < self.n {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange { index: i, n: self.n })
        }
    }

    /// One-hop neighbors of `i`, excluding `i`, ascending.
    pub fn neighbors(&self, i: usize) -> Result<Vec<usize>> {
        self.check(i)?;
        Ok((0..self.n).filter(|&j| j != i && self.connected(i, j)).collect())
    }

    /// `N_i^k = { j : [A^k]_ij != 0 }`, ascending; `{i}` for `k = 0`.
    ///
    /// Computed by breadth-first search on the support of `A`, so the
    /// self-loops make it the set of robots within `k` hops.
    pub fn khop_neighbors(&self, i: usize, k: usize) -> Result<Vec<usize>> {
        self.check(i)?;
        let mut depth = vec![usize::MAX; self.n];
        depth[i] = 0;
        let mut queue = VecDeque::from([i]);
        while let Some(u) = queue.pop_front() {
            if depth[u] == k {
                continue;
            }
            for v in 0..self.n {
                if depth[v] == usize::MAX && self.connected(u, v) {
                    depth[v] = depth[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        Ok((0..self.n).filter(|&j| depth[j] != usize::MAX).collect())
    }

    /// Hop distance between robots, `None` when disconnected.
    pub fn hops(&self, i: usize, j: usize) -> Result<Option<usize>> {
        self.check(j)?;
        let all = self.khop_neighbors(i, self.n)?;
        if !all.contains(&j) {
            return Ok(None);
        }
        Ok((0..=self.n).find(|&k| self.khop_neighbors(i, k).is_ok_and(|s| s.contains(&j))))
    }
}

/// How the communication graph is obtained from the current team state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Topology {
    Ring,
    /// Rebuilt from positions at every step.
    Proximity { radius: f64, slope: f64 },
    Isolated,
}

impl Topology {
    pub fn build(&self, positions: &[&[f64]]) -> Result<CommGraph> {
        match *self {
            Topology::Ring => CommGraph::ring(positions.len()),
            Topology::Proximity { radius, slope } => CommGraph::proximity(positions, radius, slope),
            Topology::Isolated => Ok(CommGraph::isolated(positions.len())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Support of A^k by repeated boolean matrix products.
    fn power_support(g: &CommGraph, k: usize) -> Vec<bool> {
        let n = g.len();
        let a: Vec<bool> = g.adjacency().iter().map(|&w| w > 0.0).collect();
        let mut p: Vec<bool> = (0..n * n).map(|x| x / n == x % n).collect();
        for _ in 0..k {
            let mut next = vec![false; n * n];
            for i in 0..n {
                for j in 0..n {
                    next[i * n + j] = (0..n).any(|m| p[i * n + m] && a[m * n + j]);
                }
            }
            p = next;
        }
        p
    }

    #[test]
    fn ring_rows_have_three_ones() {
        let g = CommGraph::ring(4).unwrap();
        for i in 0..4 {
            assert_eq!((0..4).filter(|&j| g.weight(i, j) == 1.0).count(), 3);
        }
        let g5 = CommGraph::ring(5).unwrap();
        assert_eq!(g5.khop_neighbors(0, 1).unwrap(), vec![0, 1, 4]);
    }

    #[test]
    fn ring_of_two_is_complete() {
        let g = CommGraph::ring(2).unwrap();
        assert!(g.adjacency().iter().all(|&w| w == 1.0));
        assert!(CommGraph::ring(1).is_err());
    }

    #[test]
    fn khop_on_ring_of_six() {
        let g = CommGraph::ring(6).unwrap();
        assert_eq!(g.khop_neighbors(0, 0).unwrap(), vec![0]);
        assert_eq!(g.khop_neighbors(0, 1).unwrap(), vec![0, 1, 5]);
        assert_eq!(g.khop_neighbors(0, 2).unwrap(), vec![0, 1, 2, 4, 5]);
        let support = power_support(&g, 2);
        let oracle: Vec<usize> = (0..6).filter(|&j| support[j]).collect();
        assert_eq!(g.khop_neighbors(0, 2).unwrap(), oracle);
        assert!(g.khop_neighbors(6, 1).is_err());
    }

    #[test]
    fn proximity_weights() {
        let far: [&[f64]; 2] = [&[0.0, 0.0], &[2.4, 0.0]];
        assert_eq!(CommGraph::proximity(&far, 2.4, 2.0).unwrap().weight(0, 1), 0.0);
        let half: [&[f64]; 2] = [&[0.0, 0.0], &[1.2, 0.0]];
        assert_eq!(CommGraph::proximity(&half, 2.4, 2.0).unwrap().weight(0, 1), 0.5);
        let d = 0.3;
        let near: [&[f64]; 2] = [&[0.0, 0.0], &[1.2 - d, 0.0]];
        let farther: [&[f64]; 2] = [&[0.0, 0.0], &[1.2 + d, 0.0]];
        let a = CommGraph::proximity(&near, 2.4, 2.0).unwrap().weight(0, 1);
        let b = CommGraph::proximity(&farther, 2.4, 2.0).unwrap().weight(0, 1);
        assert!((a - (1.0 - b)).abs() < 1e-15);
        assert!(CommGraph::proximity(&near, 0.0, 2.0).is_err());
    }

    #[test]
    fn adjacency_validation() {
        assert!(CommGraph::from_adjacency(2, vec![1.0, 0.5, 0.5, 1.0]).is_ok());
        assert!(CommGraph::from_adjacency(2, vec![1.0, 0.5, 0.4, 1.0]).is_err());
        assert!(CommGraph::from_adjacency(2, vec![0.0, 0.5, 0.5, 1.0]).is_err());
    }

    #[test]
    fn hop_distance() {
        let g = CommGraph::ring(8).unwrap();
        assert_eq!(g.hops(0, 3).unwrap(), Some(3));
        assert_eq!(CommGraph::isolated(3).hops(0, 2).unwrap(), None);
    }
}
