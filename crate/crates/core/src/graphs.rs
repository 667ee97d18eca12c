//! Per-timestep agent adjacency.
//!
//! Every valid agent always carries a self-loop, so attention has at least
//! one input even for an isolated vehicle. Edges are `(src, dst)`: messages
//! flow from `src` into `dst`.

use serde::{Deserialize, Serialize};

pub const DEFAULT_DISTANCE_M: f64 = 30.0;

/// Strategy used to connect agents within one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Connectivity {
    AllToAll,
    Knn { k: usize },
    Distance { threshold_m: f64 },
}

impl Default for Connectivity {
    fn default() -> Self {
        Connectivity::Distance { threshold_m: DEFAULT_DISTANCE_M }
    }
}

impl std::fmt::Display for Connectivity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Connectivity::AllToAll => write!(f, "all_to_all"),
            Connectivity::Knn { k } => write!(f, "knn_{k}"),
            Connectivity::Distance { threshold_m } => write!(f, "distance_{threshold_m}"),
        }
    }
}

impl Connectivity {
    pub fn build(&self, positions: &[(f64, f64)], valid: &[bool]) -> Adjacency {
        match *self {
            Connectivity::AllToAll => all_to_all(valid),
            Connectivity::Knn { k } => knn(positions, valid, k),
            Connectivity::Distance { threshold_m } => distance_based(positions, valid, threshold_m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    pub n: usize,
    /// Sorted by `(dst, src)`.
    pub edges: Vec<(usize, usize)>,
    pub self_loops: bool,
}

impl Adjacency {
    fn from_edges(n: usize, mut edges: Vec<(usize, usize)>) -> Self {
        edges.sort_by_key(|&(s, d)| (d, s));
        edges.dedup();
        Adjacency { n, edges, self_loops: true }
    }

    pub fn contains(&self, src: usize, dst: usize) -> bool {
        self.edges.binary_search_by_key(&(dst, src), |&(s, d)| (d, s)).is_ok()
    }

    pub fn out_degree(&self, src: usize) -> usize {
        self.edges.iter().filter(|e| e.0 == src).count()
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

fn valid_ids(valid: &[bool]) -> Vec<usize> {
    valid.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i).collect()
}

pub fn all_to_all(valid: &[bool]) -> Adjacency {
    let ids = valid_ids(valid);
    let edges = ids.iter().flat_map(|&i| ids.iter().map(move |&j| (i, j))).collect();
    Adjacency::from_edges(valid.len(), edges)
}

/// Each valid agent sends to itself and its `k` nearest valid agents.
/// Distance ties go to the lower index.
pub fn knn(positions: &[(f64, f64)], valid: &[bool], k: usize) -> Adjacency {
    let ids = valid_ids(valid);
    let mut edges = Vec::new();
    for &i in &ids {
        edges.push((i, i));
        let mut others: Vec<(f64, usize)> =
            ids.iter().filter(|&&j| j != i).map(|&j| (dist(positions[i], positions[j]), j)).collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(others.into_iter().take(k).map(|(_, j)| (i, j)));
    }
    Adjacency::from_edges(valid.len(), edges)
}

/// Connects distinct valid agents strictly closer than `threshold_m`.
pub fn distance_based(positions: &[(f64, f64)], valid: &[bool], threshold_m: f64) -> Adjacency {
    let ids = valid_ids(valid);
    let mut edges = Vec::new();
    for &i in &ids {
        for &j in &ids {
            if i == j || dist(positions[i], positions[j]) < threshold_m {
                edges.push((i, j));
            }
        }
    }
    Adjacency::from_edges(valid.len(), edges)
}
