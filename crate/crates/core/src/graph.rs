//! Directed k-nearest-neighbour graphs over batch embeddings.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::cosine_sim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnMetric {
    #[default]
    Euclidean,
    Cosine,
}

/// Directed graph where every node has the same out-degree. Edges are kept
/// sorted lexicographically, so an edge's position in `edges()` is a stable
/// index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    k: usize,
    edges: Vec<(usize, usize)>,
    lookup: Vec<u32>,
}

const NO_EDGE: u32 = u32::MAX;

impl Graph {
    pub fn from_edges(n: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        edges.sort_unstable();
        let mut lookup = vec![NO_EDGE; n * n];
        let mut degree = vec![0usize; n];
        for (idx, &(i, j)) in edges.iter().enumerate() {
            if i >= n || j >= n {
                return Err(Error::Domain(format!("edge ({i},{j}) out of range for n={n}")));
            }
            if i == j {
                return Err(Error::Domain(format!("self edge at node {i}")));
            }
            if lookup[i * n + j] != NO_EDGE {
                return Err(Error::Domain(format!("duplicate edge ({i},{j})")));
            }
            lookup[i * n + j] = idx as u32;
            degree[i] += 1;
        }
        let k = degree.first().copied().unwrap_or(0);
        if degree.iter().any(|&d| d != k) {
            return Err(Error::Domain("out-degree differs between nodes".into()));
        }
        Ok(Graph {
            n,
            k,
            edges,
            lookup,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        match self.lookup[i * self.n + j] {
            NO_EDGE => None,
            idx => Some(idx as usize),
        }
    }

    /// Row-normalised `A + I` where `A` is the adjacency symmetrised by union.
    pub fn propagation_matrix(&self) -> Array2<f64> {
        let n = self.n;
        let mut a = Array2::<f64>::eye(n);
        for &(i, j) in &self.edges {
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
        for mut row in a.rows_mut() {
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        a
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Graph> {
        let edges = self.edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        Graph::from_edges(self.n, edges)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j\n");
        for (i, j) in &self.edges {
            let _ = writeln!(out, "{i},{j}");
        }
        out
    }
}

fn distance(z: &ArrayView2<f64>, i: usize, j: usize, metric: KnnMetric) -> f64 {
    match metric {
        KnnMetric::Euclidean => z
            .row(i)
            .iter()
            .zip(z.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt(),
        KnnMetric::Cosine => {
            let a = z.row(i).to_vec();
            let b = z.row(j).to_vec();
            1.0 - cosine_sim(&a, &b).value
        }
    }
}

/// Links every row of `z` to its `k` nearest other rows; distance ties go to
/// the lower index.
pub fn knn_graph(z: ArrayView2<f64>, k: usize, metric: KnnMetric) -> Result<Graph> {
    let n = z.nrows();
    if k < 1 || k >= n {
        return Err(Error::Domain(format!("knn_graph needs 1 <= k < N (k={k}, N={n})")));
    }
    let mut edges = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (distance(&z, i, j, metric), j))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(cand[..k].iter().map(|&(_, j)| (i, j)));
    }
    Graph::from_edges(n, edges)
}
