//! Second-order graph matching: maximise vertex plus co-present edge affinity
//! over permutations.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affinity::AffinitySet;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::RngStream;

/// A bijection `perm[i] = matched target node`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Matching {
    perm: Vec<usize>,
}

impl Matching {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Domain(format!("not a permutation: {perm:?}")));
            }
        }
        Ok(Matching { perm })
    }

    pub fn identity(n: usize) -> Self {
        Matching {
            perm: (0..n).collect(),
        }
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    /// Binary indicator with `v[i, perm[i]] = 1`.
    pub fn indicator(&self) -> Array2<f64> {
        let n = self.n();
        let mut v = Array2::zeros((n, n));
        for (i, &a) in self.perm.iter().enumerate() {
            v[[i, a]] = 1.0;
        }
        v
    }

    /// Reads a permutation back from a binary indicator matrix.
    pub fn from_indicator(v: &Array2<f64>) -> Result<Self> {
        let (n, m) = v.dim();
        if n != m {
            return Err(Error::Shape(format!("indicator must be square, got {n}x{m}")));
        }
        let mut perm = Vec::with_capacity(n);
        for row in v.rows() {
            if row.iter().any(|&x| x != 0.0 && x != 1.0) || row.sum() != 1.0 {
                return Err(Error::Domain("indicator rows must hold a single 1".into()));
            }
            perm.push(row.iter().position(|&x| x == 1.0).unwrap());
        }
        Matching::new(perm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverCfg {
    pub exact_threshold: usize,
    pub restarts: usize,
    pub max_sweeps: usize,
}

impl Default for SolverCfg {
    fn default() -> Self {
        SolverCfg {
            exact_threshold: 8,
            restarts: 4,
            max_sweeps: 50,
        }
    }
}

impl SolverCfg {
    pub fn validate(&self) -> Result<()> {
        if self.exact_threshold > 10 {
            return Err(Error::config("solver.exact_threshold", "must be at most 10"));
        }
        if self.restarts == 0 {
            return Err(Error::config("solver.restarts", "must be at least 1"));
        }
        Ok(())
    }
}

/// Relative slack for "strictly better" so that float noise does not
/// override tie-breaking.
const IMPROVE_TOL: f64 = 1e-9;

fn better(candidate: f64, incumbent: f64) -> bool {
    candidate > incumbent + IMPROVE_TOL * incumbent.abs().max(1.0)
}

struct Scorer<'a> {
    affs: &'a AffinitySet,
    gs: &'a Graph,
    gt: &'a Graph,
}

impl Scorer<'_> {
    fn score(&self, perm: &[usize]) -> f64 {
        let vertex: f64 = perm.iter().enumerate().map(|(i, &a)| self.affs.cv[[i, a]]).sum();
        let edge: f64 = self
            .gs
            .edges()
            .iter()
            .enumerate()
            .filter_map(|(es, &(i, j))| {
                self.gt
                    .edge_index(perm[i], perm[j])
                    .map(|et| self.affs.ce[[es, et]])
            })
            .sum();
        vertex + edge
    }
}

pub fn match_score(m: &Matching, affs: &AffinitySet, gs: &Graph, gt: &Graph) -> Result<f64> {
    affs.check(gs, gt)?;
    if m.n() != affs.n() {
        return Err(Error::Shape(format!("matching of size {} for N = {}", m.n(), affs.n())));
    }
    Ok(Scorer { affs, gs, gt }.score(m.perm()))
}

/// Linear assignment maximising `Σ cv[i, π(i)]` (shortest augmenting paths
/// with potentials).
pub fn solve_lap(cv: &Array2<f64>) -> Result<Matching> {
    let (n, m) = cv.dim();
    if n != m {
        return Err(Error::Shape(format!("solve_lap needs a square matrix, got {n}x{m}")));
    }
    if !cv.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("solve_lap"));
    }
    // 1-based potentials over rows (u) and columns (v); column 0 is virtual
    let cost = |i: usize, j: usize| -cv[[i - 1, j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    Matching::new(perm)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn solve_exact(sc: &Scorer, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut best = p.clone();
    let mut best_score = sc.score(&p);
    while next_permutation(&mut p) {
        let s = sc.score(&p);
        if better(s, best_score) {
            best_score = s;
            best.copy_from_slice(&p);
        }
    }
    best
}

fn hill_climb(sc: &Scorer, mut p: Vec<usize>, max_sweeps: usize) -> (Vec<usize>, f64) {
    let n = p.len();
    let mut score = sc.score(&p);
    for _ in 0..max_sweeps {
        let mut improved = false;
        for i in 0..n {
            for j in i + 1..n {
                p.swap(i, j);
                let s = sc.score(&p);
                if better(s, score) {
                    score = s;
                    improved = true;
                } else {
                    p.swap(i, j);
                }
            }
        }
        if !improved {
            break;
        }
    }
    (p, score)
}

/// Exhaustive for `N <= exact_threshold`, otherwise restarted 2-swap local
/// search seeded once by the linear assignment on `cv`.
pub fn gm_solve(affs: &AffinitySet, gs: &Graph, gt: &Graph, cfg: &SolverCfg, rng: &mut RngStream) -> Result<Matching> {
    cfg.validate()?;
    affs.check(gs, gt)?;
    let n = affs.n();
    let sc = Scorer { affs, gs, gt };
    if n <= cfg.exact_threshold {
        return Matching::new(solve_exact(&sc, n));
    }
    let seed = solve_lap(&affs.cv)?.perm;
    let root = RngStream::new(rng.next_u64());
    let mut runs: Vec<(Vec<usize>, f64)> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let start = if r == 0 {
                seed.clone()
            } else {
                let mut p: Vec<usize> = (0..n).collect();
                root.derive(r as u64).shuffle(&mut p);
                p
            };
            hill_climb(&sc, start, cfg.max_sweeps)
        })
        .collect();
    let mut best = 0;
    for r in 1..runs.len() {
        if better(runs[r].1, runs[best].1) {
            best = r;
        }
    }
    Matching::new(runs.swap_remove(best).0)
}

/// Forces the heuristic path regardless of `N`.
pub fn gm_solve_heuristic(affs: &AffinitySet, gs: &Graph, gt: &Graph, cfg: &SolverCfg, rng: &mut RngStream) -> Result<Matching> {
    let forced = SolverCfg {
        exact_threshold: 0,
        ..*cfg
    };
    gm_solve(affs, gs, gt, &forced, rng)
}
