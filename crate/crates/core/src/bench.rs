//! Random graph-matching instances and a solver benchmark over them.

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::affinity::AffinitySet;
use crate::error::{Error, Result};
use crate::graph::{knn_graph, Graph, KnnMetric};
use crate::matcher::{gm_solve, gm_solve_heuristic, match_score, solve_lap, SolverCfg};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub affs: AffinitySet,
    pub gs: Graph,
    pub gt: Graph,
}

/// kNN graphs over random planar points, with affinities uniform in `[0, 1]`
/// so that score ratios are meaningful.
pub fn random_instance(rng: &mut RngStream, n: usize, k: usize) -> Result<Instance> {
    let mut points = || Array2::from_shape_fn((n, 2), |_| rng.uniform());
    let gs = knn_graph(points().view(), k, KnnMetric::Euclidean)?;
    let gt = knn_graph(points().view(), k, KnnMetric::Euclidean)?;
    let cv = Array2::from_shape_fn((n, n), |_| rng.uniform());
    let ce = Array2::from_shape_fn((gs.num_edges(), gt.num_edges()), |_| rng.uniform());
    Ok(Instance {
        affs: AffinitySet { cv, ce },
        gs,
        gt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub method: String,
    /// Mean score over the instances of this size.
    pub score: f64,
    /// Mean of `score / exact score`; empty beyond the exact threshold.
    pub optimal_ratio: Option<f64>,
    pub millis: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCfg {
    pub max_n: usize,
    pub instances: usize,
    pub k: usize,
    pub seed: u64,
    pub solver: SolverCfg,
    /// Record real solve times instead of zeros.
    pub timing: bool,
}

impl Default for BenchCfg {
    fn default() -> Self {
        BenchCfg {
            max_n: 16,
            instances: 5,
            k: 3,
            seed: 0,
            solver: SolverCfg::default(),
            timing: false,
        }
    }
}

/// For every `N` in `4..=max_n`: Hungarian on `cv` alone, the heuristic, and
/// exhaustive search where `N` is within the exact threshold. Instance `j` of
/// size `N` is drawn from `RngStream::new(seed).derive(N).derive(j)`.
pub fn solver_bench(cfg: &BenchCfg) -> Result<Vec<BenchRow>> {
    if cfg.max_n < 4 {
        return Err(Error::config("max_n", format!("must be >= 4, got {}", cfg.max_n)));
    }
    if cfg.instances == 0 {
        return Err(Error::config("instances", "must be >= 1"));
    }
    cfg.solver.validate()?;
    let root = RngStream::new(cfg.seed);
    let mut rows = Vec::new();
    for n in 4..=cfg.max_n {
        let k = cfg.k.min(n - 1).max(1);
        let exact_ok = n <= cfg.solver.exact_threshold;
        let mut sums = [0.0f64; 3];
        let mut ratios = [0.0f64; 3];
        let mut millis = [0u128; 3];
        for j in 0..cfg.instances {
            let mut rng = root.derive(n as u64).derive(j as u64);
            let inst = random_instance(&mut rng, n, k)?;
            let mut solve_rng = rng.derive(0);
            let timed = |f: &mut dyn FnMut() -> Result<crate::matcher::Matching>| -> Result<(f64, u128)> {
                let t0 = Instant::now();
                let m = f()?;
                let ms = t0.elapsed().as_millis();
                Ok((match_score(&m, &inst.affs, &inst.gs, &inst.gt)?, ms))
            };
            let lap = timed(&mut || solve_lap(&inst.affs.cv))?;
            let heur = timed(&mut || gm_solve_heuristic(&inst.affs, &inst.gs, &inst.gt, &cfg.solver, &mut solve_rng))?;
            let exact = if exact_ok {
                let forced = SolverCfg {
                    exact_threshold: n,
                    ..cfg.solver
                };
                Some(timed(&mut || gm_solve(&inst.affs, &inst.gs, &inst.gt, &forced, &mut RngStream::new(0)))?)
            } else {
                None
            };
            for (slot, r) in [Some(lap), Some(heur), exact].into_iter().enumerate() {
                if let Some((score, ms)) = r {
                    sums[slot] += score;
                    millis[slot] += ms;
                    if let Some((best, _)) = exact {
                        ratios[slot] += score / best;
                    }
                }
            }
        }
        let inv = 1.0 / cfg.instances as f64;
        for (slot, method) in ["lap", "heuristic", "exact"].into_iter().enumerate() {
            if slot == 2 && !exact_ok {
                continue;
            }
            rows.push(BenchRow {
                n,
                method: method.to_string(),
                score: sums[slot] * inv,
                optimal_ratio: exact_ok.then(|| ratios[slot] * inv),
                millis: if cfg.timing { millis[slot] as u64 } else { 0 },
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Domain(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Domain(e.to_string()))
}
