//! Grid sweeps over training hyperparameters.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{train_run, TrainConfig};
use crate::error::{Error, Result};

/// Axes left empty fall back to the base config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub base: TrainConfig,
    #[serde(rename = "N")]
    pub n: Vec<usize>,
    pub k: Vec<usize>,
    pub lambda: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<usize>,
    /// Steps per cell.
    pub steps: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            base: TrainConfig::default(),
            n: vec![8, 16, 32],
            k: vec![],
            lambda: vec![],
            alpha: vec![0.7, 0.8, 0.9],
            gamma: vec![],
            steps: 50,
        }
    }
}

fn or_base<T: Copy>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

impl SweepGrid {
    /// Cells in row-major order over `N, k, lambda, alpha, gamma`.
    pub fn cells(&self) -> Vec<TrainConfig> {
        let b = &self.base;
        let mut out = Vec::new();
        for &n in &or_base(&self.n, b.n) {
            for &k in &or_base(&self.k, b.k) {
                for &lambda in &or_base(&self.lambda, b.lambda) {
                    for &alpha in &or_base(&self.alpha, b.alpha) {
                        for &gamma in &or_base(&self.gamma, b.gamma) {
                            out.push(TrainConfig {
                                n,
                                k,
                                lambda,
                                alpha,
                                gamma,
                                steps: self.steps,
                                ..b.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub k: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub wall_ms: u64,
    pub status: String,
}

/// Runs every cell; a failing cell is recorded in `status` and the sweep
/// carries on.
pub fn sweep_run(grid: &SweepGrid) -> Vec<SweepRow> {
    grid.cells()
        .into_iter()
        .map(|cfg| {
            let t0 = Instant::now();
            let result = train_run(&cfg, None, None);
            let wall_ms = if cfg.timing { t0.elapsed().as_millis() as u64 } else { 0 };
            let (final_loss, final_accuracy, status) = match result {
                Ok(o) => {
                    let last = o.records.last();
                    (last.map(|r| r.loss), last.map(|r| r.matching_accuracy), "ok".to_string())
                }
                Err(e) => (None, None, e.to_string()),
            };
            SweepRow {
                n: cfg.n,
                k: cfg.k,
                lambda: cfg.lambda,
                alpha: cfg.alpha,
                gamma: cfg.gamma,
                steps: cfg.steps,
                final_loss,
                final_accuracy,
                wall_ms,
                status,
            }
        })
        .collect()
}

pub fn rows_to_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Domain(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Domain(e.to_string()))
}
