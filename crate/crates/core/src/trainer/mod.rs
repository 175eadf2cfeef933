//! Self-supervised training: one step runs two views through the stack,
//! matches the resulting graphs, and backpropagates the Hamming loss against
//! the identity matching through the solver.

pub mod adam;
pub mod chain;
pub mod run;
pub mod sweep;

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::affinity::perturb;
use crate::blackbox::{hamming_loss_and_grad, solver_grad, SolverGradCfg};
use crate::encoder::{ModelGrads, ModelParams};
use crate::error::{Error, Result};
use crate::graph::KnnMetric;
use crate::matcher::{gm_solve, Matching, SolverCfg};
use crate::rng::RngStream;
use crate::synth::{SynthConfig, ViewBatch};

pub use adam::{adam_update, AdamCfg, AdamState};
pub use chain::{chain_backward, chain_forward, ChainCfg, Forward, Frozen};
pub use run::{checkpoint_dir, init_params, load_checkpoint, save_checkpoint, train_run, CheckpointManifest, TensorEntry, TrainOutcome};
pub use sweep::{rows_to_csv, sweep_run, SweepGrid, SweepRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(rename = "N")]
    pub n: usize,
    pub k: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: usize,
    #[serde(rename = "F")]
    pub f: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub knn_metric: KnnMetric,
    /// Off only in tests that need a noise-free solve.
    pub gumbel_noise: bool,
    /// Record real wall-clock times instead of zeros.
    pub timing: bool,
    pub solver: SolverCfg,
    pub data: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamCfg::default();
        TrainConfig {
            n: 16,
            k: 5,
            lambda: 80.0,
            alpha: 0.8,
            gamma: 10,
            f: 128,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            steps: 300,
            seed: 0,
            clip_norm: 1.0,
            knn_metric: KnnMetric::Euclidean,
            gumbel_noise: true,
            timing: false,
            solver: SolverCfg::default(),
            data: SynthConfig::default(),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be > 0, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config("N", format!("must be >= 2, got {}", self.n)));
        }
        if self.k < 1 || self.k >= self.n {
            return Err(Error::config("k", format!("must lie in [1, N-1] = [1, {}], got {}", self.n - 1, self.k)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if self.gamma < 1 {
            return Err(Error::config("gamma", "must be >= 1"));
        }
        if self.f < 1 {
            return Err(Error::config("F", "must be >= 1"));
        }
        positive("lambda", self.lambda)?;
        positive("lr", self.lr)?;
        positive("eps", self.eps)?;
        positive("clip_norm", self.clip_norm)?;
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, format!("must lie in [0, 1), got {b}")));
            }
        }
        self.solver.validate()?;
        self.data.validate()
    }

    pub fn adam(&self) -> AdamCfg {
        AdamCfg {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn chain(&self) -> ChainCfg {
        ChainCfg {
            k: self.k,
            metric: self.knn_metric,
            alpha: self.alpha,
            gamma: self.gamma,
        }
    }

    pub fn solver_grad(&self) -> SolverGradCfg {
        SolverGradCfg { lambda: self.lambda }
    }

    /// Parses JSON, rejecting unknown keys and naming the offending path.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Deserializes `text`, reporting the failing key path on error.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." { "<root>".to_string() } else { path };
        Error::config(key, e.into_inner().to_string())
    })
}

pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(&crate::fsutil::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub matching_accuracy: f64,
    pub grad_norm_pre_clip: f64,
    pub wall_ms: u64,
}

/// Fraction of fixed points of the matching.
pub fn matching_accuracy(m: &Matching) -> f64 {
    let hits = m.perm().iter().enumerate().filter(|(i, &a)| *i == a).count();
    hits as f64 / m.n() as f64
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub matching: Matching,
    pub grads: ModelGrads,
}

impl StepOutput {
    pub fn accuracy(&self) -> f64 {
        matching_accuracy(&self.matching)
    }
}

fn check_batch(xs: &ViewBatch, xt: &ViewBatch, params: &ModelParams) -> Result<()> {
    xs.validate()?;
    xt.validate()?;
    if xs.dims() != xt.dims() {
        return Err(Error::Shape(format!("views differ: {:?} vs {:?}", xs.dims(), xt.dims())));
    }
    if xs.dims().1 != params.feature_dim() {
        return Err(Error::Shape(format!(
            "batch has {} channels, model expects {}",
            xs.dims().1,
            params.feature_dim()
        )));
    }
    Ok(())
}

/// One forward/backward pass. The matching is solved on Gumbel-perturbed
/// affinities and the solver gradient is taken at those same affinities.
pub fn ssl_step(xs: &ViewBatch, xt: &ViewBatch, params: &ModelParams, cfg: &TrainConfig, rng: &mut RngStream) -> Result<StepOutput> {
    check_batch(xs, xt, params)?;
    let (pos_s, pos_t) = (xs.pos_array(), xt.pos_array());
    let fwd = chain_forward(params, &xs.y_array(), &xt.y_array(), &pos_s, &pos_t, &cfg.chain(), None)?;
    let noisy = if cfg.gumbel_noise {
        perturb(&fwd.affs, rng)
    } else {
        fwd.affs.clone()
    };
    let v_hat = gm_solve(&noisy, &fwd.gs, &fwd.gt, &cfg.solver, rng)?;
    let n = v_hat.n();
    let (loss, dldv) = hamming_loss_and_grad(&v_hat.indicator(), &Array2::eye(n))?;
    let sg = solver_grad(&noisy, &fwd.gs, &fwd.gt, &v_hat, &dldv, &cfg.solver_grad(), &cfg.solver, rng)?;
    let grads = chain_backward(&fwd, params, &pos_s, &pos_t, &sg.dcv, &sg.dce, cfg.alpha)?;
    Ok(StepOutput {
        loss,
        matching: v_hat,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub matching_accuracy: f64,
    pub score: f64,
    pub perm: Vec<usize>,
}

/// Noise-free match of one batch. Returns the report and the forward pass
/// (graphs and affinities) for dumping.
pub fn evaluate_batch(xs: &ViewBatch, xt: &ViewBatch, params: &ModelParams, cfg: &TrainConfig, rng: &mut RngStream) -> Result<(EvalReport, Forward)> {
    check_batch(xs, xt, params)?;
    let fwd = chain_forward(params, &xs.y_array(), &xt.y_array(), &xs.pos_array(), &xt.pos_array(), &cfg.chain(), None)?;
    let m = gm_solve(&fwd.affs, &fwd.gs, &fwd.gt, &cfg.solver, rng)?;
    let (loss, _) = hamming_loss_and_grad(&m.indicator(), &Array2::eye(m.n()))?;
    let score = crate::matcher::match_score(&m, &fwd.affs, &fwd.gs, &fwd.gt)?;
    Ok((
        EvalReport {
            loss,
            matching_accuracy: matching_accuracy(&m),
            score,
            perm: m.perm().to_vec(),
        },
        fwd,
    ))
}
