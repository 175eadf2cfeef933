//! The outer training loop, metrics stream, and checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{adam_update, ssl_step, AdamState, MetricsRecord, TrainConfig};
use crate::encoder::{ModelParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::math::clip_global_norm;
use crate::rng::RngStream;
use crate::synth::{load_batch, make_batch};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
    pub config: TrainConfig,
}

pub fn save_checkpoint(dir: &Path, params: &ModelParams, step: usize, cfg: &TrainConfig) -> Result<()> {
    fsutil::create_dir(dir)?;
    let mut tensors = Vec::new();
    for (name, t) in PARAM_NAMES.iter().zip(params.tensors()) {
        let file = format!("{name}.gmt");
        t.save(dir.join(&file))?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    fsutil::write_json(
        &dir.join("manifest.json"),
        &CheckpointManifest {
            step,
            tensors,
            config: cfg.clone(),
        },
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, CheckpointManifest)> {
    let manifest: CheckpointManifest = super::load_config(&dir.join("manifest.json"))?;
    let mut tensors = Vec::new();
    for (entry, expected) in manifest.tensors.iter().zip(PARAM_NAMES) {
        if entry.name != expected {
            return Err(Error::config("tensors", format!("expected `{expected}`, found `{}`", entry.name)));
        }
        let t = Tensor::load(dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Shape(format!("{}: manifest says {:?}, file has {:?}", entry.name, entry.shape, t.shape())));
        }
        tensors.push(t);
    }
    Ok((ModelParams::from_tensors(tensors)?, manifest))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub records: Vec<MetricsRecord>,
}

/// Initial parameters for a seed; `train_run` with zero steps returns these.
pub fn init_params(cfg: &TrainConfig) -> ModelParams {
    ModelParams::init(&mut RngStream::new(cfg.seed).derive(0), cfg.data.d, cfg.f)
}

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("serializable record");
        out.push(b'\n');
    }
    fsutil::write_atomic(path, &out)
}

/// Trains for `cfg.steps` steps. With `out`, writes `metrics.jsonl`,
/// `config.json` and `checkpoint/` there; on a numeric failure the
/// checkpoint holds the last good parameters and the error is returned after
/// writing. `dataset` replaces fresh synthetic batches with one fixed batch
/// directory.
pub fn train_run(cfg: &TrainConfig, out: Option<&Path>, dataset: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed);
    let mut params = init_params(cfg);
    let mut data_rng = root.derive(1);
    let mut step_rng = root.derive(2);
    let fixed = dataset.map(load_batch).transpose()?;
    let mut state = AdamState::new(&params.tensors());
    let mut records = Vec::with_capacity(cfg.steps);
    let mut failure = None;

    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let (xs, xt) = match &fixed {
            Some(b) => b.clone(),
            None => make_batch(&mut data_rng, cfg.n, &cfg.data)?,
        };
        let out = match ssl_step(&xs, &xt, &params, cfg, &mut step_rng) {
            Ok(o) => o,
            Err(e @ Error::Numeric { .. }) => {
                failure = Some(e);
                break;
            }
            Err(e) => return Err(e),
        };
        let mut g = out.grads.to_tensors()?;
        let norm = clip_global_norm(&mut g.tensors_mut(), cfg.clip_norm);
        let mut next = params.clone();
        adam_update(&mut next.tensors_mut(), &g.tensors(), &mut state, &cfg.adam())?;
        params = next;
        records.push(MetricsRecord {
            step,
            loss: out.loss,
            matching_accuracy: out.accuracy(),
            grad_norm_pre_clip: norm,
            wall_ms: if cfg.timing { t0.elapsed().as_millis() as u64 } else { 0 },
        });
    }

    if let Some(dir) = out {
        fsutil::create_dir(dir)?;
        fsutil::write_json(&dir.join("config.json"), cfg)?;
        write_metrics(&dir.join("metrics.jsonl"), &records)?;
        save_checkpoint(&dir.join("checkpoint"), &params, records.len(), cfg)?;
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(TrainOutcome { params, records }),
    }
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoint")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthConfig;

    fn tiny() -> TrainConfig {
        TrainConfig {
            n: 5,
            k: 2,
            f: 6,
            steps: 3,
            data: SynthConfig {
                d: 3,
                g: 10,
                r: 3,
                s: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let cfg = TrainConfig { steps: 0, ..tiny() };
        let dir = tempfile::tempdir().unwrap();
        let out = train_run(&cfg, Some(dir.path()), None).unwrap();
        assert_eq!(out.params, init_params(&cfg));
        let (loaded, manifest) = load_checkpoint(&checkpoint_dir(dir.path())).unwrap();
        assert_eq!(loaded, out.params);
        assert_eq!(manifest.step, 0);
        assert_eq!(std::fs::read(dir.path().join("metrics.jsonl")).unwrap(), b"");
    }

    #[test]
    fn reruns_write_identical_bytes() {
        let cfg = tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        train_run(&cfg, Some(a.path()), None).unwrap();
        train_run(&cfg, Some(b.path()), None).unwrap();
        for f in ["metrics.jsonl", "config.json", "checkpoint/manifest.json", "checkpoint/gnn1.w.gmt"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let lines = std::fs::read_to_string(a.path().join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 3);
        let rec: MetricsRecord = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(rec.step, 0);
        assert_eq!(rec.wall_ms, 0);
    }

    #[test]
    fn fixed_dataset_is_used() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let (xs, xt) = make_batch(&mut RngStream::new(4), cfg.n, &cfg.data).unwrap();
        let manifest = crate::synth::BatchManifest {
            n: cfg.n,
            d: cfg.data.d,
            r: cfg.data.r,
            s: cfg.data.s,
            seed: 4,
            cfg: cfg.data.clone(),
        };
        crate::synth::save_batch(dir.path(), &xs, &xt, &manifest).unwrap();
        let out = train_run(&cfg, None, Some(dir.path())).unwrap();
        assert_eq!(out.records.len(), 3);
    }

    #[test]
    fn post_clip_norm_is_bounded() {
        let cfg = TrainConfig { steps: 8, ..tiny() };
        let root = RngStream::new(cfg.seed);
        let params = init_params(&cfg);
        let mut data_rng = root.derive(1);
        let mut step_rng = root.derive(2);
        for _ in 0..cfg.steps {
            let (xs, xt) = make_batch(&mut data_rng, cfg.n, &cfg.data).unwrap();
            let out = ssl_step(&xs, &xt, &params, &cfg, &mut step_rng).unwrap();
            let mut g = out.grads.to_tensors().unwrap();
            clip_global_norm(&mut g.tensors_mut(), cfg.clip_norm);
            let after = crate::math::global_norm(&g.tensors());
            assert!(after <= cfg.clip_norm + 1e-6);
        }
    }
}
