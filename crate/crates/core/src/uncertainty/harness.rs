//! Synthetic blob images, a frozen blur-and-threshold segmenter, corruption
//! shifts, and the training / out-of-domain evaluation loops for the head.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    dice_score, pearson_corr, uncertain_area, uq_backward, uq_forward, uq_loss, uq_loss_ggd, Image, ShapeMode,
    UqGrads, UqHead, HEAD_PARAM_NAMES,
};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::trainer::{adam_update, AdamCfg, AdamState, TensorEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub size: usize,
    pub max_blobs: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Sensor noise present in every image, shifted or not.
    pub source_noise: f64,
    /// Each source image gets a random corruption scaled uniformly between
    /// none and this.
    pub source_shift: ShiftSpec,
    pub predictor_radius: usize,
    pub train_images: usize,
    pub eval_images: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            size: 32,
            max_blobs: 3,
            radius_min: 3.0,
            radius_max: 7.0,
            source_noise: 0.05,
            source_shift: ShiftSpec {
                noise_sigma: 0.5,
                contrast_gain: 0.5,
                blur_radius: 2,
            },
            predictor_radius: 1,
            train_images: 48,
            eval_images: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UqConfig {
    pub patch: usize,
    pub hidden: usize,
    pub mode: ShapeMode,
    pub lam_rec: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub harness: HarnessConfig,
}

impl Default for UqConfig {
    fn default() -> Self {
        UqConfig {
            patch: 5,
            hidden: 16,
            mode: ShapeMode::Gaussian,
            lam_rec: 1.0,
            lr: 1e-2,
            epochs: 300,
            seed: 0,
            harness: HarnessConfig::default(),
        }
    }
}

impl UqConfig {
    pub fn validate(&self) -> Result<()> {
        let h = &self.harness;
        if self.patch == 0 || self.patch.is_multiple_of(2) {
            return Err(Error::config("patch", format!("must be odd and positive, got {}", self.patch)));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be positive"));
        }
        if !(self.lam_rec >= 0.0) {
            return Err(Error::config("lam_rec", format!("must be ≥ 0, got {}", self.lam_rec)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if h.size < 4 {
            return Err(Error::config("harness.size", format!("must be ≥ 4, got {}", h.size)));
        }
        if h.max_blobs == 0 {
            return Err(Error::config("harness.max_blobs", "must be ≥ 1"));
        }
        if !(h.radius_min > 0.0 && h.radius_min <= h.radius_max) {
            return Err(Error::config("harness.radius_min", "need 0 < radius_min ≤ radius_max"));
        }
        if !(h.source_noise >= 0.0) {
            return Err(Error::config("harness.source_noise", "must be ≥ 0"));
        }
        if h.train_images == 0 || h.eval_images == 0 {
            return Err(Error::config("harness.train_images", "image counts must be positive"));
        }
        Ok(())
    }
}

/// Target-domain corruption, applied as blur, then contrast loss, then noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub noise_sigma: f64,
    /// Fraction of contrast removed around mid-grey, in `[0, 1]`.
    pub contrast_gain: f64,
    pub blur_radius: usize,
}

impl ShiftSpec {
    pub const NONE: ShiftSpec = ShiftSpec {
        noise_sigma: 0.0,
        contrast_gain: 0.0,
        blur_radius: 0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", format!("must be ≥ 0, got {}", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.contrast_gain) {
            return Err(Error::config("contrast_gain", format!("must lie in [0, 1], got {}", self.contrast_gain)));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Image, rng: &mut RngStream) -> Image {
        let mut out = box_blur(x, self.blur_radius);
        if self.contrast_gain > 0.0 {
            let keep = 1.0 - self.contrast_gain;
            out.mapv_inplace(|v| 0.5 + keep * (v - 0.5));
        }
        if self.noise_sigma > 0.0 {
            out.mapv_inplace(|v| v + self.noise_sigma * rng.normal());
        }
        out
    }
}

/// Six increasingly severe shifts starting from no shift.
pub fn default_shift_grid() -> Vec<ShiftSpec> {
    (0..6)
        .map(|l| ShiftSpec {
            noise_sigma: 0.1 * l as f64,
            contrast_gain: 0.1 * l as f64,
            blur_radius: l / 2,
        })
        .collect()
}

/// Mean over a `(2r+1)²` window with edge replication.
pub fn box_blur(x: &Image, radius: usize) -> Image {
    if radius == 0 {
        return x.clone();
    }
    let (h, w) = x.dim();
    let r = radius as isize;
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    Image::from_shape_fn((h, w), |(i, j)| {
        let mut s = 0.0;
        for di in -r..=r {
            for dj in -r..=r {
                let a = (i as isize + di).clamp(0, h as isize - 1) as usize;
                let b = (j as isize + dj).clamp(0, w as isize - 1) as usize;
                s += x[[a, b]];
            }
        }
        s / n
    })
}

/// Read-only segmenter: box blur then threshold at 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlurThreshold {
    pub radius: usize,
}

impl BlurThreshold {
    pub fn predict(&self, x: &Image) -> Image {
        box_blur(x, self.radius).mapv(|v| (v > 0.5) as u8 as f64)
    }
}

/// A labelled blob image: intensity 1 on disks, 0 elsewhere, plus sensor
/// noise. The label is the noise-free disk mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Image,
    pub y: Image,
}

pub fn blob_sample(rng: &mut RngStream, cfg: &HarnessConfig) -> Sample {
    let s = cfg.size;
    let blobs = 1 + rng.below(cfg.max_blobs);
    let disks: Vec<(f64, f64, f64)> = (0..blobs)
        .map(|_| {
            let r = rng.uniform_range(cfg.radius_min, cfg.radius_max);
            (rng.uniform_range(0.0, s as f64), rng.uniform_range(0.0, s as f64), r)
        })
        .collect();
    let y = Image::from_shape_fn((s, s), |(i, j)| {
        let inside = disks.iter().any(|&(ci, cj, r)| {
            let (di, dj) = (i as f64 + 0.5 - ci, j as f64 + 0.5 - cj);
            di * di + dj * dj <= r * r
        });
        inside as u8 as f64
    });
    let x = y.mapv(|v| v + cfg.source_noise * rng.normal());
    Sample { x, y }
}

pub fn blob_set(rng: &mut RngStream, cfg: &HarnessConfig, n: usize) -> Vec<Sample> {
    (0..n).map(|_| blob_sample(rng, cfg)).collect()
}

/// Source-domain images: clean blobs under a random fraction of
/// `source_shift`.
pub fn source_set(rng: &mut RngStream, cfg: &HarnessConfig, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let s = blob_sample(rng, cfg);
            let f = rng.uniform();
            let m = cfg.source_shift;
            let shift = ShiftSpec {
                noise_sigma: f * m.noise_sigma,
                contrast_gain: f * m.contrast_gain,
                blur_radius: (f * (m.blur_radius as f64 + 1.0)).floor().min(m.blur_radius as f64) as usize,
            };
            Sample {
                x: shift.apply(&s.x, rng),
                y: s.y,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct UqTrainOutcome {
    pub head: UqHead,
    /// Mean per-pixel loss at each epoch, before that epoch's update.
    pub losses: Vec<f64>,
    pub clamped: usize,
}

/// Full-batch Adam on the per-pixel mean loss over `(x, predictor(x), y)`.
/// The predictor is only ever borrowed immutably.
pub fn train_uq(predictor: &BlurThreshold, source: &[Sample], cfg: &UqConfig) -> Result<UqTrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::config("harness.train_images", "empty source set"));
    }
    let mut head = UqHead::init(&mut RngStream::new(cfg.seed).derive(1), cfg.patch, cfg.hidden, cfg.mode)?;
    let preds: Vec<Image> = source.iter().map(|s| predictor.predict(&s.x)).collect();
    let pixels: usize = source.iter().map(|s| s.x.len()).sum();
    let mut params = head.to_tensors()?;
    let mut state = AdamState::new(&params.iter().collect::<Vec<_>>());
    let adam = AdamCfg {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut clamped = 0;
    for epoch in 0..cfg.epochs {
        let per_image = source
            .par_iter()
            .zip(&preds)
            .map(|(s, yh)| -> Result<(f64, usize, UqGrads)> {
                let (out, cache) = uq_forward(s.x.view(), yh.view(), &head)?;
                let l = match cfg.mode {
                    ShapeMode::Gaussian => uq_loss(&out, &s.y, yh, cfg.lam_rec)?,
                    ShapeMode::Ggd => uq_loss_ggd(&out, &s.y, yh, cfg.lam_rec)?,
                };
                let g = uq_backward(&head, &out, &cache, &l);
                Ok((l.loss, l.clamped, g))
            })
            .collect::<Result<Vec<_>>>()?;
        // summed in image order so the result does not depend on scheduling
        let mut total = 0.0;
        let mut acc: Option<UqGrads> = None;
        for (loss, c, g) in per_image {
            total += loss;
            clamped += c;
            acc = Some(match acc {
                None => g,
                Some(a) => UqGrads {
                    w1: a.w1 + g.w1,
                    b1: a.b1 + g.b1,
                    w2: a.w2 + g.w2,
                    b2: a.b2 + g.b2,
                },
            });
        }
        let mean = total / pixels as f64;
        if !mean.is_finite() {
            return Err(Error::numeric(format!("train_uq epoch {epoch}")));
        }
        losses.push(mean);
        let mut g = acc.expect("non-empty source");
        let inv = 1.0 / pixels as f64;
        g.w1 *= inv;
        g.b1 *= inv;
        g.w2 *= inv;
        g.b2 *= inv;
        let grads = g.to_tensors()?;
        adam_update(
            &mut params.iter_mut().collect::<Vec<_>>(),
            &grads.iter().collect::<Vec<_>>(),
            &mut state,
            &adam,
        )?;
        head = UqHead::from_tensors(cfg.patch, cfg.mode, &params)?;
    }
    Ok(UqTrainOutcome { head, losses, clamped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftLevel {
    pub shift: ShiftSpec,
    pub mean_uncertain_area: f64,
    pub mean_uncertainty: f64,
    pub mean_dice: f64,
    /// Mean squared difference between uncertain area and `1 − Dice`.
    pub mse_area_vs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub levels: Vec<ShiftLevel>,
    /// Correlation between the per-level area and Dice series.
    pub pearson_area_dice: f64,
}

/// Scores every shift level on the same clean evaluation images; the noise of
/// level `l` comes from `rng.derive(l)`.
pub fn eval_ood(
    head: &UqHead,
    predictor: &BlurThreshold,
    grid: &[ShiftSpec],
    eval_set: &[Sample],
    rng: &RngStream,
) -> Result<OodReport> {
    if eval_set.is_empty() {
        return Err(Error::config("harness.eval_images", "empty evaluation set"));
    }
    let mut levels = Vec::with_capacity(grid.len());
    for (l, shift) in grid.iter().enumerate() {
        shift.validate()?;
        let mut noise = rng.derive(l as u64);
        let (mut area, mut unc, mut dice, mut mse) = (0.0, 0.0, 0.0, 0.0);
        for s in eval_set {
            let x = shift.apply(&s.x, &mut noise);
            let yh = predictor.predict(&x);
            let (out, _) = uq_forward(x.view(), yh.view(), head)?;
            let a = uncertain_area(&out.uncertainty)?;
            let d = dice_score(&yh, &s.y)?;
            area += a;
            unc += out.uncertainty.mean().unwrap_or(0.0);
            dice += d;
            mse += (a - (1.0 - d)).powi(2);
        }
        let n = eval_set.len() as f64;
        levels.push(ShiftLevel {
            shift: *shift,
            mean_uncertain_area: area / n,
            mean_uncertainty: unc / n,
            mean_dice: dice / n,
            mse_area_vs_error: mse / n,
        });
    }
    let areas: Vec<f64> = levels.iter().map(|l| l.mean_uncertain_area).collect();
    let dices: Vec<f64> = levels.iter().map(|l| l.mean_dice).collect();
    let pearson_area_dice = pearson_corr(&areas, &dices)?;
    Ok(OodReport {
        levels,
        pearson_area_dice,
    })
}

pub fn report_csv(report: &OodReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "noise_sigma",
        "contrast_gain",
        "blur_radius",
        "mean_uncertain_area",
        "mean_uncertainty",
        "mean_dice",
        "mse_area_vs_error",
    ])
    .map_err(|e| Error::Domain(e.to_string()))?;
    for l in &report.levels {
        w.write_record([
            l.shift.noise_sigma.to_string(),
            l.shift.contrast_gain.to_string(),
            l.shift.blur_radius.to_string(),
            l.mean_uncertain_area.to_string(),
            l.mean_uncertainty.to_string(),
            l.mean_dice.to_string(),
            l.mse_area_vs_error.to_string(),
        ])
        .map_err(|e| Error::Domain(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Domain(e.to_string()))
}

/// Seeded sets used by the harness: training images from `derive(0)`,
/// evaluation images from `derive(2)`, shift noise from `derive(3)`.
pub struct HarnessData {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub shift_rng: RngStream,
}

pub fn harness_data(cfg: &UqConfig) -> HarnessData {
    let root = RngStream::new(cfg.seed);
    HarnessData {
        train: source_set(&mut root.derive(0), &cfg.harness, cfg.harness.train_images),
        eval: blob_set(&mut root.derive(2), &cfg.harness, cfg.harness.eval_images),
        shift_rng: root.derive(3),
    }
}

pub fn predictor_for(cfg: &UqConfig) -> BlurThreshold {
    BlurThreshold {
        radius: cfg.harness.predictor_radius,
    }
}

/// Trains on the source set and evaluates the shift grid in one go.
pub fn run_harness(cfg: &UqConfig, grid: &[ShiftSpec]) -> Result<(UqTrainOutcome, OodReport)> {
    let data = harness_data(cfg);
    let predictor = predictor_for(cfg);
    let trained = train_uq(&predictor, &data.train, cfg)?;
    let report = eval_ood(&trained.head, &predictor, grid, &data.eval, &data.shift_rng)?;
    Ok((trained, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadManifest {
    pub tensors: Vec<TensorEntry>,
    pub config: UqConfig,
}

pub fn save_head(dir: &Path, head: &UqHead, cfg: &UqConfig) -> Result<()> {
    fsutil::create_dir(dir)?;
    let mut tensors = Vec::new();
    for (name, t) in HEAD_PARAM_NAMES.iter().zip(head.to_tensors()?) {
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
        &HeadManifest {
            tensors,
            config: cfg.clone(),
        },
    )
}

pub fn load_head(dir: &Path) -> Result<(UqHead, UqConfig)> {
    let manifest: HeadManifest = crate::trainer::load_config(&dir.join("manifest.json"))?;
    let tensors = manifest
        .tensors
        .iter()
        .map(|e| Tensor::load(dir.join(&e.file)))
        .collect::<Result<Vec<_>>>()?;
    let head = UqHead::from_tensors(manifest.config.patch, manifest.config.mode, &tensors)?;
    Ok((head, manifest.config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> UqConfig {
        UqConfig {
            epochs: 60,
            harness: HarnessConfig {
                size: 24,
                train_images: 8,
                eval_images: 6,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn blur_preserves_constant_and_mean_kernel() {
        let c = Image::from_elem((5, 5), 0.3);
        assert!(box_blur(&c, 2).iter().all(|v| (v - 0.3).abs() < 1e-12));
        let mut d = Image::zeros((5, 5));
        d[[2, 2]] = 9.0;
        assert!((box_blur(&d, 1)[[1, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_shift_is_identity() {
        let mut rng = RngStream::new(1);
        let s = blob_sample(&mut rng, &HarnessConfig::default());
        assert_eq!(ShiftSpec::NONE.apply(&s.x, &mut rng), s.x);
    }

    #[test]
    fn default_grid_is_monotone_and_starts_clean() {
        let g = default_shift_grid();
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], ShiftSpec::NONE);
        for w in g.windows(2) {
            assert!(w[1].noise_sigma >= w[0].noise_sigma && w[1].blur_radius >= w[0].blur_radius);
        }
    }

    #[test]
    fn predictor_is_frozen_through_training() {
        let cfg = small();
        let data = harness_data(&cfg);
        let predictor = predictor_for(&cfg);
        let before: Vec<Image> = data.eval.iter().map(|s| predictor.predict(&s.x)).collect();
        train_uq(&predictor, &data.train, &cfg).unwrap();
        let after: Vec<Image> = data.eval.iter().map(|s| predictor.predict(&s.x)).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn smoothed_loss_is_non_increasing() {
        let cfg = small();
        let data = harness_data(&cfg);
        let out = train_uq(&predictor_for(&cfg), &data.train, &cfg).unwrap();
        let smooth: Vec<f64> = out.losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        for w in smooth.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{smooth:?}");
        }
    }

    #[test]
    fn corrupted_inputs_are_more_uncertain() {
        let cfg = small();
        let grid = [
            ShiftSpec::NONE,
            ShiftSpec {
                noise_sigma: 0.5,
                ..ShiftSpec::NONE
            },
            ShiftSpec {
                noise_sigma: 0.5,
                contrast_gain: 0.2,
                blur_radius: 1,
            },
        ];
        let (_, report) = run_harness(&cfg, &grid).unwrap();
        assert!(report.levels[0].mean_uncertainty < report.levels[1].mean_uncertainty, "{report:?}");
        assert_eq!(report.levels[0].shift, ShiftSpec::NONE);
        let ceiling = report.levels[0].mean_dice;
        assert!(report.levels.iter().all(|l| l.mean_dice <= ceiling));
    }

    #[test]
    fn head_save_load_round_trip() {
        let cfg = UqConfig {
            epochs: 2,
            ..small()
        };
        let data = harness_data(&cfg);
        let out = train_uq(&predictor_for(&cfg), &data.train, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_head(dir.path(), &out.head, &cfg).unwrap();
        let (head, loaded) = load_head(dir.path()).unwrap();
        assert_eq!(loaded, cfg);
        assert_eq!(head.to_tensors().unwrap(), out.head.to_tensors().unwrap());
    }

    #[test]
    fn report_csv_has_row_per_level() {
        let cfg = UqConfig {
            epochs: 3,
            ..small()
        };
        let (_, report) = run_harness(&cfg, &default_shift_grid()).unwrap();
        let csv = String::from_utf8(report_csv(&report).unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn invalid_shift_is_rejected() {
        let bad = ShiftSpec {
            contrast_gain: 1.5,
            ..ShiftSpec::NONE
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
    }
}
