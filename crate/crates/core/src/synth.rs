//! Synthetic two-view batches.
//!
//! Each item is a smooth random feature field on the unit square. Two random
//! crops (with optional horizontal flip and additive noise) are resampled onto
//! an `R x S` lattice; the position map records where every lattice cell came
//! from in the original field, which is what the location-based local cost
//! keys on. Item `i` of both views derives from scene `i`, so the ground-truth
//! matching is the identity.

use std::path::Path;

use ndarray::{Array3, Array4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Feature channels.
    #[serde(rename = "D")]
    pub d: usize,
    /// Scene grid resolution.
    #[serde(rename = "G")]
    pub g: usize,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub noise_sigma: f64,
    pub min_crop: f64,
    pub max_crop: f64,
    pub flip_prob: f64,
    /// Minimum intersection area between the two crops of one item.
    pub min_overlap: f64,
    /// Standard deviation of a per-scene, per-channel constant added to the
    /// field, giving each scene a global appearance both views share.
    pub appearance_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d: 8,
            g: 32,
            r: 7,
            s: 7,
            noise_sigma: 0.05,
            min_crop: 0.5,
            max_crop: 0.9,
            flip_prob: 0.5,
            min_overlap: 0.04,
            appearance_sigma: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::config("data.D", "must be >= 1"));
        }
        if self.g < 4 {
            return Err(Error::config("data.G", "must be >= 4"));
        }
        if self.r < 2 || self.s < 2 {
            return Err(Error::config("data.R", "R and S must be >= 2"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("data.noise_sigma", "must be >= 0"));
        }
        if !(0.25..=1.0).contains(&self.min_crop) || !(self.min_crop..=1.0).contains(&self.max_crop)
        {
            return Err(Error::config(
                "data.min_crop",
                "need 0.25 <= min_crop <= max_crop <= 1",
            ));
        }
        if !(self.appearance_sigma >= 0.0) {
            return Err(Error::config("data.appearance_sigma", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("data.flip_prob", "must lie in [0, 1]"));
        }
        if !(0.0..=self.min_crop * self.min_crop).contains(&self.min_overlap) {
            return Err(Error::config(
                "data.min_overlap",
                "must lie in [0, min_crop^2]",
            ));
        }
        Ok(())
    }
}

/// Latent `D x G x G` feature field over the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseScene {
    pub field: Tensor,
}

impl BaseScene {
    pub fn channels(&self) -> usize {
        self.field.shape()[0]
    }

    pub fn grid(&self) -> usize {
        self.field.shape()[1]
    }

    fn at(&self, c: usize, gy: usize, gx: usize) -> f64 {
        let g = self.grid();
        self.field.data()[(c * g + gy) * g + gx] as f64
    }

    /// Bilinear sample of channel `c` at unit-square point `(x, y)`.
    pub fn sample(&self, c: usize, x: f64, y: f64) -> f64 {
        let g = self.grid();
        let top = (g - 1) as f64;
        let fx = (x * top).clamp(0.0, top);
        let fy = (y * top).clamp(0.0, top);
        let x0 = (fx.floor() as usize).min(g - 2);
        let y0 = (fy.floor() as usize).min(g - 2);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let a = self.at(c, y0, x0) * (1.0 - tx) + self.at(c, y0, x0 + 1) * tx;
        let b = self.at(c, y0 + 1, x0) * (1.0 - tx) + self.at(c, y0 + 1, x0 + 1) * tx;
        a * (1.0 - ty) + b * ty
    }
}

fn box_blur3(src: &[f64], g: usize) -> Vec<f64> {
    let idx = |y: isize, x: isize| {
        let y = y.clamp(0, g as isize - 1) as usize;
        let x = x.clamp(0, g as isize - 1) as usize;
        y * g + x
    };
    let mut out = vec![0.0; g * g];
    for y in 0..g as isize {
        for x in 0..g as isize {
            let mut acc = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    acc += src[idx(y + dy, x + dx)];
                }
            }
            out[y as usize * g + x as usize] = acc / 9.0;
        }
    }
    out
}

/// I.i.d. Gaussian grid smoothed by two passes of a 3x3 box filter
/// (replicated borders).
pub fn gen_scene(rng: &mut RngStream, d: usize, g: usize) -> Result<BaseScene> {
    if d < 1 || g < 4 {
        return Err(Error::Domain(format!("gen_scene needs D >= 1, G >= 4 (got {d}, {g})")));
    }
    let mut data = Vec::with_capacity(d * g * g);
    for _ in 0..d {
        let raw: Vec<f64> = (0..g * g).map(|_| rng.normal()).collect();
        let smooth = box_blur3(&box_blur3(&raw, g), g);
        data.extend(smooth.into_iter().map(|v| v as f32));
    }
    Ok(BaseScene {
        field: Tensor::new(vec![d, g, g], data)?,
    })
}

/// A crop `(x0, y0, w, h)` of the unit square, optional horizontal flip and
/// additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
    pub hflip: bool,
    pub noise_sigma: f64,
}

impl ViewTransform {
    pub fn identity() -> Self {
        ViewTransform {
            x0: 0.0,
            y0: 0.0,
            w: 1.0,
            h: 1.0,
            hflip: false,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const EPS: f64 = 1e-12;
        let ok = self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.w >= 0.25
            && self.h >= 0.25
            && self.x0 + self.w <= 1.0 + EPS
            && self.y0 + self.h <= 1.0 + EPS
            && self.noise_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid view transform {self:?}")))
        }
    }

    pub fn random(rng: &mut RngStream, cfg: &SynthConfig) -> Self {
        let w = rng.uniform_range(cfg.min_crop, cfg.max_crop);
        let h = rng.uniform_range(cfg.min_crop, cfg.max_crop);
        let x0 = rng.uniform_range(0.0, 1.0 - w);
        let y0 = rng.uniform_range(0.0, 1.0 - h);
        let hflip = rng.bernoulli(cfg.flip_prob);
        ViewTransform {
            x0,
            y0,
            w,
            h,
            hflip,
            noise_sigma: cfg.noise_sigma,
        }
    }

    pub fn intersection_area(&self, other: &ViewTransform) -> f64 {
        let w = (self.x0 + self.w).min(other.x0 + other.w) - self.x0.max(other.x0);
        let h = (self.y0 + self.h).min(other.y0 + other.h) - self.y0.max(other.y0);
        w.max(0.0) * h.max(0.0)
    }

    /// Original-coordinate point sampled by lattice cell `(r, c)`.
    pub fn cell_position(&self, r: usize, c: usize, rows: usize, cols: usize) -> (f64, f64) {
        let c = if self.hflip { cols - 1 - c } else { c };
        let x = self.x0 + self.w * c as f64 / (cols - 1) as f64;
        let y = self.y0 + self.h * r as f64 / (rows - 1) as f64;
        (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))
    }
}

/// Resamples `scene` under `transform`. Returns `y: D x R x S` and
/// `pos: R x S x 2` holding `(x, y)` in original coordinates.
pub fn apply_view(
    scene: &BaseScene,
    transform: &ViewTransform,
    rows: usize,
    cols: usize,
    rng: &mut RngStream,
) -> Result<(Tensor, Tensor)> {
    transform.validate()?;
    if rows < 2 || cols < 2 {
        return Err(Error::Domain("apply_view needs R, S >= 2".into()));
    }
    let d = scene.channels();
    let mut y = Array3::<f64>::zeros((d, rows, cols));
    let mut pos = Array3::<f64>::zeros((rows, cols, 2));
    for r in 0..rows {
        for c in 0..cols {
            let (px, py) = transform.cell_position(r, c, rows, cols);
            pos[[r, c, 0]] = px;
            pos[[r, c, 1]] = py;
            for ch in 0..d {
                y[[ch, r, c]] = scene.sample(ch, px, py);
            }
        }
    }
    if transform.noise_sigma > 0.0 {
        for v in y.iter_mut() {
            *v += transform.noise_sigma * rng.normal();
        }
    }
    Ok((Tensor::from_array(&y)?, Tensor::from_array(&pos)?))
}

/// One view of a batch: features `N x D x R x S` and positions `N x R x S x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub y: Tensor,
    pub pos: Tensor,
}

impl ViewBatch {
    pub fn new(y: Tensor, pos: Tensor) -> Result<Self> {
        let b = ViewBatch { y, pos };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ys = self.y.shape();
        let ps = self.pos.shape();
        if ys.len() != 4 || ps.len() != 4 {
            return Err(Error::Shape(format!(
                "view batch needs 4-d y and pos, got {ys:?} and {ps:?}"
            )));
        }
        if ys[0] != ps[0] || ys[2] != ps[1] || ys[3] != ps[2] || ps[3] != 2 {
            return Err(Error::Shape(format!(
                "y {ys:?} inconsistent with pos {ps:?}"
            )));
        }
        if ys[0] < 2 {
            return Err(Error::Shape("view batch needs N >= 2".into()));
        }
        if self.pos.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Domain("positions must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.y.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn y_array(&self) -> Array4<f64> {
        self.y
            .to_array()
            .into_dimensionality()
            .expect("validated 4-d")
    }

    pub fn pos_array(&self) -> Array4<f64> {
        self.pos
            .to_array()
            .into_dimensionality()
            .expect("validated 4-d")
    }
}

/// Draws `n` scenes and two intersecting random views of each.
pub fn make_batch(rng: &mut RngStream, n: usize, cfg: &SynthConfig) -> Result<(ViewBatch, ViewBatch)> {
    if n < 2 {
        return Err(Error::Domain("make_batch needs N >= 2".into()));
    }
    cfg.validate()?;
    let root = RngStream::new(rng.next_u64());
    let items: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let mut item_rng = root.derive(i as u64);
            let mut scene = gen_scene(&mut item_rng, cfg.d, cfg.g)?;
            if cfg.appearance_sigma > 0.0 {
                let plane = cfg.g * cfg.g;
                for c in 0..cfg.d {
                    let offset = (cfg.appearance_sigma * item_rng.normal()) as f32;
                    for v in &mut scene.field.data_mut()[c * plane..(c + 1) * plane] {
                        *v += offset;
                    }
                }
            }
            let s = ViewTransform::random(&mut item_rng, cfg);
            let mut t = ViewTransform::random(&mut item_rng, cfg);
            let mut tries = 0;
            while s.intersection_area(&t) < cfg.min_overlap {
                t = ViewTransform::random(&mut item_rng, cfg);
                tries += 1;
                if tries > 10_000 {
                    return Err(Error::Domain("could not draw overlapping crops".into()));
                }
            }
            let vs = apply_view(&scene, &s, cfg.r, cfg.s, &mut item_rng)?;
            let vt = apply_view(&scene, &t, cfg.r, cfg.s, &mut item_rng)?;
            Ok((vs, vt))
        })
        .collect::<Result<Vec<_>>>()?;
    let stack = |pick: &dyn Fn(&((Tensor, Tensor), (Tensor, Tensor))) -> &Tensor| {
        let first = pick(&items[0]).shape().to_vec();
        let mut shape = vec![n];
        shape.extend_from_slice(&first);
        let data = items.iter().flat_map(|it| pick(it).data().to_vec()).collect();
        Tensor::new(shape, data)
    };
    let xs = ViewBatch::new(stack(&|it| &it.0 .0)?, stack(&|it| &it.0 .1)?)?;
    let xt = ViewBatch::new(stack(&|it| &it.1 .0)?, stack(&|it| &it.1 .1)?)?;
    Ok((xs, xt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub seed: u64,
    pub cfg: SynthConfig,
}

pub const BATCH_FILES: [&str; 4] = ["ys.gmt", "pos_s.gmt", "yt.gmt", "pos_t.gmt"];

pub fn save_batch(dir: &Path, xs: &ViewBatch, xt: &ViewBatch, manifest: &BatchManifest) -> Result<()> {
    fsutil::create_dir(dir)?;
    xs.y.save(dir.join(BATCH_FILES[0]))?;
    xs.pos.save(dir.join(BATCH_FILES[1]))?;
    xt.y.save(dir.join(BATCH_FILES[2]))?;
    xt.pos.save(dir.join(BATCH_FILES[3]))?;
    fsutil::write_json(&dir.join("manifest.json"), manifest)
}

/// Loads a batch directory. `post_s.gmt` is accepted as an alias of
/// `pos_s.gmt`.
pub fn load_batch(dir: &Path) -> Result<(ViewBatch, ViewBatch)> {
    let pos_s = {
        let p = dir.join(BATCH_FILES[1]);
        if p.exists() {
            p
        } else {
            dir.join("post_s.gmt")
        }
    };
    let xs = ViewBatch::new(Tensor::load(dir.join(BATCH_FILES[0]))?, Tensor::load(pos_s)?)?;
    let xt = ViewBatch::new(
        Tensor::load(dir.join(BATCH_FILES[2]))?,
        Tensor::load(dir.join(BATCH_FILES[3]))?,
    )?;
    if xs.dims() != xt.dims() {
        return Err(Error::Shape(format!(
            "source view {:?} and target view {:?} differ",
            xs.dims(),
            xt.dims()
        )));
    }
    Ok((xs, xt))
}
