//! Post-hoc uncertainty for a frozen segmenter: a per-pixel probabilistic
//! head, its likelihood objective, and the area/Dice/correlation metrics used
//! to relate uncertainty to out-of-domain performance.

mod harness;

pub use harness::*;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{digamma, ggd_variance, ln_gamma};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub type Image = Array2<f64>;

/// Floor applied to the Gaussian variance before it enters the likelihood.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeMode {
    /// Shape pinned at 2.
    Gaussian,
    /// Shape predicted per pixel.
    Ggd,
}

pub const HEAD_PARAM_NAMES: [&str; 4] = ["uq.w1", "uq.b1", "uq.w2", "uq.b2"];

/// Two-layer perceptron applied independently at every pixel to the
/// concatenated `p×p` patches of the input and the prediction. Output rows
/// are mean, log-scale and log-shape.
#[derive(Debug, Clone, PartialEq)]
pub struct UqHead {
    pub patch: usize,
    pub mode: ShapeMode,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UqGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl UqHead {
    pub fn init(rng: &mut RngStream, patch: usize, hidden: usize, mode: ShapeMode) -> Result<Self> {
        if patch == 0 || patch.is_multiple_of(2) {
            return Err(Error::config("patch", format!("must be odd and positive, got {patch}")));
        }
        if hidden == 0 {
            return Err(Error::config("hidden", "must be positive"));
        }
        let inputs = 2 * patch * patch;
        let l1 = (6.0 / (inputs + hidden) as f64).sqrt();
        let l2 = (6.0 / (hidden + 3) as f64).sqrt();
        let w1 = Array2::from_shape_fn((hidden, inputs), |_| rng.uniform_range(-l1, l1));
        let w2 = Array2::from_shape_fn((3, hidden), |_| rng.uniform_range(-l2, l2) * 0.1);
        // shape starts at 2 in both modes
        let b2 = Array1::from(vec![0.0, 0.0, 2f64.ln()]);
        Ok(UqHead {
            patch,
            mode,
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2,
        })
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn to_tensors(&self) -> Result<Vec<Tensor>> {
        Ok(vec![
            Tensor::from_array(&self.w1)?,
            Tensor::from_array(&self.b1)?,
            Tensor::from_array(&self.w2)?,
            Tensor::from_array(&self.b2)?,
        ])
    }

    pub fn from_tensors(patch: usize, mode: ShapeMode, t: &[Tensor]) -> Result<Self> {
        let [w1, b1, w2, b2] = t else {
            return Err(Error::Shape(format!("uq head expects 4 tensors, got {}", t.len())));
        };
        let mat = |t: &Tensor| -> Result<Array2<f64>> {
            t.to_array().into_dimensionality().map_err(|e| Error::Shape(e.to_string()))
        };
        let vec = |t: &Tensor| -> Result<Array1<f64>> {
            t.to_array().into_dimensionality().map_err(|e| Error::Shape(e.to_string()))
        };
        let head = UqHead {
            patch,
            mode,
            w1: mat(w1)?,
            b1: vec(b1)?,
            w2: mat(w2)?,
            b2: vec(b2)?,
        };
        let h = head.hidden();
        if head.w1.dim() != (h, 2 * patch * patch) || head.w2.dim() != (3, h) || head.b2.len() != 3 {
            return Err(Error::Shape("uq head tensors have inconsistent widths".into()));
        }
        Ok(head)
    }
}

impl UqGrads {
    pub fn to_tensors(&self) -> Result<Vec<Tensor>> {
        Ok(vec![
            Tensor::from_array(&self.w1)?,
            Tensor::from_array(&self.b1)?,
            Tensor::from_array(&self.w2)?,
            Tensor::from_array(&self.b2)?,
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UqOutput {
    pub mu: Image,
    pub scale: Image,
    pub shape: Image,
    /// Per-pixel variance `scale² Γ(3/shape) / Γ(1/shape)`.
    pub uncertainty: Image,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct UqCache {
    features: Array2<f64>,
    hidden: Array2<f64>,
}

/// Rows are pixels in row-major order; columns are the input patch followed
/// by the prediction patch, each edge-replicated.
pub fn patch_features(x: ArrayView2<f64>, y_hat: ArrayView2<f64>, patch: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let r = (patch / 2) as isize;
    let pp = patch * patch;
    let mut f = Array2::zeros((h * w, 2 * pp));
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for i in 0..h {
        for j in 0..w {
            let mut row = f.row_mut(i * w + j);
            let mut k = 0;
            for di in -r..=r {
                for dj in -r..=r {
                    let (a, b) = (clamp(i as isize + di, h), clamp(j as isize + dj, w));
                    row[k] = x[[a, b]];
                    row[pp + k] = y_hat[[a, b]];
                    k += 1;
                }
            }
        }
    }
    f
}

pub fn uq_forward(x: ArrayView2<f64>, y_hat: ArrayView2<f64>, head: &UqHead) -> Result<(UqOutput, UqCache)> {
    if x.dim() != y_hat.dim() {
        return Err(Error::Shape(format!("input {:?} vs prediction {:?}", x.dim(), y_hat.dim())));
    }
    let (h, w) = x.dim();
    let features = patch_features(x, y_hat, head.patch);
    let hidden = (features.dot(&head.w1.t()) + &head.b1).mapv(f64::tanh);
    let raw = hidden.dot(&head.w2.t()) + &head.b2;
    let mut out = UqOutput {
        mu: Image::zeros((h, w)),
        scale: Image::zeros((h, w)),
        shape: Image::zeros((h, w)),
        uncertainty: Image::zeros((h, w)),
    };
    for (p, r) in raw.outer_iter().enumerate() {
        let (i, j) = (p / w, p % w);
        let scale = r[1].exp();
        let shape = match head.mode {
            ShapeMode::Gaussian => 2.0,
            ShapeMode::Ggd => r[2].exp(),
        };
        let unc = ggd_variance(scale, shape);
        if !(r[0].is_finite() && scale.is_finite() && scale > 0.0 && shape > 0.0 && unc.is_finite()) {
            return Err(Error::numeric(format!("uq_forward pixel ({i}, {j})")));
        }
        out.mu[[i, j]] = r[0];
        out.scale[[i, j]] = scale;
        out.shape[[i, j]] = shape;
        out.uncertainty[[i, j]] = unc;
    }
    Ok((out, UqCache { features, hidden }))
}

/// Loss value and its gradient with respect to each output map.
#[derive(Debug, Clone, PartialEq)]
pub struct UqLoss {
    pub loss: f64,
    pub d_mu: Image,
    pub d_scale: Image,
    /// Zero in Gaussian mode.
    pub d_shape: Image,
    /// Pixels whose variance hit [`VARIANCE_FLOOR`].
    pub clamped: usize,
}

fn check_same(a: &Image, b: &Image, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Gaussian likelihood with `σ² = scale²/2` plus `lam_rec` times the squared
/// distance between the mean and the frozen prediction.
pub fn uq_loss(out: &UqOutput, y: &Image, y_hat: &Image, lam_rec: f64) -> Result<UqLoss> {
    check_same(&out.mu, y, "target")?;
    check_same(&out.mu, y_hat, "prediction")?;
    if !(lam_rec >= 0.0) {
        return Err(Error::config("lam_rec", format!("must be ≥ 0, got {lam_rec}")));
    }
    let dim = out.mu.dim();
    let mut res = UqLoss {
        loss: 0.0,
        d_mu: Image::zeros(dim),
        d_scale: Image::zeros(dim),
        d_shape: Image::zeros(dim),
        clamped: 0,
    };
    for (idx, &mu) in out.mu.indexed_iter() {
        let scale = out.scale[idx];
        let raw_var = scale * scale / 2.0;
        let var = raw_var.max(VARIANCE_FLOOR);
        let r = y[idx] - mu;
        let e = mu - y_hat[idx];
        res.loss += r * r / (2.0 * var) + var.ln() / 2.0 + lam_rec * e * e;
        res.d_mu[idx] = -r / var + 2.0 * lam_rec * e;
        if raw_var < VARIANCE_FLOOR {
            res.clamped += 1;
        } else {
            let d_var = -r * r / (2.0 * var * var) + 0.5 / var;
            res.d_scale[idx] = d_var * scale;
        }
    }
    Ok(res)
}

/// Generalized-Gaussian negative log-likelihood
/// `(|r|/a)^b + ln(2a) + lnΓ(1/b) − ln b` plus the reconstruction term.
/// At `b = 2` this is the Gaussian loss plus `ln(2π)/2` per pixel.
pub fn uq_loss_ggd(out: &UqOutput, y: &Image, y_hat: &Image, lam_rec: f64) -> Result<UqLoss> {
    check_same(&out.mu, y, "target")?;
    check_same(&out.mu, y_hat, "prediction")?;
    if !(lam_rec >= 0.0) {
        return Err(Error::config("lam_rec", format!("must be ≥ 0, got {lam_rec}")));
    }
    let dim = out.mu.dim();
    let mut res = UqLoss {
        loss: 0.0,
        d_mu: Image::zeros(dim),
        d_scale: Image::zeros(dim),
        d_shape: Image::zeros(dim),
        clamped: 0,
    };
    for (idx, &mu) in out.mu.indexed_iter() {
        let (a, b) = (out.scale[idx], out.shape[idx]);
        let r = y[idx] - mu;
        // smoothed |r| keeps the gradient finite at r = 0
        let abs_r = (r * r + 1e-24).sqrt();
        let e = mu - y_hat[idx];
        let q = abs_r / a;
        let qb = q.powf(b);
        res.loss += qb + (2.0 * a).ln() + ln_gamma(1.0 / b) - b.ln() + lam_rec * e * e;
        res.d_mu[idx] = -b * qb / abs_r * (r / abs_r) + 2.0 * lam_rec * e;
        res.d_scale[idx] = (1.0 - b * qb) / a;
        res.d_shape[idx] = qb * q.ln() - digamma(1.0 / b) / (b * b) - 1.0 / b;
    }
    Ok(res)
}

/// Backward through the head given gradients with respect to its outputs.
pub fn uq_backward(head: &UqHead, out: &UqOutput, cache: &UqCache, loss: &UqLoss) -> UqGrads {
    let w = out.mu.ncols();
    let n = cache.hidden.nrows();
    let mut g = Array2::zeros((n, 3));
    for p in 0..n {
        let idx = (p / w, p % w);
        g[[p, 0]] = loss.d_mu[idx];
        g[[p, 1]] = loss.d_scale[idx] * out.scale[idx];
        if head.mode == ShapeMode::Ggd {
            g[[p, 2]] = loss.d_shape[idx] * out.shape[idx];
        }
    }
    let w2 = g.t().dot(&cache.hidden);
    let b2 = g.sum_axis(Axis(0));
    let dz = g.dot(&head.w2) * cache.hidden.mapv(|h| 1.0 - h * h);
    UqGrads {
        w1: dz.t().dot(&cache.features),
        b1: dz.sum_axis(Axis(0)),
        w2,
        b2,
    }
}

pub const OTSU_BINS: usize = 256;

/// Histogram over 256 equal-width bins spanning `[min, max]`.
fn histogram(values: &[f64], lo: f64, width: f64) -> [u64; OTSU_BINS] {
    let mut h = [0u64; OTSU_BINS];
    for &v in values {
        let b = (((v - lo) / width).floor() as usize).min(OTSU_BINS - 1);
        h[b] += 1;
    }
    h
}

/// Between-class variance, up to a constant factor, of splitting a histogram
/// into `n0` values with index sum `s0` and `n1` with index sum `s1`.
fn between_class(n0: u64, s0: u64, n1: u64, s1: u64) -> f64 {
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let d = s0 as f64 * n1 as f64 - s1 as f64 * n0 as f64;
    d * d / (n0 as f64 * n1 as f64)
}

/// Interior bin edge maximizing between-class variance; ties go to the lower
/// edge. A constant input returns its value.
pub fn otsu_threshold(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Domain(format!("otsu_threshold needs at least 2 values, got {}", values.len())));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(lo);
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let hist = histogram(values, lo, width);
    let n = values.len() as u64;
    let total: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best = (0.0, 1usize);
    for t in 1..OTSU_BINS {
        n0 += hist[t - 1];
        s0 += (t as u64 - 1) * hist[t - 1];
        let v = between_class(n0, s0, n - n0, total - s0);
        if v > best.0 {
            best = (v, t);
        }
    }
    Ok(lo + best.1 as f64 * width)
}

/// Fraction of pixels strictly above the Otsu threshold of the map.
pub fn uncertain_area(map: &Image) -> Result<f64> {
    let values: Vec<f64> = map.iter().copied().collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(0.0);
    }
    let t = otsu_threshold(&values)?;
    Ok(values.iter().filter(|&&v| v > t).count() as f64 / values.len() as f64)
}

/// Dice overlap of two binary masks (nonzero = foreground); two empty masks
/// score 1.
pub fn dice_score(pred: &Image, gt: &Image) -> Result<f64> {
    check_same(pred, gt, "dice")?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0.0, g != 0.0);
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

pub fn pearson_corr(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("pearson_corr: {} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::Domain(format!("pearson_corr needs at least 3 pairs, got {}", xs.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain("pearson_corr is undefined for a zero-variance series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
