//! Scalar and vector kernels shared by the rest of the crate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cosine similarity with a flag for the zero-norm path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either input has zero norm; `value` is then 0.
    pub degenerate: bool,
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Cosine {
    assert_eq!(u.len(), v.len(), "cosine_sim: length mismatch");
    let uu = dot(u, u);
    let vv = dot(v, v);
    if uu == 0.0 || vv == 0.0 {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    // sqrt(uu * vv) == uu exactly when u == v, so identical inputs give 1.0
    Cosine {
        value: (dot(u, v) / (uu * vv).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Accumulates `upstream * d cos(u, v)` into `du` and `dv`.
pub fn cosine_grad_into(u: &[f64], v: &[f64], upstream: f64, du: &mut [f64], dv: &mut [f64]) {
    let uu = dot(u, u);
    let vv = dot(v, v);
    if uu == 0.0 || vv == 0.0 || upstream == 0.0 {
        return;
    }
    let inv = 1.0 / (uu * vv).sqrt();
    let c = dot(u, v) * inv;
    for k in 0..u.len() {
        du[k] += upstream * (v[k] * inv - c * u[k] / uu);
        dv[k] += upstream * (u[k] * inv - c * v[k] / vv);
    }
}

pub fn cosine_grad(u: &[f64], v: &[f64], upstream: f64) -> (Vec<f64>, Vec<f64>) {
    let mut du = vec![0.0; u.len()];
    let mut dv = vec![0.0; v.len()];
    cosine_grad_into(u, v, upstream, &mut du, &mut dv);
    (du, dv)
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

fn lanczos_sum(z: f64) -> f64 {
    // z is the shifted argument (original z - 1)
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    acc
}

/// Gamma function for `z > 0` (Lanczos, g = 7, with reflection below 1/2).
pub fn gamma_fn(z: f64) -> Result<f64> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Domain(format!("gamma_fn requires z > 0, got {z}")));
    }
    Ok(gamma_pos(z))
}

fn gamma_pos(z: f64) -> f64 {
    use std::f64::consts::PI;
    if z < 0.5 {
        return PI / ((PI * z).sin() * gamma_pos(1.0 - z));
    }
    let z = z - 1.0;
    let t = z + LANCZOS_G + 0.5;
    (2.0 * PI).sqrt() * t.powf(z + 0.5) * (-t).exp() * lanczos_sum(z)
}

/// `ln Γ(z)` for `z > 0`; stays finite where `Γ` itself overflows.
pub fn ln_gamma(z: f64) -> f64 {
    use std::f64::consts::PI;
    debug_assert!(z > 0.0);
    if z < 0.5 {
        return (PI / (PI * z).sin()).ln() - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let t = z + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (z + 0.5) * t.ln() - t + lanczos_sum(z).ln()
}

/// Digamma `ψ(z)` for `z > 0`.
pub fn digamma(mut z: f64) -> f64 {
    let mut acc = 0.0;
    while z < 6.0 {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let z2 = 1.0 / (z * z);
    acc + z.ln() - 0.5 / z
        - z2 * (1.0 / 12.0
            - z2 * (1.0 / 120.0 - z2 * (1.0 / 252.0 - z2 * (1.0 / 240.0 - z2 / 132.0))))
}

/// Variance of a generalized Gaussian with scale `scale` and shape `shape`:
/// `scale² Γ(3/shape) / Γ(1/shape)`.
pub fn ggd_variance(scale: f64, shape: f64) -> f64 {
    let ratio = (ln_gamma(3.0 / shape) - ln_gamma(1.0 / shape)).exp();
    scale * scale * ratio
}

/// Rescales every tensor by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`. Returns `g` measured before clipping.
pub fn clip_global_norm(grads: &mut [&mut Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip_global_norm: max_norm must be positive");
    let norm = grads.iter().map(|t| t.sq_norm()).sum::<f64>().sqrt();
    // the 1e-6 slack absorbs f32 rounding so a second pass is a no-op
    if norm > max_norm * (1.0 + 1e-6) {
        let scale = max_norm / norm;
        for t in grads.iter_mut() {
            for v in t.data_mut() {
                *v = ((*v as f64) * scale) as f32;
            }
        }
    }
    norm
}

pub fn global_norm(grads: &[&Tensor]) -> f64 {
    grads.iter().map(|t| t.sq_norm()).sum::<f64>().sqrt()
}
