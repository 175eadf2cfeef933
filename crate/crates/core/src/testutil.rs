//! Finite-difference helpers shared by unit tests.

use ndarray::Array4;

use crate::rng::RngStream;
use crate::tensor::Tensor;

pub fn random_array4(rng: &mut RngStream, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_fn(dim, |_| rng.normal())
}

/// Central differences of `f` with respect to every element of `params`.
/// The step is taken in `f32` and divided by the realised difference, so the
/// quotient is exact up to truncation.
pub fn fd_check_params<F>(params: &mut [&mut Tensor], f: F) -> Vec<f64>
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut current: Vec<Tensor> = params.iter().map(|t| (**t).clone()).collect();
    let mut out = Vec::new();
    for t in 0..current.len() {
        for e in 0..current[t].len() {
            let x = current[t].data()[e];
            let h = 1e-4f32 * x.abs().max(1.0);
            let (xp, xm) = (x + h, x - h);
            current[t].data_mut()[e] = xp;
            let fp = f(&current);
            current[t].data_mut()[e] = xm;
            let fm = f(&current);
            current[t].data_mut()[e] = x;
            out.push((fp - fm) / (xp as f64 - xm as f64));
        }
    }
    out
}

/// `max |a - b|` divided by the largest magnitude in either vector.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(1e-12f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
