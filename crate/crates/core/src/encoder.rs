//! Trainable feature chain: per-cell channel mixing, average pooling with a
//! linear projector, and a two-layer graph convolution. Every stage has a
//! hand-written backward pass.
//!
//! Parameters live in `f32` tensors; activations and gradients are carried in
//! `f64` arrays and only rounded when gradients are handed to the optimizer.

use ndarray::{s, Array1, Array2, Array4, Axis, Zip};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Affine map `y = W x + b` with `W: out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub w: Tensor,
    pub b: Tensor,
}

/// Graph-convolution weights share the linear layer's layout.
pub type GcnLayer = LinearLayer;

impl LinearLayer {
    pub fn new(w: Tensor, b: Tensor) -> Result<Self> {
        let l = LinearLayer { w, b };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.w.shape();
        if ws.len() != 2 || ws[0] == 0 || ws[1] == 0 || self.b.shape() != [ws[0]] {
            return Err(Error::Shape(format!(
                "linear layer needs W out x in and b out, got {:?} and {:?}",
                ws,
                self.b.shape()
            )));
        }
        Ok(())
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(rng: &mut RngStream, in_dim: usize, out_dim: usize) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.uniform_range(-limit, limit) as f32)
            .collect();
        LinearLayer {
            w: Tensor::new(vec![out_dim, in_dim], w).unwrap(),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    /// Ones on the leading diagonal, zeros elsewhere.
    pub fn identity(in_dim: usize, out_dim: usize) -> Self {
        let mut w = Tensor::zeros(&[out_dim, in_dim]);
        for i in 0..in_dim.min(out_dim) {
            w.data_mut()[i * in_dim + i] = 1.0;
        }
        LinearLayer {
            w,
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn w_array(&self) -> Array2<f64> {
        self.w.to_array().into_dimensionality().unwrap()
    }

    pub fn b_array(&self) -> Array1<f64> {
        self.b.to_array().into_dimensionality().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &LinearLayer) -> Self {
        LayerGrad {
            w: Array2::zeros((layer.out_dim(), layer.in_dim())),
            b: Array1::zeros(layer.out_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &LayerGrad) {
        self.w += &other.w;
        self.b += &other.b;
    }

    pub fn to_layer(&self) -> Result<LinearLayer> {
        LinearLayer::new(Tensor::from_array(&self.w)?, Tensor::from_array(&self.b)?)
    }
}

/// The full trainable stack: encoder (`D -> D`), projector (`D -> F`), and two
/// graph-convolution layers (`F -> F`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: LinearLayer,
    pub projector: LinearLayer,
    pub gnn: [GcnLayer; 2],
}

pub const PARAM_NAMES: [&str; 8] = [
    "encoder.w",
    "encoder.b",
    "projector.w",
    "projector.b",
    "gnn0.w",
    "gnn0.b",
    "gnn1.w",
    "gnn1.b",
];

impl ModelParams {
    pub fn init(rng: &mut RngStream, d: usize, f: usize) -> Self {
        ModelParams {
            encoder: LinearLayer::glorot(rng, d, d),
            projector: LinearLayer::glorot(rng, d, f),
            gnn: [LinearLayer::glorot(rng, f, f), LinearLayer::glorot(rng, f, f)],
        }
    }

    pub fn identity(d: usize, f: usize) -> Self {
        ModelParams {
            encoder: LinearLayer::identity(d, d),
            projector: LinearLayer::identity(d, f),
            gnn: [LinearLayer::identity(f, f), LinearLayer::identity(f, f)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for l in self.layers() {
            l.validate()?;
        }
        let chain_ok = self.encoder.in_dim() == self.encoder.out_dim()
            && self.encoder.out_dim() == self.projector.in_dim()
            && self.projector.out_dim() == self.gnn[0].in_dim()
            && self.gnn[0].out_dim() == self.gnn[1].in_dim()
            && self.gnn[1].in_dim() == self.gnn[1].out_dim()
            && self.gnn[0].in_dim() == self.gnn[0].out_dim();
        if !chain_ok {
            return Err(Error::Shape("model dimension chain is inconsistent".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.projector.out_dim()
    }

    fn layers(&self) -> [&LinearLayer; 4] {
        [&self.encoder, &self.projector, &self.gnn[0], &self.gnn[1]]
    }

    /// All parameter tensors in `PARAM_NAMES` order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers().into_iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let [g0, g1] = &mut self.gnn;
        vec![
            &mut self.encoder.w,
            &mut self.encoder.b,
            &mut self.projector.w,
            &mut self.projector.b,
            &mut g0.w,
            &mut g0.b,
            &mut g1.w,
            &mut g1.b,
        ]
    }

    pub fn from_tensors(mut tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                PARAM_NAMES.len(),
                tensors.len()
            )));
        }
        let mut next = || tensors.remove(0);
        let mut layer = || LinearLayer::new(next(), next());
        let encoder = layer()?;
        let projector = layer()?;
        let g0 = layer()?;
        let g1 = layer()?;
        let p = ModelParams {
            encoder,
            projector,
            gnn: [g0, g1],
        };
        p.validate()?;
        Ok(p)
    }
}

/// Gradients with the same structure as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: LayerGrad,
    pub projector: LayerGrad,
    pub gnn: [LayerGrad; 2],
}

impl ModelGrads {
    pub fn zeros_like(p: &ModelParams) -> Self {
        ModelGrads {
            encoder: LayerGrad::zeros_like(&p.encoder),
            projector: LayerGrad::zeros_like(&p.projector),
            gnn: [LayerGrad::zeros_like(&p.gnn[0]), LayerGrad::zeros_like(&p.gnn[1])],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        [&self.encoder, &self.projector, &self.gnn[0], &self.gnn[1]]
            .iter()
            .flat_map(|g| g.w.iter().chain(g.b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }

    /// Rounds to `f32` tensors laid out like [`ModelParams`].
    pub fn to_tensors(&self) -> Result<ModelParams> {
        Ok(ModelParams {
            encoder: self.encoder.to_layer()?,
            projector: self.projector.to_layer()?,
            gnn: [self.gnn[0].to_layer()?, self.gnn[1].to_layer()?],
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    x: Array4<f64>,
    active: Array4<bool>,
}

/// `y[n,:,r,s] = ReLU(W x[n,:,r,s] + b)`.
pub fn encoder_forward(x: &Array4<f64>, layer: &LinearLayer) -> Result<(Array4<f64>, EncoderCache)> {
    let (n, d, r, s) = x.dim();
    if d != layer.in_dim() {
        return Err(Error::Shape(format!(
            "encoder expects {} channels, input has {d}",
            layer.in_dim()
        )));
    }
    let w = layer.w_array();
    let b = layer.b_array();
    let out = layer.out_dim();
    let mut y = Array4::<f64>::zeros((n, out, r, s));
    for i in 0..n {
        let xi = x.slice(s![i, .., .., ..]).into_shape_with_order((d, r * s)).unwrap();
        let mut pre = w.dot(&xi);
        pre += &b.view().insert_axis(Axis(1));
        y.slice_mut(s![i, .., .., ..])
            .assign(&pre.into_shape_with_order((out, r, s)).unwrap());
    }
    let active = y.mapv(|v| v > 0.0);
    y.mapv_inplace(|v| v.max(0.0));
    Ok((
        y,
        EncoderCache {
            x: x.clone(),
            active,
        },
    ))
}

/// Returns `(dx, grad)`.
pub fn encoder_backward(dy: &Array4<f64>, cache: &EncoderCache, layer: &LinearLayer) -> Result<(Array4<f64>, LayerGrad)> {
    if dy.dim() != cache.active.dim() {
        return Err(Error::Shape("encoder upstream gradient has wrong shape".into()));
    }
    let (n, d, r, s) = cache.x.dim();
    let out = layer.out_dim();
    let w = layer.w_array();
    let mut dpre = dy.clone();
    Zip::from(&mut dpre).and(&cache.active).for_each(|g, &a| {
        if !a {
            *g = 0.0
        }
    });
    let mut grad = LayerGrad::zeros_like(layer);
    let mut dx = Array4::<f64>::zeros((n, d, r, s));
    for i in 0..n {
        let gi = dpre.slice(s![i, .., .., ..]).into_shape_with_order((out, r * s)).unwrap();
        let xi = cache.x.slice(s![i, .., .., ..]).into_shape_with_order((d, r * s)).unwrap();
        grad.w += &gi.dot(&xi.t());
        grad.b += &gi.sum_axis(Axis(1));
        let dxi = w.t().dot(&gi);
        dx.slice_mut(s![i, .., .., ..])
            .assign(&dxi.into_shape_with_order((d, r, s)).unwrap());
    }
    Ok((dx, grad))
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    pooled: Array2<f64>,
    spatial: (usize, usize),
}

/// Spatial mean over `R x S` followed by `z = W m + b` (no nonlinearity).
pub fn pool_project_forward(y: &Array4<f64>, layer: &LinearLayer) -> Result<(Array2<f64>, PoolCache)> {
    let (_, d, r, s) = y.dim();
    if d != layer.in_dim() {
        return Err(Error::Shape(format!(
            "projector expects {} channels, input has {d}",
            layer.in_dim()
        )));
    }
    let pooled = y
        .sum_axis(Axis(3))
        .sum_axis(Axis(2))
        .mapv(|v| v / (r * s) as f64);
    let z = pooled.dot(&layer.w_array().t()) + &layer.b_array();
    Ok((
        z,
        PoolCache {
            pooled,
            spatial: (r, s),
        },
    ))
}

/// Returns `(dy, grad)`.
pub fn pool_project_backward(dz: &Array2<f64>, cache: &PoolCache, layer: &LinearLayer) -> Result<(Array4<f64>, LayerGrad)> {
    if dz.dim() != (cache.pooled.nrows(), layer.out_dim()) {
        return Err(Error::Shape("projector upstream gradient has wrong shape".into()));
    }
    let (r, s) = cache.spatial;
    let grad = LayerGrad {
        w: dz.t().dot(&cache.pooled),
        b: dz.sum_axis(Axis(0)),
    };
    let dm = dz.dot(&layer.w_array()) / (r * s) as f64;
    let (n, d) = dm.dim();
    let dy = Array4::from_shape_fn((n, d, r, s), |(i, c, _, _)| dm[[i, c]]);
    Ok((dy, grad))
}

#[derive(Debug, Clone)]
pub struct GnnCache {
    prop: Array2<f64>,
    agg0: Array2<f64>,
    active0: Array2<bool>,
    agg1: Array2<f64>,
}

/// Two rounds of `H' = P H Wᵀ + b` with `P` the graph's propagation matrix;
/// ReLU after the first round only.
pub fn gnn_forward(graph: &Graph, z: &Array2<f64>, layers: &[GcnLayer; 2]) -> Result<(Array2<f64>, GnnCache)> {
    if graph.n() != z.nrows() {
        return Err(Error::Shape(format!(
            "graph has {} nodes, embeddings have {} rows",
            graph.n(),
            z.nrows()
        )));
    }
    if z.ncols() != layers[0].in_dim() {
        return Err(Error::Shape("gnn input width mismatch".into()));
    }
    let prop = graph.propagation_matrix();
    let agg0 = prop.dot(z);
    let mut h1 = agg0.dot(&layers[0].w_array().t()) + &layers[0].b_array();
    let active0 = h1.mapv(|v| v > 0.0);
    h1.mapv_inplace(|v| v.max(0.0));
    let agg1 = prop.dot(&h1);
    let out = agg1.dot(&layers[1].w_array().t()) + &layers[1].b_array();
    Ok((
        out,
        GnnCache {
            prop,
            agg0,
            active0,
            agg1,
        },
    ))
}

/// Returns `(dz, [grad0, grad1])`.
pub fn gnn_backward(dout: &Array2<f64>, cache: &GnnCache, layers: &[GcnLayer; 2]) -> Result<(Array2<f64>, [LayerGrad; 2])> {
    if dout.dim() != (cache.agg1.nrows(), layers[1].out_dim()) {
        return Err(Error::Shape("gnn upstream gradient has wrong shape".into()));
    }
    let g1 = LayerGrad {
        w: dout.t().dot(&cache.agg1),
        b: dout.sum_axis(Axis(0)),
    };
    let dagg1 = dout.dot(&layers[1].w_array());
    let mut dh1 = cache.prop.t().dot(&dagg1);
    Zip::from(&mut dh1).and(&cache.active0).for_each(|g, &a| {
        if !a {
            *g = 0.0
        }
    });
    let g0 = LayerGrad {
        w: dh1.t().dot(&cache.agg0),
        b: dh1.sum_axis(Axis(0)),
    };
    let dagg0 = dh1.dot(&layers[0].w_array());
    let dz = cache.prop.t().dot(&dagg0);
    Ok((dz, [g0, g1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{knn_graph, KnnMetric};
    use crate::testutil::{fd_check_params, max_rel_error, random_array4};

    #[test]
    fn identity_encoder_passes_nonnegative_input() {
        let mut rng = RngStream::new(1);
        let x = random_array4(&mut rng, (2, 3, 4, 4)).mapv(f64::abs);
        let (y, _) = encoder_forward(&x, &LinearLayer::identity(3, 3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn relu_gate_blocks_negative_cells() {
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![-1.0, 2.0]).unwrap();
        let layer = LinearLayer::identity(1, 1);
        let (y, cache) = encoder_forward(&x, &layer).unwrap();
        assert_eq!(y.as_slice().unwrap(), &[0.0, 2.0]);
        let dy = Array4::from_elem((1, 1, 1, 2), 1.0);
        let (dx, _) = encoder_backward(&dy, &cache, &layer).unwrap();
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn encoder_rejects_wrong_channels() {
        let x = Array4::zeros((1, 2, 2, 2));
        assert!(encoder_forward(&x, &LinearLayer::identity(3, 3)).is_err());
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(21);
        let x = random_array4(&mut rng, (2, 3, 4, 4));
        let mut layer = LinearLayer::glorot(&mut rng, 3, 3);
        for v in layer.b.data_mut() {
            *v = rng.normal() as f32 * 0.1;
        }
        let probe = random_array4(&mut rng, (2, 3, 4, 4));
        let (_, cache) = encoder_forward(&x, &layer).unwrap();
        let (dx, grad) = encoder_backward(&probe, &cache, &layer).unwrap();

        let objective = |l: &LinearLayer, x: &Array4<f64>| {
            let (y, _) = encoder_forward(x, l).unwrap();
            (&y * &probe).sum()
        };
        let mut analytic = grad.w.iter().chain(grad.b.iter()).copied().collect::<Vec<_>>();
        let mut numeric = fd_check_params(&mut [&mut layer.w, &mut layer.b], |ts| {
            let l = LinearLayer::new(ts[0].clone(), ts[1].clone()).unwrap();
            objective(&l, &x)
        });
        analytic.extend(dx.iter().copied());
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            numeric.push((objective(&layer, &xp) - objective(&layer, &xm)) / (2.0 * h));
        }
        let err = max_rel_error(&analytic, &numeric);
        assert!(err <= 1e-3, "max relative error {err}");
    }

    #[test]
    fn pooled_constant_map() {
        let y = Array4::from_elem((2, 3, 4, 5), 0.75);
        let (z, _) = pool_project_forward(&y, &LinearLayer::identity(3, 3)).unwrap();
        assert!(z.iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn pool_project_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(5);
        let y = random_array4(&mut rng, (3, 4, 2, 3));
        let mut layer = LinearLayer::glorot(&mut rng, 4, 6);
        let probe = Array2::from_shape_fn((3, 6), |_| rng.normal());
        let (_, cache) = pool_project_forward(&y, &layer).unwrap();
        let (dy, grad) = pool_project_backward(&probe, &cache, &layer).unwrap();
        let objective = |l: &LinearLayer, y: &Array4<f64>| (&pool_project_forward(y, l).unwrap().0 * &probe).sum();
        let mut analytic: Vec<f64> = grad.w.iter().chain(grad.b.iter()).copied().collect();
        let mut numeric = fd_check_params(&mut [&mut layer.w, &mut layer.b], |ts| {
            objective(&LinearLayer::new(ts[0].clone(), ts[1].clone()).unwrap(), &y)
        });
        analytic.extend(dy.iter().copied());
        let h = 1e-6;
        for idx in 0..y.len() {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp.as_slice_mut().unwrap()[idx] += h;
            ym.as_slice_mut().unwrap()[idx] -= h;
            numeric.push((objective(&layer, &yp) - objective(&layer, &ym)) / (2.0 * h));
        }
        assert!(max_rel_error(&analytic, &numeric) <= 1e-3);
    }

    #[test]
    fn single_node_gnn_is_identity() {
        let g = Graph::from_edges(1, vec![]).unwrap();
        let z = Array2::from_shape_vec((1, 3), vec![0.5, 1.5, 2.0]).unwrap();
        let layers = [LinearLayer::identity(3, 3), LinearLayer::identity(3, 3)];
        let (out, _) = gnn_forward(&g, &z, &layers).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn gnn_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(8);
        let z = Array2::from_shape_fn((5, 4), |_| rng.normal());
        let g = knn_graph(z.view(), 2, KnnMetric::Euclidean).unwrap();
        let mut layers = [LinearLayer::glorot(&mut rng, 4, 4), LinearLayer::glorot(&mut rng, 4, 4)];
        for l in layers.iter_mut() {
            for v in l.b.data_mut() {
                *v = (rng.normal() * 0.1) as f32;
            }
        }
        let probe = Array2::from_shape_fn((5, 4), |_| rng.normal());
        let (_, cache) = gnn_forward(&g, &z, &layers).unwrap();
        let (dz, grads) = gnn_backward(&probe, &cache, &layers).unwrap();
        let objective = |ls: &[GcnLayer; 2], z: &Array2<f64>| (&gnn_forward(&g, z, ls).unwrap().0 * &probe).sum();
        let mut analytic: Vec<f64> = grads
            .iter()
            .flat_map(|gr| gr.w.iter().chain(gr.b.iter()).copied().collect::<Vec<_>>())
            .collect();
        let [l0, l1] = &mut layers;
        let mut numeric = fd_check_params(&mut [&mut l0.w, &mut l0.b, &mut l1.w, &mut l1.b], |ts| {
            let ls = [
                LinearLayer::new(ts[0].clone(), ts[1].clone()).unwrap(),
                LinearLayer::new(ts[2].clone(), ts[3].clone()).unwrap(),
            ];
            objective(&ls, &z)
        });
        analytic.extend(dz.iter().copied());
        let h = 1e-6;
        for idx in 0..z.len() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp.as_slice_mut().unwrap()[idx] += h;
            zm.as_slice_mut().unwrap()[idx] -= h;
            numeric.push((objective(&layers, &zp) - objective(&layers, &zm)) / (2.0 * h));
        }
        let err = max_rel_error(&analytic, &numeric);
        assert!(err <= 1e-3, "max relative error {err}");
    }

    #[test]
    fn gnn_is_permutation_equivariant() {
        let mut rng = RngStream::new(13);
        let z = Array2::from_shape_fn((6, 3), |_| rng.normal());
        let g = knn_graph(z.view(), 2, KnnMetric::Euclidean).unwrap();
        let layers = [LinearLayer::glorot(&mut rng, 3, 3), LinearLayer::glorot(&mut rng, 3, 3)];
        let perm = [3, 0, 5, 1, 4, 2];
        let mut zp = Array2::zeros((6, 3));
        for i in 0..6 {
            zp.row_mut(perm[i]).assign(&z.row(i));
        }
        let gp = g.relabel(&perm).unwrap();
        let (out, _) = gnn_forward(&g, &z, &layers).unwrap();
        let (outp, _) = gnn_forward(&gp, &zp, &layers).unwrap();
        for i in 0..6 {
            for c in 0..3 {
                assert!((out[[i, c]] - outp[[perm[i], c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn param_roundtrip_through_tensor_list() {
        let p = ModelParams::init(&mut RngStream::new(0), 8, 16);
        let back = ModelParams::from_tensors(p.tensors().into_iter().cloned().collect()).unwrap();
        assert_eq!(p, back);
        let mut bad = ModelParams::identity(8, 16);
        bad.gnn[1] = LinearLayer::identity(16, 4);
        assert!(bad.validate().is_err());
    }
}
