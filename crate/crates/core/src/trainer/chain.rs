//! Forward and backward pass from raw views to affinities.

use ndarray::{Array2, Array4};

use crate::affinity::{affinity_backward, build_affinities, evaluate_frozen, AffinityCache, AffinityInputs, AffinitySet};
use crate::encoder::{
    encoder_backward, encoder_forward, gnn_backward, gnn_forward, pool_project_backward, pool_project_forward,
    EncoderCache, GnnCache, ModelGrads, ModelParams, PoolCache,
};
use crate::error::{Error, Result};
use crate::graph::{knn_graph, Graph, KnnMetric};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainCfg {
    pub k: usize,
    pub metric: KnnMetric,
    pub alpha: f64,
    pub gamma: usize,
}

/// Everything the backward pass needs, one entry per view.
#[derive(Debug, Clone)]
pub struct Forward {
    pub ys: Array4<f64>,
    pub yt: Array4<f64>,
    pub hs: Array2<f64>,
    pub ht: Array2<f64>,
    pub gs: Graph,
    pub gt: Graph,
    pub affs: AffinitySet,
    pub cache: AffinityCache,
    enc: [EncoderCache; 2],
    pool: [PoolCache; 2],
    gnn: [GnnCache; 2],
}

/// Graphs and local-cost choices to hold fixed instead of recomputing.
pub struct Frozen<'a> {
    pub gs: &'a Graph,
    pub gt: &'a Graph,
    pub cache: &'a AffinityCache,
}

fn finite<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, stage: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(stage))
    }
}

impl Forward {
    pub fn inputs<'a>(&'a self, pos_s: &'a Array4<f64>, pos_t: &'a Array4<f64>) -> AffinityInputs<'a> {
        AffinityInputs {
            zs: self.hs.view(),
            zt: self.ht.view(),
            ys: self.ys.view(),
            yt: self.yt.view(),
            pos_s: pos_s.view(),
            pos_t: pos_t.view(),
            gs: &self.gs,
            gt: &self.gt,
        }
    }
}

pub fn chain_forward(
    params: &ModelParams,
    xs: &Array4<f64>,
    xt: &Array4<f64>,
    pos_s: &Array4<f64>,
    pos_t: &Array4<f64>,
    cfg: &ChainCfg,
    frozen: Option<Frozen>,
) -> Result<Forward> {
    let (ys, enc_s) = encoder_forward(xs, &params.encoder)?;
    let (yt, enc_t) = encoder_forward(xt, &params.encoder)?;
    finite(&ys, "encoder")?;
    finite(&yt, "encoder")?;
    let (zs, pool_s) = pool_project_forward(&ys, &params.projector)?;
    let (zt, pool_t) = pool_project_forward(&yt, &params.projector)?;
    finite(&zs, "projector")?;
    finite(&zt, "projector")?;
    let (gs, gt) = match &frozen {
        Some(f) => (f.gs.clone(), f.gt.clone()),
        None => (knn_graph(zs.view(), cfg.k, cfg.metric)?, knn_graph(zt.view(), cfg.k, cfg.metric)?),
    };
    let (hs, gnn_s) = gnn_forward(&gs, &zs, &params.gnn)?;
    let (ht, gnn_t) = gnn_forward(&gt, &zt, &params.gnn)?;
    finite(&hs, "gnn")?;
    finite(&ht, "gnn")?;
    let inp = AffinityInputs {
        zs: hs.view(),
        zt: ht.view(),
        ys: ys.view(),
        yt: yt.view(),
        pos_s: pos_s.view(),
        pos_t: pos_t.view(),
        gs: &gs,
        gt: &gt,
    };
    let (affs, cache) = match &frozen {
        Some(f) => (evaluate_frozen(&inp, cfg.alpha, f.cache)?, f.cache.clone()),
        None => build_affinities(&inp, cfg.alpha, cfg.gamma)?,
    };
    finite(&affs.cv, "affinity")?;
    finite(&affs.ce, "affinity")?;
    Ok(Forward {
        ys,
        yt,
        hs,
        ht,
        gs,
        gt,
        affs,
        cache,
        enc: [enc_s, enc_t],
        pool: [pool_s, pool_t],
        gnn: [gnn_s, gnn_t],
    })
}

/// Chains `(dcv, dce)` back to every parameter tensor; both views share the
/// same parameters, so their contributions are summed.
pub fn chain_backward(
    fwd: &Forward,
    params: &ModelParams,
    pos_s: &Array4<f64>,
    pos_t: &Array4<f64>,
    dcv: &Array2<f64>,
    dce: &Array2<f64>,
    alpha: f64,
) -> Result<ModelGrads> {
    let ag = affinity_backward(dcv, dce, &fwd.cache, &fwd.inputs(pos_s, pos_t), alpha)?;
    let mut grads = ModelGrads::zeros_like(params);
    for (side, (dh, dy_local)) in [(&ag.dzs, &ag.dys), (&ag.dzt, &ag.dyt)].into_iter().enumerate() {
        let (dz, [g0, g1]) = gnn_backward(dh, &fwd.gnn[side], &params.gnn)?;
        let (dy, gp) = pool_project_backward(&dz, &fwd.pool[side], &params.projector)?;
        let (_, ge) = encoder_backward(&(dy + dy_local), &fwd.enc[side], &params.encoder)?;
        grads.gnn[0].add_assign(&g0);
        grads.gnn[1].add_assign(&g1);
        grads.projector.add_assign(&gp);
        grads.encoder.add_assign(&ge);
    }
    if !grads.is_finite() {
        return Err(Error::numeric("backward"));
    }
    Ok(grads)
}
