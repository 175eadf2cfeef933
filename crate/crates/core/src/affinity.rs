//! Vertex and edge affinities between the source and target graphs.
//!
//! `cv[i, a] = α cos(ẑˢᵢ, ẑᵗₐ) + (1 - α) local_cost(yˢᵢ, yᵗₐ)` and
//! `ce[(i,j), (a,b)] = cos(ẑˢᵢ - ẑˢⱼ, ẑᵗₐ - ẑᵗ_b)` over all source/target
//! edge pairs.
//!
//! The local cost averages two branches. Each branch maps every source cell to
//! its nearest target cell (by position, or by feature vector), keeps the γ
//! pairs with the smallest matching distance, and takes the cosine between the
//! two stacked feature sets. The nearest-neighbour maps and the kept cells are
//! treated as constants by the backward pass.

use std::fmt::Write as _;

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::math::{cosine_grad_into, cosine_sim};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// `cv: N x N` and a dense `ce: |Eˢ| x |Eᵗ|` table indexed by edge position.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinitySet {
    pub cv: Array2<f64>,
    pub ce: Array2<f64>,
}

impl AffinitySet {
    pub fn n(&self) -> usize {
        self.cv.nrows()
    }

    pub fn check(&self, gs: &Graph, gt: &Graph) -> Result<()> {
        let n = self.cv.nrows();
        if self.cv.ncols() != n || gs.n() != n || gt.n() != n {
            return Err(Error::Shape(format!(
                "cv {:?} does not match graphs of {} and {} nodes",
                self.cv.dim(),
                gs.n(),
                gt.n()
            )));
        }
        if self.ce.dim() != (gs.num_edges(), gt.num_edges()) {
            return Err(Error::Shape(format!(
                "ce {:?} does not match {} x {} edges",
                self.ce.dim(),
                gs.num_edges(),
                gt.num_edges()
            )));
        }
        if !self.cv.iter().chain(self.ce.iter()).all(|v| v.is_finite()) {
            return Err(Error::numeric("affinity"));
        }
        Ok(())
    }

    pub fn cv_tensor(&self) -> Result<Tensor> {
        Tensor::from_array(&self.cv)
    }

    /// `i,j,a,b,value` rows in edge order.
    pub fn ce_csv(&self, gs: &Graph, gt: &Graph) -> String {
        let mut out = String::from("i,j,a,b,value\n");
        for (es, &(i, j)) in gs.edges().iter().enumerate() {
            for (et, &(a, b)) in gt.edges().iter().enumerate() {
                let _ = writeln!(out, "{i},{j},{a},{b},{}", self.ce[[es, et]]);
            }
        }
        out
    }
}

/// Frozen discrete choices of one local-cost branch, over flattened cells
/// `c = r * S + s`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchCache {
    /// Nearest target cell for every source cell.
    pub nn: Vec<usize>,
    /// Kept source cells, ascending.
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalCostCache {
    pub location: BranchCache,
    pub feature: BranchCache,
}

/// Rows are cells, columns channels.
fn cells_by_channel(y: &ArrayView3<f64>) -> Array2<f64> {
    let (d, r, s) = y.dim();
    y.to_shape((d, r * s)).unwrap().t().as_standard_layout().into_owned()
}

fn positions(pos: &ArrayView3<f64>) -> Array2<f64> {
    let (r, s, two) = pos.dim();
    pos.to_shape((r * s, two)).unwrap().to_owned()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn branch(src: &Array2<f64>, dst: &Array2<f64>, gamma: usize) -> BranchCache {
    let cells = src.nrows();
    let mut nn = Vec::with_capacity(cells);
    let mut best = Vec::with_capacity(cells);
    for c in 0..cells {
        let q = src.row(c);
        let q = q.as_slice().unwrap();
        let (mut bi, mut bd) = (0, f64::INFINITY);
        for c2 in 0..dst.nrows() {
            let d = sq_dist(q, dst.row(c2).as_slice().unwrap());
            if d < bd {
                bd = d;
                bi = c2;
            }
        }
        nn.push(bi);
        best.push(bd);
    }
    let mut order: Vec<usize> = (0..cells).collect();
    order.sort_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)));
    order.truncate(gamma.min(cells));
    order.sort_unstable();
    BranchCache { nn, selected: order }
}

fn stacked(ys: &Array2<f64>, yt: &Array2<f64>, b: &BranchCache) -> (Vec<f64>, Vec<f64>) {
    let mut u = Vec::with_capacity(b.selected.len() * ys.ncols());
    let mut v = Vec::with_capacity(u.capacity());
    for &c in &b.selected {
        u.extend(ys.row(c).iter());
        v.extend(yt.row(b.nn[c]).iter());
    }
    (u, v)
}

/// Local cost between source item features `y_i: D x R x S` and target item
/// features `y_a`, with position maps `R x S x 2`.
pub fn local_cost(
    y_i: ArrayView3<f64>,
    y_a: ArrayView3<f64>,
    pos_i: ArrayView3<f64>,
    pos_a: ArrayView3<f64>,
    gamma: usize,
) -> Result<(f64, LocalCostCache)> {
    if y_i.dim() != y_a.dim() {
        return Err(Error::Shape(format!("local_cost: {:?} vs {:?}", y_i.dim(), y_a.dim())));
    }
    let (_, r, s) = y_i.dim();
    if pos_i.dim() != (r, s, 2) || pos_a.dim() != (r, s, 2) {
        return Err(Error::Shape("local_cost: position maps do not match features".into()));
    }
    if gamma < 1 {
        return Err(Error::Domain("local_cost needs gamma >= 1".into()));
    }
    let fs = cells_by_channel(&y_i);
    let ft = cells_by_channel(&y_a);
    let cache = LocalCostCache {
        location: branch(&positions(&pos_i), &positions(&pos_a), gamma),
        feature: branch(&fs, &ft, gamma),
    };
    Ok((local_cost_frozen(y_i, y_a, &cache), cache))
}

/// Local cost evaluated with previously chosen neighbours and kept cells.
pub fn local_cost_frozen(y_i: ArrayView3<f64>, y_a: ArrayView3<f64>, cache: &LocalCostCache) -> f64 {
    let fs = cells_by_channel(&y_i);
    let ft = cells_by_channel(&y_a);
    let (u, v) = stacked(&fs, &ft, &cache.location);
    let loc = cosine_sim(&u, &v).value;
    let (u, v) = stacked(&fs, &ft, &cache.feature);
    let feat = cosine_sim(&u, &v).value;
    0.5 * (loc + feat)
}

/// Accumulates `upstream * ∂local_cost` into `dy_i` and `dy_a` (`D x R x S`).
fn local_cost_backward(
    y_i: ArrayView3<f64>,
    y_a: ArrayView3<f64>,
    cache: &LocalCostCache,
    upstream: f64,
    dy_i: &mut Array2<f64>,
    dy_a: &mut Array2<f64>,
) {
    let fs = cells_by_channel(&y_i);
    let ft = cells_by_channel(&y_a);
    let d = fs.ncols();
    for b in [&cache.location, &cache.feature] {
        let (u, v) = stacked(&fs, &ft, b);
        let mut du = vec![0.0; u.len()];
        let mut dv = vec![0.0; v.len()];
        cosine_grad_into(&u, &v, 0.5 * upstream, &mut du, &mut dv);
        for (slot, &c) in b.selected.iter().enumerate() {
            let t = b.nn[c];
            for ch in 0..d {
                dy_i[[c, ch]] += du[slot * d + ch];
                dy_a[[t, ch]] += dv[slot * d + ch];
            }
        }
    }
}

/// Per-pair local-cost caches, row-major over `(i, a)`. `None` when α = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityCache {
    pub local: Option<Vec<LocalCostCache>>,
}

/// Inputs shared by the affinity forward and backward passes.
#[derive(Debug, Clone, Copy)]
pub struct AffinityInputs<'a> {
    pub zs: ArrayView2<'a, f64>,
    pub zt: ArrayView2<'a, f64>,
    pub ys: ArrayView4<'a, f64>,
    pub yt: ArrayView4<'a, f64>,
    pub pos_s: ArrayView4<'a, f64>,
    pub pos_t: ArrayView4<'a, f64>,
    pub gs: &'a Graph,
    pub gt: &'a Graph,
}

impl AffinityInputs<'_> {
    fn check(&self) -> Result<usize> {
        let n = self.zs.nrows();
        let ok = self.zt.nrows() == n
            && self.zs.ncols() == self.zt.ncols()
            && self.ys.dim() == self.yt.dim()
            && self.ys.dim().0 == n
            && self.pos_s.dim() == self.pos_t.dim()
            && self.pos_s.dim() == (n, self.ys.dim().2, self.ys.dim().3, 2)
            && self.gs.n() == n
            && self.gt.n() == n;
        if ok {
            Ok(n)
        } else {
            Err(Error::Shape("affinity inputs are inconsistent".into()))
        }
    }
}

fn edge_affinities(inp: &AffinityInputs) -> Array2<f64> {
    let diffs = |z: &ArrayView2<f64>, g: &Graph| -> Vec<Vec<f64>> {
        g.edges()
            .iter()
            .map(|&(i, j)| (&z.row(i) - &z.row(j)).to_vec())
            .collect()
    };
    let ds = diffs(&inp.zs, inp.gs);
    let dt = diffs(&inp.zt, inp.gt);
    Array2::from_shape_fn((ds.len(), dt.len()), |(e, f)| cosine_sim(&ds[e], &dt[f]).value)
}

fn global_cosines(inp: &AffinityInputs) -> Array2<f64> {
    let n = inp.zs.nrows();
    let rows_s: Vec<Vec<f64>> = inp.zs.rows().into_iter().map(|r| r.to_vec()).collect();
    let rows_t: Vec<Vec<f64>> = inp.zt.rows().into_iter().map(|r| r.to_vec()).collect();
    Array2::from_shape_fn((n, n), |(i, a)| cosine_sim(&rows_s[i], &rows_t[a]).value)
}

/// Computes affinities, recording the local-cost choices for the backward
/// pass.
pub fn build_affinities(inp: &AffinityInputs, alpha: f64, gamma: usize) -> Result<(AffinitySet, AffinityCache)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let n = inp.check()?;
    let mut cv = global_cosines(inp).mapv(|c| alpha * c);
    let local = if alpha < 1.0 {
        let pairs: Vec<(f64, LocalCostCache)> = (0..n * n)
            .into_par_iter()
            .map(|p| {
                let (i, a) = (p / n, p % n);
                local_cost(
                    inp.ys.index_axis(Axis(0), i),
                    inp.yt.index_axis(Axis(0), a),
                    inp.pos_s.index_axis(Axis(0), i),
                    inp.pos_t.index_axis(Axis(0), a),
                    gamma,
                )
            })
            .collect::<Result<_>>()?;
        for (p, (value, _)) in pairs.iter().enumerate() {
            cv[[p / n, p % n]] += (1.0 - alpha) * value;
        }
        Some(pairs.into_iter().map(|(_, c)| c).collect())
    } else {
        None
    };
    let affs = AffinitySet {
        cv,
        ce: edge_affinities(inp),
    };
    affs.check(inp.gs, inp.gt)?;
    Ok((affs, AffinityCache { local }))
}

/// Recomputes affinities holding every local-cost choice fixed at `cache`.
pub fn evaluate_frozen(inp: &AffinityInputs, alpha: f64, cache: &AffinityCache) -> Result<AffinitySet> {
    let n = inp.check()?;
    let mut cv = global_cosines(inp).mapv(|c| alpha * c);
    if let Some(local) = &cache.local {
        if local.len() != n * n {
            return Err(Error::Shape("stale local-cost cache".into()));
        }
        for i in 0..n {
            for a in 0..n {
                cv[[i, a]] += (1.0 - alpha)
                    * local_cost_frozen(
                        inp.ys.index_axis(Axis(0), i),
                        inp.yt.index_axis(Axis(0), a),
                        &local[i * n + a],
                    );
            }
        }
    }
    Ok(AffinitySet {
        cv,
        ce: edge_affinities(inp),
    })
}

/// Adds i.i.d. Gumbel(0, 1) noise to every `cv` entry, then every `ce` entry,
/// both in row-major order.
pub fn perturb(affs: &AffinitySet, rng: &mut RngStream) -> AffinitySet {
    perturb_scaled(affs, rng, 1.0)
}

/// [`perturb`] with the noise multiplied by `scale`; `scale == 0` returns the
/// input unchanged and draws nothing.
pub fn perturb_scaled(affs: &AffinitySet, rng: &mut RngStream, scale: f64) -> AffinitySet {
    let mut out = affs.clone();
    if scale == 0.0 {
        return out;
    }
    for v in out.cv.iter_mut().chain(out.ce.iter_mut()) {
        *v += scale * rng.gumbel();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGrads {
    pub dzs: Array2<f64>,
    pub dzt: Array2<f64>,
    pub dys: Array4<f64>,
    pub dyt: Array4<f64>,
}

/// Chain rule through [`build_affinities`] with the cached discrete choices
/// held fixed.
pub fn affinity_backward(
    dcv: &Array2<f64>,
    dce: &Array2<f64>,
    cache: &AffinityCache,
    inp: &AffinityInputs,
    alpha: f64,
) -> Result<AffinityGrads> {
    let n = inp.check()?;
    if dcv.dim() != (n, n) {
        return Err(Error::Shape(format!("dcv {:?} but N = {n}", dcv.dim())));
    }
    if dce.dim() != (inp.gs.num_edges(), inp.gt.num_edges()) {
        return Err(Error::Shape(format!("dce {:?} does not match edge counts", dce.dim())));
    }
    let f = inp.zs.ncols();
    let mut dzs = Array2::<f64>::zeros((n, f));
    let mut dzt = Array2::<f64>::zeros((n, f));
    let rows_s: Vec<Vec<f64>> = inp.zs.rows().into_iter().map(|r| r.to_vec()).collect();
    let rows_t: Vec<Vec<f64>> = inp.zt.rows().into_iter().map(|r| r.to_vec()).collect();

    for i in 0..n {
        for a in 0..n {
            let up = alpha * dcv[[i, a]];
            if up != 0.0 {
                let mut du = vec![0.0; f];
                let mut dv = vec![0.0; f];
                cosine_grad_into(&rows_s[i], &rows_t[a], up, &mut du, &mut dv);
                for k in 0..f {
                    dzs[[i, k]] += du[k];
                    dzt[[a, k]] += dv[k];
                }
            }
        }
    }

    for (es, &(i, j)) in inp.gs.edges().iter().enumerate() {
        let u: Vec<f64> = (0..f).map(|k| rows_s[i][k] - rows_s[j][k]).collect();
        for (et, &(a, b)) in inp.gt.edges().iter().enumerate() {
            let up = dce[[es, et]];
            if up == 0.0 {
                continue;
            }
            let v: Vec<f64> = (0..f).map(|k| rows_t[a][k] - rows_t[b][k]).collect();
            let mut du = vec![0.0; f];
            let mut dv = vec![0.0; f];
            cosine_grad_into(&u, &v, up, &mut du, &mut dv);
            for k in 0..f {
                dzs[[i, k]] += du[k];
                dzs[[j, k]] -= du[k];
                dzt[[a, k]] += dv[k];
                dzt[[b, k]] -= dv[k];
            }
        }
    }

    let (_, d, r, s) = inp.ys.dim();
    let mut dys = Array4::<f64>::zeros((n, d, r, s));
    let mut dyt = Array4::<f64>::zeros((n, d, r, s));
    if let Some(local) = &cache.local {
        if local.len() != n * n {
            return Err(Error::Shape("stale local-cost cache".into()));
        }
        let mut cell_s: Vec<Array2<f64>> = vec![Array2::zeros((r * s, d)); n];
        let mut cell_t: Vec<Array2<f64>> = vec![Array2::zeros((r * s, d)); n];
        for i in 0..n {
            for a in 0..n {
                let up = (1.0 - alpha) * dcv[[i, a]];
                if up == 0.0 {
                    continue;
                }
                let (lhs, rhs) = (&mut cell_s[i], &mut cell_t[a]);
                local_cost_backward(
                    inp.ys.index_axis(Axis(0), i),
                    inp.yt.index_axis(Axis(0), a),
                    &local[i * n + a],
                    up,
                    lhs,
                    rhs,
                );
            }
        }
        let to_drs = |cells: &Array2<f64>| -> Array3<f64> {
            cells.t().as_standard_layout().into_owned().into_shape_with_order((d, r, s)).unwrap()
        };
        for i in 0..n {
            dys.index_axis_mut(Axis(0), i).assign(&to_drs(&cell_s[i]));
            dyt.index_axis_mut(Axis(0), i).assign(&to_drs(&cell_t[i]));
        }
    }
    Ok(AffinityGrads { dzs, dzt, dys, dyt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{knn_graph, KnnMetric};
    use crate::testutil::{max_rel_error, random_array4};
    use ndarray::Array3;

    fn lattice(r: usize, s: usize, x0: f64, w: f64) -> Array3<f64> {
        Array3::from_shape_fn((r, s, 2), |(i, j, k)| {
            if k == 0 {
                x0 + w * j as f64 / (s - 1) as f64
            } else {
                x0 + w * i as f64 / (r - 1) as f64
            }
        })
    }

    /// Enumerates every target cell per source cell and sorts the kept
    /// distances with a full sort.
    fn naive_local_cost(y_i: &Array3<f64>, y_a: &Array3<f64>, p_i: &Array3<f64>, p_a: &Array3<f64>, gamma: usize) -> f64 {
        let (d, r, s) = y_i.dim();
        let mut total = 0.0;
        for by_position in [true, false] {
            let mut rows: Vec<(f64, usize, usize, usize, usize)> = Vec::new();
            for r1 in 0..r {
                for s1 in 0..s {
                    let mut best = (f64::INFINITY, 0, 0);
                    for r2 in 0..r {
                        for s2 in 0..s {
                            let dist: f64 = if by_position {
                                (0..2).map(|k| (p_i[[r1, s1, k]] - p_a[[r2, s2, k]]).powi(2)).sum()
                            } else {
                                (0..d).map(|c| (y_i[[c, r1, s1]] - y_a[[c, r2, s2]]).powi(2)).sum()
                            };
                            if dist < best.0 {
                                best = (dist, r2, s2);
                            }
                        }
                    }
                    rows.push((best.0, r1, s1, best.1, best.2));
                }
            }
            rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then((a.1 * s + a.2).cmp(&(b.1 * s + b.2))));
            rows.truncate(gamma);
            let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
            for &(_, r1, s1, r2, s2) in &rows {
                for c in 0..d {
                    let (x, y) = (y_i[[c, r1, s1]], y_a[[c, r2, s2]]);
                    uv += x * y;
                    uu += x * x;
                    vv += y * y;
                }
            }
            total += uv / (uu.sqrt() * vv.sqrt());
        }
        total / 2.0
    }

    #[test]
    fn self_match_is_one() {
        let mut rng = RngStream::new(3);
        let y = random_array4(&mut rng, (1, 3, 4, 4)).index_axis_move(Axis(0), 0);
        let p = lattice(4, 4, 0.1, 0.5);
        let (c, _) = local_cost(y.view(), y.view(), p.view(), p.view(), 5).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn saturated_gamma_keeps_every_cell() {
        let mut rng = RngStream::new(4);
        let yi = random_array4(&mut rng, (1, 2, 3, 3)).index_axis_move(Axis(0), 0);
        let ya = random_array4(&mut rng, (1, 2, 3, 3)).index_axis_move(Axis(0), 0);
        let p = lattice(3, 3, 0.0, 1.0);
        let (_, cache) = local_cost(yi.view(), ya.view(), p.view(), p.view(), 100).unwrap();
        assert_eq!(cache.location.selected, (0..9).collect::<Vec<_>>());
        assert_eq!(cache.feature.selected, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn matches_naive_double_loop() {
        let mut rng = RngStream::new(10);
        for _ in 0..20 {
            let yi = random_array4(&mut rng, (1, 2, 3, 3)).index_axis_move(Axis(0), 0);
            let ya = random_array4(&mut rng, (1, 2, 3, 3)).index_axis_move(Axis(0), 0);
            let pi = lattice(3, 3, rng.uniform_range(0.0, 0.3), 0.6);
            let pa = lattice(3, 3, rng.uniform_range(0.0, 0.3), 0.7);
            let (c, _) = local_cost(yi.view(), ya.view(), pi.view(), pa.view(), 4).unwrap();
            let oracle = naive_local_cost(&yi, &ya, &pi, &pa, 4);
            assert!((c - oracle).abs() < 1e-12, "{c} vs {oracle}");
        }
    }

    #[test]
    fn symmetric_when_neighbour_maps_are_mutual() {
        let mut rng = RngStream::new(31);
        let yi = random_array4(&mut rng, (1, 3, 4, 4)).index_axis_move(Axis(0), 0);
        let ya = &yi + &random_array4(&mut rng, (1, 3, 4, 4)).index_axis_move(Axis(0), 0).mapv(|v| 1e-3 * v);
        let p = lattice(4, 4, 0.2, 0.5);
        let (ab, c1) = local_cost(yi.view(), ya.view(), p.view(), p.view(), 6).unwrap();
        let (ba, c2) = local_cost(ya.view(), yi.view(), p.view(), p.view(), 6).unwrap();
        assert_eq!(c1, c2);
        assert!((ab - ba).abs() < 1e-12);
    }

    struct Fixture {
        zs: Array2<f64>,
        zt: Array2<f64>,
        ys: Array4<f64>,
        yt: Array4<f64>,
        ps: Array4<f64>,
        pt: Array4<f64>,
        gs: Graph,
        gt: Graph,
    }

    impl Fixture {
        fn new(seed: u64, n: usize, d: usize, r: usize, f: usize, k: usize) -> Self {
            let mut rng = RngStream::new(seed);
            let zs = Array2::from_shape_fn((n, f), |_| rng.normal());
            let zt = Array2::from_shape_fn((n, f), |_| rng.normal());
            let ys = random_array4(&mut rng, (n, d, r, r));
            let yt = random_array4(&mut rng, (n, d, r, r));
            let pos = |rng: &mut RngStream| {
                let mut p = Array4::zeros((n, r, r, 2));
                for i in 0..n {
                    let x0 = rng.uniform_range(0.0, 0.4);
                    p.index_axis_mut(Axis(0), i).assign(&lattice(r, r, x0, 0.5));
                }
                p
            };
            let ps = pos(&mut rng);
            let pt = pos(&mut rng);
            let gs = knn_graph(zs.view(), k, KnnMetric::Euclidean).unwrap();
            let gt = knn_graph(zt.view(), k, KnnMetric::Euclidean).unwrap();
            Fixture { zs, zt, ys, yt, ps, pt, gs, gt }
        }

        fn inputs(&self) -> AffinityInputs<'_> {
            AffinityInputs {
                zs: self.zs.view(),
                zt: self.zt.view(),
                ys: self.ys.view(),
                yt: self.yt.view(),
                pos_s: self.ps.view(),
                pos_t: self.pt.view(),
                gs: &self.gs,
                gt: &self.gt,
            }
        }
    }

    #[test]
    fn identical_views_have_unit_diagonal() {
        let fx = Fixture::new(1, 5, 3, 3, 4, 2);
        let inp = AffinityInputs {
            zt: fx.zs.view(),
            yt: fx.ys.view(),
            pos_t: fx.ps.view(),
            gt: &fx.gs,
            ..fx.inputs()
        };
        let (affs, _) = build_affinities(&inp, 0.8, 10).unwrap();
        for i in 0..5 {
            assert_eq!(affs.cv[[i, i]], 1.0);
        }
    }

    #[test]
    fn alpha_one_is_pure_cosine() {
        let fx = Fixture::new(2, 4, 2, 3, 3, 1);
        let (affs, cache) = build_affinities(&fx.inputs(), 1.0, 10).unwrap();
        assert!(cache.local.is_none());
        for i in 0..4 {
            for a in 0..4 {
                let c = cosine_sim(&fx.zs.row(i).to_vec(), &fx.zt.row(a).to_vec()).value;
                assert_eq!(affs.cv[[i, a]], c);
            }
        }
        let dcv = Array2::from_elem((4, 4), 1.0);
        let dce = Array2::from_elem(affs.ce.dim(), 1.0);
        let g = affinity_backward(&dcv, &dce, &cache, &fx.inputs(), 1.0).unwrap();
        assert!(g.dys.iter().chain(g.dyt.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn vertex_affinities_are_bounded() {
        for seed in 0..10 {
            let fx = Fixture::new(seed, 5, 3, 3, 4, 2);
            let (affs, _) = build_affinities(&fx.inputs(), 0.6, 4).unwrap();
            assert!(affs.cv.iter().all(|&v| (-1.0 - 1e-6..=1.0 + 1e-6).contains(&v)));
            assert_eq!(affs.ce.len(), fx.gs.num_edges() * fx.gt.num_edges());
        }
    }

    #[test]
    fn edge_affinity_sign_symmetry() {
        let fx = Fixture::new(6, 5, 2, 3, 4, 2);
        let (affs, _) = build_affinities(&fx.inputs(), 0.8, 4).unwrap();
        for (es, &(i, j)) in fx.gs.edges().iter().enumerate() {
            for (et, &(a, b)) in fx.gt.edges().iter().enumerate() {
                let u: Vec<f64> = (0..4).map(|k| fx.zs[[j, k]] - fx.zs[[i, k]]).collect();
                let v: Vec<f64> = (0..4).map(|k| fx.zt[[b, k]] - fx.zt[[a, k]]).collect();
                assert!((cosine_sim(&u, &v).value - affs.ce[[es, et]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let fx = Fixture::new(7, 4, 2, 3, 3, 1);
        let (affs, cache) = build_affinities(&fx.inputs(), 0.8, 4).unwrap();
        let g = affinity_backward(
            &Array2::zeros(affs.cv.dim()),
            &Array2::zeros(affs.ce.dim()),
            &cache,
            &fx.inputs(),
            0.8,
        )
        .unwrap();
        assert!(g.dzs.iter().chain(g.dzt.iter()).chain(g.dys.iter()).chain(g.dyt.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let fx = Fixture::new(8, 4, 2, 3, 3, 1);
        let (affs, _) = build_affinities(&fx.inputs(), 0.8, 4).unwrap();
        let stale = AffinityCache { local: Some(vec![]) };
        assert!(affinity_backward(&affs.cv, &affs.ce, &stale, &fx.inputs(), 0.8).is_err());
    }

    #[test]
    fn perturbation_hooks() {
        let fx = Fixture::new(9, 4, 2, 3, 3, 1);
        let (affs, _) = build_affinities(&fx.inputs(), 0.8, 4).unwrap();
        assert_eq!(perturb_scaled(&affs, &mut RngStream::new(0), 0.0), affs);
        assert_eq!(perturb(&affs, &mut RngStream::new(1)), perturb(&affs, &mut RngStream::new(1)));
    }

    #[test]
    fn perturbation_mean_is_euler_gamma() {
        let affs = AffinitySet {
            cv: Array2::zeros((100, 100)),
            ce: Array2::zeros((100, 900)),
        };
        let p = perturb(&affs, &mut RngStream::new(42));
        let count = (p.cv.len() + p.ce.len()) as f64;
        let mean = (p.cv.sum() + p.ce.sum()) / count;
        assert!((mean - 0.5772).abs() < 0.01, "{mean}");
    }

    #[test]
    fn backward_matches_finite_differences_with_frozen_choices() {
        let fx = Fixture::new(12, 4, 3, 3, 4, 2);
        let alpha = 0.7;
        let (affs, cache) = build_affinities(&fx.inputs(), alpha, 5).unwrap();
        let mut rng = RngStream::new(99);
        let wcv = Array2::from_shape_fn(affs.cv.dim(), |_| rng.normal());
        let wce = Array2::from_shape_fn(affs.ce.dim(), |_| rng.normal());
        let g = affinity_backward(&wcv, &wce, &cache, &fx.inputs(), alpha).unwrap();

        let probe = |zs: &Array2<f64>, zt: &Array2<f64>, ys: &Array4<f64>, yt: &Array4<f64>| {
            let inp = AffinityInputs {
                zs: zs.view(),
                zt: zt.view(),
                ys: ys.view(),
                yt: yt.view(),
                ..fx.inputs()
            };
            let a = evaluate_frozen(&inp, alpha, &cache).unwrap();
            (&a.cv * &wcv).sum() + (&a.ce * &wce).sum()
        };
        let h = 1e-6;
        let mut numeric = Vec::new();
        let mut analytic = Vec::new();
        for idx in 0..fx.zs.len() {
            for side in 0..2 {
                let (mut zp, mut zm) = if side == 0 { (fx.zs.clone(), fx.zs.clone()) } else { (fx.zt.clone(), fx.zt.clone()) };
                zp.as_slice_mut().unwrap()[idx] += h;
                zm.as_slice_mut().unwrap()[idx] -= h;
                let (fp, fm) = if side == 0 {
                    (probe(&zp, &fx.zt, &fx.ys, &fx.yt), probe(&zm, &fx.zt, &fx.ys, &fx.yt))
                } else {
                    (probe(&fx.zs, &zp, &fx.ys, &fx.yt), probe(&fx.zs, &zm, &fx.ys, &fx.yt))
                };
                numeric.push((fp - fm) / (2.0 * h));
                analytic.push(if side == 0 { g.dzs.as_slice().unwrap()[idx] } else { g.dzt.as_slice().unwrap()[idx] });
            }
        }
        for idx in 0..fx.ys.len() {
            for side in 0..2 {
                let (mut yp, mut ym) = if side == 0 { (fx.ys.clone(), fx.ys.clone()) } else { (fx.yt.clone(), fx.yt.clone()) };
                yp.as_slice_mut().unwrap()[idx] += h;
                ym.as_slice_mut().unwrap()[idx] -= h;
                let (fp, fm) = if side == 0 {
                    (probe(&fx.zs, &fx.zt, &yp, &fx.yt), probe(&fx.zs, &fx.zt, &ym, &fx.yt))
                } else {
                    (probe(&fx.zs, &fx.zt, &fx.ys, &yp), probe(&fx.zs, &fx.zt, &fx.ys, &ym))
                };
                numeric.push((fp - fm) / (2.0 * h));
                analytic.push(if side == 0 { g.dys.as_slice().unwrap()[idx] } else { g.dyt.as_slice().unwrap()[idx] });
            }
        }
        let err = max_rel_error(&analytic, &numeric);
        assert!(err <= 1e-3, "max relative error {err}");

        // a single cv entry against a single embedding coordinate
        let mut one = Array2::zeros(affs.cv.dim());
        one[[1, 2]] = 1.0;
        let g1 = affinity_backward(&one, &Array2::zeros(affs.ce.dim()), &cache, &fx.inputs(), alpha).unwrap();
        let mut zp = fx.zs.clone();
        let mut zm = fx.zs.clone();
        zp[[1, 0]] += h;
        zm[[1, 0]] -= h;
        let cv_at = |zs: &Array2<f64>| {
            let inp = AffinityInputs { zs: zs.view(), ..fx.inputs() };
            evaluate_frozen(&inp, alpha, &cache).unwrap().cv[[1, 2]]
        };
        let fd = (cv_at(&zp) - cv_at(&zm)) / (2.0 * h);
        assert!((fd - g1.dzs[[1, 0]]).abs() <= 1e-3 * fd.abs().max(1e-8));
    }
}
