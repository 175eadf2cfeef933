//! Hamming loss on matchings and gradients through the matching solver by
//! λ-perturbed re-solving.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::affinity::AffinitySet;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matcher::{gm_solve, Matching, SolverCfg};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverGradCfg {
    pub lambda: f64,
}

impl Default for SolverGradCfg {
    fn default() -> Self {
        SolverGradCfg { lambda: 80.0 }
    }
}

impl SolverGradCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be a positive number"));
        }
        Ok(())
    }
}

/// `L = Σ v̂(1 - v*) + v*(1 - v̂)` and its coefficient `1 - 2v*`.
pub fn hamming_loss_and_grad(v_hat: &Array2<f64>, v_star: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if v_hat.dim() != v_star.dim() {
        return Err(Error::Shape(format!(
            "hamming loss: {:?} vs {:?}",
            v_hat.dim(),
            v_star.dim()
        )));
    }
    let loss = v_hat
        .iter()
        .zip(v_star)
        .map(|(&a, &b)| a * (1.0 - b) + b * (1.0 - a))
        .sum();
    Ok((loss, v_star.mapv(|b| 1.0 - 2.0 * b)))
}

/// Induced edge indicator `u[(i,j),(a,b)] = v[i,a] v[j,b]` over `Eˢ x Eᵗ`.
pub fn edge_indicator(m: &Matching, gs: &Graph, gt: &Graph) -> Array2<f64> {
    let mut u = Array2::zeros((gs.num_edges(), gt.num_edges()));
    let p = m.perm();
    for (es, &(i, j)) in gs.edges().iter().enumerate() {
        if let Some(et) = gt.edge_index(p[i], p[j]) {
            u[[es, et]] = 1.0;
        }
    }
    u
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverGrad {
    pub dcv: Array2<f64>,
    pub dce: Array2<f64>,
    /// Solution of the perturbed problem.
    pub v_lambda: Matching,
}

/// Re-solves with `cv' = cv - λ dLdv` (`ce` untouched) and returns
/// `dcv = (v̂ - v_λ)/λ`, `dce = (û - u_λ)/λ`.
#[allow(clippy::too_many_arguments)]
pub fn solver_grad(
    affs: &AffinitySet,
    gs: &Graph,
    gt: &Graph,
    v_hat: &Matching,
    dldv: &Array2<f64>,
    cfg: &SolverGradCfg,
    solver: &SolverCfg,
    rng: &mut RngStream,
) -> Result<SolverGrad> {
    cfg.validate()?;
    affs.check(gs, gt)?;
    if dldv.dim() != affs.cv.dim() || v_hat.n() != affs.n() {
        return Err(Error::Shape("solver_grad: dLdv or matching does not match cv".into()));
    }
    let lambda = cfg.lambda;
    let shifted = AffinitySet {
        cv: &affs.cv - &(dldv * lambda),
        ce: affs.ce.clone(),
    };
    let v_lambda = gm_solve(&shifted, gs, gt, solver, rng)?;
    let dcv = (v_hat.indicator() - v_lambda.indicator()) / lambda;
    let dce = (edge_indicator(v_hat, gs, gt) - edge_indicator(&v_lambda, gs, gt)) / lambda;
    Ok(SolverGrad { dcv, dce, v_lambda })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::match_score;
    use ndarray::array;

    fn cycle(n: usize) -> Graph {
        Graph::from_edges(n, (0..n).map(|i| (i, (i + 1) % n)).collect()).unwrap()
    }

    fn vertex_only(cv: Array2<f64>, g: &Graph) -> AffinitySet {
        let e = g.num_edges();
        AffinitySet {
            cv,
            ce: Array2::zeros((e, e)),
        }
    }

    fn grad_for(cv: Array2<f64>, v_star: &Matching, lambda: f64) -> SolverGrad {
        let g = cycle(cv.nrows());
        let affs = vertex_only(cv, &g);
        let mut rng = RngStream::new(0);
        let v_hat = gm_solve(&affs, &g, &g, &SolverCfg::default(), &mut rng).unwrap();
        let (_, dldv) = hamming_loss_and_grad(&v_hat.indicator(), &v_star.indicator()).unwrap();
        solver_grad(&affs, &g, &g, &v_hat, &dldv, &SolverGradCfg { lambda }, &SolverCfg::default(), &mut rng).unwrap()
    }

    #[test]
    fn hamming_examples() {
        let id = Matching::identity(2).indicator();
        let swap = Matching::new(vec![1, 0]).unwrap().indicator();
        assert_eq!(hamming_loss_and_grad(&id, &id).unwrap().0, 0.0);
        let (loss, g) = hamming_loss_and_grad(&swap, &id).unwrap();
        assert_eq!(loss, 4.0);
        assert_eq!(g, array![[-1.0, 1.0], [1.0, -1.0]]);
        assert!(hamming_loss_and_grad(&id, &Array2::zeros((3, 3))).is_err());
    }

    #[test]
    fn zero_loss_gradient_is_zero() {
        let g = cycle(3);
        let affs = vertex_only(Array2::eye(3), &g);
        let v_hat = Matching::identity(3);
        let mut rng = RngStream::new(0);
        let r = solver_grad(&affs, &g, &g, &v_hat, &Array2::zeros((3, 3)), &SolverGradCfg::default(), &SolverCfg::default(), &mut rng).unwrap();
        assert!(r.dcv.iter().chain(r.dce.iter()).all(|&v| v == 0.0));
        assert_eq!(r.v_lambda, v_hat);
    }

    #[test]
    fn two_node_hand_cases() {
        let swap = Matching::new(vec![1, 0]).unwrap();
        // cv' = [[0,1],[1,0]]: swap wins outright
        let r = grad_for(Array2::eye(2), &swap, 1.0);
        assert_eq!(r.v_lambda, swap);
        assert_eq!(r.dcv, array![[1.0, -1.0], [-1.0, 1.0]]);

        let r = grad_for(Array2::eye(2), &swap, 2.0);
        assert_eq!(r.dcv, array![[0.5, -0.5], [-0.5, 0.5]]);

        // target already optimal: cv' = [[5,-4],[-4,5]]
        let r = grad_for(Array2::eye(2), &Matching::identity(2), 4.0);
        assert!(r.dcv.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_entries_and_marginals() {
        let mut rng = RngStream::new(17);
        for _ in 0..30 {
            let n = 5;
            let mut target: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut target);
            let cv = Array2::from_shape_fn((n, n), |_| rng.normal());
            let lambda = rng.uniform_range(0.2, 3.0);
            let r = grad_for(cv, &Matching::new(target).unwrap(), lambda);
            for &v in r.dcv.iter().chain(r.dce.iter()) {
                assert!(v == 0.0 || (v.abs() - 1.0 / lambda).abs() < 1e-12);
            }
            for s in r.dcv.sum_axis(ndarray::Axis(0)).iter().chain(r.dcv.sum_axis(ndarray::Axis(1)).iter()) {
                assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cost_updates_reach_any_target() {
        let g = cycle(4);
        let mut solved = 0;
        for seed in 0..100 {
            let mut rng = RngStream::new(seed);
            let mut target: Vec<usize> = (0..4).collect();
            rng.shuffle(&mut target);
            let v_star = Matching::new(target).unwrap().indicator();
            let mut affs = vertex_only(Array2::from_shape_fn((4, 4), |_| rng.normal()), &g);
            let cfg = SolverGradCfg { lambda: 1.0 + rng.uniform_range(0.0, 4.0) };
            for _ in 0..50 {
                let v_hat = gm_solve(&affs, &g, &g, &SolverCfg::default(), &mut rng).unwrap();
                let (loss, dldv) = hamming_loss_and_grad(&v_hat.indicator(), &v_star).unwrap();
                if loss == 0.0 {
                    solved += 1;
                    break;
                }
                let r = solver_grad(&affs, &g, &g, &v_hat, &dldv, &cfg, &SolverCfg::default(), &mut rng).unwrap();
                affs.cv = &affs.cv - &(r.dcv * cfg.lambda);
            }
        }
        assert!(solved >= 95, "{solved}/100");
    }

    /// `f_λ(c) = L(v_λ) + (score(v̂; c) - score(v_λ; c'))/λ`, evaluated by
    /// re-solving at every probe.
    fn interpolated(affs: &AffinitySet, g: &Graph, v_star: &Array2<f64>, lambda: f64) -> f64 {
        let cfg = SolverCfg::default();
        let v_hat = gm_solve(affs, g, g, &cfg, &mut RngStream::new(0)).unwrap();
        let (_, dldv) = hamming_loss_and_grad(&v_hat.indicator(), v_star).unwrap();
        let shifted = AffinitySet {
            cv: &affs.cv - &(&dldv * lambda),
            ce: affs.ce.clone(),
        };
        let v_l = gm_solve(&shifted, g, g, &cfg, &mut RngStream::new(0)).unwrap();
        let (loss_l, _) = hamming_loss_and_grad(&v_l.indicator(), v_star).unwrap();
        loss_l + (match_score(&v_hat, affs, g, g).unwrap() - match_score(&v_l, &shifted, g, g).unwrap()) / lambda
    }

    #[test]
    fn matches_interpolated_objective() {
        let mut checked = 0;
        for (seed, n) in (0..40).map(|s| (s, 2 + (s as usize % 2))) {
            let mut rng = RngStream::new(seed);
            let g = cycle(n);
            let affs = AffinitySet {
                cv: Array2::from_shape_fn((n, n), |_| rng.normal()),
                ce: Array2::from_shape_fn((n, n), |_| rng.normal()),
            };
            let mut target: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut target);
            let v_star = Matching::new(target).unwrap().indicator();
            let lambda = 1.5;
            let v_hat = gm_solve(&affs, &g, &g, &SolverCfg::default(), &mut rng).unwrap();
            let (_, dldv) = hamming_loss_and_grad(&v_hat.indicator(), &v_star).unwrap();
            let r = solver_grad(&affs, &g, &g, &v_hat, &dldv, &SolverGradCfg { lambda }, &SolverCfg::default(), &mut rng).unwrap();
            if r.v_lambda == v_hat {
                continue;
            }
            checked += 1;
            let h = 1e-6;
            for (which, grad) in [(0, &r.dcv), (1, &r.dce)] {
                for idx in 0..n * n {
                    let mut p = affs.clone();
                    let mut m = affs.clone();
                    let (pp, mm) = if which == 0 { (&mut p.cv, &mut m.cv) } else { (&mut p.ce, &mut m.ce) };
                    pp.as_slice_mut().unwrap()[idx] += h;
                    mm.as_slice_mut().unwrap()[idx] -= h;
                    let fd = (interpolated(&p, &g, &v_star, lambda) - interpolated(&m, &g, &v_star, lambda)) / (2.0 * h);
                    assert!((fd - grad.as_slice().unwrap()[idx]).abs() < 1e-6, "seed {seed}: {fd} vs {}", grad.as_slice().unwrap()[idx]);
                }
            }
        }
        assert!(checked >= 5, "only {checked} informative instances");
    }
}
