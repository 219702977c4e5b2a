//! Orthogonal decompositions on trees: Galtchouk–Kunita–Watanabe projections
//! of terminal targets, the Föllmer–Schweizer decomposition of the terminal
//! mean-variance tradeoff, and the contraction fixed-point iteration that
//! produces it.

use crate::error::{Result, TcmvError};
use crate::solvers;
use crate::structure::{MvtReport, ScReport};
use crate::tree::{Adapted, DoobDecomposition, EventTree, Predictable};

/// GKW decomposition H = Y₀ + Σ ξΔM + L_T with L a martingale strongly
/// orthogonal to M.
#[derive(Debug, Clone)]
pub struct GkwDecomposition {
    pub y0: f64,
    pub xi: Predictable,
    /// Orthogonal martingale part, L₀ = 0.
    pub l: Adapted,
    /// Conditional expectations Y_k = E[H | node], kept for downstream use.
    pub y: Adapted,
}

/// FS decomposition K_T = K̂₀ + Σ ξ̂ΔS + L̂_T (integral against S, not M).
#[derive(Debug, Clone)]
pub struct FsDecomposition {
    pub k0_hat: f64,
    pub xi_hat: Predictable,
    pub l_hat: Adapted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsMethod {
    ViaLmve,
    FixedPoint,
}

/// Diagnostics of one fixed-point run of Ĵ(ϑ) = (1/γ)λ − ξ(ϑ).
#[derive(Debug, Clone)]
pub struct ContractionReport {
    /// Successive iterates, starting from the initial guess.
    pub iterates: Vec<Predictable>,
    /// Sup-norm of successive differences.
    pub sup_diffs: Vec<f64>,
    /// Weighted-norm (‖·‖_{β,∞} surrogate) successive differences.
    pub weighted_diffs: Vec<f64>,
    /// Geometric mean of successive difference ratios.
    pub measured_ratio: f64,
    /// Whether the contraction guarantee applies (max ΔK jump b < 1).
    pub theoretical_modulus_valid: bool,
    /// Norm parameter used; midpoint of (1, 1/b) when b < 1, else 1 and the
    /// norm degrades to the unweighted L²(M) norm.
    pub beta: f64,
    pub iterations: usize,
}

/// Backward GKW recursion: ξ = Cov[ΔM, E[H|child]] / E[(ΔM)²] with 0/0 = 0.
///
/// `target` holds one payoff per leaf in leaf id order.
pub fn gkw(tree: &EventTree, doob: &DoobDecomposition, target: &[f64]) -> Result<GkwDecomposition> {
    let y = tree.backward_expectation(target);
    let mut xi = vec![0.0; tree.num_nodes()];
    for n in tree.non_terminal_nodes() {
        let i = n as usize;
        let cv = doob.cond_var[i];
        if cv == 0.0 {
            continue; // 0/0 = 0
        }
        let cov: f64 = tree
            .edge_range(n)
            .map(|e| tree.edge_prob(e) * doob.delta_m[e] * y[tree.edge_child(e) as usize])
            .sum();
        xi[i] = cov / cv;
    }
    let l = tree.forward_accumulate(
        0.0,
        |n, e| {
            let i = n as usize;
            y[tree.edge_child(e) as usize] - y[i] - xi[i] * doob.delta_m[e]
        },
        1e-9,
    )?;
    Ok(GkwDecomposition {
        y0: y[0],
        xi: Predictable(xi),
        l: Adapted(l),
        y: Adapted(y),
    })
}

/// GKW of the drift accumulation Σ ϑΔA; the recurring building block of both
/// the fixed-point map and the FS assembly.
fn gkw_of_drift_sum(
    tree: &EventTree,
    doob: &DoobDecomposition,
    theta: &Predictable,
) -> Result<GkwDecomposition> {
    let path = tree.forward_accumulate(0.0, |n, _| theta.0[n as usize] * doob.delta_a[n as usize], 1e-9)?;
    let target: Vec<f64> = tree.leaves().map(|n| path[n as usize]).collect();
    gkw(tree, doob, &target)
}

/// Discrete surrogate of the ‖·‖_{β,∞} norm: weighted L²(M) with weight
/// 1/𝓔(−βK) per step. With `beta = 0` this is the plain L²(M) norm.
pub fn weighted_l2m_norm(
    tree: &EventTree,
    probs: &[f64],
    doob: &DoobDecomposition,
    delta_k: &Predictable,
    beta: f64,
    theta: &Predictable,
) -> f64 {
    // 𝓔(−βK) up to (and including) the step at each non-terminal node
    let se = tree
        .forward_product(1.0, |n, _| 1.0 - beta * delta_k.0[n as usize], 1e-9)
        .unwrap_or_else(|_| vec![1.0; tree.num_nodes()]);
    let mut acc = 0.0;
    for n in tree.non_terminal_nodes() {
        let i = n as usize;
        let weight = 1.0 / (se[i] * (1.0 - beta * delta_k.0[i]));
        acc += probs[i] * weight * theta.0[i] * theta.0[i] * doob.cond_var[i];
    }
    acc.sqrt()
}

/// Föllmer–Schweizer decomposition of K_T.
///
/// `ViaLmve` derives ξ̂ = λ − ϑ̂ from the γ = 1 backward recursion (the
/// decomposition itself is γ-free); `FixedPoint` iterates Ĵ to the same
/// strategy. Both assemble K̂₀ and L̂ from the GKW decomposition of Σ ϑ̂ΔA.
pub fn fs_of_mvt(
    tree: &EventTree,
    doob: &DoobDecomposition,
    sc: &ScReport,
    mvt: &MvtReport,
    method: FsMethod,
) -> Result<FsDecomposition> {
    sc.require_sc()?;
    let theta = match method {
        FsMethod::ViaLmve => solvers::lmve_strategy(tree, doob, sc, 1.0)?.0,
        FsMethod::FixedPoint => {
            let start = Predictable::zeros(tree);
            fixed_point_iterate(tree, doob, sc, mvt, 1.0, &start, 200, 1e-12)?.0
        }
    };
    let g = gkw_of_drift_sum(tree, doob, &theta)?;
    let xi_hat = Predictable(
        sc.lambda
            .0
            .iter()
            .zip(&theta.0)
            .map(|(l, t)| l - t)
            .collect(),
    );
    Ok(FsDecomposition {
        k0_hat: g.y0,
        xi_hat,
        l_hat: g.l,
    })
}

/// Iterates ϑ ↦ (1/γ)λ − ξ(ϑ), where ξ(ϑ) is the GKW integrand of Σ ϑΔA.
///
/// Measures successive differences in the weighted norm (β in (1, 1/b) when
/// the max jump b of ΔK is below 1, unweighted otherwise) and stops once the
/// difference is below `tol`. Errors with `NonConvergence` if the cap is hit.
pub fn fixed_point_iterate(
    tree: &EventTree,
    doob: &DoobDecomposition,
    sc: &ScReport,
    mvt: &MvtReport,
    gamma: f64,
    start: &Predictable,
    cap: usize,
    tol: f64,
) -> Result<(Predictable, ContractionReport)> {
    sc.require_sc()?;
    if gamma <= 0.0 {
        return Err(TcmvError::Validation("gamma must be > 0".into()));
    }
    start.check_tree(tree)?;
    let probs = tree.node_probabilities();
    let b = mvt.max_jump;
    let theoretical = b < 1.0;
    let beta = if b > 0.0 && theoretical {
        0.5 * (1.0 + 1.0 / b)
    } else if !theoretical {
        0.0 // fall back to the unweighted L²(M) norm
    } else {
        1.0
    };

    let mut iterates = vec![start.clone()];
    let mut sup_diffs = Vec::new();
    let mut weighted_diffs = Vec::new();
    let mut current = start.clone();
    let mut converged = false;
    for _ in 0..cap {
        let g = gkw_of_drift_sum(tree, doob, &current)?;
        let next = Predictable(
            sc.lambda
                .0
                .iter()
                .zip(&g.xi.0)
                .map(|(l, x)| l / gamma - x)
                .collect(),
        );
        let diff = Predictable(
            next.0
                .iter()
                .zip(&current.0)
                .map(|(a, b)| a - b)
                .collect(),
        );
        sup_diffs.push(diff.sup_norm(tree));
        weighted_diffs.push(weighted_l2m_norm(
            tree, &probs, doob, &mvt.delta_k, beta, &diff,
        ));
        iterates.push(next.clone());
        current = next;
        if *weighted_diffs.last().unwrap() < tol {
            converged = true;
            break;
        }
    }
    let ratios: Vec<f64> = weighted_diffs
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .collect();
    let measured_ratio = if ratios.is_empty() {
        0.0
    } else {
        (ratios.iter().map(|r| r.max(1e-300).ln()).sum::<f64>() / ratios.len() as f64).exp()
    };
    let report = ContractionReport {
        sup_diffs,
        weighted_diffs,
        measured_ratio,
        theoretical_modulus_valid: theoretical,
        beta,
        iterations: iterates.len() - 1,
        iterates,
    };
    if !converged {
        return Err(TcmvError::NonConvergence(format!(
            "cap {cap} reached, last weighted diff {:.3e}, measured ratio {:.3}",
            report.weighted_diffs.last().copied().unwrap_or(f64::NAN),
            report.measured_ratio
        )));
    }
    Ok((current, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::structure::{compute_lambda, compute_mvt};
    use crate::tree::doob_decompose;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    struct Setup {
        tree: EventTree,
        doob: DoobDecomposition,
        sc: ScReport,
        mvt: MvtReport,
    }

    fn setup(tree: EventTree) -> Setup {
        let doob = doob_decompose(&tree);
        let sc = compute_lambda(&tree, &doob);
        let mvt = compute_mvt(&tree, &doob, &sc).unwrap();
        Setup {
            tree,
            doob,
            sc,
            mvt,
        }
    }

    fn gkw_residual(s: &Setup, g: &GkwDecomposition, target: &[f64]) -> f64 {
        // path identity H = Y0 + Σ ξΔM + L_T on every leaf
        let path = s
            .tree
            .forward_accumulate(0.0, |n, e| g.xi.0[n as usize] * s.doob.delta_m[e], 1e-9)
            .unwrap();
        s.tree
            .leaves()
            .zip(target)
            .map(|(leaf, &h)| {
                (h - g.y0 - path[leaf as usize] - g.l.0[leaf as usize]).abs()
            })
            .fold(0.0_f64, f64::max)
    }

    #[test]
    fn gkw_constant_target() {
        let s = setup(fixtures::multiplicative_two_step());
        let target = vec![3.5; s.tree.leaves().len()];
        let g = gkw(&s.tree, &s.doob, &target).unwrap();
        assert_eq!(g.y0, 3.5);
        assert!(g.xi.0.iter().all(|&x| x.abs() < 1e-12));
        assert!(g.l.0.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn gkw_first_step_martingale_increment() {
        // H = ΔM₁ gives ξ₁ = 1, ξ = 0 later, L ≡ 0
        let s = setup(fixtures::multiplicative_two_step());
        // leaves descend from node 1 (up) or node 2 (down)
        let dm1: Vec<f64> = s
            .tree
            .forward_accumulate(0.0, |n, e| if n == 0 { s.doob.delta_m[e] } else { 0.0 }, 1e-12)
            .unwrap();
        let target: Vec<f64> = s.tree.leaves().map(|n| dm1[n as usize]).collect();
        let g = gkw(&s.tree, &s.doob, &target).unwrap();
        assert!((g.xi.0[0] - 1.0).abs() < 1e-12);
        for n in s.tree.non_terminal_nodes().filter(|&n| n != 0) {
            assert!(g.xi.0[n as usize].abs() < 1e-12);
        }
        assert!(g.l.0.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn gkw_squared_terminal_price_brute_force() {
        // ξ at each node equals the conditional covariance ratio computed
        // directly over the leaf outcomes of that node
        let s = setup(fixtures::multiplicative_two_step());
        let target: Vec<f64> = s.tree.leaves().map(|n| s.tree.price(n).powi(2)).collect();
        let g = gkw(&s.tree, &s.doob, &target).unwrap();
        let y = s.tree.backward_expectation(&target);
        for n in s.tree.non_terminal_nodes() {
            let i = n as usize;
            let cov: f64 = s
                .tree
                .edge_range(n)
                .map(|e| {
                    s.tree.edge_prob(e) * s.doob.delta_m[e] * y[s.tree.edge_child(e) as usize]
                })
                .sum();
            assert!((g.xi.0[i] - cov / s.doob.cond_var[i]).abs() < 1e-12);
        }
        assert!(gkw_residual(&s, &g, &target) < 1e-10);
    }

    #[test]
    fn gkw_orthogonality_and_martingale_node_checks() {
        for tree in fixtures::sc_fixture_trees() {
            let s = setup(tree);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let target: Vec<f64> = s
                .tree
                .leaves()
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            let g = gkw(&s.tree, &s.doob, &target).unwrap();
            for n in s.tree.non_terminal_nodes() {
                let i = n as usize;
                let (mut mart, mut orth) = (0.0, 0.0);
                for e in s.tree.edge_range(n) {
                    let dl = g.l.0[s.tree.edge_child(e) as usize] - g.l.0[i];
                    mart += s.tree.edge_prob(e) * dl;
                    orth += s.tree.edge_prob(e) * dl * s.doob.delta_m[e];
                }
                assert!(mart.abs() < 1e-10, "L martingale check");
                assert!(orth.abs() < 1e-10, "L ⟂ M check");
            }
            assert!(gkw_residual(&s, &g, &target) < 1e-10);
        }
    }

    #[test]
    fn gkw_linearity() {
        let s = setup(fixtures::regime_tree());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nl = s.tree.leaves().len();
        let h1: Vec<f64> = (0..nl).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h2: Vec<f64> = (0..nl).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (1.7, -0.4);
        let combo: Vec<f64> = h1.iter().zip(&h2).map(|(x, y)| a * x + b * y).collect();
        let g1 = gkw(&s.tree, &s.doob, &h1).unwrap();
        let g2 = gkw(&s.tree, &s.doob, &h2).unwrap();
        let gc = gkw(&s.tree, &s.doob, &combo).unwrap();
        assert!((gc.y0 - (a * g1.y0 + b * g2.y0)).abs() < 1e-10);
        for i in 0..s.tree.num_nodes() {
            assert!((gc.xi.0[i] - (a * g1.xi.0[i] + b * g2.xi.0[i])).abs() < 1e-10);
            assert!((gc.l.0[i] - (a * g1.l.0[i] + b * g2.l.0[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn gkw_residual_variance_is_minimal() {
        // perturbing ξ can only increase E[(H − Y0 − Σ ξΔM)²]
        let s = setup(fixtures::regime_tree());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target: Vec<f64> = s
            .tree
            .leaves()
            .map(|n| s.tree.price(n) + rng.gen_range(-0.5..0.5))
            .collect();
        let g = gkw(&s.tree, &s.doob, &target).unwrap();
        let probs = s.tree.node_probabilities();
        let residual = |xi: &Predictable| -> f64 {
            let path = s
                .tree
                .forward_accumulate(0.0, |n, e| xi.0[n as usize] * s.doob.delta_m[e], 1e-9)
                .unwrap();
            s.tree
                .leaves()
                .zip(&target)
                .map(|(leaf, &h)| {
                    let r = h - g.y0 - path[leaf as usize];
                    probs[leaf as usize] * r * r
                })
                .sum()
        };
        let base = residual(&g.xi);
        for _ in 0..100 {
            let mut xi = g.xi.clone();
            for n in s.tree.non_terminal_nodes() {
                xi.0[n as usize] += rng.gen_range(-0.3..0.3);
            }
            assert!(base <= residual(&xi) + 1e-12);
        }
    }

    #[test]
    fn fs_deterministic_mvt_collapses() {
        let s = setup(fixtures::multiplicative_two_step());
        let fs = fs_of_mvt(&s.tree, &s.doob, &s.sc, &s.mvt, FsMethod::ViaLmve).unwrap();
        assert!((fs.k0_hat - 16.0 / 27.0).abs() < 1e-12);
        assert!(fs.xi_hat.sup_norm(&s.tree) < 1e-12);
        assert!(fs.l_hat.0.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn fs_zero_lambda_all_zero() {
        let s = setup(fixtures::one_step_symmetric());
        let fs = fs_of_mvt(&s.tree, &s.doob, &s.sc, &s.mvt, FsMethod::ViaLmve).unwrap();
        assert_eq!(fs.k0_hat, 0.0);
        assert!(fs.xi_hat.sup_norm(&s.tree) == 0.0);
    }

    fn fs_path_residual(s: &Setup, fs: &FsDecomposition) -> f64 {
        let path = s
            .tree
            .forward_accumulate(
                0.0,
                |n, e| {
                    let i = n as usize;
                    fs.xi_hat.0[i]
                        * (s.tree.price(s.tree.edge_child(e)) - s.tree.price(n))
                },
                1e-9,
            )
            .unwrap();
        s.tree
            .leaves()
            .zip(&s.mvt.k_t_per_leaf)
            .map(|(leaf, &kt)| {
                (kt - fs.k0_hat - path[leaf as usize] - fs.l_hat.0[leaf as usize]).abs()
            })
            .fold(0.0_f64, f64::max)
    }

    #[test]
    fn fs_regime_tree_identity_and_methods_agree() {
        let s = setup(fixtures::regime_tree());
        let fs1 = fs_of_mvt(&s.tree, &s.doob, &s.sc, &s.mvt, FsMethod::ViaLmve).unwrap();
        let fs2 = fs_of_mvt(&s.tree, &s.doob, &s.sc, &s.mvt, FsMethod::FixedPoint).unwrap();
        assert!(fs1.xi_hat.sup_norm(&s.tree) > 1e-6, "hedging demand non-zero");
        assert!(fs_path_residual(&s, &fs1) < 1e-10);
        assert!(fs_path_residual(&s, &fs2) < 1e-10);
        assert!((fs1.k0_hat - fs2.k0_hat).abs() < 1e-8);
        for n in s.tree.non_terminal_nodes() {
            assert!((fs1.xi_hat.0[n as usize] - fs2.xi_hat.0[n as usize]).abs() < 1e-8);
        }
    }

    #[test]
    fn fixed_point_zero_lambda_immediate() {
        let s = setup(fixtures::one_step_symmetric());
        let start = Predictable::zeros(&s.tree);
        let (theta, rep) =
            fixed_point_iterate(&s.tree, &s.doob, &s.sc, &s.mvt, 2.0, &start, 200, 1e-10)
                .unwrap();
        assert!(theta.sup_norm(&s.tree) == 0.0);
        assert_eq!(rep.iterations, 1);
    }

    #[test]
    fn fixed_point_deterministic_mvt_one_step() {
        // ξ(λ/γ) = 0 since Σ (λ/γ)ΔA is deterministic, so iterate 1 = λ/γ
        let s = setup(fixtures::multiplicative_two_step());
        let start = Predictable::zeros(&s.tree);
        let (theta, rep) =
            fixed_point_iterate(&s.tree, &s.doob, &s.sc, &s.mvt, 2.0, &start, 200, 1e-10)
                .unwrap();
        for n in s.tree.non_terminal_nodes() {
            let i = n as usize;
            assert!((theta.0[i] - s.sc.lambda.0[i] / 2.0).abs() < 1e-12);
        }
        assert!(rep.iterations <= 2);
        assert!(rep.theoretical_modulus_valid);
    }

    #[test]
    fn fixed_point_matches_recursion_on_regime_tree() {
        let s = setup(fixtures::regime_tree());
        assert!(s.mvt.max_jump < 1.0);
        let start = Predictable::zeros(&s.tree);
        let (theta, rep) =
            fixed_point_iterate(&s.tree, &s.doob, &s.sc, &s.mvt, 1.5, &start, 200, 1e-12)
                .unwrap();
        let (direct, _) = solvers::lmve_strategy(&s.tree, &s.doob, &s.sc, 1.5).unwrap();
        for n in s.tree.non_terminal_nodes() {
            assert!((theta.0[n as usize] - direct.0[n as usize]).abs() < 1e-8);
        }
        assert!(rep.measured_ratio < 1.0);
    }

    #[test]
    fn fixed_point_gamma_scaling() {
        let s = setup(fixtures::regime_tree());
        let start = Predictable::zeros(&s.tree);
        let (t1, _) =
            fixed_point_iterate(&s.tree, &s.doob, &s.sc, &s.mvt, 1.0, &start, 200, 1e-13)
                .unwrap();
        let (t4, _) =
            fixed_point_iterate(&s.tree, &s.doob, &s.sc, &s.mvt, 4.0, &start, 200, 1e-13)
                .unwrap();
        for n in s.tree.non_terminal_nodes() {
            let i = n as usize;
            assert!((t4.0[i] - t1.0[i] / 4.0).abs() < 1e-10);
        }
    }
}
