//! The three strategies under comparison: locally mean-variance efficient
//! (time-consistent), myopically efficient, and static pre-commitment.

use std::collections::BTreeMap;

use crate::error::{Result, TcmvError};
use crate::evaluation;
use crate::structure::{compute_lambda, ScReport};
use crate::tree::{doob_decompose, Adapted, DoobDecomposition, EventTree, Predictable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Lmve,
    Mmve,
    Precommit,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Lmve => "lmve",
            StrategyKind::Mmve => "mmve",
            StrategyKind::Precommit => "precommit",
        }
    }
}

/// A solved strategy together with its expected-future-gains process
/// Z_k = E[Σ_{i>k} ϑΔS | node], the root criterion value, and named
/// internal consistency residuals.
#[derive(Debug, Clone)]
pub struct StrategyResult {
    pub kind: StrategyKind,
    pub gamma: f64,
    pub x: f64,
    /// Number of shares per non-terminal node.
    pub strategy: Predictable,
    pub z: Adapted,
    pub u0: f64,
    pub residuals: BTreeMap<String, f64>,
}

/// Solution of the auxiliary quadratic-hedging problem
/// min E[|1 − ϑ·S_T|²] over predictable ϑ.
#[derive(Debug, Clone)]
pub struct AuxiliarySolution {
    pub phi_tilde: Predictable,
    /// Minimal E[|1 − φ̃·S_T|²]; in [0, 1] since ϑ = 0 is feasible.
    pub value: f64,
    /// E[φ̃·S_T].
    pub mean_gain: f64,
    /// E[1 − φ̃·S_T]. Equals `value` at the optimum (first-order condition).
    pub defect: f64,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) {
        return Err(TcmvError::Validation(format!(
            "risk aversion gamma must be > 0, got {gamma}"
        )));
    }
    Ok(())
}

/// Core backward recursion for the locally efficient strategy:
/// ϑ̂_k = (1/γ)λ_k − Cov[ΔM_k, Σ_{i>k} ϑ̂_iΔA_i | node] / E[(ΔM_k)² | node],
/// solving the future first so the covariance is exact. Returns (ϑ̂, Z).
pub fn lmve_strategy(
    tree: &EventTree,
    doob: &DoobDecomposition,
    sc: &ScReport,
    gamma: f64,
) -> Result<(Predictable, Adapted)> {
    sc.require_sc()?;
    check_gamma(gamma)?;
    let nn = tree.num_nodes();
    let mut theta = vec![0.0; nn];
    let mut z = vec![0.0; nn];
    // Z doubles as E[Σ_{i>k} ϑ̂ΔA | node]: the martingale parts of future
    // gains vanish under conditional expectation.
    for level in (0..tree.horizon()).rev() {
        for n in tree.level_nodes(level) {
            let i = n as usize;
            let cv = doob.cond_var[i];
            let mut cov = 0.0;
            let mut ez = 0.0;
            for e in tree.edge_range(n) {
                let p = tree.edge_prob(e);
                let zc = z[tree.edge_child(e) as usize];
                cov += p * doob.delta_m[e] * zc;
                ez += p * zc;
            }
            let t = if cv == 0.0 {
                0.0 // 0/0 = 0, consistent with λ's convention
            } else {
                sc.lambda.0[i] / gamma - cov / cv
            };
            theta[i] = t;
            z[i] = t * doob.delta_a[i] + ez;
        }
    }
    Ok((Predictable(theta), Adapted(z)))
}

/// Expected future gains of an arbitrary strategy by backward recursion.
pub fn expected_gains(tree: &EventTree, doob: &DoobDecomposition, theta: &Predictable) -> Adapted {
    let mut z = vec![0.0; tree.num_nodes()];
    for level in (0..tree.horizon()).rev() {
        for n in tree.level_nodes(level) {
            let i = n as usize;
            let ez: f64 = tree
                .children(n)
                .map(|(c, p)| p * z[c as usize])
                .sum();
            z[i] = theta.0[i] * doob.delta_a[i] + ez;
        }
    }
    Adapted(z)
}

fn finish_result(
    tree: &EventTree,
    doob: &DoobDecomposition,
    kind: StrategyKind,
    gamma: f64,
    x: f64,
    strategy: Predictable,
    z: Adapted,
    mut residuals: BTreeMap<String, f64>,
) -> Result<StrategyResult> {
    // invariant checks on Z: zero at leaves, E[Σ ϑΔS] at the root
    let leaf_max = tree
        .leaves()
        .map(|n| z.0[n as usize].abs())
        .fold(0.0_f64, f64::max);
    let probs = tree.node_probabilities();
    let total_gain: f64 = tree
        .non_terminal_nodes()
        .map(|n| probs[n as usize] * strategy.0[n as usize] * doob.delta_a[n as usize])
        .sum();
    residuals.insert("z_leaf_max".into(), leaf_max);
    residuals.insert("z_root_gap".into(), (z.0[0] - total_gain).abs());
    let u0 = evaluation::criterion(tree, &strategy, 0, x, gamma)?;
    Ok(StrategyResult {
        kind,
        gamma,
        x,
        strategy,
        z,
        u0,
        residuals,
    })
}

/// Time-consistent (locally mean-variance efficient) strategy.
pub fn solve_lmve_recursion(tree: &EventTree, gamma: f64, x: f64) -> Result<StrategyResult> {
    let doob = doob_decompose(tree);
    let sc = compute_lambda(tree, &doob);
    let (theta, z) = lmve_strategy(tree, &doob, &sc, gamma)?;
    finish_result(
        tree,
        &doob,
        StrategyKind::Lmve,
        gamma,
        x,
        theta,
        z,
        BTreeMap::new(),
    )
}

/// Myopically efficient strategy φ̂ = (1/γ)λ, with the one-step first-order
/// condition E[ΔS | node] − γφ̂·E[(ΔM)² | node] = 0 verified node-wise.
pub fn solve_mmve(tree: &EventTree, gamma: f64, x: f64) -> Result<StrategyResult> {
    let doob = doob_decompose(tree);
    let sc = compute_lambda(tree, &doob);
    sc.require_sc()?;
    check_gamma(gamma)?;
    let phi = Predictable(sc.lambda.0.iter().map(|l| l / gamma).collect());
    let foc = tree
        .non_terminal_nodes()
        .map(|n| {
            let i = n as usize;
            (doob.delta_a[i] - gamma * phi.0[i] * doob.cond_var[i]).abs()
        })
        .fold(0.0_f64, f64::max);
    let z = expected_gains(tree, &doob, &phi);
    let mut residuals = BTreeMap::new();
    residuals.insert("one_step_foc".into(), foc);
    finish_result(tree, &doob, StrategyKind::Mmve, gamma, x, phi, z, residuals)
}

/// Exact dynamic program for min E[|1 − ϑ·S_T|²].
///
/// The value function w(node) = min E[(1 − Σ_future ψΔS)² | node] (for a unit
/// constant) satisfies w = min_θ Σ p·w_child·(1 − θΔS)², a closed-form
/// one-step quadratic minimum; the realized strategy rescales the per-node
/// minimizer by the remaining constant along each path.
pub fn solve_auxiliary(tree: &EventTree) -> Result<AuxiliarySolution> {
    tree.validate()?;
    let nn = tree.num_nodes();
    let mut w = vec![1.0; nn];
    let mut psi = vec![0.0; nn]; // per-unit-constant minimizer
    for level in (0..tree.horizon()).rev() {
        for n in tree.level_nodes(level) {
            let i = n as usize;
            let s = tree.price(n);
            let mut num = 0.0;
            let mut den = 0.0;
            for e in tree.edge_range(n) {
                let c = tree.edge_child(e) as usize;
                let ds = tree.price(c as u32) - s;
                let pw = tree.edge_prob(e) * w[c];
                num += pw * ds;
                den += pw * ds * ds;
            }
            let t = if den == 0.0 { 0.0 } else { num / den };
            psi[i] = t;
            w[i] = tree
                .edge_range(n)
                .map(|e| {
                    let c = tree.edge_child(e) as usize;
                    let ds = tree.price(c as u32) - s;
                    tree.edge_prob(e) * w[c] * (1.0 - t * ds) * (1.0 - t * ds)
                })
                .sum();
        }
    }
    // remaining constant along each path; path-dependent in general, so this
    // requires an actual tree (the accumulation rejects recombining clashes)
    let scale = tree.forward_product(
        1.0,
        |n, e| {
            let ds = tree.price(tree.edge_child(e)) - tree.price(n);
            1.0 - psi[n as usize] * ds
        },
        1e-9,
    )?;
    let phi = Predictable(
        (0..nn)
            .map(|i| scale[i] * psi[i])
            .collect(),
    );
    let doob = doob_decompose(tree);
    let probs = tree.node_probabilities();
    let mean_gain: f64 = tree
        .non_terminal_nodes()
        .map(|n| probs[n as usize] * phi.0[n as usize] * doob.delta_a[n as usize])
        .sum();
    Ok(AuxiliarySolution {
        phi_tilde: phi,
        value: w[0],
        mean_gain,
        defect: 1.0 - mean_gain,
    })
}

/// Static pre-commitment (Markowitz) strategy ϑ̃ = (1/γ)·φ̃ / E[1 − φ̃·S_T],
/// or the target-mean variant ϑ̃ = (m − x)/E[φ̃·S_T]·φ̃ when `target_mean`
/// is given.
pub fn solve_precommitment(
    tree: &EventTree,
    gamma: f64,
    x: f64,
    target_mean: Option<f64>,
) -> Result<StrategyResult> {
    check_gamma(gamma)?;
    let doob = doob_decompose(tree);
    let sc = compute_lambda(tree, &doob);
    sc.require_sc()?;
    let aux = solve_auxiliary(tree)?;
    let factor = match target_mean {
        None => {
            if aux.value.abs() < 1e-12 {
                return Err(TcmvError::DegenerateMarket(
                    "1 − φ̃·S_T vanishes identically; the static problem has no solution".into(),
                ));
            }
            if aux.defect.abs() < 1e-12 {
                return Err(TcmvError::DegenerateMarket(
                    "E[1 − φ̃·S_T] = 0; the static problem has no solution".into(),
                ));
            }
            1.0 / (gamma * aux.defect)
        }
        Some(m) => {
            if m <= x {
                return Err(TcmvError::Validation(format!(
                    "target mean {m} must exceed initial capital {x}"
                )));
            }
            if aux.mean_gain.abs() < 1e-12 {
                return Err(TcmvError::DegenerateMarket(
                    "E[φ̃·S_T] = 0; no strategy attains a mean above x".into(),
                ));
            }
            (m - x) / aux.mean_gain
        }
    };
    let theta = Predictable(aux.phi_tilde.0.iter().map(|p| p * factor).collect());
    let z = expected_gains(tree, &doob, &theta);
    let mut residuals = BTreeMap::new();
    residuals.insert("aux_value".into(), aux.value);
    residuals.insert("aux_defect".into(), aux.defect);
    residuals.insert(
        "aux_value_defect_gap".into(),
        (aux.value - aux.defect).abs(),
    );
    finish_result(
        tree,
        &doob,
        StrategyKind::Precommit,
        gamma,
        x,
        theta,
        z,
        residuals,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::{fs_of_mvt, FsMethod};
    use crate::fixtures;
    use crate::structure::compute_mvt;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lmve_symmetric_tree_is_zero() {
        let t = fixtures::one_step_symmetric();
        let r = solve_lmve_recursion(&t, 2.0, 7.0).unwrap();
        assert!(r.strategy.sup_norm(&t) == 0.0);
        assert_eq!(r.u0, 7.0);
    }

    #[test]
    fn lmve_multiplicative_closed_form() {
        // u=2, d=0.5, p=0.6, γ=1: deterministic MVT, so ϑ̂ = λ = 20/(27S)
        let t = fixtures::multiplicative_two_step();
        let r = solve_lmve_recursion(&t, 1.0, 0.0).unwrap();
        assert!((r.strategy.0[0] - 5.0 / 27.0).abs() < 1e-12);
        for n in t.non_terminal_nodes() {
            let i = n as usize;
            assert!((r.strategy.0[i] - 20.0 / (27.0 * t.price(n))).abs() < 1e-12);
        }
    }

    #[test]
    fn lmve_matches_structural_identity_on_regime_tree() {
        // ϑ̂ = (1/γ)(λ − ξ̂) with ξ̂ from the FS decomposition, and the
        // hedging demand is genuinely non-zero
        let t = fixtures::regime_tree();
        let gamma = 2.5;
        let doob = doob_decompose(&t);
        let sc = compute_lambda(&t, &doob);
        let mvt = compute_mvt(&t, &doob, &sc).unwrap();
        let fs = fs_of_mvt(&t, &doob, &sc, &mvt, FsMethod::ViaLmve).unwrap();
        let r = solve_lmve_recursion(&t, gamma, 0.0).unwrap();
        let mut differs = false;
        for n in t.non_terminal_nodes() {
            let i = n as usize;
            let rhs = (sc.lambda.0[i] - fs.xi_hat.0[i]) / gamma;
            assert!((r.strategy.0[i] - rhs).abs() < 1e-10);
            if (r.strategy.0[i] - sc.lambda.0[i] / gamma).abs() > 1e-6 {
                differs = true;
            }
        }
        assert!(differs, "LMVE should deviate from the myopic strategy");
    }

    #[test]
    fn lmve_z_invariants() {
        for t in fixtures::sc_fixture_trees() {
            let r = solve_lmve_recursion(&t, 1.3, 0.5).unwrap();
            assert!(r.residuals["z_leaf_max"] < 1e-12);
            assert!(r.residuals["z_root_gap"] < 1e-10);
        }
    }

    #[test]
    fn lmve_local_perturbations_cannot_improve() {
        // perturbing ϑ̂ at a single node (leaving the future fixed) cannot
        // raise the conditional criterion at that node
        let t = fixtures::regime_tree();
        let gamma = 1.5;
        let r = solve_lmve_recursion(&t, gamma, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in t.non_terminal_nodes() {
            let base = crate::evaluation::criterion(&t, &r.strategy, n, 0.0, gamma).unwrap();
            for _ in 0..20 {
                let mut pert = r.strategy.clone();
                pert.0[n as usize] += rng.gen_range(-0.5..0.5);
                let u = crate::evaluation::criterion(&t, &pert, n, 0.0, gamma).unwrap();
                assert!(u <= base + 1e-10);
            }
        }
    }

    #[test]
    fn lmve_time_consistent_on_subtrees() {
        // the restriction of ϑ̂ to any subtree equals re-solving on the
        // subtree, bit-exact
        let t = fixtures::regime_tree();
        let full = solve_lmve_recursion(&t, 2.0, 0.0).unwrap();
        for root in [1u32, 2, 5, 9] {
            let (sub, map) = t.subtree(root).unwrap();
            let local = solve_lmve_recursion(&sub, 2.0, 0.0).unwrap();
            for (new, &old) in map.iter().enumerate() {
                if !sub.is_terminal(new as u32) {
                    assert_eq!(local.strategy.0[new], full.strategy.0[old as usize]);
                }
            }
        }
    }

    #[test]
    fn lmve_equals_mmve_when_mvt_deterministic() {
        let t = fixtures::multiplicative(1.0, 1.4, 0.7, 0.55, 4);
        let a = solve_lmve_recursion(&t, 3.0, 0.0).unwrap();
        let b = solve_mmve(&t, 3.0, 0.0).unwrap();
        for n in t.non_terminal_nodes() {
            let i = n as usize;
            assert!((a.strategy.0[i] - b.strategy.0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn lmve_rejects_sc_violation() {
        let t = fixtures::deterministic_tree(2);
        assert!(matches!(
            solve_lmve_recursion(&t, 1.0, 0.0),
            Err(TcmvError::ScViolation { .. })
        ));
    }

    #[test]
    fn mmve_closed_forms() {
        let t = fixtures::one_step_symmetric();
        let r = solve_mmve(&t, 2.0, 0.0).unwrap();
        assert!(r.strategy.sup_norm(&t) == 0.0);

        // S=4, children {8,2}, p={0.6,0.4}, γ=2: φ̂ = (1/2)(5/27) = 5/54
        let t = fixtures::one_step_drift();
        let r = solve_mmve(&t, 2.0, 0.0).unwrap();
        assert!((r.strategy.0[0] - 5.0 / 54.0).abs() < 1e-12);
        assert!(r.residuals["one_step_foc"] < 1e-12);
    }

    #[test]
    fn mmve_scales_linearly_in_inverse_gamma() {
        let t = fixtures::regime_tree();
        let r1 = solve_mmve(&t, 1.0, 0.0).unwrap();
        let mut prev_sup = f64::INFINITY;
        for gamma in [2.0, 4.0, 8.0, 16.0] {
            let r = solve_mmve(&t, gamma, 0.0).unwrap();
            for n in t.non_terminal_nodes() {
                let i = n as usize;
                assert!((r.strategy.0[i] - r1.strategy.0[i] / gamma).abs() < 1e-12);
            }
            let sup = r.strategy.sup_norm(&t);
            assert!(sup < prev_sup);
            prev_sup = sup;
        }
    }

    #[test]
    fn auxiliary_zero_drift() {
        let t = fixtures::one_step_symmetric();
        let a = solve_auxiliary(&t).unwrap();
        assert!(a.phi_tilde.sup_norm(&t) == 0.0);
        assert_eq!(a.value, 1.0);
    }

    #[test]
    fn auxiliary_one_step_drift() {
        // ϑ̃ = E[ΔS]/E[(ΔS)²] = 1.6/11.2 = 1/7, value = 1 − 1.6²/11.2
        let t = fixtures::one_step_drift();
        let a = solve_auxiliary(&t).unwrap();
        assert!((a.phi_tilde.0[0] - 1.0 / 7.0).abs() < 1e-12);
        assert!((a.value - (1.0 - 1.6 * 1.6 / 11.2)).abs() < 1e-12);
        // first-order condition makes value and defect coincide
        assert!((a.value - a.defect).abs() < 1e-12);
    }

    #[test]
    fn auxiliary_value_in_unit_interval_and_equals_defect() {
        for t in fixtures::sc_fixture_trees() {
            if t.is_recombining() {
                continue; // the realized φ̃ is path-dependent
            }
            let a = solve_auxiliary(&t).unwrap();
            assert!(a.value >= 0.0 && a.value <= 1.0 + 1e-15);
            assert!((a.value - a.defect).abs() < 1e-10);
        }
    }

    #[test]
    fn auxiliary_beats_random_strategies() {
        let t = fixtures::regime_tree();
        let a = solve_auxiliary(&t).unwrap();
        let probs = t.node_probabilities();
        let cost = |theta: &Predictable| -> f64 {
            let gains = t
                .forward_accumulate(
                    0.0,
                    |n, e| theta.0[n as usize] * (t.price(t.edge_child(e)) - t.price(n)),
                    1e-9,
                )
                .unwrap();
            t.leaves()
                .map(|n| {
                    let r = 1.0 - gains[n as usize];
                    probs[n as usize] * r * r
                })
                .sum()
        };
        assert!((cost(&a.phi_tilde) - a.value).abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut theta = a.phi_tilde.clone();
            for n in t.non_terminal_nodes() {
                theta.0[n as usize] += rng.gen_range(-0.2..0.2);
            }
            assert!(a.value <= cost(&theta) + 1e-12);
        }
    }

    #[test]
    fn precommit_zero_drift_is_zero() {
        let t = fixtures::one_step_symmetric();
        let r = solve_precommitment(&t, 1.0, 0.0, None).unwrap();
        assert!(r.strategy.sup_norm(&t) == 0.0);
    }

    #[test]
    fn precommit_one_period_matches_markowitz_formula() {
        // one period all three notions coincide: ϑ̃ = (1/γ)·ΔA/Var[ΔS]
        let t = fixtures::one_step_drift();
        let r = solve_precommitment(&t, 1.0, 0.0, None).unwrap();
        assert!((r.strategy.0[0] - 5.0 / 27.0).abs() < 1e-12);
    }

    #[test]
    fn precommit_target_mean_is_attained() {
        let t = fixtures::regime_tree();
        let (x, m) = (1.0, 1.4);
        let r = solve_precommitment(&t, 1.0, x, Some(m)).unwrap();
        let doob = doob_decompose(&t);
        let probs = t.node_probabilities();
        let mean_gain: f64 = t
            .non_terminal_nodes()
            .map(|n| probs[n as usize] * r.strategy.0[n as usize] * doob.delta_a[n as usize])
            .sum();
        assert!((x + mean_gain - m).abs() < 1e-10);
    }

    #[test]
    fn precommit_target_mean_validation() {
        let t = fixtures::regime_tree();
        assert!(matches!(
            solve_precommitment(&t, 1.0, 1.0, Some(0.5)),
            Err(TcmvError::Validation(_))
        ));
        // no drift anywhere: no strategy attains a mean above x
        let t = fixtures::one_step_symmetric();
        assert!(matches!(
            solve_precommitment(&t, 1.0, 0.0, Some(1.0)),
            Err(TcmvError::DegenerateMarket(_))
        ));
    }

    #[test]
    fn precommit_dominates_at_time_zero() {
        // ϑ̃ is the global maximizer of the unconditional criterion
        for t in [fixtures::regime_tree(), fixtures::multiplicative_two_step()] {
            let (gamma, x) = (2.0, 0.3);
            let pre = solve_precommitment(&t, gamma, x, None).unwrap();
            let lmve = solve_lmve_recursion(&t, gamma, x).unwrap();
            let mmve = solve_mmve(&t, gamma, x).unwrap();
            assert!(pre.u0 >= lmve.u0 - 1e-12);
            assert!(pre.u0 >= mmve.u0 - 1e-12);
        }
    }

    #[test]
    fn precommit_is_time_inconsistent_on_regime_tree() {
        // re-optimizing from an interior node yields a different strategy
        let t = fixtures::regime_tree();
        let full = solve_precommitment(&t, 1.0, 0.0, None).unwrap();
        let mut any_differs = false;
        for root in 1u32..5 {
            let (sub, map) = t.subtree(root).unwrap();
            let local = solve_precommitment(&sub, 1.0, 0.0, None).unwrap();
            for (new, &old) in map.iter().enumerate() {
                if !sub.is_terminal(new as u32)
                    && (local.strategy.0[new] - full.strategy.0[old as usize]).abs() > 1e-6
                {
                    any_differs = true;
                }
            }
        }
        assert!(any_differs, "pre-commitment should fail Bellman's principle");
    }

    #[test]
    fn total_variance_recursion() {
        // U_t(ϑ) = E[U_{t+1}(ϑ)|F_t] − γ/2·Var[E[V_T|F_{t+1}]|F_t] for an
        // arbitrary strategy, at every node
        let t = fixtures::regime_tree();
        let (gamma, x) = (1.7, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let theta = Predictable(
            (0..t.num_nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let rep = crate::evaluation::criterion_all(&t, &theta, x, gamma).unwrap();
        for n in t.non_terminal_nodes() {
            let i = n as usize;
            let mut eu = 0.0;
            let mut m = 0.0;
            let mut m2 = 0.0;
            for (c, p) in t.children(n) {
                let ci = c as usize;
                eu += p * rep.u.0[ci];
                m += p * rep.mean_terminal.0[ci];
                m2 += p * rep.mean_terminal.0[ci] * rep.mean_terminal.0[ci];
            }
            let rhs = eu - gamma / 2.0 * (m2 - m * m);
            assert!((rep.u.0[i] - rhs).abs() < 1e-10);
        }
    }
}
