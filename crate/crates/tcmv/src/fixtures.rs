//! Built-in fixture trees used by the self-test suite and the test corpus.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::tree::{EventTree, NodeId, TreeBuilder};

/// One step, S0 = 1, children {2, 0} with p = {0.5, 0.5}. Zero drift.
pub fn one_step_symmetric() -> EventTree {
    explicit(&[
        vec![(1.0, vec![(1, 0.5), (2, 0.5)])],
        vec![(2.0, vec![]), (0.0, vec![])],
    ])
}

/// One step, S0 = 4, children {8, 2} with p = {0.6, 0.4}.
pub fn one_step_drift() -> EventTree {
    explicit(&[
        vec![(4.0, vec![(1, 0.6), (2, 0.4)])],
        vec![(8.0, vec![]), (2.0, vec![])],
    ])
}

/// Two-step multiplicative tree S0 = 4, u = 2, d = 0.5, p_up = 0.6, stored
/// non-recombining (7 nodes). Deterministic mean-variance tradeoff.
pub fn multiplicative_two_step() -> EventTree {
    multiplicative(4.0, 2.0, 0.5, 0.6, 2)
}

/// Non-recombining multiplicative i.i.d. tree.
pub fn multiplicative(s0: f64, u: f64, d: f64, p_up: f64, steps: usize) -> EventTree {
    let mut b = TreeBuilder::new();
    let mut level: Vec<f64> = vec![s0];
    for k in 0..=steps {
        b.start_level();
        let mut next = Vec::with_capacity(level.len() * 2);
        let mut child = b.next_id() + level.len() as NodeId;
        for &s in &level {
            if k == steps {
                b.push_node(s, &[]);
            } else {
                b.push_node(s, &[(child, p_up), (child + 1, 1.0 - p_up)]);
                next.push(s * u);
                next.push(s * d);
                child += 2;
            }
        }
        level = next;
    }
    b.finish(false).expect("valid multiplicative tree")
}

/// Recombining multiplicative lattice: level k has k+1 nodes, prices
/// s0·u^j·d^(k−j) with node j having children j+1 (up, p_up) and j (down).
pub fn binomial_lattice(s0: f64, u: f64, d: f64, p_up: f64, steps: usize) -> EventTree {
    let mut b = TreeBuilder::new();
    let mut level_start: NodeId = 0;
    for k in 0..=steps {
        b.start_level();
        let next_start = level_start + (k as NodeId + 1);
        for j in 0..=k {
            let price = s0 * u.powi(j as i32) * d.powi((k - j) as i32);
            if k == steps {
                b.push_node(price, &[]);
            } else {
                let down = next_start + j as NodeId;
                b.push_node(price, &[(down + 1, p_up), (down, 1.0 - p_up)]);
            }
        }
        level_start = next_start;
    }
    b.finish(true).expect("valid binomial lattice")
}

/// Deterministic tree: a single child at every node, ΔS = 1 per step.
/// Violates the structure condition at every level.
pub fn deterministic_tree(steps: usize) -> EventTree {
    let mut b = TreeBuilder::new();
    for k in 0..=steps {
        b.start_level();
        let children = if k == steps {
            vec![]
        } else {
            vec![(k as NodeId + 1, 1.0)]
        };
        b.push_node(1.0 + k as f64, &children);
    }
    b.finish(false).expect("valid deterministic tree")
}

/// Three-step two-regime tree with regime-dependent drift, stored
/// non-recombining. K_T differs across leaves, so the intertemporal hedging
/// demand is non-zero; used wherever a genuinely stochastic investment
/// opportunity set is needed.
pub fn regime_tree() -> EventTree {
    // regime 0: strong drift (p_up = 0.7), regime 1: weak (p_up = 0.45);
    // down moves trigger regime switches far more often than up moves, so
    // price moves are correlated with the future opportunity set and the
    // intertemporal hedging demand is genuinely non-zero.
    regime_switching(1.0, 1.3, 0.8, &[0.7, 0.45], (0.1, 0.6), 3)
}

/// Non-recombining regime-switching multiplicative tree. Each node carries a
/// hidden regime index determining p_up; the regime flips with probability
/// `switch_prob.0` after an up move and `switch_prob.1` after a down move.
/// Branching factor 4 (price move × regime move).
pub fn regime_switching(
    s0: f64,
    u: f64,
    d: f64,
    p_up_by_regime: &[f64],
    switch_prob: (f64, f64),
    steps: usize,
) -> EventTree {
    assert_eq!(p_up_by_regime.len(), 2, "two regimes supported");
    let mut b = TreeBuilder::new();
    // state per node: (price, regime)
    let mut level: Vec<(f64, usize)> = vec![(s0, 0)];
    for k in 0..=steps {
        b.start_level();
        let mut next = Vec::with_capacity(level.len() * 4);
        let mut child = b.next_id() + level.len() as NodeId;
        for &(s, r) in &level {
            if k == steps {
                b.push_node(s, &[]);
            } else {
                let pu = p_up_by_regime[r];
                let (sw_up, sw_down) = switch_prob;
                // order: (up, stay), (up, switch), (down, stay), (down, switch)
                let children = [
                    (child, pu * (1.0 - sw_up)),
                    (child + 1, pu * sw_up),
                    (child + 2, (1.0 - pu) * (1.0 - sw_down)),
                    (child + 3, (1.0 - pu) * sw_down),
                ];
                b.push_node(s, &children);
                next.push((s * u, r));
                next.push((s * u, 1 - r));
                next.push((s * d, r));
                next.push((s * d, 1 - r));
                child += 4;
            }
        }
        level = next;
    }
    b.finish(false).expect("valid regime tree")
}

/// One-step tree whose minimal-martingale-measure density changes sign:
/// large drift with small variance makes λ·ΔM > 1 on the up edge.
pub fn signed_mmm_tree() -> EventTree {
    explicit(&[
        vec![(1.0, vec![(1, 0.5), (2, 0.5)])],
        vec![(2.1, vec![]), (1.9, vec![])],
    ])
}

/// All small fixture trees with the structure condition holding.
pub fn sc_fixture_trees() -> Vec<EventTree> {
    vec![
        one_step_symmetric(),
        one_step_drift(),
        multiplicative_two_step(),
        multiplicative(1.0, 1.2, 0.9, 0.55, 4),
        binomial_lattice(4.0, 2.0, 0.5, 0.6, 3),
        regime_tree(),
        regime_switching(2.0, 1.25, 0.85, &[0.65, 0.4], (0.2, 0.45), 4),
        signed_mmm_tree(),
    ]
}

/// Everything in [`sc_fixture_trees`] plus the SC-violating deterministic tree.
pub fn all_fixture_trees() -> Vec<EventTree> {
    let mut v = sc_fixture_trees();
    v.push(deterministic_tree(3));
    v
}

/// Seeded random non-recombining tree: at most `max_levels` levels and
/// `max_branch` branches per node, positive prices, at least two distinct
/// child prices per node so the structure condition holds.
pub fn random_tree(seed: u64, max_levels: usize, max_branch: usize) -> EventTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = rng.gen_range(1..=max_levels);
    let mut b = TreeBuilder::new();
    let mut level: Vec<f64> = vec![rng.gen_range(0.5..4.0)];
    for k in 0..=levels {
        b.start_level();
        let mut next = Vec::new();
        let mut child = b.next_id() + level.len() as NodeId;
        for &s in &level {
            if k == levels {
                b.push_node(s, &[]);
            } else {
                let nb = rng.gen_range(2..=max_branch.max(2));
                // random point on the probability simplex
                let mut w: Vec<f64> = (0..nb).map(|_| -f64::ln(rng.gen_range(1e-3..1.0))).collect();
                let tot: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= tot);
                let mut children = Vec::with_capacity(nb);
                for (i, &q) in w.iter().enumerate() {
                    // distinct multiplicative moves keep one-step variance positive
                    let factor = 0.6 + 0.9 * (i as f64 + rng.gen_range(0.05..0.95)) / nb as f64;
                    children.push((child + i as NodeId, q));
                    next.push(s * factor);
                }
                b.push_node(s, &children);
                child += nb as NodeId;
            }
        }
        level = next;
    }
    b.finish(false).expect("valid random tree")
}

fn explicit(levels: &[Vec<(f64, Vec<(NodeId, f64)>)>]) -> EventTree {
    let mut b = TreeBuilder::new();
    for level in levels {
        b.start_level();
        for (price, children) in level {
            b.push_node(*price, children);
        }
    }
    b.finish(false).expect("valid explicit fixture")
}
