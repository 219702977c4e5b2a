//! Structure condition, λ, and the mean-variance tradeoff process K.

use crate::error::{Result, TcmvError};
use crate::tree::{Adapted, DoobDecomposition, EventTree, NodeId, Predictable};

/// Structure-condition report: λ plus the diagnostics of where it fails.
///
/// On a zero-variance node λ uses the 0/0 = 0 convention; the condition is
/// violated there only if the conditional mean is non-zero, in which case the
/// mean is recorded in `residual_eta`.
#[derive(Debug, Clone)]
pub struct ScReport {
    pub lambda: Predictable,
    pub sc_holds: bool,
    pub violating_nodes: Vec<NodeId>,
    /// Conditional mean on zero-variance nodes, 0 elsewhere.
    pub residual_eta: Predictable,
}

impl ScReport {
    pub fn require_sc(&self) -> Result<()> {
        if self.sc_holds {
            Ok(())
        } else {
            Err(TcmvError::ScViolation {
                nodes: self.violating_nodes.clone(),
            })
        }
    }
}

/// Mean-variance tradeoff report.
#[derive(Debug, Clone)]
pub struct MvtReport {
    /// ΔK_k = λ_k·ΔA_k ≥ 0, per non-terminal node.
    pub delta_k: Predictable,
    /// Running sum of ΔK along paths, per node.
    pub k: Adapted,
    /// K_T, one value per leaf (in leaf id order).
    pub k_t_per_leaf: Vec<f64>,
    /// sup over nodes of ΔK.
    pub max_jump: f64,
    /// max over nodes of E[K_T − K_k | node].
    pub bmo_like_bound: f64,
}

/// λ_k = ΔA_k / E[(ΔM_k)² | F_{k-1}] with 0/0 = 0.
pub fn compute_lambda(tree: &EventTree, doob: &DoobDecomposition) -> ScReport {
    let nn = tree.num_nodes();
    let mut lambda = vec![0.0; nn];
    let mut eta = vec![0.0; nn];
    let mut violating = Vec::new();
    for n in tree.non_terminal_nodes() {
        let i = n as usize;
        let cv = doob.cond_var[i];
        let da = doob.delta_a[i];
        if cv == 0.0 {
            if da != 0.0 {
                violating.push(n);
                eta[i] = da;
            }
            // 0/0 = 0 convention
        } else {
            lambda[i] = da / cv;
        }
    }
    ScReport {
        lambda: Predictable(lambda),
        sc_holds: violating.is_empty(),
        violating_nodes: violating,
        residual_eta: Predictable(eta),
    }
}

/// K_k = Σ_{i≤k} λ_i ΔA_i and its jump/bmo diagnostics.
///
/// Errors with `ScViolation` when the structure condition fails.
pub fn compute_mvt(tree: &EventTree, doob: &DoobDecomposition, sc: &ScReport) -> Result<MvtReport> {
    sc.require_sc()?;
    let nn = tree.num_nodes();
    let mut delta_k = vec![0.0; nn];
    let mut max_jump = 0.0_f64;
    for n in tree.non_terminal_nodes() {
        let i = n as usize;
        let dk = sc.lambda.0[i] * doob.delta_a[i];
        delta_k[i] = dk;
        max_jump = max_jump.max(dk);
    }
    // K is a path sum; on recombining lattices this is well defined exactly
    // when ΔK is Markov in the node, which the accumulation checks.
    let k = tree.forward_accumulate(0.0, |n, _| delta_k[n as usize], 1e-9)?;
    let k_t_per_leaf: Vec<f64> = tree.leaves().map(|n| k[n as usize]).collect();
    // E[K_T | node] by backward recursion, then the bmo-style bound
    let e_kt = tree.backward_expectation(&k_t_per_leaf);
    let bmo_like_bound = (0..nn)
        .map(|i| e_kt[i] - k[i])
        .fold(0.0_f64, f64::max);
    Ok(MvtReport {
        delta_k: Predictable(delta_k),
        k: Adapted(k),
        k_t_per_leaf,
        max_jump,
        bmo_like_bound,
    })
}
