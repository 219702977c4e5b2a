//! Finite event-tree markets.
//!
//! An [`EventTree`] is a levelled DAG: one riskless asset with price 1 and a
//! single risky asset with one price per node. Non-recombining trees are
//! proper trees (every non-root node has exactly one parent); recombining
//! binomial lattices share nodes across paths, which is exact for all
//! quantities that are Markov in (level, price).
//!
//! Nodes are numbered level by level, root = 0. Edges are stored in CSR form
//! with a fixed child order, so per-node sums are deterministic regardless of
//! worker count.

use crate::error::{Result, TcmvError};

pub type NodeId = u32;

/// Simplex / exactness tolerance for tree validation.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct EventTree {
    /// `level_offsets[k]..level_offsets[k+1]` are the node ids of level k.
    level_offsets: Vec<u32>,
    prices: Vec<f64>,
    child_offsets: Vec<u32>,
    child_ids: Vec<NodeId>,
    child_probs: Vec<f64>,
    recombining: bool,
}

impl EventTree {
    pub fn horizon(&self) -> usize {
        self.level_offsets.len() - 2
    }

    pub fn num_nodes(&self) -> usize {
        self.prices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.child_ids.len()
    }

    pub fn is_recombining(&self) -> bool {
        self.recombining
    }

    pub fn price(&self, node: NodeId) -> f64 {
        self.prices[node as usize]
    }

    pub fn level_nodes(&self, level: usize) -> std::ops::Range<u32> {
        self.level_offsets[level]..self.level_offsets[level + 1]
    }

    pub fn level_of(&self, node: NodeId) -> usize {
        // levels are short; binary search on offsets
        match self.level_offsets.binary_search(&node) {
            Ok(mut k) => {
                // offsets can repeat only if a level were empty, which validate() forbids
                while k + 1 < self.level_offsets.len() && self.level_offsets[k + 1] == node {
                    k += 1;
                }
                k.min(self.horizon() + 1)
            }
            Err(k) => k - 1,
        }
    }

    pub fn is_terminal(&self, node: NodeId) -> bool {
        let n = node as usize;
        self.child_offsets[n] == self.child_offsets[n + 1]
    }

    /// Children of `node` with branch probabilities, in fixed stored order.
    pub fn children(&self, node: NodeId) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        let n = node as usize;
        let r = self.child_offsets[n] as usize..self.child_offsets[n + 1] as usize;
        self.child_ids[r.clone()]
            .iter()
            .copied()
            .zip(self.child_probs[r].iter().copied())
    }

    /// Edge indices (into per-edge arrays) out of `node`.
    pub fn edge_range(&self, node: NodeId) -> std::ops::Range<usize> {
        let n = node as usize;
        self.child_offsets[n] as usize..self.child_offsets[n + 1] as usize
    }

    pub fn edge_child(&self, edge: usize) -> NodeId {
        self.child_ids[edge]
    }

    pub fn edge_prob(&self, edge: usize) -> f64 {
        self.child_probs[edge]
    }

    pub fn leaves(&self) -> std::ops::Range<u32> {
        self.level_nodes(self.horizon())
    }

    /// Node ids of all non-terminal nodes (levels 0..T-1 plus any interior
    /// terminal-free nodes; on a well-formed tree this is levels 0..T).
    pub fn non_terminal_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.num_nodes() as u32).filter(|&n| !self.is_terminal(n))
    }

    /// Unconditional probability of reaching each node.
    pub fn node_probabilities(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.num_nodes()];
        p[0] = 1.0;
        for n in 0..self.num_nodes() as u32 {
            let pn = p[n as usize];
            for (c, q) in self.children(n) {
                p[c as usize] += pn * q;
            }
        }
        p
    }

    /// Conditional expectation of a terminal payoff, one value per node.
    ///
    /// `terminal[i]` is the payoff at the i-th leaf (in leaf id order).
    pub fn backward_expectation(&self, terminal: &[f64]) -> Vec<f64> {
        assert_eq!(terminal.len(), self.leaves().len());
        let mut v = vec![0.0; self.num_nodes()];
        let first_leaf = self.leaves().start as usize;
        for (i, &h) in terminal.iter().enumerate() {
            v[first_leaf + i] = h;
        }
        for n in (0..self.level_offsets[self.horizon()]).rev() {
            if self.is_terminal(n) {
                continue;
            }
            v[n as usize] = self.children(n).map(|(c, q)| q * v[c as usize]).sum();
        }
        v
    }

    /// Forward accumulation of per-edge increments along paths:
    /// `out[root] = init`, `out[child] = out[parent] + delta(parent, edge)`.
    ///
    /// On a recombining tree a node can be reached along several paths; the
    /// accumulated value must then agree across parents within `tol`
    /// (relative to scale), otherwise the process is path-dependent and an
    /// invariant-breach error is returned.
    pub fn forward_accumulate<F>(&self, init: f64, mut delta: F, tol: f64) -> Result<Vec<f64>>
    where
        F: FnMut(NodeId, usize) -> f64,
    {
        let mut out = vec![f64::NAN; self.num_nodes()];
        out[0] = init;
        for n in 0..self.num_nodes() as u32 {
            let base = out[n as usize];
            if base.is_nan() {
                return Err(TcmvError::Validation(format!("unreachable node {n}")));
            }
            for e in self.edge_range(n) {
                let c = self.child_ids[e] as usize;
                let val = base + delta(n, e);
                if out[c].is_nan() {
                    out[c] = val;
                } else {
                    let scale = 1.0_f64.max(out[c].abs());
                    if (out[c] - val).abs() > tol * scale {
                        return Err(TcmvError::InvariantBreach(format!(
                            "path-dependent accumulation at node {c}: {} vs {val}",
                            out[c]
                        )));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Multiplicative analogue of [`forward_accumulate`].
    pub fn forward_product<F>(&self, init: f64, mut factor: F, tol: f64) -> Result<Vec<f64>>
    where
        F: FnMut(NodeId, usize) -> f64,
    {
        let mut out = vec![f64::NAN; self.num_nodes()];
        out[0] = init;
        for n in 0..self.num_nodes() as u32 {
            let base = out[n as usize];
            for e in self.edge_range(n) {
                let c = self.child_ids[e] as usize;
                let val = base * factor(n, e);
                if out[c].is_nan() {
                    out[c] = val;
                } else {
                    let scale = 1.0_f64.max(out[c].abs());
                    if (out[c] - val).abs() > tol * scale {
                        return Err(TcmvError::InvariantBreach(format!(
                            "path-dependent product at node {c}: {} vs {val}",
                            out[c]
                        )));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Parent list per node. Only cheap on small trees; a non-recombining
    /// tree has exactly one parent per non-root node.
    pub fn parents(&self) -> Vec<Vec<NodeId>> {
        let mut ps = vec![Vec::new(); self.num_nodes()];
        for n in 0..self.num_nodes() as u32 {
            for (c, _) in self.children(n) {
                ps[c as usize].push(n);
            }
        }
        ps
    }

    /// Extract the subtree rooted at `node` as a standalone tree, together
    /// with the map from new node ids to old ones. Requires a
    /// non-recombining tree.
    pub fn subtree(&self, node: NodeId) -> Result<(EventTree, Vec<NodeId>)> {
        if self.recombining {
            return Err(TcmvError::Validation(
                "subtree extraction requires a non-recombining tree".into(),
            ));
        }
        // BFS level by level starting from `node`
        let mut levels: Vec<Vec<NodeId>> = vec![vec![node]];
        loop {
            let last = levels.last().unwrap();
            let next: Vec<NodeId> = last
                .iter()
                .flat_map(|&n| self.children(n).map(|(c, _)| c))
                .collect();
            if next.is_empty() {
                break;
            }
            levels.push(next);
        }
        let order: Vec<NodeId> = levels.iter().flatten().copied().collect();
        let mut new_id = vec![u32::MAX; self.num_nodes()];
        for (i, &old) in order.iter().enumerate() {
            new_id[old as usize] = i as u32;
        }
        let mut b = TreeBuilder::new();
        for lvl in &levels {
            b.start_level();
            for &old in lvl {
                let children: Vec<(NodeId, f64)> = self
                    .children(old)
                    .map(|(c, q)| (new_id[c as usize], q))
                    .collect();
                b.push_node(self.price(old), &children);
            }
        }
        Ok((b.finish(false)?, order))
    }

    /// Structural validation: branch probability simplexes, parent counts,
    /// level consistency, finite prices.
    pub fn validate(&self) -> Result<()> {
        if self.level_offsets.len() < 2 || self.level_nodes(0).len() != 1 {
            return Err(TcmvError::Validation("tree must have a single root".into()));
        }
        for k in 0..=self.horizon() {
            if self.level_nodes(k).is_empty() {
                return Err(TcmvError::Validation(format!("level {k} is empty")));
            }
        }
        for n in 0..self.num_nodes() as u32 {
            let price = self.price(n);
            if !price.is_finite() {
                return Err(TcmvError::Validation(format!(
                    "non-finite price at node {n}"
                )));
            }
            let level = self.level_of(n);
            if self.is_terminal(n) {
                if level != self.horizon() {
                    return Err(TcmvError::Validation(format!(
                        "interior node {n} at level {level} has no children"
                    )));
                }
                continue;
            }
            if level == self.horizon() {
                return Err(TcmvError::Validation(format!(
                    "terminal-level node {n} has children"
                )));
            }
            let mut sum = 0.0;
            for (c, q) in self.children(n) {
                if !(q >= 0.0) {
                    return Err(TcmvError::Validation(format!(
                        "negative branch probability {q} at node {n}"
                    )));
                }
                if self.level_of(c) != level + 1 {
                    return Err(TcmvError::Validation(format!(
                        "edge {n}->{c} skips a level"
                    )));
                }
                sum += q;
            }
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(TcmvError::Validation(format!(
                    "probabilities sum \u{2260} 1 at node {n}: {sum}"
                )));
            }
        }
        // parent multiplicity
        let mut n_parents = vec![0u32; self.num_nodes()];
        for n in 0..self.num_nodes() as u32 {
            for (c, _) in self.children(n) {
                n_parents[c as usize] += 1;
            }
        }
        for (i, &np) in n_parents.iter().enumerate() {
            if i == 0 {
                if np != 0 {
                    return Err(TcmvError::Validation("root has a parent".into()));
                }
            } else if np == 0 {
                return Err(TcmvError::Validation(format!("orphan node {i}")));
            } else if np > 1 && !self.recombining {
                return Err(TcmvError::Validation(format!(
                    "node {i} has {np} parents in a non-recombining tree"
                )));
            }
        }
        Ok(())
    }
}

/// Incremental level-by-level constructor for [`EventTree`].
pub struct TreeBuilder {
    level_offsets: Vec<u32>,
    prices: Vec<f64>,
    child_offsets: Vec<u32>,
    child_ids: Vec<NodeId>,
    child_probs: Vec<f64>,
}

impl TreeBuilder {
    pub fn new() -> Self {
        TreeBuilder {
            level_offsets: vec![0],
            prices: Vec::new(),
            child_offsets: vec![0],
            child_ids: Vec::new(),
            child_probs: Vec::new(),
        }
    }

    pub fn start_level(&mut self) {
        let n = self.prices.len() as u32;
        if self.level_offsets.last() != Some(&n) {
            self.level_offsets.push(n);
        } else if self.prices.is_empty() && self.level_offsets.len() == 1 {
            // first level, offset 0 already present
        }
    }

    /// Append a node to the current level. `children` are ids in the *next*
    /// level, which may not exist yet; ids are global.
    pub fn push_node(&mut self, price: f64, children: &[(NodeId, f64)]) -> NodeId {
        let id = self.prices.len() as NodeId;
        self.prices.push(price);
        for &(c, q) in children {
            self.child_ids.push(c);
            self.child_probs.push(q);
        }
        self.child_offsets.push(self.child_ids.len() as u32);
        id
    }

    pub fn next_id(&self) -> NodeId {
        self.prices.len() as NodeId
    }

    pub fn finish(mut self, recombining: bool) -> Result<EventTree> {
        let n = self.prices.len() as u32;
        if self.level_offsets.last() != Some(&n) {
            self.level_offsets.push(n);
        }
        let tree = EventTree {
            level_offsets: self.level_offsets,
            prices: self.prices,
            child_offsets: self.child_offsets,
            child_ids: self.child_ids,
            child_probs: self.child_probs,
            recombining,
        };
        tree.validate()?;
        Ok(tree)
    }
}

impl Default for TreeBuilder {
    fn default() -> Self {
        Self::new()
    }
}

/// One-step Doob decomposition of the price process:
/// `delta_a[n] = E[ΔS | node n]` on non-terminal nodes and
/// `delta_m[e] = ΔS(edge e) − delta_a[parent]` per edge.
#[derive(Debug, Clone)]
pub struct DoobDecomposition {
    /// Conditional mean of the price increment, indexed by node id
    /// (zero on terminal nodes, where no step follows).
    pub delta_a: Vec<f64>,
    /// Martingale increment per edge, aligned with the tree's edge arrays.
    pub delta_m: Vec<f64>,
    /// One-step conditional variance `E[(ΔM)² | node]`, indexed by node id.
    pub cond_var: Vec<f64>,
}

/// Computes `ΔA_k = E[ΔS_k | F_{k-1}]` and `ΔM_k = ΔS_k − ΔA_k` node by node.
pub fn doob_decompose(tree: &EventTree) -> DoobDecomposition {
    let nn = tree.num_nodes();
    let mut delta_a = vec![0.0; nn];
    let mut delta_m = vec![0.0; tree.num_edges()];
    let mut cond_var = vec![0.0; nn];
    for n in 0..nn as u32 {
        if tree.is_terminal(n) {
            continue;
        }
        let s = tree.price(n);
        let mut da = 0.0;
        for e in tree.edge_range(n) {
            da += tree.edge_prob(e) * (tree.price(tree.edge_child(e)) - s);
        }
        delta_a[n as usize] = da;
        let mut cv = 0.0;
        for e in tree.edge_range(n) {
            let dm = tree.price(tree.edge_child(e)) - s - da;
            delta_m[e] = dm;
            cv += tree.edge_prob(e) * dm * dm;
        }
        cond_var[n as usize] = cv;
    }
    DoobDecomposition {
        delta_a,
        delta_m,
        cond_var,
    }
}

/// A process with one value per non-terminal node; the value at a node on
/// level k−1 is the process value on the step (k−1, k]. Houses strategies,
/// λ, ΔK and decomposition integrands.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictable(pub Vec<f64>);

/// A process with one value per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapted(pub Vec<f64>);

impl Predictable {
    pub fn zeros(tree: &EventTree) -> Self {
        Predictable(vec![0.0; tree.num_nodes()])
    }

    pub fn check_tree(&self, tree: &EventTree) -> Result<()> {
        if self.0.len() != tree.num_nodes() {
            return Err(TcmvError::Validation(format!(
                "process length {} does not match tree with {} nodes",
                self.0.len(),
                tree.num_nodes()
            )));
        }
        Ok(())
    }

    /// Max absolute value over non-terminal nodes.
    pub fn sup_norm(&self, tree: &EventTree) -> f64 {
        tree.non_terminal_nodes()
            .map(|n| self.0[n as usize].abs())
            .fold(0.0, f64::max)
    }
}

impl Adapted {
    pub fn zeros(tree: &EventTree) -> Self {
        Adapted(vec![0.0; tree.num_nodes()])
    }
}
