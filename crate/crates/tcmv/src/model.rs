//! Continuous-time model specifications and their lattice discretizations.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TcmvError};
use crate::tree::{EventTree, NodeId, TreeBuilder};

/// A continuous-time market to be discretized onto a recombining lattice.
///
/// Regime transition probabilities are per unit of time; each lattice step
/// uses the linearized transition I + (P − I)·Δt.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum ContinuousModelSpec {
    #[serde(rename = "geometric-brownian")]
    GeometricBrownian {
        mu: f64,
        sigma: f64,
        s0: f64,
        t_real: f64,
    },
    #[serde(rename = "regime-switching-drift")]
    RegimeSwitchingDrift {
        /// Drift per regime.
        mus: Vec<f64>,
        sigma: f64,
        s0: f64,
        t_real: f64,
        /// Row-stochastic regime transition matrix per unit time.
        transition: Vec<Vec<f64>>,
        initial_regime: usize,
    },
}

impl ContinuousModelSpec {
    pub fn validate(&self) -> Result<()> {
        let (sigma, s0, t_real) = match self {
            ContinuousModelSpec::GeometricBrownian {
                sigma, s0, t_real, ..
            } => (*sigma, *s0, *t_real),
            ContinuousModelSpec::RegimeSwitchingDrift {
                mus,
                sigma,
                s0,
                t_real,
                transition,
                initial_regime,
            } => {
                if mus.is_empty() {
                    return Err(TcmvError::Validation("at least one regime required".into()));
                }
                if transition.len() != mus.len() {
                    return Err(TcmvError::Validation(
                        "transition matrix size must match the number of regimes".into(),
                    ));
                }
                for (r, row) in transition.iter().enumerate() {
                    if row.len() != mus.len() {
                        return Err(TcmvError::Validation(format!(
                            "transition row {r} has wrong length"
                        )));
                    }
                    if row.iter().any(|&p| p < 0.0) {
                        return Err(TcmvError::Validation(format!(
                            "negative transition probability in row {r}"
                        )));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-12 {
                        return Err(TcmvError::Validation(format!(
                            "transition row {r} sums to {sum}, not 1"
                        )));
                    }
                }
                if *initial_regime >= mus.len() {
                    return Err(TcmvError::Validation(format!(
                        "initial regime {initial_regime} out of range"
                    )));
                }
                (*sigma, *s0, *t_real)
            }
        };
        if !(sigma > 0.0) {
            return Err(TcmvError::Validation(format!("sigma must be > 0, got {sigma}")));
        }
        if !(s0 > 0.0) {
            return Err(TcmvError::Validation(format!("s0 must be > 0, got {s0}")));
        }
        if !(t_real > 0.0) {
            return Err(TcmvError::Validation(format!(
                "t_real must be > 0, got {t_real}"
            )));
        }
        Ok(())
    }

    /// Drift at a node, given its regime (ignored for geometric Brownian).
    pub fn drift(&self, regime: usize) -> f64 {
        match self {
            ContinuousModelSpec::GeometricBrownian { mu, .. } => *mu,
            ContinuousModelSpec::RegimeSwitchingDrift { mus, .. } => mus[regime],
        }
    }
}

pub(crate) fn up_probability(mu: f64, sigma: f64, dt: f64) -> Result<f64> {
    let u = (sigma * dt.sqrt()).exp();
    let d = 1.0 / u;
    let p = ((mu * dt).exp() - d) / (u - d);
    // tolerate roundoff at the boundary, reject genuine violations
    if p <= -1e-12 || p >= 1.0 + 1e-12 {
        return Err(TcmvError::Validation(format!(
            "time step too coarse for drift: p = {p} outside (0, 1)"
        )));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(TcmvError::Validation(format!(
            "time step too coarse for drift: p = {p} outside (0, 1)"
        )));
    }
    Ok(p.clamp(1e-15, 1.0 - 1e-15))
}

/// Recombining binomial lattice with u = exp(σ√Δt), d = 1/u and the branch
/// probability matching the one-step conditional mean exp(μΔt).
pub fn build_binomial(spec: &ContinuousModelSpec, n_steps: usize) -> Result<EventTree> {
    spec.validate()?;
    let (mu, sigma, s0, t_real) = match spec {
        ContinuousModelSpec::GeometricBrownian {
            mu,
            sigma,
            s0,
            t_real,
        } => (*mu, *sigma, *s0, *t_real),
        _ => {
            return Err(TcmvError::UnsupportedSpec(
                "build_binomial requires a geometric-brownian spec".into(),
            ))
        }
    };
    if n_steps < 1 {
        return Err(TcmvError::Validation("n_steps must be ≥ 1".into()));
    }
    let dt = t_real / n_steps as f64;
    let p_up = up_probability(mu, sigma, dt)?;
    let u = (sigma * dt.sqrt()).exp();
    let d = 1.0 / u;
    let mut b = TreeBuilder::new();
    let mut level_start: NodeId = 0;
    for k in 0..=n_steps {
        b.start_level();
        let next_start = level_start + (k as NodeId + 1);
        for j in 0..=k {
            let price = s0 * u.powi(j as i32) * d.powi((k - j) as i32);
            if k == n_steps {
                b.push_node(price, &[]);
            } else {
                let down = next_start + j as NodeId;
                b.push_node(price, &[(down + 1, p_up), (down, 1.0 - p_up)]);
            }
        }
        level_start = next_start;
    }
    b.finish(true)
}

/// Recombining (price level × regime) lattice for the regime-switching-drift
/// spec. Level k holds (k+1)·R nodes ordered by (price level j, regime r).
pub fn build_regime_lattice(spec: &ContinuousModelSpec, n_steps: usize) -> Result<EventTree> {
    spec.validate()?;
    let (mus, sigma, s0, t_real, transition, initial_regime) = match spec {
        ContinuousModelSpec::RegimeSwitchingDrift {
            mus,
            sigma,
            s0,
            t_real,
            transition,
            initial_regime,
        } => (mus, *sigma, *s0, *t_real, transition, *initial_regime),
        _ => {
            return Err(TcmvError::UnsupportedSpec(
                "build_regime_lattice requires a regime-switching-drift spec".into(),
            ))
        }
    };
    if n_steps < 1 {
        return Err(TcmvError::Validation("n_steps must be ≥ 1".into()));
    }
    let nr = mus.len();
    let dt = t_real / n_steps as f64;
    let p_up: Vec<f64> = mus
        .iter()
        .map(|&mu| up_probability(mu, sigma, dt))
        .collect::<Result<_>>()?;
    // per-step transition: I + (P − I)·Δt, row-stochastic for small Δt
    let mut step_trans = vec![vec![0.0; nr]; nr];
    for r in 0..nr {
        for r2 in 0..nr {
            let id = if r == r2 { 1.0 } else { 0.0 };
            let q = id + (transition[r][r2] - id) * dt;
            if q < -1e-12 {
                return Err(TcmvError::Validation(format!(
                    "time step too coarse for regime switching: step probability {q} < 0"
                )));
            }
            step_trans[r][r2] = q.max(0.0);
        }
        let sum: f64 = step_trans[r].iter().sum();
        step_trans[r].iter_mut().for_each(|q| *q /= sum);
    }
    let u = (sigma * dt.sqrt()).exp();
    let d = 1.0 / u;
    let mut b = TreeBuilder::new();
    // level 0 is the root only (known initial regime); level k ≥ 1 has
    // (k+1)·R nodes indexed by (j, r)
    let mut level_start: NodeId = 0;
    for k in 0..=n_steps {
        b.start_level();
        let width = if k == 0 { 1 } else { (k as NodeId + 1) * nr as NodeId };
        let next_start = level_start + width;
        let nodes_at_level: Vec<(usize, usize)> = if k == 0 {
            vec![(0, initial_regime)]
        } else {
            (0..=k).flat_map(|j| (0..nr).map(move |r| (j, r))).collect()
        };
        for (j, r) in nodes_at_level {
            let price = s0 * u.powi(j as i32) * d.powi((k - j) as i32);
            if k == n_steps {
                b.push_node(price, &[]);
            } else {
                let mut children = Vec::with_capacity(2 * nr);
                for (r2, &q) in step_trans[r].iter().enumerate() {
                    if q == 0.0 {
                        continue;
                    }
                    let up_id = next_start + ((j + 1) * nr + r2) as NodeId;
                    let down_id = next_start + (j * nr + r2) as NodeId;
                    children.push((up_id, p_up[r] * q));
                    children.push((down_id, (1.0 - p_up[r]) * q));
                }
                b.push_node(price, &children);
            }
        }
        level_start = next_start;
    }
    b.finish(true)
}

/// Regime index of each node of a lattice built by [`build_regime_lattice`].
pub fn regime_of_nodes(spec: &ContinuousModelSpec, tree: &EventTree) -> Vec<usize> {
    let nr = match spec {
        ContinuousModelSpec::RegimeSwitchingDrift { mus, .. } => mus.len(),
        _ => return vec![0; tree.num_nodes()],
    };
    let initial = match spec {
        ContinuousModelSpec::RegimeSwitchingDrift { initial_regime, .. } => *initial_regime,
        _ => 0,
    };
    let mut out = vec![0; tree.num_nodes()];
    out[0] = initial;
    for k in 1..=tree.horizon() {
        for (offset, n) in tree.level_nodes(k).enumerate() {
            out[n as usize] = offset % nr;
        }
    }
    out
}
