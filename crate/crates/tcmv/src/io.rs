//! Result persistence: CSV / JSON-lines writers and run manifests.
//!
//! Every float is written with Rust's shortest round-trip formatting, so
//! re-parsing an output file reproduces the in-memory values exactly.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::convergence::ConvergenceTable;
use crate::decomposition::FsDecomposition;
use crate::error::{Result, TcmvError};
use crate::evaluation::CriterionReport;
use crate::solvers::StrategyResult;
use crate::structure::{MvtReport, ScReport};
use crate::tree::{DoobDecomposition, EventTree};

/// Everything needed to reproduce a published table: the command line, a
/// content hash of the config, tool version, seeds, and where the outputs
/// went. Wall time is informational and excluded from determinism claims.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| {
        TcmvError::Io(std::io::Error::other(format!(
            "cannot write {}: {e}",
            path.display()
        )))
    })
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| TcmvError::Io(std::io::Error::other(format!("manifest serialization: {e}"))))?;
    text.push('\n');
    write_text(path, &text)
}

/// `solve` output: one row per node with the strategy, expected future
/// gains Z, and the conditional criterion U.
pub fn solve_csv(tree: &EventTree, result: &StrategyResult, crit: &CriterionReport) -> String {
    let mut out = String::from("node_id,level,price,theta,Z,U\n");
    for n in 0..tree.num_nodes() as u32 {
        let i = n as usize;
        let _ = writeln!(
            out,
            "{n},{},{},{},{},{}",
            tree.level_of(n),
            tree.price(n),
            result.strategy.0[i],
            result.z.0[i],
            crit.u.0[i],
        );
    }
    out
}

/// `solve` output as JSON-lines: one record per node plus a summary record.
pub fn solve_jsonl(tree: &EventTree, result: &StrategyResult, crit: &CriterionReport) -> String {
    let mut out = String::new();
    for n in 0..tree.num_nodes() as u32 {
        let i = n as usize;
        let rec = serde_json::json!({
            "node_id": n,
            "level": tree.level_of(n),
            "price": tree.price(n),
            "theta": result.strategy.0[i],
            "Z": result.z.0[i],
            "U": crit.u.0[i],
        });
        let _ = writeln!(out, "{rec}");
    }
    let summary = serde_json::json!({
        "summary": true,
        "kind": result.kind.as_str(),
        "gamma": result.gamma,
        "x": result.x,
        "u0": result.u0,
        "residuals": result.residuals,
    });
    let _ = writeln!(out, "{summary}");
    out
}

/// `decompose` output: FS decomposition of K_T, with K̂₀ in a comment line
/// above the column header.
pub fn decompose_csv(tree: &EventTree, fs: &FsDecomposition, mvt: &MvtReport) -> String {
    let mut out = format!("# K0_hat = {}\n", fs.k0_hat);
    out.push_str("node_id,level,xi_hat,L_hat,deltaK\n");
    for n in 0..tree.num_nodes() as u32 {
        let i = n as usize;
        let _ = writeln!(
            out,
            "{n},{},{},{},{}",
            tree.level_of(n),
            fs.xi_hat.0[i],
            fs.l_hat.0[i],
            mvt.delta_k.0[i],
        );
    }
    out
}

/// `diagnose` output: per-node structure report plus a summary record.
/// ΔK is computed directly as λ·ΔA so the report exists even when the
/// structure condition fails.
pub fn diagnose_jsonl(
    tree: &EventTree,
    doob: &DoobDecomposition,
    sc: &ScReport,
    mvt: Option<&MvtReport>,
) -> String {
    let mut out = String::new();
    for n in 0..tree.num_nodes() as u32 {
        let i = n as usize;
        let rec = serde_json::json!({
            "id": n,
            "level": tree.level_of(n),
            "lambda": sc.lambda.0[i],
            "deltaK": sc.lambda.0[i] * doob.delta_a[i],
        });
        let _ = writeln!(out, "{rec}");
    }
    let summary = serde_json::json!({
        "summary": true,
        "nodes": tree.num_nodes(),
        "horizon": tree.horizon(),
        "sc_holds": sc.sc_holds,
        "violating_nodes": sc.violating_nodes,
        "max_jump": mvt.map(|m| m.max_jump),
        "bmo_like_bound": mvt.map(|m| m.bmo_like_bound),
    });
    let _ = writeln!(out, "{summary}");
    out
}

/// `converge` output: one row per refinement level.
pub fn converge_csv(table: &ConvergenceTable) -> String {
    let mut out = String::from(
        "n,lambda_error,k_error,theta_error,xi_error,max_jump,discretization_martingale_mass,root_invested\n",
    );
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.n,
            r.lambda_error,
            r.k_error,
            r.theta_error,
            r.xi_error,
            r.max_jump,
            r.discretization_martingale_mass,
            r.root_invested,
        );
    }
    out
}

/// Plot-ready companion table: log10 of n and of each error column; cells
/// are empty where an error is exactly zero.
pub fn converge_plot_csv(table: &ConvergenceTable) -> String {
    let log = |x: f64| {
        if x > 0.0 {
            format!("{}", x.log10())
        } else {
            String::new()
        }
    };
    let mut out =
        String::from("log10_n,log10_lambda_error,log10_k_error,log10_theta_error,log10_xi_error\n");
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            (r.n as f64).log10(),
            log(r.lambda_error),
            log(r.k_error),
            log(r.theta_error),
            log(r.xi_error),
        );
    }
    out
}
