//! Command-line dispatch, the `verify` residual suite, and `selftest`.
//!
//! Exit-code contract: 0 success, 1 validation/user error, 2 numerical
//! non-convergence, 3 internal invariant breach, 64 unknown subcommand.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bm_example::{self, MCConfig};
use crate::config;
use crate::convergence::{run_convergence, ConvergenceConfig};
use crate::decomposition::{fs_of_mvt, FsMethod};
use crate::error::{Result, TcmvError};
use crate::evaluation::{criterion_all, mmm_density, z_via_mmm};
use crate::io;
use crate::solvers::{solve_lmve_recursion, solve_mmve, solve_precommitment};
use crate::structure::{compute_lambda, compute_mvt};
use crate::tree::{doob_decompose, EventTree};
use crate::{fixtures, solvers};

#[derive(Parser)]
#[command(
    name = "tcmv",
    version,
    about = "Time-consistent mean-variance portfolio selection on event trees"
)]
struct Cli {
    /// Worker threads (0 = auto); TCMV_THREADS applies when the flag is 0.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Lmve,
    Mmve,
    Precommit,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    ViaLmve,
    FixedPoint,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve for a strategy and write one row per node (theta, Z, U).
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Initial capital.
        #[arg(long, default_value_t = 0.0)]
        x: f64,
        /// Required terminal mean (precommit only).
        #[arg(long)]
        target_mean: Option<f64>,
        #[arg(long, value_enum, default_value_t = OutFormat::Csv)]
        out: OutFormat,
        /// Output file; stdout when absent (no manifest is written then).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Föllmer–Schweizer decomposition of the terminal mean-variance tradeoff.
    Decompose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::ViaLmve)]
        method: MethodArg,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Structure report (lambda, deltaK per node); SC violations are
    /// warnings here, not errors.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run all residual checks on a tree and emit a pass/fail JSON report.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Discretization-convergence table for a continuous model spec.
    Converge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Companion log-log CSV for plotting.
        #[arg(long)]
        plot_csv: Option<PathBuf>,
    },
    /// First-passage Monte Carlo for the stopped Brownian example.
    ExampleBm {
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = true, action = ArgAction::Set)]
        bridge: bool,
        #[arg(long, default_value_t = 50.0)]
        t_cap: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the full invariant suite on the built-in fixture trees.
    Selftest,
}

fn exit_code(err: &TcmvError) -> i32 {
    match err {
        TcmvError::NonConvergence(_) => 2,
        TcmvError::InvariantBreach(_) => 3,
        _ => 1,
    }
}

fn init_threads(flag: usize) {
    let n = if flag > 0 {
        flag
    } else {
        std::env::var("TCMV_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0)
    };
    // ignore the error when a pool already exists (repeated in-process calls)
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let command_line = argv
        .iter()
        .map(|s| s.to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(" ");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                ErrorKind::InvalidSubcommand => {
                    eprint!("{e}");
                    64
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    init_threads(cli.threads);
    let start = Instant::now();
    match run(cli.cmd, &command_line, start) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn read_config_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path)
        .map_err(|e| TcmvError::Config(format!("cannot read {}: {e}", path.display())))
}

fn load_tree(path: &Path) -> Result<(EventTree, Vec<u8>)> {
    let bytes = read_config_bytes(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| TcmvError::Config(format!("{} is not UTF-8", path.display())))?;
    let cfg = config::parse_config(text)?;
    Ok((config::build_from_config(&cfg)?, bytes))
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes the named outputs and a manifest next to the first of them; prints
/// to stdout instead when no output path was given.
fn emit(
    command: &str,
    config_bytes: &[u8],
    seeds: Vec<u64>,
    start: Instant,
    outputs: Vec<(Option<&Path>, String)>,
) -> Result<()> {
    let mut written = Vec::new();
    for (path, text) in &outputs {
        match path {
            Some(p) => {
                io::write_text(p, text)?;
                written.push(p.display().to_string());
            }
            None => print!("{text}"),
        }
    }
    if let Some((Some(first), _)) = outputs.first() {
        let manifest = io::RunManifest {
            command: command.to_string(),
            config_sha256: io::sha256_hex(config_bytes),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            wall_time_s: start.elapsed().as_secs_f64(),
            outputs: written,
        };
        io::write_manifest(&manifest_path(first), &manifest)?;
    }
    Ok(())
}

fn run(cmd: Cmd, command_line: &str, start: Instant) -> Result<()> {
    match cmd {
        Cmd::Solve {
            config,
            kind,
            gamma,
            x,
            target_mean,
            out,
            output,
        } => {
            let (tree, bytes) = load_tree(&config)?;
            if target_mean.is_some() && kind != KindArg::Precommit {
                return Err(TcmvError::Validation(
                    "--target-mean is only valid with --kind precommit".into(),
                ));
            }
            let result = match kind {
                KindArg::Lmve => solve_lmve_recursion(&tree, gamma, x)?,
                KindArg::Mmve => solve_mmve(&tree, gamma, x)?,
                KindArg::Precommit => solve_precommitment(&tree, gamma, x, target_mean)?,
            };
            let crit = criterion_all(&tree, &result.strategy, x, gamma)?;
            let text = match out {
                OutFormat::Csv => io::solve_csv(&tree, &result, &crit),
                OutFormat::Jsonl => io::solve_jsonl(&tree, &result, &crit),
            };
            emit(command_line, &bytes, vec![], start, vec![(output.as_deref(), text)])
        }
        Cmd::Decompose {
            config,
            method,
            output,
        } => {
            let (tree, bytes) = load_tree(&config)?;
            let doob = doob_decompose(&tree);
            let sc = compute_lambda(&tree, &doob);
            let mvt = compute_mvt(&tree, &doob, &sc)?;
            let method = match method {
                MethodArg::ViaLmve => FsMethod::ViaLmve,
                MethodArg::FixedPoint => FsMethod::FixedPoint,
            };
            let fs = fs_of_mvt(&tree, &doob, &sc, &mvt, method)?;
            let text = io::decompose_csv(&tree, &fs, &mvt);
            emit(command_line, &bytes, vec![], start, vec![(output.as_deref(), text)])
        }
        Cmd::Diagnose { config, output } => {
            let (tree, bytes) = load_tree(&config)?;
            let doob = doob_decompose(&tree);
            let sc = compute_lambda(&tree, &doob);
            if !sc.sc_holds {
                eprintln!(
                    "warning: structure condition violated at {} node(s): {:?}",
                    sc.violating_nodes.len(),
                    sc.violating_nodes
                );
            }
            let mvt = if sc.sc_holds {
                compute_mvt(&tree, &doob, &sc).ok()
            } else {
                None
            };
            let text = io::diagnose_jsonl(&tree, &doob, &sc, mvt.as_ref());
            emit(command_line, &bytes, vec![], start, vec![(output.as_deref(), text)])
        }
        Cmd::Verify {
            config,
            gamma,
            output,
        } => {
            let (tree, bytes) = load_tree(&config)?;
            let report = residual_suite(&tree, gamma);
            let mut text = serde_json::to_string_pretty(&report)
                .map_err(|e| TcmvError::InvariantBreach(format!("report serialization: {e}")))?;
            text.push('\n');
            let all_pass = report.all_pass;
            emit(command_line, &bytes, vec![], start, vec![(output.as_deref(), text)])?;
            if all_pass {
                Ok(())
            } else {
                Err(TcmvError::InvariantBreach(
                    "one or more residual checks failed".into(),
                ))
            }
        }
        Cmd::Converge {
            config,
            output,
            plot_csv,
        } => {
            let bytes = read_config_bytes(&config)?;
            let cc: ConvergenceConfig = serde_json::from_slice(&bytes)
                .map_err(|e| TcmvError::Config(e.to_string()))?;
            let table = run_convergence(&cc)?;
            let mut outputs = vec![(output.as_deref(), io::converge_csv(&table))];
            if let Some(p) = &plot_csv {
                outputs.push((Some(p.as_path()), io::converge_plot_csv(&table)));
            }
            emit(command_line, &bytes, vec![], start, outputs)
        }
        Cmd::ExampleBm {
            paths,
            dt,
            seed,
            bridge,
            t_cap,
            output,
        } => {
            let mc = MCConfig {
                n_paths: paths,
                dt,
                seed,
                bridge_correction: bridge,
                t_cap,
            };
            let moments = bm_example::simulate_sigma(&mc)?;
            if moments.t_cap_warning {
                eprintln!(
                    "warning: hit fraction {} < 1 - 1e-6; t_cap is truncating mass",
                    moments.hit_fraction
                );
            }
            // identity verification re-simulates; cap its path count so it
            // stays a side dish next to the moment estimation
            let id_mc = MCConfig {
                n_paths: paths.min(10_000),
                ..mc.clone()
            };
            let identities = bm_example::verify_identities(&id_mc)?;
            let report = serde_json::json!({
                "config": mc,
                "moments": moments,
                "identity_paths": id_mc.n_paths,
                "identities": identities,
            });
            let mut text = serde_json::to_string_pretty(&report)
                .map_err(|e| TcmvError::InvariantBreach(format!("report serialization: {e}")))?;
            text.push('\n');
            let bytes = serde_json::to_vec(&mc)
                .map_err(|e| TcmvError::InvariantBreach(format!("config serialization: {e}")))?;
            emit(command_line, &bytes, vec![seed], start, vec![(output.as_deref(), text)])
        }
        Cmd::Selftest => selftest(),
    }
}

#[derive(Debug, Serialize)]
pub struct Check {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    pub tol: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub gamma: f64,
    pub checks: Vec<Check>,
    pub all_pass: bool,
}

fn check(name: &str, residual: f64, tol: f64) -> Check {
    Check {
        name: name.into(),
        residual: Some(residual),
        tol,
        pass: residual <= tol,
        skipped: None,
    }
}

fn skipped(name: &str, reason: String) -> Check {
    Check {
        name: name.into(),
        residual: None,
        tol: 0.0,
        pass: true,
        skipped: Some(reason),
    }
}

fn failed(name: &str, reason: String) -> Check {
    Check {
        name: name.into(),
        residual: None,
        tol: 0.0,
        pass: false,
        skipped: Some(reason),
    }
}

/// All residual checks for one tree: SC, the LMVE recursion's internal
/// residuals, MMM martingale properties, the Z-via-MMM representation, and
/// the FS identities. Checks that need path-independent cumulative processes
/// are skipped (with a reason) on recombining storage where K is
/// path-dependent.
pub fn residual_suite(tree: &EventTree, gamma: f64) -> VerifyReport {
    const TOL: f64 = 1e-10;
    let mut checks = Vec::new();
    let doob = doob_decompose(tree);
    let sc = compute_lambda(tree, &doob);
    checks.push(Check {
        name: "structure_condition".into(),
        residual: Some(sc.residual_eta.sup_norm(tree)),
        tol: 0.0,
        pass: sc.sc_holds,
        skipped: None,
    });
    if !sc.sc_holds {
        return VerifyReport {
            gamma,
            checks,
            all_pass: false,
        };
    }

    let lmve = match solve_lmve_recursion(tree, gamma, 0.0) {
        Ok(r) => r,
        Err(e) => {
            checks.push(failed("lmve_recursion", e.to_string()));
            return VerifyReport {
                gamma,
                checks,
                all_pass: false,
            };
        }
    };
    for key in ["z_leaf_max", "z_root_gap"] {
        if let Some(&r) = lmve.residuals.get(key) {
            checks.push(check(&format!("lmve_{key}"), r, TOL));
        }
    }

    let mmm = match mmm_density(tree, &doob, &sc) {
        Ok(m) => {
            let scale = m.density.0.iter().fold(1.0_f64, |a, d| a.max(d.abs()));
            let mut mart = 0.0_f64;
            let mut smart = 0.0_f64;
            for n in tree.non_terminal_nodes() {
                let i = n as usize;
                let (mut em, mut es) = (0.0, 0.0);
                for e in tree.edge_range(n) {
                    let c = tree.edge_child(e) as usize;
                    let p = tree.edge_prob(e);
                    em += p * m.density.0[c];
                    es += p * m.density.0[c] * tree.price(c as u32);
                }
                mart = mart.max((em - m.density.0[i]).abs());
                smart = smart.max((es - m.density.0[i] * tree.price(n)).abs());
            }
            checks.push(check("mmm_martingale", mart / scale, TOL));
            checks.push(check("mmm_s_martingale", smart / scale.max(1.0), TOL));
            Some(m)
        }
        Err(e) => {
            checks.push(failed("mmm_density", e.to_string()));
            None
        }
    };

    match compute_mvt(tree, &doob, &sc) {
        Ok(mvt) => {
            if let Some(m) = &mmm {
                let z = z_via_mmm(tree, &mvt, m, &lmve);
                checks.push(check("z_via_mmm", z.max_residual, TOL));
            }
            match fs_of_mvt(tree, &doob, &sc, &mvt, FsMethod::ViaLmve) {
                Ok(fs) => {
                    // ϑ̂ = (λ − ξ̂)/γ node-wise
                    let ident = tree
                        .non_terminal_nodes()
                        .map(|n| {
                            let i = n as usize;
                            (lmve.strategy.0[i] - (sc.lambda.0[i] - fs.xi_hat.0[i]) / gamma).abs()
                        })
                        .fold(0.0_f64, f64::max);
                    checks.push(check("fs_strategy_identity", ident, TOL));
                    let (mut lm, mut orth) = (0.0_f64, 0.0_f64);
                    for n in tree.non_terminal_nodes() {
                        let i = n as usize;
                        let (mut em, mut eo) = (0.0, 0.0);
                        for e in tree.edge_range(n) {
                            let p = tree.edge_prob(e);
                            let dl = fs.l_hat.0[tree.edge_child(e) as usize] - fs.l_hat.0[i];
                            em += p * dl;
                            eo += p * doob.delta_m[e] * dl;
                        }
                        lm = lm.max(em.abs());
                        orth = orth.max(eo.abs());
                    }
                    checks.push(check("fs_l_martingale", lm, TOL));
                    checks.push(check("fs_l_orthogonality", orth, TOL));
                    match tree.forward_accumulate(
                        fs.k0_hat,
                        |n, e| {
                            fs.xi_hat.0[n as usize]
                                * (tree.price(tree.edge_child(e)) - tree.price(n))
                        },
                        1e-9,
                    ) {
                        Ok(integral) => {
                            let path = tree
                                .leaves()
                                .zip(&mvt.k_t_per_leaf)
                                .map(|(n, &kt)| {
                                    let i = n as usize;
                                    (integral[i] + fs.l_hat.0[i] - kt).abs()
                                })
                                .fold(0.0_f64, f64::max);
                            checks.push(check("fs_path_identity", path, TOL));
                        }
                        Err(e) => checks.push(skipped("fs_path_identity", e.to_string())),
                    }
                }
                Err(e) => checks.push(failed("fs_of_mvt", e.to_string())),
            }
        }
        Err(e) => {
            checks.push(skipped("mvt_dependent_checks", e.to_string()));
        }
    }

    let all_pass = checks.iter().all(|c| c.pass);
    VerifyReport {
        gamma,
        checks,
        all_pass,
    }
}

fn selftest() -> Result<()> {
    let mut failures = 0usize;
    let mut trees: Vec<(String, EventTree)> = fixtures::sc_fixture_trees()
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("fixture {i}"), t))
        .collect();
    for seed in 1..=5u64 {
        trees.push((
            format!("random tree seed {seed}"),
            fixtures::random_tree(seed, 5, 3),
        ));
    }
    for (name, tree) in &trees {
        let report = residual_suite(tree, 2.0);
        if report.all_pass {
            println!("ok {name} ({} checks)", report.checks.len());
        } else {
            failures += 1;
            for c in report.checks.iter().filter(|c| !c.pass) {
                println!(
                    "FAIL {name}: {} residual {:?} tol {}",
                    c.name, c.residual, c.tol
                );
            }
        }
    }
    // SC-violating fixture must be rejected with the violating nodes listed
    match solvers::solve_lmve_recursion(&fixtures::deterministic_tree(3), 2.0, 0.0) {
        Err(TcmvError::ScViolation { nodes }) if !nodes.is_empty() => {
            println!("ok SC-violating fixture rejected ({} nodes)", nodes.len());
        }
        other => {
            failures += 1;
            println!("FAIL SC-violating fixture: expected ScViolation, got {other:?}");
        }
    }
    if failures == 0 {
        println!("selftest: all passed");
        Ok(())
    } else {
        Err(TcmvError::InvariantBreach(format!(
            "selftest: {failures} failure(s)"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_exits_64() {
        assert_eq!(dispatch(["tcmv", "frobnicate"]), 64);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(dispatch(["tcmv", "--help"]), 0);
    }

    #[test]
    fn residual_suite_passes_on_fixtures() {
        for tree in fixtures::sc_fixture_trees() {
            let report = residual_suite(&tree, 2.0);
            assert!(report.all_pass, "{report:?}");
        }
    }

    #[test]
    fn residual_suite_flags_sc_violation() {
        let report = residual_suite(&fixtures::deterministic_tree(2), 1.0);
        assert!(!report.all_pass);
        assert!(!report.checks[0].pass);
    }
}
