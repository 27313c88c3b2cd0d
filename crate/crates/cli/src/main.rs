//! `gbsde`: batch front-end for the penalization solver and its diagnostics.
//!
//! Exit codes: 0 ok, 1 configuration or usage error, 2 numerical failure,
//! 3 acceptance check failed. Errors are reported on stderr as one JSON
//! object per line. `GBSDE_THREADS` sets the worker count.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gbsde::acceptance::{run_suite, suite_acceptable, SuiteOptions, UNATTAINABLE};
use gbsde::diagnostics::{
    comparison_check, dynkin_oracle, g_martingale_check, violation_norms, DiagnosticsError, DiagnosticsReport,
    COMPARISON_TOLERANCE,
};
use gbsde::solver::{penalty_ladder, solve_penalized};
use serde_json::json;
use thiserror::Error;

use crate::config::{load_config, ConfigError, RunConfig};

const THREADS_ENV: &str = "GBSDE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "gbsde", version, about = "Penalization solver for doubly reflected G-BSDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (overrides the config's "output"; default ".").
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Suppress progress output and warnings.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve at one penalty level; writes solution.csv and summary.json.
    Solve {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
    /// Run the penalty ladder and diagnostics; writes ladder.csv and diagnostics.json.
    Ladder {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
    /// Check Y¹ ≤ Y² for two ordered problems; writes comparison.json.
    Compare {
        /// Lower then upper problem, as `--config A B` or `--config A --config B`.
        #[arg(long, value_name = "PATH", num_args = 1..=2, required = true)]
        config: Vec<PathBuf>,
    },
    /// Classical Dynkin-game value for σ̲ = σ̄; writes oracle.csv.
    Oracle {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
    /// Run the acceptance suite.
    Selftest {
        /// Corrupt one bundle to exercise the martingale tripwire.
        #[arg(long, hide = true)]
        break_tripwire: bool,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Acceptance(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Io { .. } => 1,
            CliError::Numerical(_) => 2,
            CliError::Acceptance(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Numerical(_) => "numerical",
            CliError::Acceptance(_) => "acceptance",
        }
    }

    fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "code": self.code(), "kind": self.kind(), "message": self.to_string() });
        if let CliError::Config(e) = self {
            v["path"] = json!(e.path);
            v["message"] = json!(e.message);
        }
        v
    }

    fn numerical(e: impl std::fmt::Display) -> Self {
        CliError::Numerical(e.to_string())
    }

    /// Input-precondition failures count as configuration errors.
    fn diagnostics(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::DataNotOrdered { .. }
            | DiagnosticsError::ObstacleMismatch
            | DiagnosticsError::ParamsMismatch
            | DiagnosticsError::Nondegenerate { .. }
            | DiagnosticsError::MissingObstacle
            | DiagnosticsError::InvalidAlpha(_) => ConfigError {
                path: String::new(),
                message: e.to_string(),
            }
            .into(),
            e => Self::numerical(e),
        }
    }
}

struct Ctx {
    out: Option<PathBuf>,
    quiet: bool,
}

impl Ctx {
    fn out_dir(&self, cfg: Option<&RunConfig>) -> Result<PathBuf, CliError> {
        let dir = self
            .out
            .clone()
            .or_else(|| cfg.and_then(|c| c.output.clone()))
            .unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(dir)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

fn write_file(dir: &Path, name: &str, body: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(body))
        .map_err(|source| CliError::Io { path, source })
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<(), CliError> {
    let mut body = serde_json::to_string_pretty(value).expect("JSON values serialize");
    body.push('\n');
    write_file(dir, name, body.as_bytes())
}

fn cmd_solve(ctx: &Ctx, path: &Path) -> Result<(), CliError> {
    let cfg = load_config(path)?;
    let bundle = solve_penalized(&cfg.spec, cfg.penalty, &cfg.lattice).map_err(CliError::numerical)?;
    let (upper, lower) = violation_norms(&bundle, &cfg.spec).map_err(CliError::diagnostics)?;
    let dir = ctx.out_dir(Some(&cfg))?;
    let mut csv = Vec::new();
    bundle.write_csv(&mut csv).map_err(CliError::numerical)?;
    write_file(&dir, "solution.csv", &csv)?;
    let p = cfg.spec.params();
    let summary = json!({
        "Y0": bundle.y0(),
        "penalty": cfg.penalty.value(),
        "T": cfg.lattice.horizon(),
        "N": cfg.lattice.steps(),
        "x0": cfg.lattice.x0(),
        "sigma_lo": p.sigma_lo(),
        "sigma_hi": p.sigma_hi(),
        "lipschitz": cfg.spec.lipschitz(),
        "lipschitz_estimated": cfg.estimated_lipschitz.is_some(),
        "sup_upper_violation": upper,
        "sup_lower_violation": lower,
        "martingale": g_martingale_check(&bundle).worst(),
    });
    write_json(&dir, "summary.json", &summary)?;
    ctx.say(format!("Y0 = {}", bundle.y0()));
    Ok(())
}

fn cmd_ladder(ctx: &Ctx, path: &Path) -> Result<(), CliError> {
    let cfg = load_config(path)?;
    let ladder = penalty_ladder(&cfg.spec, &cfg.ladder, &cfg.lattice).map_err(CliError::numerical)?;
    let report = DiagnosticsReport::from_ladder(&ladder, &cfg.diagnostics).map_err(CliError::diagnostics)?;
    let dir = ctx.out_dir(Some(&cfg))?;
    write_file(&dir, "ladder.csv", report.to_csv().as_bytes())?;
    write_json(&dir, "diagnostics.json", &report.summary_json())?;
    match report.upper_rate {
        Some(f) => ctx.say(format!("slope = {}, r2 = {}", f.slope, f.r_squared)),
        None => ctx.say("slope unavailable"),
    }
    ctx.say(format!("all flags passed: {}", report.flags.all_passed()));
    Ok(())
}

fn cmd_compare(ctx: &Ctx, paths: &[PathBuf]) -> Result<(), CliError> {
    let [first, second] = paths else {
        return Err(CliError::Usage(format!(
            "compare needs exactly two configs, got {}",
            paths.len()
        )));
    };
    let (c1, c2) = (load_config(first)?, load_config(second)?);
    if c1.lattice != c2.lattice {
        return Err(ConfigError {
            path: "/lattice".into(),
            message: "both configs must use the same lattice".into(),
        }
        .into());
    }
    let outcome = comparison_check(&c1.spec, &c2.spec, c1.penalty, &c1.lattice).map_err(CliError::diagnostics)?;
    let dir = ctx.out_dir(Some(&c1))?;
    let body = json!({
        "ok": outcome.ok,
        "worst_violation": outcome.worst_violation,
        "location": outcome.location,
        "penalty": c1.penalty.value(),
        "tolerance": COMPARISON_TOLERANCE,
    });
    write_json(&dir, "comparison.json", &body)?;
    if !outcome.ok {
        return Err(CliError::Acceptance(format!(
            "ordering violated by {:e} at {:?}",
            outcome.worst_violation, outcome.location
        )));
    }
    ctx.say(format!("ordered; worst violation {:e}", outcome.worst_violation));
    Ok(())
}

fn cmd_oracle(ctx: &Ctx, path: &Path) -> Result<(), CliError> {
    let cfg = load_config(path)?;
    let grid = dynkin_oracle(&cfg.spec, &cfg.lattice).map_err(CliError::diagnostics)?;
    let dir = ctx.out_dir(Some(&cfg))?;
    let mut csv = Vec::new();
    grid.write_csv(&cfg.lattice, &mut csv).map_err(CliError::numerical)?;
    write_file(&dir, "oracle.csv", &csv)?;
    ctx.say(format!("Y0 = {}", grid.root()));
    Ok(())
}

fn cmd_selftest(ctx: &Ctx, break_tripwire: bool) -> Result<(), CliError> {
    let outcomes = run_suite(SuiteOptions { break_tripwire });
    let mut text = String::new();
    for o in &outcomes {
        text.push_str(&format!("{o}\n"));
    }
    text.push_str(&format!("documented as unattainable: {}\n", UNATTAINABLE.join(", ")));
    ctx.say(text.trim_end());
    if ctx.out.is_some() {
        write_file(&ctx.out_dir(None)?, "acceptance.txt", text.as_bytes())?;
    }
    if suite_acceptable(&outcomes) {
        Ok(())
    } else {
        let failed: Vec<_> = outcomes
            .iter()
            .filter(|o| !o.acceptable())
            .map(|o| o.id.as_str())
            .collect();
        Err(CliError::Acceptance(format!("criteria failed: {}", failed.join(", "))))
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let ctx = Ctx {
        out: cli.out,
        quiet: cli.quiet,
    };
    match &cli.command {
        Command::Solve { config } => cmd_solve(&ctx, config),
        Command::Ladder { config } => cmd_ladder(&ctx, config),
        Command::Compare { config } => cmd_compare(&ctx, config),
        Command::Oracle { config } => cmd_oracle(&ctx, config),
        Command::Selftest { break_tripwire } => cmd_selftest(&ctx, *break_tripwire),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.to_string().trim_end().to_string())),
    };
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            fail(&e)
        }
    }
}
