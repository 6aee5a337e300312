//! `gbmei` command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 numerical failure
//! (too many reference paths lost to blowup, non-finite results).

pub mod config;
pub mod output;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gbmei_core::harness::{self, StrongErrorReport};
use gbmei_core::model::{self, BUILTIN_PROBLEMS};
use gbmei_core::schemes::SchemeKind;
use gbmei_core::Error;
use log::info;

use config::{Overrides, RawConfig, Resolved};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }

    pub fn from_core(e: Error) -> Self {
        match e {
            Error::ExclusionLimit { .. } | Error::NonFinite(_) | Error::Singular => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "gbmei", version, about = "Strong-convergence experiments for SDE integrators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// RMS strong error against Δt with fitted log-log slopes.
    Convergence(RunArgs),
    /// RMS strong error against integration time.
    Efficiency(RunArgs),
    /// Long-time sample mean E[u(t)] and blowup fraction.
    Stiff(RunArgs),
    /// List schemes and built-in problems.
    List,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    /// Output CSV; the JSON sidecar goes next to it with `.json` appended.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    levy_terms: Option<usize>,
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::List => {
            print!("{}", list_text());
            Ok(())
        }
        Command::Convergence(a) => run_experiment(Mode::Convergence, &a),
        Command::Efficiency(a) => run_experiment(Mode::Efficiency, &a),
        Command::Stiff(a) => run_experiment(Mode::Stiff, &a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("gbmei: {e}");
            e.exit_code()
        }
    }
}

pub fn list_text() -> String {
    let mut s = String::from("schemes:\n");
    for k in SchemeKind::ALL {
        s.push_str(&format!("  {}\n", k.name()));
    }
    s.push_str("problems:\n");
    for p in BUILTIN_PROBLEMS {
        let params = model::builtin_param_names(p).unwrap_or(&[]);
        s.push_str(&format!("  {p} ({})\n", params.join(", ")));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Convergence,
    Efficiency,
    Stiff,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Convergence => "convergence",
            Mode::Efficiency => "efficiency",
            Mode::Stiff => "stiff",
        }
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn run_experiment(mode: Mode, args: &RunArgs) -> Result<(), CliError> {
    let bytes = std::fs::read(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Config(format!("{} is not UTF-8", args.config.display())))?;
    let raw: RawConfig = config::parse(&text)?;
    let overrides = Overrides {
        seed: args.seed,
        samples: args.samples,
        out: args.out.clone(),
        workers: args.workers,
        levy_terms: args.levy_terms,
    };
    let env_seed = std::env::var(config::SEED_ENV).ok();
    let resolved = config::resolve(&raw, &overrides, env_seed.as_deref())?;
    let out = resolved
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}_{}.csv", resolved.problem_name, mode.name())));

    let mut meta = serde_json::json!({
        "subcommand": mode.name(),
        "config": resolved.echo(&raw),
        "config_hash": output::config_hash(&bytes),
        "timing_note": "wall_seconds covers the integration loops only, summed over samples; noise synthesis and the reference solution are timed separately",
    });

    let csv = match mode {
        Mode::Convergence | Mode::Efficiency => {
            let report = if mode == Mode::Convergence {
                harness::strong_error(&resolved.problem, &resolved.experiment)
            } else {
                harness::efficiency(&resolved.problem, &resolved.experiment)
            }
            .map_err(CliError::from_core)?;
            add_report_meta(&mut meta, &report);
            output::format_csv(&resolved.problem_name, &report.tables)
        }
        Mode::Stiff => stiff(&resolved, &mut meta)?,
    };

    output::write_atomic(&out, csv.as_bytes())
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", out.display())))?;
    let side = sidecar_path(&out);
    let meta_text = serde_json::to_string_pretty(&meta).expect("metadata serialises") + "\n";
    output::write_atomic(&side, meta_text.as_bytes())
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", side.display())))?;
    info!("wrote {} and {}", out.display(), side.display());
    Ok(())
}

fn add_report_meta(meta: &mut serde_json::Value, report: &StrongErrorReport) {
    let t = report.timing;
    meta["samples"] = report.samples.into();
    meta["excluded_reference_paths"] = report.excluded.into();
    meta["timing"] = serde_json::json!({
        "noise_seconds": t.noise_seconds,
        "reference_seconds": t.reference_seconds,
        "integration_seconds": t.integration_seconds,
        "total_seconds": t.total_seconds,
    });
    meta["reference_self_test"] = match report.self_test {
        Some(st) => serde_json::json!({"gap": st.gap, "threshold": st.threshold, "passed": st.passed}),
        None => serde_json::Value::Null,
    };
    meta["tables"] = report
        .tables
        .iter()
        .map(|tb| {
            serde_json::json!({
                "scheme": tb.scheme,
                "p": tb.spec.p(),
                "at_floor": tb.at_floor(),
                "fit": tb.fit.map(|f| serde_json::json!({"slope": f.slope, "intercept": f.intercept, "r2": f.r2})),
                "scheme_blowups": tb.rows.iter().map(|r| r.blowups).collect::<Vec<_>>(),
            })
        })
        .collect();
}

fn stiff(resolved: &Resolved, meta: &mut serde_json::Value) -> Result<String, CliError> {
    let mc = resolved.moment_config();
    let mut runs = Vec::with_capacity(resolved.schemes.len());
    let mut summary = Vec::new();
    for spec in &resolved.schemes {
        let traj = harness::moment_trajectory(&resolved.problem, spec, &mc)
            .map_err(CliError::from_core)?;
        summary.push(serde_json::json!({
            "scheme": spec.label(),
            "max_mean_norm": traj.max_mean_norm(),
            "blowup_fraction": traj.blowup_fraction(),
        }));
        runs.push((spec.label(), traj));
    }
    meta["samples"] = mc.samples.into();
    meta["moments"] = summary.into();
    Ok(output::format_moments_csv(&resolved.problem_name, &runs))
}
