use clap::{Args, Parser, Subcommand, ValueEnum};
use nhim::perron::Method;
use nhim_cli::config::{Overrides, RunConfig};
use nhim_cli::run::{cmd_diagnose, cmd_solve, cmd_sweep, combined_code, list_scenarios, verdict_code};
use nhim_cli::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

/// Normally hyperbolic invariant manifolds by the Lyapunov-Perron method.
#[derive(Parser)]
#[command(name = "nhim", version)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one configured system and write run.json plus graph CSVs.
    Solve(Common),
    /// Report measured and declared rates, the certified order and T_max.
    Diagnose(Common),
    /// Solve once per value of the configured sweep and write summary.csv.
    Sweep(Common),
    /// List catalog scenarios with their default parameters.
    ListScenarios,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (NHIM_OUT takes precedence).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Vec<MethodArg>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Perron,
    GraphTransform,
}

fn load(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&c.config)?;
    let methods = c
        .method
        .iter()
        .map(|m| match m {
            MethodArg::Perron => Method::Perron,
            MethodArg::GraphTransform => Method::GraphTransform,
        })
        .collect();
    cfg.apply(&Overrides { out: c.out.clone(), methods, order: c.order, tol: c.tol })?;
    Ok(cfg)
}

fn dispatch(cmd: Cmd) -> Result<i32, CliError> {
    match cmd {
        Cmd::ListScenarios => {
            print!("{}", list_scenarios());
            Ok(0)
        }
        Cmd::Solve(c) => {
            let (r, dir) = cmd_solve(&load(&c)?)?;
            println!("{}: {:?} -> {}", r.scenario, r.verdict, dir.display());
            for c in r.checks.iter().filter(|c| !c.pass) {
                println!("  check {} failed: {:e} (tol {:e})", c.name, c.value, c.tol);
            }
            for n in &r.diagnostics.notes {
                println!("  {n}");
            }
            Ok(verdict_code(r.verdict))
        }
        Cmd::Sweep(c) => {
            let (rs, dir) = cmd_sweep(&load(&c)?)?;
            for r in &rs {
                println!("{} {:?}: {:?}", r.scenario, r.params, r.verdict);
            }
            println!("summary -> {}", dir.join("summary.csv").display());
            Ok(combined_code(&rs))
        }
        Cmd::Diagnose(c) => {
            let (rep, _) = cmd_diagnose(&load(&c)?)?;
            println!("{}", serde_json::to_string_pretty(&rep).map_err(|e| CliError::Io(e.to_string()))?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 64 } else { 0 });
        }
    };
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("--jobs: {e}");
            return ExitCode::from(64);
        }
    }
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("nhim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
