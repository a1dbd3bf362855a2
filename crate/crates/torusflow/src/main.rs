use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use torusflow::commands::{self, CliError, Command};
use torusflow::config::Config;
use torusflow::runner::Parallel;

/// Stochastic Lagrangian flows on the 2-torus.
///
/// Exit status: 0 when every enabled check passes, 1 when a check fails,
/// 2 on configuration or input errors.
#[derive(Parser)]
#[command(name = "torusflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run directory (default: <output.dir>/<command>-<config digest>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any key, e.g. `--set energy.levels=[4,8]`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long = "T", value_name = "T")]
    horizon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<u32>,
    #[arg(long)]
    thin: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct MinimizeArgs {
    /// Target JSON: moments, coupling samples or a reference drift.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long = "Kb", value_name = "KB")]
    kb: Option<u32>,
    #[arg(long)]
    bins: Option<usize>,
    /// Comma-separated penalty weights.
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    /// Budget of objective evaluations.
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Subcommand)]
enum Sub {
    /// Structure residuals of the noise basis.
    CheckBasis(Common),
    /// Particle paths, incompressibility and noise checks.
    Simulate(Common),
    /// Transport series and the generalized-flow axiom sweep.
    Transport(Common),
    /// Flow energy and the partition ladder of lower bounds.
    Energy(Common),
    /// Energy minimization under an endpoint constraint.
    Minimize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: MinimizeArgs,
    },
    /// Factorization into a martingale flow and a pulled-back drift flow.
    Decompose {
        #[command(flatten)]
        common: Common,
        /// Drift field JSON.
        #[arg(long)]
        drift: Option<PathBuf>,
    },
    /// Merge finished runs into a summary.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn overrides(c: &Common) -> Vec<String> {
    let mut o = c.set.clone();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push(format!("{k}={v}"));
        }
    };
    push("flow.grid", c.grid.map(|v| v.to_string()));
    push("flow.dt", c.dt.map(|v| format!("{v:?}")));
    push("flow.T", c.horizon.map(|v| format!("{v:?}")));
    push("flow.seed", c.seed.map(|v| v.to_string()));
    push("flow.replicas", c.replicas.map(|v| v.to_string()));
    push("flow.thin", c.thin.map(|v| v.to_string()));
    o
}

fn toml_string(p: &std::path::Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let (command, common, mut extra) = match cli.command {
        Sub::Report { runs, out } => {
            let summary = commands::report(&runs, &out, true)?;
            println!("{}", summary.to_markdown());
            println!("summary written to {}", out.display());
            return Ok(summary.passed);
        }
        Sub::CheckBasis(c) => (Command::CheckBasis, c, Vec::new()),
        Sub::Simulate(c) => (Command::Simulate, c, Vec::new()),
        Sub::Transport(c) => (Command::Transport, c, Vec::new()),
        Sub::Energy(c) => (Command::Energy, c, Vec::new()),
        Sub::Minimize { common, args } => {
            let mut e = Vec::new();
            if let Some(t) = &args.target {
                e.push(format!("minimize.target={}", toml_string(t)));
            }
            if let Some(v) = args.kb {
                e.push(format!("minimize.kb={v}"));
            }
            if let Some(v) = args.bins {
                e.push(format!("minimize.bins={v}"));
            }
            if let Some(v) = &args.lambda {
                e.push(format!("minimize.lambda=[{}]", v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")));
            }
            if let Some(v) = args.iters {
                e.push(format!("minimize.iters={v}"));
            }
            (Command::Minimize, common, e)
        }
        Sub::Decompose { common, drift } => {
            let mut e = Vec::new();
            if let Some(d) = drift {
                e.push("drift.kind=\"file\"".to_string());
                e.push(format!("drift.file={}", toml_string(&d)));
            }
            (Command::Decompose, common, e)
        }
    };
    let mut o = overrides(&common);
    o.append(&mut extra);
    let cfg = Config::load(common.config.as_deref(), &o)?;
    let runner = Parallel::from_env().map_err(CliError::Input)?;
    let dir = common.out.clone().unwrap_or_else(|| commands::default_run_dir(&cfg, command.name()));
    let (report, _) = commands::execute(command, &cfg, &dir, &runner)?;
    print!("{}", report.to_markdown());
    println!("\nrun directory: {}", dir.display());
    if !report.passed {
        eprintln!("{}", serde_json::json!({ "failures": report.failures }));
    }
    Ok(report.passed)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::from(2)
        }
    }
}
