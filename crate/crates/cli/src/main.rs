use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sloserve_cli::commands::{self, BenchOptions};
use sloserve_cli::config::{Deployment, DeploymentConfig, Mode};
use sloserve_cli::{serve, CliError};

/// SLO-aware ML pipeline serving: placement planning, simulated benchmarks
/// and a JSON-lines query service.
///
/// Exit codes: 0 ok, 1 config or I/O error, 2 infeasible placement,
/// 3 SLO budget exceeded. Log level comes from SLOSERVE_LOG.
#[derive(Debug, Parser)]
#[command(name = "sloserve", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Baseline {
    Monolithic,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Simulate,
    Live,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plan a placement and print the per-node layout.
    Plan {
        #[arg(short, long)]
        config: PathBuf,
        /// Build a baseline instead of planning.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(short, long, default_value = "placement.json")]
        out: PathBuf,
    },
    /// Run the configured workload in simulation and write report files.
    Bench {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long, default_value = "bench-out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// `auto`, `monolithic` or a placement JSON path.
        #[arg(long)]
        placement: Option<String>,
        /// Preload models before a scripted resize.
        #[arg(long, conflicts_with = "no_preload")]
        preload: bool,
        /// Load models cold at a scripted resize.
        #[arg(long)]
        no_preload: bool,
        /// Comma-separated offered rates; runs one benchmark per rate.
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        /// Also write SVG charts.
        #[arg(long)]
        svg: bool,
    },
    /// Accept queries as newline-delimited JSON over TCP.
    Serve {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        listen: Option<String>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Recompute percentiles and miss rates from bench output directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Write the combined latency curve CSV here.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        svg: bool,
    },
}

fn load(path: &PathBuf, edit: impl FnOnce(&mut DeploymentConfig)) -> Result<Deployment, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut config = DeploymentConfig::parse(&text)?;
    edit(&mut config);
    let base = path.parent().map(PathBuf::from).unwrap_or_default();
    Deployment::resolve(config, &base)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Plan { config, baseline, out } => {
            let dep = load(&config, |_| {})?;
            commands::plan_cmd(&dep, baseline.is_some(), &out, &mut stdout)?;
        }
        Command::Bench {
            config,
            out,
            seed,
            placement,
            preload,
            no_preload,
            rates,
            svg,
        } => {
            let dep = load(&config, |c| {
                if let Some(s) = seed {
                    c.seed = s;
                }
                if let Some(p) = placement {
                    c.placement = p;
                }
                if let Some(r) = c.resize.as_mut().filter(|_| preload || no_preload) {
                    r.preload = preload;
                }
                if let Some(r) = rates {
                    c.sweep_qps = r;
                }
            })?;
            commands::bench(&dep, &BenchOptions { out, svg }, &mut stdout)?;
        }
        Command::Serve { config, listen, mode } => {
            let dep = load(&config, |c| {
                if listen.is_some() {
                    c.listen = listen;
                }
                match mode {
                    Some(ModeArg::Simulate) => c.mode = Mode::Simulate,
                    Some(ModeArg::Live) => c.mode = Mode::Live,
                    None => {}
                }
            })?;
            let placement = dep.placement()?;
            let addr = dep.config.listen.clone().unwrap_or_else(|| "127.0.0.1:7878".into());
            let server = serve::start(&dep, &placement, &addr, dep.config.mode)?;
            writeln!(stdout, "listening on {}", server.addr())?;
            stdout.flush()?;
            let summary = server.wait();
            writeln!(stdout, "served {} queries, drained {}", summary.served, summary.drained)?;
        }
        Command::Report { dirs, out, svg } => {
            commands::report(&dirs, out.as_deref(), svg, &mut stdout)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SLOSERVE_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
