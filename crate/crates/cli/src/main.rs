use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use hdlagent::orchestrator::Schedule;
use hdlagent_cli::commands::{self, BenchFlags, ForgeFlags, LoopFlags, EXIT_USAGE};
use hdlagent_cli::config::GlobalConfig;

#[derive(Parser)]
#[command(name = "hdlagent", version, about = "Simulation-driven RTL generation")]
struct Cli {
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Serve every role from this cassette.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct LoopArgs {
    /// Number of racing processes.
    #[arg(long)]
    parallel: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `free` or `lockstep`.
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<Schedule>,
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    match s {
        "free" => Ok(Schedule::Free),
        "lockstep" => Ok(Schedule::Lockstep),
        _ => Err(format!("unknown schedule `{s}` (free, lockstep)")),
    }
}

impl From<LoopArgs> for LoopFlags {
    fn from(a: LoopArgs) -> Self {
        Self {
            parallel: a.parallel,
            max_iter: a.max_iter,
            seed: a.seed,
            schedule: a.schedule,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Race one task.
    Run {
        task: PathBuf,
        #[command(flatten)]
        loop_args: LoopArgs,
        /// Run directory (default: <output_root>/<task>/seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every task of a suite several times and report.
    Bench {
        suite: PathBuf,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Also run a single process per run for iteration accounting.
        #[arg(long)]
        solo_baseline: bool,
        /// Each run is one agentic attempt; hides Pass@1 when --runs is 1.
        #[arg(long)]
        agentic: bool,
        #[command(flatten)]
        loop_args: LoopArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter a corpus and optionally synthesize training pairs.
    Forge {
        corpus: PathBuf,
        /// Reference solutions for the contamination check.
        #[arg(long)]
        golden: Option<PathBuf>,
        /// Example pool (JSONL); enables pair generation.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate outcome files into report.json and report.md.
    Report {
        runs_root: PathBuf,
        #[arg(long)]
        agentic: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    let mut config = match &cli.config {
        Some(p) => match GlobalConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_USAGE as u8);
            }
        },
        None => GlobalConfig::default(),
    };
    if let Some(c) = &cli.replay {
        config.replay(c);
    }

    let result = match cli.command {
        Command::Run { task, loop_args, out } => commands::run(&task, config, &loop_args.into(), out),
        Command::Bench { suite, runs, solo_baseline, agentic, loop_args, out } => commands::bench(
            &suite,
            config,
            &loop_args.into(),
            &BenchFlags { runs, solo_baseline, agentic, out },
        ),
        Command::Forge { corpus, golden, pool, out } => {
            commands::forge(&corpus, config, &ForgeFlags { golden, pool, out })
        }
        Command::Report { runs_root, agentic, out } => commands::report(&runs_root, agentic, out),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
