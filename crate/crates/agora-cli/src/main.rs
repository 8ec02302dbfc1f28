use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agora::domain::validate_scenario;
use agora::harness::{
    evaluate_command, ingest_command, report_command, run_command, RunOptions, METRICS_DIR,
    METRICS_FILE,
};
use agora::scenario::load_scenario;

#[derive(Parser)]
#[command(name = "agora", version, about = "Multi-agent discussion runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// Replace every backend binding with its stub counterpart.
    #[arg(long)]
    stub: bool,
    /// Backend id (from [backends]) to use for embeddings.
    #[arg(long, value_name = "ID")]
    embed_backend: Option<String>,
    /// Backend id (from [backends]) to use for judging.
    #[arg(long, value_name = "ID")]
    judge_backend: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write manifests and transcripts.
    Run {
        #[arg(long, value_name = "FILE")]
        scenario: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Repetitions per grid cell.
        #[arg(long, default_value_t = 1)]
        runs: u32,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (0 = automatic).
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Expand the scenario's [grid] axes.
        #[arg(long)]
        grid: bool,
        /// Comma-separated rule filter for --grid (none,light,struct).
        #[arg(long, value_delimiter = ',')]
        rules: Option<Vec<String>>,
        /// Comma-separated mask filter for --grid (e.g. TMD,TD,-).
        #[arg(long, value_delimiter = ',')]
        masks: Option<Vec<String>>,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Score transcripts in an output directory into metrics/metrics.csv.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Aggregate metrics/metrics.csv into reports.
    Report {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Check a scenario file and print any violations.
    Validate {
        #[arg(long, value_name = "FILE")]
        scenario: PathBuf,
    },
    /// Chunk and embed the scenario corpora, printing per-base chunk counts.
    Ingest {
        #[arg(long, value_name = "FILE")]
        scenario: PathBuf,
        #[command(flatten)]
        backends: BackendArgs,
    },
}

fn backend_opts(out_dir: PathBuf, workers: usize, backends: &BackendArgs) -> RunOptions {
    RunOptions {
        out_dir,
        workers,
        stub: backends.stub,
        embed_backend: backends.embed_backend.clone(),
        judge_backend: backends.judge_backend.clone(),
        ..RunOptions::default()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            out,
            runs,
            seed,
            workers,
            grid,
            rules,
            masks,
            backends,
        } => {
            let loaded = load_scenario(&scenario)
                .map_err(|e| anyhow::anyhow!("loading {}: {e}", scenario.display()))?;
            let opts = RunOptions {
                runs,
                seed,
                grid,
                rules,
                masks,
                ..backend_opts(out, workers, &backends)
            };
            let report = run_command(&loaded, &opts)?;
            for warning in &report.ingest_warnings {
                log::warn!("{warning}");
            }
            println!("completed {} runs into {}", report.run_ids.len(), opts.out_dir.display());
            if report.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for f in &report.failures {
                    eprintln!(
                        "failed: {} ({})",
                        f.run_id,
                        f.error.as_deref().unwrap_or("unknown error")
                    );
                }
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Evaluate {
            out,
            workers,
            backends,
        } => {
            let opts = backend_opts(out, workers, &backends);
            let rows = evaluate_command(&opts)?;
            println!(
                "wrote {} metric rows to {}",
                rows,
                opts.out_dir.join(METRICS_DIR).join(METRICS_FILE).display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { out } => {
            let (report_path, series_path) = report_command(&out)?;
            println!("wrote {}", report_path.display());
            println!("wrote {}", series_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { scenario } => {
            let loaded = load_scenario(&scenario)
                .map_err(|e| anyhow::anyhow!("loading {}: {e}", scenario.display()))?;
            let violations = validate_scenario(&loaded.config);
            if violations.is_empty() {
                println!("ok: {}", scenario.display());
                Ok(ExitCode::SUCCESS)
            } else {
                for v in &violations {
                    eprintln!("violation: {v}");
                }
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Ingest { scenario, backends } => {
            let loaded = load_scenario(&scenario)
                .map_err(|e| anyhow::anyhow!("loading {}: {e}", scenario.display()))?;
            let opts = backend_opts(PathBuf::new(), 0, &backends);
            let stats = ingest_command(&loaded, &opts)?;
            for warning in &stats.warnings {
                log::warn!("{warning}");
            }
            for (base, chunks) in &stats.bases {
                println!("{base}: {chunks} chunks");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
