//! Command line: `serve`, `corpus generate`, `run` and `provenance export`.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use caravan_core::collection::{generate_corpus, CorpusMode};
use caravan_core::domain::{ArtifactId, Seed};
use caravan_core::engine::{Engine, PipelineConfig};
use caravan_core::instrument::Instrumentation;
use caravan_core::Error;

use crate::api;

/// Appends extraction and download events to this file.
pub const TRACE_ENV: &str = "CARAVAN_TRACE";
/// Aborts the process after this many recorded extraction units.
pub const ABORT_ENV: &str = "CARAVAN_ABORT_AFTER_EXTRACTIONS";

#[derive(Debug, Parser)]
#[command(name = "caravan", version, about = "Adaptive package analysis pipeline")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Start the HTTP API with a worker pool.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, env = "CARAVAN_DATA_DIR")]
        data_dir: PathBuf,
        /// Zero queues tasks without ever running them.
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Synthetic package corpora.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Run crawl through evaluation from one pipeline config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "CARAVAN_DATA_DIR")]
        data_dir: PathBuf,
    },
    /// Artifact lineage.
    Provenance {
        #[command(subcommand)]
        command: ProvenanceCommand,
    },
}

#[derive(Debug, Subcommand)]
enum CorpusCommand {
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        packages: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        categories: Vec<String>,
        #[arg(long, value_enum, default_value_t = Mode::Disjoint)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
enum ProvenanceCommand {
    Export {
        #[arg(long)]
        artifact: String,
        #[arg(long, value_enum, default_value_t = Format::Xml)]
        format: Format,
        #[arg(long, env = "CARAVAN_DATA_DIR")]
        data_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Disjoint,
    Overlap,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Xml,
    Json,
}

/// Failures sorted by exit code.
enum Failure {
    Invalid(String),
    Execution(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation(_)
            | Error::InvalidArgument(_)
            | Error::Parse(_)
            | Error::NotFound(_)
            | Error::Conflict(_) => Failure::Invalid(e.to_string()),
            other => Failure::Execution(other.to_string()),
        }
    }
}

fn instrumentation_from_env() -> Result<Instrumentation, Failure> {
    let mut ins = Instrumentation::new();
    if let Some(path) = std::env::var_os(TRACE_ENV) {
        ins = ins.with_trace(path)?;
    }
    if let Ok(raw) = std::env::var(ABORT_ENV) {
        let n = raw
            .parse()
            .map_err(|_| Failure::Invalid(format!("{ABORT_ENV} must be a positive integer, got {raw:?}")))?;
        ins = ins.abort_after_extractions(n);
    }
    Ok(ins)
}

/// Parses arguments, runs the command and maps the outcome to 0 (success),
/// 1 (invalid input) or 2 (execution failure).
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Execution(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Serve { addr, data_dir, workers } => serve(addr, &data_dir, workers),
        Command::Corpus {
            command: CorpusCommand::Generate { out, packages, categories, mode, seed },
        } => {
            let mode = match mode {
                Mode::Disjoint => CorpusMode::Disjoint,
                Mode::Overlap => CorpusMode::Overlap,
            };
            let index = generate_corpus(packages, &categories, mode, Seed(seed), &out)?;
            println!("wrote {} packages to {}", index.packages.len(), out.display());
            Ok(())
        }
        Command::Run { config, data_dir } => run(&config, &data_dir),
        Command::Provenance {
            command: ProvenanceCommand::Export { artifact, format, data_dir },
        } => {
            let id: ArtifactId = artifact.parse()?;
            let engine = Engine::open(&data_dir, Instrumentation::new())?;
            let out = match format {
                Format::Xml => engine.store().export_provenance_xml(&id)?,
                Format::Json => serde_json::to_string_pretty(&api::provenance_json(engine.store(), &id)?)
                    .map_err(Error::from)?,
            };
            let _ = writeln!(std::io::stdout(), "{out}");
            Ok(())
        }
    }
}

fn run(config: &Path, data_dir: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", config.display())))?;
    let config = PipelineConfig::parse(&text)?;
    let engine = Engine::open(data_dir, instrumentation_from_env()?)?;
    let outcome = engine.run_pipeline(&config)?;
    let summary = serde_json::json!({
        "packages": outcome.packages.len(),
        "selected_dataset": outcome.selected_dataset,
        "merged_dataset": outcome.merged_dataset,
        "processed_dataset": outcome.processed_dataset,
        "model": outcome.model,
        "evaluation": outcome.evaluation,
    });
    println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
    Ok(())
}

fn serve(addr: SocketAddr, data_dir: &Path, workers: usize) -> Result<(), Failure> {
    let engine = Engine::open(data_dir, instrumentation_from_env()?)?;
    let pool = (workers > 0).then(|| engine.start_workers(workers, Duration::from_millis(50)));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Execution(e.to_string()))?;
    let served = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::Execution(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| Failure::Execution(e.to_string()))?;
        println!("listening on {local}");
        let _ = std::io::stdout().flush();
        axum::serve(listener, api::router(engine))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Failure::Execution(e.to_string()))
    });
    if let Some(pool) = pool {
        pool.shutdown();
    }
    served
}
