//! `kaser` — batch CLI for the student-error simulation pipeline.
//!
//! The pipeline runs in content-addressed stages under one output
//! directory; `kaser pipeline` chains them all, the per-stage commands run
//! a prefix of the chain, and `kaser mock-serve` provides deterministic
//! offline stand-ins for the judge and embedding services.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

mod commands;
mod config;
mod manifest;
mod stages;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("could not access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("could not parse {path}: {source}")]
    ConfigFormat {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("annotation left {failed} item(s) unlabeled; rerun with --resume to retry just those")]
    Annotation { failed: usize },
    #[error("{0}")]
    Stage(String),
    #[error(transparent)]
    Corpus(#[from] kaser_core::corpus::CorpusError),
    #[error(transparent)]
    Taxonomy(#[from] kaser_core::taxonomy::TaxonomyError),
    #[error(transparent)]
    Cluster(#[from] kaser_core::clustering::ClusterError),
    #[error(transparent)]
    Knowledge(#[from] kaser_core::knowledge::KeError),
    #[error(transparent)]
    Policy(#[from] kaser_core::policy::PolicyError),
    #[error(transparent)]
    Grpo(#[from] kaser_core::grpo::GrpoError),
    #[error(transparent)]
    Eval(#[from] kaser_core::eval::EvalError),
    #[error(transparent)]
    Llm(#[from] kaser_core::llm::LlmError),
    #[error(transparent)]
    Mock(#[from] kaser_core::mock::MockError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::ConfigFormat { .. } => 2,
            CliError::Annotation { .. } => 3,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "kaser",
    version,
    about = "Simulates realistic student programming errors: annotate, cluster, train, evaluate"
)]
pub struct Cli {
    /// Run configuration JSON (required by every command except
    /// mock-serve and toy-init).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Reuse partial artifacts from an interrupted run (annotate: re-judge
    /// only items that are still missing labels).
    #[arg(long, global = true)]
    pub resume: bool,
    /// Show what would run without executing; annotate prints the exact
    /// prompts it would send.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Label every incorrect submission with raw error descriptions.
    Annotate,
    /// Group raw errors into a representative catalog.
    Cluster {
        /// Number of clusters; defaults to the distinct raw label count.
        #[arg(long = "k-c", value_name = "N")]
        k_c: Option<usize>,
    },
    /// Fit the knowledge estimator on the training students.
    KeTrain,
    /// Warm-start the toy policy on ground-truth completions.
    SftToy,
    /// Optimize the toy policy with group-relative updates.
    GrpoTrain,
    /// Sample candidate submissions for one student and problem.
    Generate {
        #[arg(long)]
        student: String,
        #[arg(long)]
        problem: String,
        /// Candidates to sample.
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Score the trained policy at the pair and problem levels.
    Eval,
    /// Run every stage from annotation through evaluation.
    Pipeline,
    /// Serve deterministic offline judge/embedding endpoints.
    MockServe {
        #[arg(long, default_value_t = 7801)]
        port: u16,
        /// Fixture file; defaults to the bundled toy fixtures.
        #[arg(long, value_name = "PATH")]
        fixtures: Option<PathBuf>,
        /// Answer the first N chat requests with malformed replies.
        #[arg(long, default_value_t = 0, value_name = "N")]
        malformed: u64,
    },
    /// Write the bundled toy corpus, fixtures, and a ready config.
    ToyInit {
        /// Target directory.
        #[arg(long, default_value = "toy")]
        dir: PathBuf,
        /// Port the generated config expects mock services on.
        #[arg(long, default_value_t = 7801)]
        port: u16,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
