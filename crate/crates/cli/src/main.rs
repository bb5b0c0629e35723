mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use amber_core::config::{ConfigError, ConfigMap};
use clap::{Args, Parser, Subcommand};

pub const CACHE_DIR_ENV: &str = "AMBER_CACHE_DIR";

#[derive(Parser)]
#[command(
    name = "amber",
    version,
    about = "Adaptive retrieval question answering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk a JSON-lines corpus and write a BM25 index.
    Index(IndexArgs),
    /// Answer every dataset question and write a JSON-lines trace.
    Run(RunArgs),
    /// Score a trace against a dataset.
    Eval(EvalArgs),
    /// Generate training data for the chunk and sentence filters.
    Filtergen(FiltergenArgs),
    /// Show what happened to one question, or a summary of all.
    Trace(TraceArgs),
}

/// Flags shared by the commands that call a model. Each mirrors the config
/// key of the same name.
#[derive(Args, Default)]
pub struct ModelArgs {
    /// Flat key=value config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Chat-completions URL of an OpenAI-compatible server.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Completions URL used for continuation scoring.
    #[arg(long)]
    pub score_endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Scripted mock backend instead of a server.
    #[arg(long)]
    pub mock: Option<String>,
    /// Directory overriding the built-in prompt templates.
    #[arg(long)]
    pub prompts: Option<String>,
    /// Response cache directory (default: $AMBER_CACHE_DIR).
    #[arg(long)]
    pub cache_dir: Option<String>,
    /// Questions answered in parallel and model calls in flight.
    #[arg(long)]
    pub concurrency: Option<String>,
    #[arg(long)]
    pub temperature: Option<String>,
    #[arg(long)]
    pub max_tokens: Option<String>,
    #[arg(long)]
    pub retries: Option<String>,
    #[arg(long)]
    pub timeout_secs: Option<String>,
}

impl ModelArgs {
    /// The config file (if any) with flags and environment applied.
    fn config_map(&self, extra: &[(&str, &Option<String>)]) -> Result<ConfigMap, ConfigError> {
        let mut map = match &self.config {
            Some(path) => ConfigMap::load(path)?,
            None => ConfigMap::default(),
        };
        let own = [
            ("endpoint", &self.endpoint),
            ("score_endpoint", &self.score_endpoint),
            ("model", &self.model),
            ("mock", &self.mock),
            ("prompts", &self.prompts),
            ("cache_dir", &self.cache_dir),
            ("concurrency", &self.concurrency),
            ("temperature", &self.temperature),
            ("max_tokens", &self.max_tokens),
            ("retries", &self.retries),
            ("timeout_secs", &self.timeout_secs),
        ];
        for (key, value) in own.iter().chain(extra) {
            if let Some(v) = value {
                map.set(key, v.clone())?;
            }
        }
        if let Ok(dir) = std::env::var(CACHE_DIR_ENV) {
            if !dir.is_empty() {
                map.set_default("cache_dir", dir)?;
            }
        }
        Ok(map)
    }
}

#[derive(Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Words per passage.
    #[arg(long, default_value_t = amber_core::retriever::DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = amber_core::retriever::DEFAULT_K1)]
    pub k1: f64,
    #[arg(long, default_value_t = amber_core::retriever::DEFAULT_B)]
    pub b: f64,
}

#[derive(Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Prebuilt index.
    #[arg(long)]
    pub index: Option<String>,
    /// Corpus to index in memory when no index is given.
    #[arg(long)]
    pub corpus: Option<String>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// shortform or longform.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub max_iter: Option<String>,
    #[arg(long)]
    pub top_k: Option<String>,
    #[arg(long)]
    pub stop_on_no_improvement: Option<String>,
    /// Output trace, one JSON line per question.
    #[arg(long)]
    pub trace: Option<String>,
    /// Also write one pretty-printed JSON file per question here.
    #[arg(long)]
    pub trace_dir: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "shortform")]
    pub kind: String,
    /// Write the JSON report here instead of printing it.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct FiltergenArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub index: Option<String>,
    /// strinc or cxmi.
    #[arg(long)]
    pub measure: Option<String>,
    /// CXMI threshold in nats; a comma-separated list prints a pass-rate
    /// sweep and uses the first value for targets.
    #[arg(long)]
    pub threshold: Option<String>,
    #[arg(long)]
    pub top_k: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Question id; omit for a summary of every question.
    #[arg(long)]
    pub id: Option<String>,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration, input or model setup.
    Config(anyhow::Error),
    /// A requested item does not exist.
    NotFound(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::NotFound(_) => 3,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Config(e.into())
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Index(a) => commands::index(a),
        Command::Run(a) => run::run(a),
        Command::Eval(a) => commands::eval(a),
        Command::Filtergen(a) => commands::filtergen(a),
        Command::Trace(a) => commands::trace(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            match &failure {
                Failure::Config(e) => eprintln!("error: {e:#}"),
                Failure::NotFound(what) => eprintln!("error: not found: {what}"),
            }
            ExitCode::from(failure.code())
        }
    }
}
