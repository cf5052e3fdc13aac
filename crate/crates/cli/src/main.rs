use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use trade_forensics::pipeline::{Pipeline, PipelineError, RunConfig, Stage};

#[derive(Parser)]
#[command(
    name = "trade-forensics",
    version,
    about = "Forensic anomaly detection over bilateral trade records"
)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, env = "TRADE_FORENSICS_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Parse and validate the input into records.csv.
    Ingest,
    /// Per-record price and mirror features.
    Features,
    /// Pair exports with partner imports.
    Mirror,
    /// First-digit conformity per reporter.
    Benford,
    /// Isolation-forest scores.
    Iforest,
    /// Trade graph, centrality, communities and origin attribution.
    Network,
    /// Autoencoder reconstruction errors and latent coordinates.
    Autoenc,
    /// Composite score, attributions, rules, profiles, HS risk.
    Explain,
    /// Labeled synthetic corpus.
    Synth,
    /// Risk table, summary, plot data and manifest.
    Report,
    /// Every stage in dependency order.
    All,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Ingest => Stage::Ingest,
            Command::Features => Stage::Features,
            Command::Mirror => Stage::Mirror,
            Command::Benford => Stage::Benford,
            Command::Iforest => Stage::Iforest,
            Command::Network => Stage::Network,
            Command::Autoenc => Stage::Autoenc,
            Command::Explain => Stage::Explain,
            Command::Synth => Stage::Synth,
            Command::Report => Stage::Report,
            Command::All => return None,
        })
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(n) = cli.threads.or(config.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Config(format!("threads: {e}")))?;
    }
    let pipeline = Pipeline::new(config)?;
    match cli.command.stage() {
        Some(stage) => pipeline.run(stage).map(|_| ()),
        None => pipeline.run_all().map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
