use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Mixture-of-personas synthetic data generation.
#[derive(Debug, Parser)]
#[command(name = "mop", version)]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides `output_dir` from the config.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,

    /// More log output (repeat for debug).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster the population and write one persona per cluster.
    SynthPersonas(SynthArgs),
    /// Fit the gates; writes the exemplar pool, checkpoints and a report.
    Train(TrainArgs),
    /// Sample synthetic responses from a trained checkpoint.
    Generate(GenerateArgs),
    /// FID, MAUVE and KL-cosine of generated texts against a reference set.
    Evaluate(EvaluateArgs),
    /// Dump persona and exemplar gates at one context as CSV.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of personas K.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Persona file to write (default `<output_dir>/personas.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub personas: Option<PathBuf>,
    /// Top-M pairs per record.
    #[arg(long)]
    pub m: Option<usize>,
    /// Exemplar pool size N.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub personas: Option<PathBuf>,
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Steer every generation towards this sentiment label.
    #[arg(long, conflicts_with = "topic")]
    pub sentiment: Option<String>,
    /// Only draw personas carrying this topic label.
    #[arg(long)]
    pub topic: Option<String>,
    /// Mix L personas per generation.
    #[arg(long)]
    pub mix: Option<usize>,
    /// Baseline without persona or exemplar, from the same backend.
    #[arg(long, conflicts_with_all = ["checkpoint", "personas", "pool", "mix", "topic"])]
    pub zero_shot: bool,
    /// Accept a checkpoint trained against different artifacts.
    #[arg(long)]
    pub force: bool,
    /// Generations file (default `<output_dir>/generations.jsonl`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Generations or records file (default `<output_dir>/generations.jsonl`).
    #[arg(long)]
    pub generated: Option<PathBuf>,
    /// Reference records (default `golden` from the config).
    #[arg(long)]
    pub golden: Option<PathBuf>,
    /// Report file (default `<output_dir>/eval_report.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, default_value = "")]
    pub context: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub personas: Option<PathBuf>,
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    /// CSV file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
