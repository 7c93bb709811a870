use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Environment variables override flags' defaults; each is the flag name
/// upper-cased with this prefix (for example `ANASTOMOSIS_SEED`).
pub const ENV_PREFIX: &str = "ANASTOMOSIS_";

#[derive(Debug, Parser)]
#[command(name = "anastomosis", version, about = "OCT-guided vascular anastomosis simulator")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON config file (comments allowed).
    #[arg(long, global = true, env = "ANASTOMOSIS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true, env = "ANASTOMOSIS_SEED")]
    pub seed: Option<u64>,
    /// Artifact directory; overrides the config.
    #[arg(long, global = true, env = "ANASTOMOSIS_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run Monte-Carlo procedures and write reports, logs and a comparison.
    Simulate(SimulateArgs),
    /// Write a labeled synthetic A-scan corpus.
    GenCorpus(GenCorpusArgs),
    /// Sweep (tau_air, tau_rmse) over a corpus and pick an operating point.
    CalibrateThresholds(CalibrateArgs),
    /// Label every A-scan in a corpus.
    Classify(CorpusArgs),
    /// Train the missed-suture classifier.
    TrainVision(TrainVisionArgs),
    /// Evaluate a trained classifier on a held-out split.
    EvalVision(EvalVisionArgs),
    /// Summary statistics over saved run outcomes.
    Metrics(InputArgs),
    /// Comparison report of saved run outcomes against the embedded fixtures.
    Report(ReportArgs),
    /// Re-execute an event log and verify its state-trace hash.
    Replay(ReplayArgs),
    /// Run one procedure in real time behind the operator console.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1, env = "ANASTOMOSIS_RUNS")]
    pub runs: usize,
    /// Scenario script (scripted prompts, jogs, faults).
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GenCorpusArgs {
    /// Output directory for the corpus; defaults to `<out>/corpus`.
    #[arg(long, env = "ANASTOMOSIS_CORPUS")]
    pub corpus: Option<PathBuf>,
    /// Noise level; defaults to the calibrated level from the config.
    #[arg(long)]
    pub noise_level: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    #[arg(long, env = "ANASTOMOSIS_CORPUS")]
    pub corpus: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[arg(long, env = "ANASTOMOSIS_CORPUS")]
    pub corpus: PathBuf,
    /// Grid points per threshold axis.
    #[arg(long, default_value_t = 11)]
    pub grid: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainVisionArgs {
    /// Dataset written by an earlier run; synthesized when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Also write the synthesized dataset under `<out>/dataset`.
    #[arg(long)]
    pub save_dataset: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalVisionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// `runs.json` written by `simulate`.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Leave out the fixture comparison.
    #[arg(long)]
    pub no_fixtures: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub log: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080, env = "ANASTOMOSIS_PORT")]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Logical milliseconds per wall-clock millisecond.
    #[arg(long, default_value_t = 20.0)]
    pub speedup: f64,
    /// Stop serving once the procedure finishes.
    #[arg(long)]
    pub exit_when_done: bool,
}
