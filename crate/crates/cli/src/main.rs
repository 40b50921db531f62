//! `csipred`: dataset generation, training, adaption, evaluation, sweeps and
//! derivative checks for downlink CSI prediction.
//!
//! Exit codes: 0 success, 1 runtime or verification failure, 2 usage error.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::{ConfigArgs, RoleArg};

/// Bad flag combination detected after parsing. Exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Every flag also reads `CSIPRED_<FLAG>` (upper snake case) from the environment.
#[derive(Debug, Clone, Parser, Serialize, Deserialize)]
#[command(name = "csipred", version, about = "Downlink CSI prediction from uplink CSI")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, env = "CSIPRED_THREADS")]
    pub threads: Option<usize>,
    /// Where to write the run manifest (default: `<out>.manifest.json`).
    #[arg(long, global = true, env = "CSIPRED_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate sample pairs for a range of environments.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of environments.
        #[arg(long, env = "CSIPRED_ENVS", value_parser = clap::value_parser!(u64).range(1..))]
        envs: u64,
        /// Id of the first environment (targets start at K_S).
        #[arg(long, default_value_t = 0, env = "CSIPRED_FIRST_ENV")]
        first_env: u64,
        #[arg(long, value_enum, default_value = "train", env = "CSIPRED_ROLE")]
        role: RoleArg,
        /// Pairs per environment.
        #[arg(long, env = "CSIPRED_PAIRS", value_parser = clap::value_parser!(u64).range(1..))]
        pairs: u64,
        #[arg(long, env = "CSIPRED_OUT")]
        out: PathBuf,
    },
    /// No-transfer training on the pooled source data.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Source dataset file; generated from the config when absent.
        #[arg(long, env = "CSIPRED_DATA")]
        data: Option<PathBuf>,
        #[arg(long, env = "CSIPRED_OUT")]
        out: PathBuf,
    },
    /// Meta-training across the source environments.
    MetaTrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, env = "CSIPRED_OUT")]
        out: PathBuf,
    },
    /// Adapt a checkpoint to one target environment.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, env = "CSIPRED_CHECKPOINT")]
        checkpoint: PathBuf,
        /// Adaption dataset file.
        #[arg(long, env = "CSIPRED_DATA")]
        data: PathBuf,
        /// Environment block to adapt on (default: the first one in the file).
        #[arg(long, env = "CSIPRED_ENV_ID")]
        env_id: Option<u64>,
        #[arg(long, value_enum, default_value = "direct", env = "CSIPRED_ALGORITHM")]
        algorithm: AdaptAlgorithm,
        #[arg(long, env = "CSIPRED_OUT")]
        out: PathBuf,
    },
    /// NMSE of one or more checkpoints on a test dataset.
    Eval {
        #[arg(long, required = true, env = "CSIPRED_CHECKPOINT", value_delimiter = ',')]
        checkpoint: Vec<PathBuf>,
        #[arg(long, env = "CSIPRED_DATA")]
        data: PathBuf,
        #[arg(long, env = "CSIPRED_OUT")]
        out: PathBuf,
    },
    /// Three-way comparison over a grid of one variable.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "none", env = "CSIPRED_VARIABLE")]
        variable: VariableArg,
        /// Grid values, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, env = "CSIPRED_GRID")]
        grid: Vec<f64>,
        /// CSV output; the full report goes to `<out>.json`.
        #[arg(long, env = "CSIPRED_OUT")]
        out: PathBuf,
    },
    /// Finite-difference checks of gradients, HVPs and meta-gradients.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Coordinates probed per seed.
        #[arg(long, default_value_t = 100, env = "CSIPRED_PROBE_COUNT",
              value_parser = clap::value_parser!(u64).range(1..))]
        probe_count: u64,
        /// JSON report.
        #[arg(long, default_value = "gradcheck.json", env = "CSIPRED_OUT")]
        out: PathBuf,
    },
    /// Converged training loss against hidden width.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "8,32,128,512", env = "CSIPRED_WIDTHS")]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 200, env = "CSIPRED_PAIRS",
              value_parser = clap::value_parser!(u64).range(2..))]
        pairs: u64,
        #[arg(long, default_value = "probe.json", env = "CSIPRED_OUT")]
        out: PathBuf,
    },
    /// Re-run the command recorded in a manifest.
    Replay {
        #[arg(long, env = "CSIPRED_FROM")]
        from: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Train { .. } => "train",
            Command::MetaTrain { .. } => "meta-train",
            Command::Adapt { .. } => "adapt",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Probe { .. } => "probe",
            Command::Replay { .. } => "replay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptAlgorithm {
    Direct,
    Meta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariableArg {
    None,
    GAd,
    NAd,
    DeltaF,
    M,
    SnrDb,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// Returns `Ok(false)` when a verification command ran but failed.
fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    if let Command::Replay { from } = &cli.command {
        let recorded = manifest::load(from)?;
        if matches!(recorded.command, Command::Replay { .. }) {
            return Err(UsageError("a replay manifest cannot be replayed".into()).into());
        }
        let mut again = recorded;
        again.threads = cli.threads.or(again.threads);
        again.manifest = cli.manifest.clone().or(again.manifest);
        return commands::execute(&again);
    }
    commands::execute(&cli)
}
