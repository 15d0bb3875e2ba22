//! `myodec` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "myodec", version, about = "Streaming EMG movement decoding: simulate, train, evaluate, reinforce")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration file (TOML). Missing keys take the profile's values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base settings: `full` (complete model sizes) or `desk` (reduced widths).
    #[arg(long, global = true, default_value = "full")]
    pub profile: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimProtocol {
    Standard,
    Freeform,
    Reinforcement,
    Sono,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic session directory.
    Simulate {
        #[arg(long, value_enum)]
        protocol: SimProtocol,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Session length for freeform and sono sessions.
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute the calibration map from a session's first 15 s.
    Calibrate {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model on a session's training split and save a checkpoint.
    Train {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the offline protocol (standard or freeform) and report metrics.
    Eval {
        /// Session directory; mutually exclusive with --seeds.
        #[arg(long, conflicts_with = "seeds")]
        session: Option<PathBuf>,
        /// Synthetic subjects to sweep, `a..b` (inclusive) or `a,b,c`.
        #[arg(long)]
        seeds: Option<String>,
        /// Protocol of the synthetic sessions of a sweep.
        #[arg(long, value_enum, default_value = "standard")]
        protocol: SimProtocol,
        #[arg(long, default_value = "tcn,lstm,svr")]
        models: String,
        /// Evaluate this trained model instead of training.
        #[arg(long, conflicts_with_all = ["seeds", "models"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Online freeform loop: initial minute, then test-and-update trials.
    Reinforce {
        #[arg(long, conflicts_with = "seeds")]
        session: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, default_value = "tcn")]
        model: String,
        /// Pace the stream at wall-clock rate and enforce the 25 ms budget.
        #[arg(long)]
        realtime: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the ultrasound reduction chain and write per-frame features.
    SonoPrep {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print a saved run report and regenerate its plot data.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_errors!(
    myodec::Error,
    myodec::protocols::ProtocolError,
    myodec::models::ModelError,
    myodec::storage::StorageError,
    myodec::simulator::SimError,
    myodec::sono::SonoError,
    myodec::metrics::MetricsError,
    myodec::signal::SignalError,
    myodec::kinematics::KinematicsError
);

pub fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn configure_threads() {
    if let Some(n) = std::env::var("MYODEC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands as c;
    match cli.command {
        Command::Simulate { protocol, seed, duration_s, out, common } => c::simulate(&common, protocol, seed, duration_s, &out),
        Command::Calibrate { session, out, common } => c::calibrate(&common, &session, &out),
        Command::Train { session, model, seed, out, common } => c::train(&common, &session, &model, seed, &out),
        Command::Eval { session, seeds, protocol, models, checkpoint, seed, out, common } => {
            c::eval(&common, session.as_deref(), seeds.as_deref(), protocol, &models, checkpoint.as_deref(), seed, &out)
        }
        Command::Reinforce { session, seeds, model, realtime, seed, out, common } => {
            c::reinforce(&common, session.as_deref(), seeds.as_deref(), &model, realtime, seed, &out)
        }
        Command::SonoPrep { session, out, common } => c::sono_prep(&common, &session, &out),
        Command::Report { run, out } => c::report(&run, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    configure_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}\n\nRun `myodec --help` for usage.");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
