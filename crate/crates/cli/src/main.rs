//! `mandelq`: simulation, analysis and fitting pipelines over timestamp files.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 fit did not converge.

mod commands;
mod config;
mod io;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    NotConverged(String),
}

impl CliError {
    /// A core error raised while handling `path`.
    pub fn data(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::NotConverged(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::NotConverged(m) => f.write_str(m),
        }
    }
}

impl From<mandelq::Error> for CliError {
    fn from(e: mandelq::Error) -> Self {
        use mandelq::Error as E;
        match e {
            E::Config(_) | E::UnknownChannel(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "mandelq", version, about = "Photon statistics from time-tagged detections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by every subcommand.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Read key=value settings from a file; any output header works.
    #[arg(long, value_name = "FILE")]
    pub config: Vec<PathBuf>,
    /// Override one setting, e.g. --set chain.deadtime_ps=80ns.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Input files and the output path.
#[derive(Args, Clone, Debug)]
pub struct Io {
    /// Input files (default: io.inputs from the configuration).
    pub inputs: Vec<PathBuf>,
    /// Output file, written atomically.
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Fit input plus JSON and curve outputs.
#[derive(Args, Clone, Debug)]
pub struct FitIo {
    /// Input tables (default: io.inputs from the configuration).
    pub inputs: Vec<PathBuf>,
    /// JSON result file.
    #[arg(short, long)]
    pub output: PathBuf,
    /// CSV model curve (default: the output path with extension `.curve.csv`).
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Monte Carlo emitter plus detection chain, written as a timestamp file.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Acquisition length, e.g. 10s.
        #[arg(long)]
        duration: Option<String>,
        #[arg(long, value_parser = ["cw", "pulsed"])]
        mode: Option<String>,
        #[arg(long, value_parser = ["text", "binary"])]
        format: Option<String>,
    },
    /// Mandel Q(T) aggregated over acquisitions.
    Q {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
        /// Window lengths, e.g. 100ns,1us,10us.
        #[arg(long, conflicts_with = "grid")]
        t: Option<String>,
        /// Log-spaced window lengths lo:hi:n, e.g. 10ns:1ms:41.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Photon-number distribution for one window length.
    Pnd {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        t: Option<String>,
    },
    /// Cross-correlation histogram between two detector channels.
    G2 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
    },
    /// Pulsed g2(0) from peak areas.
    G2zero {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
    },
    /// Histogram of detection delays after the trigger.
    Lifetime {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
    },
    /// Keeps detections inside a delay window after each trigger.
    Filter {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
        /// Delay window start:end, e.g. 7:12ns.
        #[arg(long)]
        window: Option<String>,
        #[arg(long, value_parser = ["auto", "text", "binary"])]
        format: Option<String>,
    },
    /// Detector deadtime from the forward-gap histogram of one channel.
    Deadtime {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
    },
    /// Q at the pulse period versus trigger-filter width.
    SweepFilter {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
    },
    /// Model fits; JSON result plus CSV curve.
    #[command(subcommand)]
    Fit(FitCommand),
    /// Evaluates a model on a grid.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Re-encodes a timestamp file, header preserved.
    Convert {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_parser = ["text", "binary"])]
        to: String,
        /// Expected input format; a mismatch is an error.
        #[arg(long, value_parser = ["text", "binary"])]
        from: Option<String>,
    },
}

#[derive(Subcommand)]
pub enum FitCommand {
    /// Exponential plus background on a lifetime table.
    Lifetime {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: FitIo,
    },
    /// Two-exponential g2 on a histogram table.
    G2 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: FitIo,
    },
    /// Three-level rate model over histograms at several powers.
    Rate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: FitIo,
    },
    /// Shelving model on a pulsed Q series.
    PulsedQ {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: FitIo,
    },
    /// Saturation curve on power_uw,rate_hz points.
    Saturation {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: FitIo,
    },
}

/// Output path and configuration for model evaluation.
#[derive(Args, Clone, Debug)]
pub struct ModelArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Subcommand)]
pub enum ModelCommand {
    /// Analytic CW Q(T) for a two-exponential g2.
    CwQ(ModelArgs),
    /// Pulsed Q(k tau_rep) of the shelving model.
    PulsedQ(ModelArgs),
    /// Three-level rate-equation g2, corrected and raw.
    RateG2(ModelArgs),
    /// Two-exponential g2.
    TwoExpG2(ModelArgs),
    /// Saturation curve.
    Saturation(ModelArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mandelq: {e}");
            ExitCode::from(e.code())
        }
    }
}
