use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sash_core::error::ErrorClass;
use sash_core::SashError;
use sash_transport::{FrameError, TransportError};

mod commands;

#[derive(Parser)]
#[command(name = "sash", version, about = "Federated surrogate-assisted single-index fitting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a default experiment configuration.
    InitConfig {
        #[arg(long, value_enum, default_value = "weak")]
        setting: Setting,
        /// Replace the full-size design by a small one.
        #[arg(long)]
        small: bool,
    },
    /// Simulate one replication and write one CSV per site.
    Simgen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        rep: usize,
    },
    /// Local fit on one site's data; writes the site's summary frame.
    SiteFit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        site_id: usize,
        /// Broadcast frame received from the coordinator.
        #[arg(long)]
        broadcast: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate summary frames with the labeled data.
    Aggregate {
        #[command(flatten)]
        common: Common,
        /// Labeled site CSV (site 1).
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        summaries: Vec<PathBuf>,
    },
    /// Serve one site of a manifest-described run.
    SiteServe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        site_id: usize,
    },
    /// Federated fit.
    Sash {
        #[command(subcommand)]
        action: SashAction,
    },
    /// Pooled individual-data fit.
    Ipd {
        #[command(subcommand)]
        action: PlainAction,
    },
    /// Supervised fit on the labeled rows; also writes the initial broadcast frame.
    Sl {
        #[command(subcommand)]
        action: PlainAction,
    },
    /// Score an estimate on labeled data, or cross-validate the supervised fit.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Labeled CSV.
        #[arg(long)]
        data: PathBuf,
        /// Estimate JSON written by a run command.
        #[arg(long, conflicts_with = "folds")]
        estimate: Option<PathBuf>,
        /// JSON array with the true coefficients.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Monte Carlo experiment: replications × methods → CSV reports.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reps: Option<usize>,
        /// Write the per-replication records after each replication.
        #[arg(long)]
        progress: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Site CSVs, labeled site first; without them a replication is simulated.
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Replication to simulate when no data is given.
    #[arg(long, default_value_t = 0)]
    rep: usize,
}

#[derive(Subcommand)]
enum SashAction {
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        sash: SashRun,
    },
}

#[derive(Subcommand)]
enum PlainAction {
    Run {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct SashRun {
    /// Run the extra broadcast round.
    #[arg(long)]
    sash_plus: bool,
    #[arg(long, value_enum, default_value = "inproc")]
    transport: TransportKind,
    /// Coordinator side of a manifest-described run (sites served elsewhere).
    #[arg(long, conflicts_with = "transport")]
    manifest: Option<PathBuf>,
    /// Per-site reply timeout in seconds.
    #[arg(long, default_value_t = 3600.0)]
    timeout: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportKind {
    Inproc,
    Tcp,
    Files,
}

#[derive(Clone, Copy, ValueEnum)]
enum Setting {
    Weak,
    Strong,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for kernel evaluation.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Comma-separated λ grid for the supervised fit.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// Comma-separated kernel bandwidths; each value is a separate run.
    #[arg(long, value_delimiter = ',')]
    bandwidth_grid: Option<Vec<f64>>,
    /// Local penalties from the rate schedule; tuning is left to the
    /// aggregated information criteria.
    #[arg(long, conflicts_with = "cv")]
    bic: bool,
    /// Local penalties by per-iteration cross-validation (default).
    #[arg(long)]
    cv: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<SashError>() {
            return match e.class() {
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 5,
            };
        }
        if let Some(e) = cause.downcast_ref::<TransportError>() {
            return match e {
                TransportError::Core(inner) => match inner.class() {
                    ErrorClass::Data => 3,
                    ErrorClass::Numerical => 5,
                },
                _ => 4,
            };
        }
        if cause.downcast_ref::<FrameError>().is_some() {
            return 4;
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
