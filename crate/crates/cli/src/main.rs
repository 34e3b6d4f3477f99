use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

/// Spatial cluster detection for right-censored survival data.
#[derive(Parser, Debug)]
#[command(name = "frailscan", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Two-stage detection: frailty estimation, Gaussian scan, Monte Carlo p-values.
    Scan(ScanArgs),
    /// Exponential or log-rank scan with permutation p-values.
    Baseline(BaselineArgs),
    /// Run a simulation study from a config file or a built-in preset.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Master seed; every stage derives its own stream from it [default: 1,
    /// or the config file's seed with `simulate`].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 lets the runtime decide).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Monte Carlo or permutation replicates [default: 199, or 999 with --paper-scale].
    #[arg(long)]
    pub mc_replicates: Option<usize>,
    /// Bayes-factor threshold for keeping the cluster model [default: 30].
    #[arg(long)]
    pub bf_threshold: Option<f64>,
    /// Frailty structure: car, iid or icar [default: car]. With `simulate`,
    /// any method name replaces the configured method list.
    #[arg(long)]
    pub model: Option<String>,
    /// Use the paper's replicate counts instead of the desk-scale defaults.
    #[arg(long)]
    pub paper_scale: bool,
    /// Write intermediate tables and log progress.
    #[arg(long)]
    pub diagnostics: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

impl Common {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }

    pub fn replicates(&self) -> usize {
        self.mc_replicates.unwrap_or(if self.paper_scale { 999 } else { 199 })
    }
}

#[derive(Args, Debug, Clone)]
pub struct Inputs {
    /// Unit table: unit_id,x,y.
    #[arg(long)]
    pub units: PathBuf,
    /// Adjacency edge list: unit_id_a,unit_id_b.
    #[arg(long)]
    pub adjacency: PathBuf,
    /// Individuals: unit_id,time,event[,covariates...].
    #[arg(long)]
    pub individuals: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScanArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub common: Common,
    /// Secondary clusters: disjoint, or center-outside.
    #[arg(long, default_value = "disjoint")]
    pub secondary_rule: String,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub common: Common,
    /// exponential or logrank.
    #[arg(long)]
    pub method: String,
    /// Ignore covariates instead of adjusting for them.
    #[arg(long)]
    pub no_adjust: bool,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long, conflicts_with = "study")]
    pub config: Option<PathBuf>,
    /// Built-in study: figure1, figure3, censoring or thresholds.
    #[arg(long)]
    pub study: Option<String>,
    /// Override the number of simulated datasets per grid cell.
    #[arg(long)]
    pub replicates: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

/// A failure tagged with the input or stage it concerns.
#[derive(Debug)]
pub struct Failure {
    pub tag: &'static str,
    pub error: frailscan::Error,
}

pub trait Tag<T> {
    fn tag(self, tag: &'static str) -> Result<T, Failure>;
}

impl<T> Tag<T> for frailscan::Result<T> {
    fn tag(self, tag: &'static str) -> Result<T, Failure> {
        self.map_err(|error| Failure { tag, error })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Scan(a) => &a.common,
        Command::Baseline(a) => &a.common,
        Command::Simulate(a) => &a.common,
    };
    let level = if common.diagnostics { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if common.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(common.threads).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    let outcome = match cli.command {
        Command::Scan(a) => commands::scan(&a),
        Command::Baseline(a) => commands::baseline(&a),
        Command::Simulate(a) => commands::simulate(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let one_line = f.error.to_string().replace('\n', " ");
            if f.error.is_input_error() {
                eprintln!("E_INPUT {}: {one_line}", f.tag);
                ExitCode::from(2)
            } else {
                eprintln!("E_NUMERIC {}: {one_line}", f.tag);
                ExitCode::from(3)
            }
        }
    }
}
