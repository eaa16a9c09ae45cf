use std::path::PathBuf;

use apc_re::effects::ModelSpec;
use apc_re::simulation::StartPolicy;
use apc_re::Factor;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "apcre",
    version,
    about = "Age-period-cohort designs, random-effect constraints and REML diagnostics"
)]
pub struct Cli {
    /// Directory for output files and the run manifest.
    #[arg(long, global = true, env = "APCRE_OUT_DIR", default_value = "apcre-out")]
    pub out_dir: PathBuf,

    /// Run sweeps and replicates on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Write a design matrix with rank and null-space diagnostics.
    Design(DesignArgs),
    /// Sweep one-random-effect designs and check that the data carry no
    /// weight on the random block's level or slope.
    Verify(VerifyArgs),
    /// Run the period/cohort shrinkage simulation.
    Simulate(SimulateArgs),
    /// Scan the profiled restricted likelihood of one simulated dataset.
    Profile(ProfileArgs),
    /// Fit cell-mean data under several random-effect choices.
    Fit(FitArgs),
    /// Split the cohort quadratic column into absorbed and cohort-only parts.
    Decompose(DecomposeArgs),
    /// Rerun the command recorded in a manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Design(_) => "design",
            Command::Verify(_) => "verify",
            Command::Simulate(_) => "simulate",
            Command::Profile(_) => "profile",
            Command::Fit(_) => "fit",
            Command::Decompose(_) => "decompose",
            Command::Replay(_) => "replay",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Command::Simulate(s) => Some(s.seed),
            Command::Profile(p) => Some(p.seed),
            _ => None,
        }
    }
}

fn parse_factor(s: &str) -> Result<Factor, String> {
    s.parse().map_err(|e: apc_re::ApcError| e.to_string())
}

fn parse_spec(s: &str) -> Result<ModelSpec, String> {
    s.parse().map_err(|e: apc_re::ApcError| e.to_string())
}

fn parse_policy(s: &str) -> Result<StartPolicy, String> {
    s.parse().map_err(|e: apc_re::ApcError| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DesignArgs {
    #[arg(long)]
    pub a: usize,
    #[arg(long)]
    pub p: usize,
    /// Factors in the model.
    #[arg(long, value_delimiter = ',', value_parser = parse_factor, default_value = "age,period,cohort")]
    pub factors: Vec<Factor>,
    /// Factors coded as random (indicator) blocks; the rest are fixed.
    #[arg(long = "re", value_delimiter = ',', value_parser = parse_factor)]
    pub random: Vec<Factor>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 3)]
    pub a_min: usize,
    #[arg(long, default_value_t = 30)]
    pub a_max: usize,
    #[arg(long, default_value_t = 3)]
    pub p_min: usize,
    #[arg(long, default_value_t = 30)]
    pub p_max: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.1,1,10,100,1000")]
    pub lambdas: Vec<f64>,
    /// The single random factor.
    #[arg(long = "re", value_parser = parse_factor, default_value = "cohort")]
    pub re_factor: Factor,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 6)]
    pub a: usize,
    #[arg(long, default_value_t = 5)]
    pub p: usize,
    /// Quadratic magnitudes; defaults to 0, 0.05, ..., 1.
    #[arg(long, value_delimiter = ',')]
    pub m: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub sd: f64,
    #[arg(long, default_value_t = 20_190_601)]
    pub seed: u64,
    /// Absolute fitted slope below which a block counts as shrunk.
    #[arg(long, default_value_t = 1e-2)]
    pub threshold: f64,
    #[arg(long, value_parser = parse_policy, default_value = "multistart_global")]
    pub policy: StartPolicy,
    /// Also fit -m for every m and report its period count.
    #[arg(long)]
    pub check_symmetry: bool,
    /// Exit with status 3 unless m = 0 has no period-shrunk fits and every
    /// m >= 0.7 has all of them.
    #[arg(long)]
    pub check_endpoints: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ProfileArgs {
    #[arg(long, default_value_t = 0.0)]
    pub m: f64,
    #[arg(long, default_value_t = 0)]
    pub replicate: usize,
    #[arg(long, default_value_t = 6)]
    pub a: usize,
    #[arg(long, default_value_t = 5)]
    pub p: usize,
    #[arg(long, default_value_t = 0.01)]
    pub sd: f64,
    #[arg(long, default_value_t = 20_190_601)]
    pub seed: u64,
    /// Smallest positive variance on each axis.
    #[arg(long, default_value_t = 1e-7)]
    pub lo: f64,
    #[arg(long, default_value_t = 10.0)]
    pub hi: f64,
    /// Log-spaced points per axis (plus zero).
    #[arg(long, default_value_t = 33)]
    pub n: usize,
    /// Exit with status 3 unless at least two maxima differ by more than this.
    #[arg(long)]
    pub min_gap: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// CSV with header `age_index,period_index,value[,weight]`.
    #[arg(long)]
    pub data: PathBuf,
    /// Random factors of one model, e.g. `p,c`; repeat for several models.
    /// Defaults to all six one- and two-random-factor choices.
    #[arg(long = "spec", value_parser = parse_spec)]
    pub specs: Vec<ModelSpec>,
    /// Exit with status 3 if nonlinear components differ across models by
    /// more than this relative amount.
    #[arg(long)]
    pub check_nonlinear: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub a: usize,
    #[arg(long)]
    pub p: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}
