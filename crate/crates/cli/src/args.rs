use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub const BUILD_ID: &str = concat!("autodyn ", env!("CARGO_PKG_VERSION"));

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  bad input (unreadable or malformed files, invalid flags)
  2  model error (singular system, divergence, no candidate converged)
  3  fit did not converge (results are still written)

Config files (--config) hold flat `key=value` lines, keys being long flag
names of the subcommand (e.g. `lambda2=0.01`); flags given on the command
line override the file.";

#[derive(Debug, Parser)]
#[command(name = "autodyn", version = env!("CARGO_PKG_VERSION"), about = "Semiparametric autonomous ODE models for sparse longitudinal curves", after_help = EXIT_CODES)]
pub struct Cli {
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Flat key=value file of subcommand flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Record wall time in the manifest (makes manifests non-reproducible).
    #[arg(long, global = true)]
    pub record_timing: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Simulate(SimulateArgs),
    /// Fit the model to a dataset.
    Fit(FitArgs),
    /// Rank candidate bases by approximate cross-validation.
    Select(SelectArgs),
    /// Two-stage baseline estimate of g.
    TwoStage(TwoStageArgs),
    /// Replicated comparison of the hierarchical and two-stage estimators.
    Compare(CompareArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Fit(_) => "fit",
            Command::Select(_) => "select",
            Command::TwoStage(_) => "two-stage",
            Command::Compare(_) => "compare",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeArg {
    Moderate,
    Sparse,
    VeryDense,
}

impl From<RegimeArg> for autodyn::Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Moderate => autodyn::Regime::Moderate,
            RegimeArg::Sparse => autodyn::Regime::Sparse,
            RegimeArg::VeryDense => autodyn::Regime::VeryDense,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "moderate")]
    pub regime: RegimeArg,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_subjects: Option<usize>,
    #[arg(long)]
    pub curves_per_subject: Option<usize>,
    #[arg(long)]
    pub sigma_eps: Option<f64>,
    #[arg(long)]
    pub sigma_theta: Option<f64>,
}

/// Spline basis flags shared by the fitting commands.
#[derive(Debug, Clone, Args, Serialize)]
pub struct BasisArgs {
    /// Knot centres of the cubic uniform-layout basis (comma separated).
    #[arg(long, value_delimiter = ',', conflicts_with = "m")]
    pub knots: Option<Vec<f64>>,
    /// Number of equally spaced knots `offset + j/M` (default 4).
    #[arg(long = "M")]
    pub m: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub knot_offset: f64,
    /// Leading basis functions removed (forces g(lo) = 0, and g′(lo) = 0 for 2).
    #[arg(long, default_value_t = 0)]
    pub drop_leading: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PenaltyArgs {
    #[arg(long, default_value_t = 0.04)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda3: f64,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub adaptive_lm: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub adaptive_nr: bool,
    /// Use the true initial conditions from the ground-truth sidecar.
    #[arg(long)]
    pub a_known: bool,
    /// Ground-truth sidecar (default: truth.json next to the data file).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Flatness onset A of the penalty λ_R ∫_A^{2A} (g′)².
    #[arg(long = "A")]
    pub flat_a: Option<f64>,
    #[arg(long = "lambdaR", default_value_t = 0.0)]
    pub lambda_r: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub grid_h: f64,
    #[arg(long, default_value_t = 200)]
    pub max_lm_iters: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub basis: BasisArgs,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    /// Points of the ĝ grid over the observed value range.
    #[arg(long, default_value_t = 201)]
    pub grid_n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionArg {
    Aic,
    Bic,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SelectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON list of candidates; default: equally spaced M = 2..6.
    #[arg(long)]
    pub candidates_file: Option<PathBuf>,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    /// Also run the stepwise knot-candidate heuristic.
    #[arg(long, value_enum)]
    pub stepwise: Option<CriterionArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Arg {
    LocalQuadratic,
    Basis,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct TwoStageArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "local-quadratic")]
    pub stage2: Stage2Arg,
    #[command(flatten)]
    pub basis: BasisArgs,
    /// Ground truth; when given, per-region ISE is written.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 401)]
    pub grid_n: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct CompareArgs {
    #[arg(long, value_enum, default_value = "sparse")]
    pub regime: RegimeArg,
    #[arg(long, default_value_t = 10)]
    pub replicates: usize,
    /// Replicate r uses seed `seed + r`.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also fit the hierarchical model with estimated initial conditions.
    #[arg(long)]
    pub with_a_unknown: bool,
}
