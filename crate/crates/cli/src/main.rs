mod commands;
mod failure;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spectra_core::prune::Strategy;
use spectra_core::tensor_io::MatrixType;

use failure::{Classify, Failure};

#[derive(Parser, Debug)]
#[command(
    name = "spectra",
    version,
    about = "Spectral analysis of transformer checkpoint series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Analyze every checkpoint of a run into the spectral log CSV.
    Scan(ScanArgs),
    /// Compression onsets, wave velocity and SR-gradient reversal from a log.
    Wave(WaveArgs),
    /// Per-layer α profile at one step, with spread and peak.
    Profile(ProfileArgs),
    /// Power-law and linear scaling fits across models.
    Scaling(ScalingArgs),
    /// Integrate the two-timescale model and check its predictions.
    Simulate(SimulateArgs),
    /// Layer-removal plan from an α profile.
    PrunePlan(PruneArgs),
    /// Initialization tensors with reference spectra and random directions.
    Warmup(WarmupArgs),
    /// Spearman correlation of two CSV columns with a permutation p-value.
    Spearman(SpearmanArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

fn parse_type(s: &str) -> Result<MatrixType, String> {
    s.parse()
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

#[derive(Args, Debug)]
struct ScanArgs {
    /// Run directory holding `step_<N>` checkpoints.
    #[arg(long)]
    root: PathBuf,
    /// Run manifest; defaults to `<root>/run.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for `spectral_log.csv` and its JSON sidecar.
    #[arg(long)]
    out: PathBuf,
    /// Matrix types to analyze (comma separated); defaults to all six tracked types.
    #[arg(long, value_delimiter = ',', value_parser = parse_type)]
    types: Vec<MatrixType>,
    #[arg(long, default_value_t = spectra_core::spectra::DEFAULT_TAIL_FRACTION)]
    tail_fraction: f64,
    /// Also write every singular value to `spectra.csv`.
    #[arg(long)]
    emit_spectra: bool,
}

#[derive(Args, Debug)]
struct WaveArgs {
    /// Spectral log CSV.
    #[arg(long)]
    log: PathBuf,
    /// Onset threshold as a fraction of the first recorded stable rank.
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    /// A single matrix type; by default the stable rank is averaged over tracked types.
    #[arg(long, value_delimiter = ',', value_parser = parse_type)]
    types: Vec<MatrixType>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[arg(long)]
    log: PathBuf,
    /// Defaults to the last step in the log.
    #[arg(long)]
    step: Option<u64>,
    /// Matrix type whose α is profiled.
    #[arg(long, value_delimiter = ',', value_parser = parse_type)]
    types: Vec<MatrixType>,
    /// Boundary size for zone labels; defaults to 2 for 14+ layers, else 1.
    #[arg(long)]
    boundary: Option<usize>,
    /// Output directory for `profile.csv` and `profile.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScalingArgs {
    /// CSV with columns layers,delta_alpha,alpha_max,peak_ratio[,wave_velocity].
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON parameters; missing fields take their defaults.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Overrides the seed in the parameter file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for `trajectory.csv` and `predictions.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[arg(long, value_parser = parse_strategy, default_value = "zone_aware")]
    strategy: Strategy,
    #[arg(long)]
    k: usize,
    /// Profile CSV with `layer` and `alpha` columns (as written by `profile`).
    #[arg(long, conflicts_with = "log")]
    profile: Option<PathBuf>,
    /// Spectral log; the profile and per-layer norms are taken at `--step`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    step: Option<u64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_type)]
    types: Vec<MatrixType>,
    /// CSV with `layer` and `frob_norm` columns, for the magnitude baseline.
    #[arg(long)]
    norms: Option<PathBuf>,
    /// Layer count when no profile is given.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    boundary: Option<usize>,
    #[arg(long, default_value_t = 2)]
    min_gap: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct WarmupArgs {
    /// Reference spectral log; the latest record of each matrix is used.
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Full spectra written by `scan --emit-spectra`.
    #[arg(long)]
    spectra: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, value_delimiter = ',', value_parser = parse_type)]
    types: Vec<MatrixType>,
    #[arg(long, value_enum, default_value_t = Dtype::F64)]
    dtype: Dtype,
}

#[derive(Args, Debug)]
struct SpearmanArgs {
    /// CSV with a header; the first two columns are correlated.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = spectra_core::fits::DEFAULT_PERMUTATIONS)]
    permutations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("SPECTRA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::usage(format!(
            "SPECTRA_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .usage_err("cannot configure the thread pool")
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Scan(a) => commands::scan(a),
        Command::Wave(a) => commands::wave(a),
        Command::Profile(a) => commands::profile(a),
        Command::Scaling(a) => commands::scaling(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::PrunePlan(a) => commands::prune_plan(a),
        Command::Warmup(a) => commands::warmup(a),
        Command::Spearman(a) => commands::spearman(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("spectra: {f}");
            f.exit_code()
        }
    }
}
