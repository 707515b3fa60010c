mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pbdwkit::bench::Method;
use pbdwkit::manifold::HealthFilter;
use pbdwkit::measurement::{ImagingMode, Region};

use config::{BasisKind, ReconMethod};

/// Reduced-order reconstruction of flow fields from voxel-averaged velocity images.
#[derive(Debug, Parser)]
#[command(name = "pbdwkit", version)]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, env = "PBDWKIT_THREADS")]
    threads: Option<usize>,
    /// JSON parameters, flat or under a key named after the subcommand. Flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a snapshot database from the synthetic manifold.
    Generate(GenerateArgs),
    /// Build a global or per-cell reduced basis from a database.
    Basis(BasisArgs),
    /// Reconstruct one field from its observation.
    Reconstruct(ReconstructArgs),
    /// Run the method comparison, the QoI classification and the invariant checks.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct MeasurementArgs {
    /// Imaging mode.
    #[arg(long, value_parser = parse_with::<ImagingMode>)]
    mode: Option<ImagingMode>,
    /// Imaged part of the channel: common, branch1, branch2 or full.
    #[arg(long, value_parser = parse_with::<Region>)]
    region: Option<Region>,
    /// Voxel size in grid points, `AxC`.
    #[arg(long, value_parser = config::parse_block)]
    block: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    patients: Option<usize>,
    /// Snapshots per patient, uniformly spaced over one cycle.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// all, healthy or sick.
    #[arg(long, value_parser = parse_with::<HealthFilter>)]
    health: Option<HealthFilter>,
    /// Axial stations per segment.
    #[arg(long = "grid-l")]
    grid_l: Option<usize>,
    /// Cross-section points per station.
    #[arg(long = "grid-c")]
    grid_c: Option<usize>,
    /// Beam angle in radians.
    #[arg(long)]
    beam_angle: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BasisArgs {
    #[arg(long)]
    db: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<BasisKind>,
    #[arg(long)]
    n_max: Option<usize>,
    /// Center the snapshots before POD (global bases).
    #[arg(long)]
    center: bool,
    /// Build one basis per non-empty (phase, HR) window.
    #[arg(long)]
    partitioned: bool,
    /// Phase window half-width, seconds.
    #[arg(long)]
    tau: Option<f64>,
    /// Heart-rate window half-width, bpm.
    #[arg(long)]
    delta_hr: Option<f64>,
    /// Exit with an error when a basis is capped below `--n-max`.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long, value_enum)]
    method: Option<ReconMethod>,
    #[arg(long)]
    basis: Option<PathBuf>,
    #[arg(long)]
    dictionary: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    delta_hr: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    measurement: MeasurementArgs,
    /// Database holding the target snapshot.
    #[arg(long)]
    target_db: Option<PathBuf>,
    /// Snapshot index inside `--target-db`.
    #[arg(long)]
    index: Option<usize>,
    /// Observation CSV (`voxel_index,component,value`).
    #[arg(long)]
    observation: Option<PathBuf>,
    /// Acquisition time, seconds (observation input).
    #[arg(long)]
    t: Option<f64>,
    /// Heart rate, bpm (observation input).
    #[arg(long)]
    hr: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// File stem of the exported field.
    #[arg(long)]
    stem: Option<String>,
    /// Record the apply time in the sidecar.
    #[arg(long)]
    timings: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Held-out database used to tune the partition windows.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated method labels.
    #[arg(long, value_delimiter = ',', value_parser = parse_with::<Method>)]
    methods: Option<Vec<Method>>,
    /// Reduced dimensions, e.g. `1-10,15,20`.
    #[arg(long)]
    n_grid: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    delta_hr: Option<f64>,
    #[command(flatten)]
    measurement: MeasurementArgs,
    /// Skip the flow-ratio classification.
    #[arg(long)]
    no_qoi: bool,
    #[arg(long)]
    qoi_healthy: Option<usize>,
    #[arg(long)]
    qoi_sick: Option<usize>,
    #[arg(long)]
    qoi_seed: Option<u64>,
    #[arg(long)]
    qoi_n: Option<usize>,
    /// Record apply times. Timed reports are machine dependent.
    #[arg(long)]
    timings: bool,
}

fn parse_with<T: std::str::FromStr<Err = pbdwkit::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: pbdwkit::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), commands::CliError> {
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(pbdwkit::Error::Validation("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| pbdwkit::Error::Config(format!("thread pool: {e}")))?;
    }
    let ctx = commands::Context {
        workdir: cli.workdir,
        config: cli.config,
        force: cli.force,
        threads: cli.threads,
    };
    match cli.command {
        Command::Generate(a) => commands::generate(&ctx, a),
        Command::Basis(a) => commands::basis(&ctx, a),
        Command::Reconstruct(a) => commands::reconstruct(&ctx, a),
        Command::Bench(a) => commands::bench(&ctx, a),
    }
}
