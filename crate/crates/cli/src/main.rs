use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use semocc::autodiff::Variant;
use semocc::io;
use semocc::patchwise::{reports_to_csv, PatchMode};
use semocc::pipeline::{
    boost_merge, emit_occupancy_frame, error_chain, evaluate_frame, project_frame, run_demo, summary_csv, DemoConfig,
    FrameSummary, OccupancyParams, PipelineError,
};
use semocc::raster::{Raster, UNLABELED};
use semocc::voxel::{GridSpec, DEFAULT_MIN_POINTS, DEFAULT_VOXEL_SIZE};

#[derive(Parser)]
#[command(name = "semocc", version, about = "Semantic occupancy toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lift a disparity map (and labels) into an ASCII point cloud.
    Project(ProjectArgs),
    /// Build SOG1 occupancy grids for every frame of a manifest.
    MakeOccupancy(OccupancyArgs),
    /// Depth and segmentation metrics of a prediction against ground truth.
    Metrics(MetricsArgs),
    /// Fuse disparity estimates made at several resolutions.
    BoostMerge(BoostArgs),
    /// Train the toy dual-head model patch-wise on the synthetic dataset.
    PatchwiseDemo(DemoArgs),
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    intrinsics: PathBuf,
    /// Disparity map (PFM).
    #[arg(long)]
    disparity: PathBuf,
    /// Class-id map (PGM); without it every point is unlabeled.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Multiplier applied to disparity before projection.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    min_disparity: f64,
}

#[derive(Args)]
struct OccupancyArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    intrinsics: PathBuf,
    /// Grid size as XxYxZ voxels.
    #[arg(long, value_parser = parse_grid, default_value = "256x256x32")]
    grid: [usize; 3],
    #[arg(long, default_value_t = DEFAULT_VOXEL_SIZE)]
    voxel_size: f64,
    /// Grid origin "x,y,z" in meters; centered on the camera when omitted.
    #[arg(long, value_parser = parse_origin, allow_hyphen_values = true)]
    origin: Option<[f64; 3]>,
    #[arg(long, default_value_t = DEFAULT_MIN_POINTS)]
    min_points: u32,
    #[arg(long, default_value_t = 0.0)]
    min_disparity: f64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Frames processed concurrently; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct MetricsArgs {
    /// Predicted disparity (PFM).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth disparity (PFM).
    #[arg(long)]
    gt: PathBuf,
    /// Validity mask (PGM, non-zero = valid); positive ground truth by default.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Fit scale and shift of the prediction before scoring.
    #[arg(long)]
    align: bool,
    #[arg(long, requires = "gt_labels")]
    pred_labels: Option<PathBuf>,
    #[arg(long, requires = "pred_labels")]
    gt_labels: Option<PathBuf>,
    /// Comma-separated class ids; defaults to every id present.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<u8>>,
    /// Also write a header + row CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BoostArgs {
    /// Estimate files as PATH or PATH:WxH (native resolution).
    #[arg(long, num_args = 1.., required = true)]
    estimates: Vec<String>,
    /// Output size WxH; the largest estimate's size when omitted.
    #[arg(long, value_parser = parse_size)]
    target_size: Option<(usize, usize)>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    /// Flat key=value file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fraction of parameter slots trained per patch.
    #[arg(long)]
    percentage: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Regression-only epochs before training (v3 only).
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Restrict patches to this leading fraction of trunk slots (an
    /// interpretation of "encoder percentage"; heads always train).
    #[arg(long)]
    encoder_percentage: Option<f64>,
    /// Each patch starts from the previous patch's result instead of the
    /// common snapshot (a non-default variant, for comparison).
    #[arg(long)]
    sequential: bool,
    /// Train every slot at once (no patches).
    #[arg(long, conflicts_with = "sequential")]
    plain: bool,
    /// Per-patch CSV report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Trained parameters in SDPT format.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn parse_triplet<T: std::str::FromStr>(s: &str, sep: char) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(sep).collect();
    if parts.len() != 3 {
        return Err(format!("expected three values separated by '{sep}', got {s:?}"));
    }
    let parse = |p: &str| p.trim().parse::<T>().map_err(|_| format!("cannot parse {p:?}"));
    Ok([parse(parts[0])?, parse(parts[1])?, parse(parts[2])?])
}

fn parse_grid(s: &str) -> Result<[usize; 3], String> {
    parse_triplet(s, 'x')
}

fn parse_origin(s: &str) -> Result<[f64; 3], String> {
    parse_triplet(s, ',')
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    match (w.parse(), h.parse()) {
        (Ok(w), Ok(h)) if w > 0 && h > 0 => Ok((w, h)),
        _ => Err(format!("expected positive WxH, got {s:?}")),
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| format!("expected v1, v2 or v3, got {s:?}"))
}

/// Failure with the exit code it maps to.
enum Failure {
    Input(anyhow::Error),
    Internal(anyhow::Error),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_input_error() {
            Failure::Input(e.into())
        } else {
            Failure::Internal(e.into())
        }
    }
}

impl From<io::IoError> for Failure {
    fn from(e: io::IoError) -> Self {
        Failure::Input(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

type CmdResult = Result<(), Failure>;

fn write_output(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Internal)
}

fn cmd_project(a: ProjectArgs) -> CmdResult {
    let k = io::read_intrinsics(&a.intrinsics)?;
    if !(a.scale.is_finite() && a.scale > 0.0) {
        return Err(anyhow!("--scale must be positive, got {}", a.scale).into());
    }
    let disparity = io::read_disparity(&a.disparity)?;
    let labels = match &a.labels {
        Some(p) => io::read_pgm(p)?,
        None => Raster::filled(disparity.width(), disparity.height(), UNLABELED),
    };
    let cloud = project_frame(&disparity, &labels, a.scale, &k, a.min_disparity)
        .map_err(|e| e.context(format!("{} / labels", a.disparity.display())))?;
    info!("projected {} points", cloud.len());
    let text = io::format_cloud_ascii(&cloud);
    match &a.out {
        Some(p) => write_output(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_make_occupancy(a: OccupancyArgs) -> CmdResult {
    let k = io::read_intrinsics(&a.intrinsics)?;
    let records = io::load_manifest(&a.manifest)?;
    let mut spec = GridSpec::ego_centered(a.grid, a.voxel_size);
    if let Some(origin) = a.origin {
        spec.origin = origin;
    }
    spec.validate().map_err(|e| anyhow!("grid: {e}"))?;
    let params = OccupancyParams {
        spec,
        min_disparity: a.min_disparity,
        min_points: a.min_points,
    };
    eprintln!(
        "min_points={}, voxel_size={}",
        params.min_points, params.spec.voxel_size
    );
    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))
        .map_err(Failure::Internal)?;

    let results = process_frames(&records, &k, &params, &a.out_dir, a.jobs)?;
    let mut ok: Vec<&FrameSummary> = Vec::new();
    let mut input_failures = 0usize;
    for (record, result) in records.iter().zip(&results) {
        match result {
            Ok(s) => ok.push(s),
            Err(e) => {
                error!("skipping frame {}: {}", record.frame_id, error_chain(e));
                input_failures += usize::from(e.is_input_error());
            }
        }
    }
    write_output(
        &a.out_dir.join("summary.csv"),
        summary_csv(ok.iter().copied()).as_bytes(),
    )?;
    info!("{} of {} frames written", ok.len(), records.len());
    if !records.is_empty() && ok.is_empty() {
        let msg = anyhow!("all {} frames failed", records.len());
        return Err(if input_failures == records.len() {
            Failure::Input(msg)
        } else {
            Failure::Internal(msg)
        });
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn process_frames(
    records: &[io::FrameRecord],
    k: &semocc::geometry::CameraIntrinsics,
    params: &OccupancyParams,
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<Result<FrameSummary, PipelineError>>, Failure> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Internal(e.into()))?;
    Ok(pool.install(|| {
        records
            .par_iter()
            .map(|r| emit_occupancy_frame(r, k, params, out_dir))
            .collect()
    }))
}

#[cfg(not(feature = "parallel"))]
fn process_frames(
    records: &[io::FrameRecord],
    k: &semocc::geometry::CameraIntrinsics,
    params: &OccupancyParams,
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<Result<FrameSummary, PipelineError>>, Failure> {
    if jobs > 1 {
        warn!("built without the parallel feature; --jobs {jobs} ignored");
    }
    Ok(records
        .iter()
        .map(|r| emit_occupancy_frame(r, k, params, out_dir))
        .collect())
}

fn cmd_metrics(a: MetricsArgs) -> CmdResult {
    let pred = io::read_disparity(&a.pred)?;
    let gt = io::read_disparity(&a.gt)?;
    let mask = match &a.mask {
        Some(p) => Some(io::read_pgm(p)?.map(|&m| m != 0)),
        None => None,
    };
    let labels = match (&a.pred_labels, &a.gt_labels) {
        (Some(p), Some(g)) => Some((io::read_pgm(p)?, io::read_pgm(g)?)),
        _ => None,
    };
    let report = evaluate_frame(
        &pred,
        &gt,
        mask.as_ref(),
        a.align,
        labels.as_ref().map(|(p, g)| (p, g)),
        a.classes.as_deref(),
    )?;
    print!("{}", report.key_value_text());
    if let Some(path) = &a.csv {
        write_output(path, report.csv().as_bytes())?;
    }
    Ok(())
}

fn parse_estimate(s: &str) -> Result<(PathBuf, Option<(usize, usize)>), Failure> {
    if let Some((path, size)) = s.rsplit_once(':') {
        if let Ok(native) = parse_size(size) {
            return Ok((PathBuf::from(path), Some(native)));
        }
    }
    Ok((PathBuf::from(s), None))
}

fn cmd_boost_merge(a: BoostArgs) -> CmdResult {
    let inputs = a
        .estimates
        .iter()
        .map(|s| parse_estimate(s))
        .collect::<Result<Vec<_>, _>>()?;
    let target = match a.target_size {
        Some(t) => t,
        None => {
            let mut best = (0, 0);
            for (path, _) in &inputs {
                let dims = io::read_pfm(path)?.dims();
                if dims.0 * dims.1 > best.0 * best.1 {
                    best = dims;
                }
            }
            best
        }
    };
    let fused = boost_merge(&inputs, target)?;
    io::write_disparity(&a.out, &fused).map_err(|e| Failure::Internal(e.into()))
}

fn demo_config(a: &DemoArgs) -> Result<DemoConfig, Failure> {
    let mut cfg = DemoConfig::default();
    if let Some(path) = &a.config {
        cfg.apply(&io::read_key_values(path)?)?;
    }
    if let Some(v) = a.percentage {
        cfg.train_percentage = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(v) = a.pretrain_epochs {
        cfg.pretrain_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.encoder_percentage {
        cfg.encoder_percentage = v;
    }
    if a.sequential {
        cfg.mode = PatchMode::Sequential;
    }
    if a.plain {
        cfg.plain = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_patchwise_demo(a: DemoArgs) -> CmdResult {
    let cfg = demo_config(&a)?;
    if cfg.mode == PatchMode::Sequential {
        warn!("sequential patch updates differ from the snapshot schedule");
    }
    info!(
        "variant={} percentage={} epochs={} seed={}",
        cfg.variant.name(),
        cfg.train_percentage,
        cfg.epochs,
        cfg.seed
    );
    let outcome = run_demo(&cfg)?;
    if let Some(path) = &a.report {
        write_output(path, reports_to_csv(&outcome.reports).as_bytes())?;
    }
    if let Some(path) = &a.checkpoint {
        write_output(path, &io::encode_checkpoint(&outcome.model.params))?;
    }
    println!("{}", outcome.summary_line());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Project(a) => cmd_project(a),
        Command::MakeOccupancy(a) => cmd_make_occupancy(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::BoostMerge(a) => cmd_boost_merge(a),
        Command::PatchwiseDemo(a) => cmd_patchwise_demo(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
