//! End-to-end compositions used by the command-line front end. Each function
//! here is a plain sequence of library calls, so running it in-process gives
//! exactly what the CLI writes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::alignment::AlignmentError;
use crate::autodiff::{
    evaluate_loss, pretrain_trunk, score, synthetic_dataset, AutodiffError, LossWeights, ModelConfig, SgdConfig,
    SyntheticSpec, TaskScores, ToyModel, Variant,
};
use crate::geometry::{project_map, CameraIntrinsics, GeometryError, LabeledCloud};
use crate::io::{self, FrameRecord, IoError, SogGrid};
use crate::metrics::{
    classes_present, depth_metrics, evaluate_depth_aligned, seg_iou, DepthMetrics, MetricsError, SegMetrics,
};
use crate::patchwise::{
    run_patchwise_epochs, run_plain_epochs, EpochReport, PatchMode, PatchwiseConfig, PatchwiseError,
};
use crate::pseudolabel::{fuse_multi_resolution, PseudoLabelError, ResolutionEstimate};
use crate::raster::{Raster, RasterError, UNLABELED};
use crate::voxel::{voting_filter, voxelize, GridSpec, DEFAULT_MIN_POINTS};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    PseudoLabel(#[from] PseudoLabelError),
    #[error(transparent)]
    Patchwise(#[from] PatchwiseError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("config: {0}")]
    Config(String),
    #[error("{context}")]
    Context {
        context: String,
        #[source]
        source: Box<PipelineError>,
    },
}

/// `Display` of an error followed by its sources, `: `-separated.
pub fn error_chain(e: &(dyn std::error::Error + 'static)) -> String {
    let mut out = e.to_string();
    let mut next = e.source();
    while let Some(s) = next {
        out.push_str(": ");
        out.push_str(&s.to_string());
        next = s.source();
    }
    out
}

impl PipelineError {
    pub fn context(self, context: impl Into<String>) -> Self {
        PipelineError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True when the failure comes from the inputs rather than from a
    /// computation that went wrong (training divergence, internal faults).
    pub fn is_input_error(&self) -> bool {
        match self {
            PipelineError::Context { source, .. } => source.is_input_error(),
            PipelineError::Autodiff(AutodiffError::Diverged(_)) => false,
            PipelineError::Patchwise(PatchwiseError::Autodiff(AutodiffError::Diverged(_))) => false,
            PipelineError::Patchwise(PatchwiseError::TrainStepMutatedFrozen { .. }) => false,
            _ => true,
        }
    }
}

/// Disparity of a frame multiplied by its manual scale.
pub fn scaled_disparity(disparity: &Raster<f64>, scale: f64) -> Raster<f64> {
    if scale == 1.0 {
        disparity.clone()
    } else {
        disparity.map(|&d| d * scale)
    }
}

pub fn project_frame(
    disparity: &Raster<f64>,
    labels: &Raster<u8>,
    scale: f64,
    k: &CameraIntrinsics,
    min_disparity: f64,
) -> Result<LabeledCloud, PipelineError> {
    Ok(project_map(
        &scaled_disparity(disparity, scale),
        labels,
        k,
        min_disparity,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancyParams {
    pub spec: GridSpec,
    pub min_disparity: f64,
    pub min_points: u32,
}

impl Default for OccupancyParams {
    fn default() -> Self {
        Self {
            spec: GridSpec::default(),
            min_disparity: 0.0,
            min_points: DEFAULT_MIN_POINTS,
        }
    }
}

/// Per-frame numbers written to the summary CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSummary {
    pub frame_id: String,
    pub points: usize,
    pub out_of_grid: usize,
    pub voxels_before_vote: usize,
    pub voxels: usize,
    pub labeled_voxels: usize,
}

pub const SUMMARY_HEADER: &str = "frame_id,points,out_of_grid,voxels_before_vote,voxels,labeled_voxels";

impl FrameSummary {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.frame_id, self.points, self.out_of_grid, self.voxels_before_vote, self.voxels, self.labeled_voxels
        )
    }
}

/// Projection, voxelization, voting and label resolution of one frame.
pub fn occupancy_from_rasters(
    frame_id: &str,
    disparity: &Raster<f64>,
    labels: &Raster<u8>,
    scale: f64,
    k: &CameraIntrinsics,
    params: &OccupancyParams,
) -> Result<(SogGrid, FrameSummary), PipelineError> {
    let cloud = project_frame(disparity, labels, scale, k, params.min_disparity)?;
    let raw = voxelize(&cloud, &params.spec);
    let kept = voting_filter(&raw.grid, params.min_points);
    let sog = SogGrid::from_occupancy(&kept);
    let summary = FrameSummary {
        frame_id: frame_id.to_string(),
        points: cloud.len(),
        out_of_grid: raw.dropped,
        voxels_before_vote: raw.grid.occupied(),
        voxels: sog.occupied(),
        labeled_voxels: sog.labels.iter().filter(|&&l| l != crate::voxel::FREE).count(),
    };
    Ok((sog, summary))
}

/// [`occupancy_from_rasters`] on the files named by a manifest record.
pub fn make_occupancy_frame(
    record: &FrameRecord,
    k: &CameraIntrinsics,
    params: &OccupancyParams,
) -> Result<(SogGrid, FrameSummary), PipelineError> {
    let disparity = io::read_disparity(&record.disparity)?;
    let labels = io::read_pgm(&record.labels)?;
    occupancy_from_rasters(&record.frame_id, &disparity, &labels, record.scale, k, params)
        .map_err(|e| e.context(format!("frame {}", record.frame_id)))
}

/// Output file of a frame inside the dataset directory.
pub fn sog_path(out_dir: &Path, frame_id: &str) -> PathBuf {
    out_dir.join(format!("{frame_id}.sog"))
}

/// Build a frame and write its `SOG1` file.
pub fn emit_occupancy_frame(
    record: &FrameRecord,
    k: &CameraIntrinsics,
    params: &OccupancyParams,
    out_dir: &Path,
) -> Result<FrameSummary, PipelineError> {
    let (sog, summary) = make_occupancy_frame(record, k, params)?;
    io::write_sog(&sog_path(out_dir, &record.frame_id), &sog)?;
    Ok(summary)
}

/// Summary CSV over the frames that succeeded, in the given order.
pub fn summary_csv<'a>(rows: impl IntoIterator<Item = &'a FrameSummary>) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Everything the metrics command reports.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub aligned: bool,
    pub depth: DepthMetrics,
    pub seg: Option<SegMetrics>,
}

/// Default validity mask: finite, positive ground truth.
pub fn valid_gt_mask(gt: &Raster<f64>) -> Raster<bool> {
    gt.map(|&g| g.is_finite() && g > 0.0)
}

pub fn evaluate_frame(
    pred: &Raster<f64>,
    gt: &Raster<f64>,
    mask: Option<&Raster<bool>>,
    align: bool,
    labels: Option<(&Raster<u8>, &Raster<u8>)>,
    classes: Option<&[u8]>,
) -> Result<MetricsReport, PipelineError> {
    let default_mask;
    let mask = match mask {
        Some(m) => m,
        None => {
            default_mask = valid_gt_mask(gt);
            &default_mask
        }
    };
    let depth = if align {
        evaluate_depth_aligned(pred, gt, mask)?
    } else {
        depth_metrics(pred, gt, mask)?
    };
    let seg = match labels {
        Some((p, g)) => {
            let classes = match classes {
                Some(c) => c.to_vec(),
                None => classes_present(p, g, UNLABELED),
            };
            Some(seg_iou(p, g, &classes)?)
        }
        None => None,
    };
    Ok(MetricsReport {
        aligned: align,
        depth,
        seg,
    })
}

impl MetricsReport {
    /// Ordered `(key, value)` pairs; IoU of a class with an empty union is `nan`.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("aligned".to_string(), self.aligned.to_string()),
            ("rmse".to_string(), self.depth.rmse.to_string()),
            ("a1".to_string(), self.depth.a1.to_string()),
            ("a2".to_string(), self.depth.a2.to_string()),
            ("a3".to_string(), self.depth.a3.to_string()),
        ];
        if let Some(seg) = &self.seg {
            out.push(("mean_iou".to_string(), seg.mean_iou.to_string()));
            for (c, iou) in &seg.per_class_iou {
                out.push((format!("iou_{c}"), iou.map_or("nan".to_string(), |v| v.to_string())));
            }
        }
        out
    }

    pub fn key_value_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Header and single data row with the same columns as [`Self::entries`].
    pub fn csv(&self) -> String {
        let entries = self.entries();
        let keys: Vec<&str> = entries.iter().map(|(k, _)| k.as_str()).collect();
        let values: Vec<&str> = entries.iter().map(|(_, v)| v.as_str()).collect();
        format!("{}\n{}\n", keys.join(","), values.join(","))
    }
}

/// Read estimate files, fuse them and return the merged map. `native`
/// defaults to each file's own size.
pub fn boost_merge(
    inputs: &[(PathBuf, Option<(usize, usize)>)],
    target: (usize, usize),
) -> Result<Raster<f64>, PipelineError> {
    let estimates = inputs
        .iter()
        .map(|(path, native)| {
            let disparity = io::read_disparity(path)?;
            let native_resolution = native.unwrap_or(disparity.dims());
            Ok(ResolutionEstimate {
                disparity,
                native_resolution,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(fuse_multi_resolution(&estimates, target)?)
}

/// The shipped training experiment: a dual-head toy model on the synthetic
/// dataset, trained patch-wise (or plainly) for a fixed number of epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoConfig {
    pub variant: Variant,
    pub train_percentage: f64,
    /// Restrict patches to this leading fraction of trunk slots (1.0 = all slots).
    pub encoder_percentage: f64,
    pub epochs: usize,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub mode: PatchMode,
    pub plain: bool,
    pub data: SyntheticSpec,
    pub weights: LossWeights,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            variant: Variant::V2,
            train_percentage: 0.5,
            encoder_percentage: 1.0,
            epochs: 200,
            seed: 7,
            pretrain_epochs: 100,
            learning_rate: 0.1,
            batch_size: 16,
            hidden_dim: 12,
            mode: PatchMode::Snapshot,
            plain: false,
            data: SyntheticSpec::default(),
            weights: LossWeights::default(),
        }
    }
}

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, PipelineError> {
    value
        .parse()
        .map_err(|_| PipelineError::Config(format!("{key}: cannot parse {value:?}")))
}

impl DemoConfig {
    /// Override fields from flat `key=value` pairs. Unknown keys are rejected.
    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<(), PipelineError> {
        for (key, value) in map {
            let v = value.as_str();
            match key.as_str() {
                "variant" => {
                    self.variant =
                        Variant::parse(v).ok_or_else(|| PipelineError::Config(format!("unknown variant {v:?}")))?
                }
                "percentage" | "train_percentage" => self.train_percentage = parse_field(key, v)?,
                "encoder_percentage" => self.encoder_percentage = parse_field(key, v)?,
                "epochs" => self.epochs = parse_field(key, v)?,
                "seed" => self.seed = parse_field(key, v)?,
                "pretrain_epochs" => self.pretrain_epochs = parse_field(key, v)?,
                "lr" | "learning_rate" => self.learning_rate = parse_field(key, v)?,
                "batch_size" => self.batch_size = parse_field(key, v)?,
                "hidden_dim" => self.hidden_dim = parse_field(key, v)?,
                "sequential" => {
                    self.mode = if parse_field::<bool>(key, v)? {
                        PatchMode::Sequential
                    } else {
                        PatchMode::Snapshot
                    }
                }
                "plain" => self.plain = parse_field(key, v)?,
                "data_seed" => self.data.seed = parse_field(key, v)?,
                "samples" => self.data.samples = parse_field(key, v)?,
                "ssi_weight" => self.weights.ssi = parse_field(key, v)?,
                "bce_weight" => self.weights.bce = parse_field(key, v)?,
                other => return Err(PipelineError::Config(format!("unknown key {other:?}"))),
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(self.train_percentage > 0.0 && self.train_percentage <= 1.0) {
            return bad("percentage must lie in (0, 1]");
        }
        if !(self.encoder_percentage > 0.0 && self.encoder_percentage <= 1.0) {
            return bad("encoder_percentage must lie in (0, 1]");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size < 2 || self.hidden_dim == 0 || self.data.samples < 2 {
            return bad("batch_size and samples must be at least 2, hidden_dim at least 1");
        }
        if !(self.weights.ssi >= 0.0 && self.weights.bce >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            weights: self.weights,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.data.input_dim,
            hidden_dim: self.hidden_dim,
            variant: self.variant,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct DemoOutcome {
    /// Joint loss on the full dataset after initialization (and pretraining).
    pub initial_loss: f64,
    pub reports: Vec<EpochReport>,
    pub scores: TaskScores,
    pub model: ToyModel,
}

impl DemoOutcome {
    pub fn summary_line(&self) -> String {
        format!(
            "initial_loss={} joint_loss={} rmse_aligned={} seg_accuracy={}",
            self.initial_loss, self.scores.joint_loss, self.scores.rmse_aligned, self.scores.seg_accuracy
        )
    }
}

pub fn run_demo(config: &DemoConfig) -> Result<DemoOutcome, PipelineError> {
    config.validate()?;
    let data = synthetic_dataset(config.data);
    let sgd = config.sgd();
    let mut model = ToyModel::new(config.model_config(), config.seed);
    if config.variant == Variant::V3 {
        pretrain_trunk(&mut model, &data, config.pretrain_epochs, &sgd)?;
    }
    let initial_loss = evaluate_loss(&model, &data, sgd.weights)?;
    let reports = if config.plain {
        run_plain_epochs(&mut model, config.epochs, &data, &sgd)?
    } else {
        let pw = PatchwiseConfig {
            train_percentage: config.train_percentage,
            encoder_fraction: config.encoder_percentage,
            mode: config.mode,
        };
        run_patchwise_epochs(&mut model, &pw, config.epochs, &data, &sgd)?
    };
    let scores = score(&model, &data, sgd.weights)?;
    Ok(DemoOutcome {
        initial_loss,
        reports,
        scores,
        model,
    })
}
