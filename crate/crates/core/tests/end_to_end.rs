//! Cross-module tests through the public API only.

use semocc::alignment::{apply_scale_shift, fit_scale_shift};
use semocc::autodiff::{synthetic_dataset, ModelConfig, SgdConfig, SyntheticSpec, ToyModel};
use semocc::geometry::CameraIntrinsics;
use semocc::io::{self, SogGrid};
use semocc::patchwise::{param_checksum, run_patchwise_epochs, PatchwiseConfig};
use semocc::pipeline::{evaluate_frame, occupancy_from_rasters, OccupancyParams};
use semocc::pseudolabel::{fuse_multi_resolution, ResolutionEstimate};
use semocc::voxel::{GridSpec, FREE};
use semocc::Raster;

fn camera() -> CameraIntrinsics {
    CameraIntrinsics::new(400.0, 400.0, 20.0, 15.0, 0.5).unwrap()
}

#[test]
fn flat_wall_lands_in_one_voxel_slab() {
    // Disparity 20 everywhere puts every pixel at z = 0.5 * 400 / 20 = 10 m.
    let disparity = Raster::from_fn(40, 30, |_, _| 20.0);
    let labels = Raster::from_fn(40, 30, |u, _| if u < 20 { 1 } else { 2 });
    let params = OccupancyParams {
        spec: GridSpec::new([8, 8, 8], 0.5, [-2.0, -2.0, 8.0]).unwrap(),
        min_disparity: 0.0,
        min_points: 1,
    };
    let (sog, summary) = occupancy_from_rasters("wall", &disparity, &labels, 1.0, &camera(), &params).unwrap();
    assert_eq!(summary.points, 1200);
    assert_eq!(summary.out_of_grid, 0);

    let spec = params.spec;
    let k_wall = 4; // (10 - 8) / 0.5
    for (idx, &count) in sog.counts.iter().enumerate() {
        let k = idx / (spec.dims[0] * spec.dims[1]);
        if count > 0 {
            assert_eq!(k, k_wall, "voxel {idx} off the wall slab");
            assert_ne!(sog.labels[idx], FREE);
        }
    }
    assert_eq!(sog.counts.iter().map(|&c| c as usize).sum::<usize>(), 1200);

    let bytes = io::encode_sog(&sog);
    let back: SogGrid = io::decode_sog(&bytes).unwrap();
    assert_eq!(back, sog);
}

#[test]
fn sidecar_scale_halves_depth() {
    let disparity = Raster::from_fn(40, 30, |_, _| 10.0);
    let labels = Raster::from_fn(40, 30, |_, _| 0u8);
    let params = OccupancyParams {
        spec: GridSpec::new([8, 8, 60], 0.5, [-2.0, -2.0, 0.0]).unwrap(),
        min_disparity: 0.0,
        min_points: 1,
    };
    let plane = |scale| {
        let (sog, _) = occupancy_from_rasters("s", &disparity, &labels, scale, &camera(), &params).unwrap();
        let slab = 8 * 8;
        let first = sog.counts.iter().position(|&c| c > 0).unwrap() / slab;
        let last = sog.counts.iter().rposition(|&c| c > 0).unwrap() / slab;
        assert_eq!(first, last);
        assert_eq!(sog.counts.iter().map(|&c| c as usize).sum::<usize>(), 1200);
        first
    };
    // z = 20 m at scale 1, 10 m at scale 2.
    assert_eq!(plane(1.0), 40);
    assert_eq!(plane(2.0), 20);
}

#[test]
fn fused_pseudo_label_evaluates_perfectly_after_alignment() {
    let truth = Raster::from_fn(8, 8, |u, v| 1.0 + 0.25 * u as f64 + 0.5 * v as f64);
    let coarse = Raster::from_fn(4, 4, |u, v| 3.0 * (0.5 * (2 * u) as f64 + (2 * v) as f64) - 1.0);
    let estimates = [
        ResolutionEstimate::native(truth.clone()),
        ResolutionEstimate::native(coarse),
    ];
    let fused = fuse_multi_resolution(&estimates, (8, 8)).unwrap();
    assert_eq!(fused.dims(), (8, 8));

    let report = evaluate_frame(&truth, &truth, None, false, None, None).unwrap();
    assert_eq!(report.depth.rmse, 0.0);
    assert_eq!(report.depth.a1, 1.0);

    let mask = Raster::from_fn(8, 8, |_, _| true);
    let fit = fit_scale_shift(&fused, &truth, &mask).unwrap();
    let aligned = apply_scale_shift(&fused, fit);
    let again = fit_scale_shift(&aligned, &truth, &mask).unwrap();
    assert!((again.s - 1.0).abs() < 1e-9 && again.t.abs() < 1e-9);
}

#[test]
fn checkpoint_restores_a_trained_model() {
    let data = synthetic_dataset(SyntheticSpec::default());
    let mut model = ToyModel::new(ModelConfig::default(), 21);
    let config = PatchwiseConfig {
        train_percentage: 0.5,
        ..PatchwiseConfig::default()
    };
    run_patchwise_epochs(&mut model, &config, 3, &data, &SgdConfig::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.sdpt");
    io::write_checkpoint(&path, &model.params).unwrap();

    let mut fresh = ToyModel::new(ModelConfig::default(), 99);
    assert_ne!(param_checksum(&fresh), param_checksum(&model));
    let entries = io::read_checkpoint(&path).unwrap();
    io::load_checkpoint_into(&mut fresh.params, &entries).unwrap();
    assert_eq!(param_checksum(&fresh), param_checksum(&model));
}
