//! Disparity and segmentation metrics.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::alignment::{apply_scale_shift, fit_scale_shift, AlignmentError};
use crate::raster::{Raster, RasterError};

/// Base of the δ-threshold accuracies: a_k counts ratios below `1.25^k`.
pub const DELTA_BASE: f64 = 1.25;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("non-positive value at pixel {0}")]
    NonPositiveValue(usize),
    #[error("threshold power must be 1, 2 or 3, got {0}")]
    BadPower(u32),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegMetrics {
    /// IoU per requested class; `None` when the class is absent from both rasters.
    pub per_class_iou: BTreeMap<u8, Option<f64>>,
    /// Mean over classes with a non-empty union (0 when there are none).
    pub mean_iou: f64,
}

fn check(pred: &Raster<f64>, gt: &Raster<f64>, mask: &Raster<bool>) -> Result<(), MetricsError> {
    pred.ensure_same_dims(gt)?;
    pred.ensure_same_dims(mask)?;
    Ok(())
}

pub fn rmse(pred: &Raster<f64>, gt: &Raster<f64>, mask: &Raster<bool>) -> Result<f64, MetricsError> {
    check(pred, gt, mask)?;
    let mut n = 0usize;
    let mut acc = 0.0;
    for ((&p, &g), &m) in pred.as_slice().iter().zip(gt.as_slice()).zip(mask.as_slice()) {
        if m {
            acc += (p - g) * (p - g);
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok((acc / n as f64).sqrt())
}

/// Fraction of masked pixels with `max(gt/pred, pred/gt) < 1.25^power`.
pub fn threshold_accuracy(
    pred: &Raster<f64>,
    gt: &Raster<f64>,
    mask: &Raster<bool>,
    power: u32,
) -> Result<f64, MetricsError> {
    if !(1..=3).contains(&power) {
        return Err(MetricsError::BadPower(power));
    }
    check(pred, gt, mask)?;
    let threshold = DELTA_BASE.powi(power as i32);
    let (mut n, mut hit) = (0usize, 0usize);
    for (i, ((&p, &g), &m)) in pred
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .zip(mask.as_slice())
        .enumerate()
    {
        if !m {
            continue;
        }
        if !(p > 0.0 && g > 0.0) {
            return Err(MetricsError::NonPositiveValue(i));
        }
        n += 1;
        if (g / p).max(p / g) < threshold {
            hit += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(hit as f64 / n as f64)
}

pub fn depth_metrics(pred: &Raster<f64>, gt: &Raster<f64>, mask: &Raster<bool>) -> Result<DepthMetrics, MetricsError> {
    Ok(DepthMetrics {
        rmse: rmse(pred, gt, mask)?,
        a1: threshold_accuracy(pred, gt, mask, 1)?,
        a2: threshold_accuracy(pred, gt, mask, 2)?,
        a3: threshold_accuracy(pred, gt, mask, 3)?,
    })
}

/// Depth metrics after aligning `pred` to `gt` with the least-squares scale and shift.
pub fn evaluate_depth_aligned(
    pred: &Raster<f64>,
    gt: &Raster<f64>,
    mask: &Raster<bool>,
) -> Result<DepthMetrics, MetricsError> {
    let ss = fit_scale_shift(pred, gt, mask)?;
    depth_metrics(&apply_scale_shift(pred, ss), gt, mask)
}

pub fn seg_iou(pred: &Raster<u8>, gt: &Raster<u8>, classes: &[u8]) -> Result<SegMetrics, MetricsError> {
    pred.ensure_same_dims(gt)?;
    let mut per_class_iou = BTreeMap::new();
    let mut sum = 0.0;
    let mut present = 0usize;
    for &c in classes {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            let (a, b) = (p == c, g == c);
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        let iou = (union > 0).then(|| inter as f64 / union as f64);
        if let Some(v) = iou {
            sum += v;
            present += 1;
        }
        per_class_iou.insert(c, iou);
    }
    Ok(SegMetrics {
        per_class_iou,
        mean_iou: if present == 0 { 0.0 } else { sum / present as f64 },
    })
}

/// Sorted distinct class ids appearing in either raster, skipping `ignore`.
pub fn classes_present(a: &Raster<u8>, b: &Raster<u8>, ignore: u8) -> Vec<u8> {
    let mut seen = [false; 256];
    for &c in a.as_slice().iter().chain(b.as_slice()) {
        seen[c as usize] = true;
    }
    (0..=255u8).filter(|&c| c != ignore && seen[c as usize]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::full_mask;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Raster<f64> {
        Raster::row(v.to_vec())
    }

    #[test]
    fn rmse_examples() {
        let m = full_mask(2, 1);
        assert_eq!(rmse(&row(&[1.0, 2.0]), &row(&[1.0, 2.0]), &m).unwrap(), 0.0);
        assert!((rmse(&row(&[0.0, 0.0]), &row(&[3.0, 4.0]), &m).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        let one = Raster::row(vec![false, true, false]);
        assert_eq!(rmse(&row(&[0.0, 1.0, 9.0]), &row(&[5.0, 3.0, 0.0]), &one).unwrap(), 2.0);
        assert_eq!(
            rmse(&row(&[1.0]), &row(&[1.0]), &Raster::row(vec![false])),
            Err(MetricsError::EmptyMask)
        );
    }

    #[test]
    fn delta_examples() {
        let m = full_mask(2, 1);
        let (p, g) = (row(&[1.0, 2.0]), row(&[1.3, 2.0]));
        assert_eq!(threshold_accuracy(&p, &g, &m, 1).unwrap(), 0.5);
        assert_eq!(threshold_accuracy(&p, &g, &m, 2).unwrap(), 1.0);
        for k in 1..=3 {
            assert_eq!(threshold_accuracy(&p, &p, &m, k).unwrap(), 1.0);
        }
        // 1.25^3 = 1.953125 < 2
        let m1 = full_mask(1, 1);
        for k in 1..=3 {
            assert_eq!(threshold_accuracy(&row(&[1.0]), &row(&[2.0]), &m1, k).unwrap(), 0.0);
        }
        assert_eq!(
            threshold_accuracy(&row(&[0.0]), &row(&[2.0]), &m1, 1),
            Err(MetricsError::NonPositiveValue(0))
        );
        assert_eq!(threshold_accuracy(&p, &g, &m, 4), Err(MetricsError::BadPower(4)));
    }

    #[test]
    fn strict_inequality_at_threshold() {
        let m = full_mask(1, 1);
        assert_eq!(threshold_accuracy(&row(&[1.0]), &row(&[1.25]), &m, 1).unwrap(), 0.0);
    }

    #[test]
    fn iou_examples() {
        let p = Raster::row(vec![1u8, 1, 0, 0]);
        let g = Raster::row(vec![0u8, 1, 1, 0]);
        let m = seg_iou(&p, &g, &[1]).unwrap();
        assert!((m.per_class_iou[&1].unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let same = seg_iou(&p, &p, &[0, 1]).unwrap();
        assert_eq!(same.mean_iou, 1.0);
        let absent = seg_iou(&p, &p, &[0, 1, 7]).unwrap();
        assert_eq!(absent.per_class_iou[&7], None);
        assert_eq!(absent.mean_iou, 1.0);
        assert!(seg_iou(&p, &Raster::row(vec![0u8]), &[0]).is_err());
        assert_eq!(classes_present(&p, &g, 255), vec![0, 1]);
    }

    #[test]
    fn aligned_examples() {
        let gt = row(&[3.0, 5.0, 9.0, 4.0]);
        let pred = gt.map(|g| (g - 1.0) / 2.0);
        let m = full_mask(4, 1);
        let d = evaluate_depth_aligned(&pred, &gt, &m).unwrap();
        assert!(d.rmse < 1e-12);
        assert_eq!(d.a1, 1.0);
        assert!(matches!(
            evaluate_depth_aligned(&row(&[2.0, 2.0, 2.0, 2.0]), &gt, &m),
            Err(MetricsError::Alignment(AlignmentError::DegenerateFit(_)))
        ));
    }

    #[test]
    fn aligned_is_composition() {
        let gt = row(&[3.0, 5.5, 9.0, 4.0, 6.0]);
        let pred = row(&[0.9, 2.0, 4.1, 1.7, 2.4]);
        let m = full_mask(5, 1);
        let ss = fit_scale_shift(&pred, &gt, &m).unwrap();
        let aligned = apply_scale_shift(&pred, ss);
        let by_hand = DepthMetrics {
            rmse: rmse(&aligned, &gt, &m).unwrap(),
            a1: threshold_accuracy(&aligned, &gt, &m, 1).unwrap(),
            a2: threshold_accuracy(&aligned, &gt, &m, 2).unwrap(),
            a3: threshold_accuracy(&aligned, &gt, &m, 3).unwrap(),
        };
        assert_eq!(evaluate_depth_aligned(&pred, &gt, &m).unwrap(), by_hand);
    }

    fn positive_pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(0.01..10.0f64, n),
                prop::collection::vec(0.01..10.0f64, n),
            )
        })
    }

    proptest! {
        #[test]
        fn nested_and_symmetric((p, g) in positive_pairs()) {
            let n = p.len();
            let (p, g, m) = (Raster::row(p), Raster::row(g), full_mask(n, 1));
            let d = depth_metrics(&p, &g, &m).unwrap();
            prop_assert!(0.0 <= d.a1 && d.a1 <= d.a2 && d.a2 <= d.a3 && d.a3 <= 1.0);
            prop_assert!(d.rmse >= 0.0);
            for k in 1..=3 {
                prop_assert_eq!(threshold_accuracy(&p, &g, &m, k).unwrap(), threshold_accuracy(&g, &p, &m, k).unwrap());
            }
        }

        #[test]
        fn aligned_scale_invariant((p, g) in positive_pairs(), a in 0.1..10.0f64, c in -5.0..5.0f64) {
            let n = p.len();
            let (pr, gr, m) = (Raster::row(p), Raster::row(g), full_mask(n, 1));
            let Ok(base) = evaluate_depth_aligned(&pr, &gr, &m) else { return Ok(()) };
            // Aligned values can be non-positive; the δ metrics reject those.
            let moved = evaluate_depth_aligned(&pr.map(|&x| a * x + c), &gr, &m).unwrap();
            prop_assert!((base.rmse - moved.rmse).abs() < 1e-9);
            prop_assert_eq!((base.a1, base.a2, base.a3), (moved.a1, moved.a2, moved.a3));
        }

        #[test]
        fn iou_symmetric(p in prop::collection::vec(0u8..4, 1..50), seed in any::<u64>()) {
            let n = p.len();
            let g: Vec<u8> = (0..n).map(|i| ((seed >> (i % 60)) & 3) as u8).collect();
            let (p, g) = (Raster::row(p), Raster::row(g));
            prop_assert_eq!(seg_iou(&p, &g, &[0, 1, 2, 3]).unwrap(), seg_iou(&g, &p, &[0, 1, 2, 3]).unwrap());
        }
    }
}
