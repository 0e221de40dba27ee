//! Scale/shift alignment of arbitrary-scale disparity to a reference.

use thiserror::Error;

use crate::raster::{Raster, RasterError};

/// Masked prediction variance below this makes the normal matrix singular.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AlignmentError {
    #[error("fewer than two masked pixels ({0})")]
    TooFewPixels(usize),
    #[error("masked prediction variance {0:e} is too small to fit scale and shift")]
    DegenerateFit(f64),
    #[error("no masked pixel has both values positive")]
    NoValidPixels,
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Affine map `s * pred + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleShift {
    pub s: f64,
    pub t: f64,
}

impl ScaleShift {
    pub const IDENTITY: ScaleShift = ScaleShift { s: 1.0, t: 0.0 };

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        self.s * x + self.t
    }
}

fn check_dims(pred: &Raster<f64>, gt: &Raster<f64>, mask: &Raster<bool>) -> Result<(), RasterError> {
    pred.ensure_same_dims(gt)?;
    pred.ensure_same_dims(mask)
}

fn masked_pairs<'a>(pred: &'a [f64], gt: &'a [f64], mask: &'a [bool]) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.iter()
        .zip(gt)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &g), _)| (p, g))
}

/// Least-squares `(s, t)` minimizing `sum (s p + t - g)^2` over the mask.
pub fn fit_scale_shift(
    pred: &Raster<f64>,
    gt: &Raster<f64>,
    mask: &Raster<bool>,
) -> Result<ScaleShift, AlignmentError> {
    check_dims(pred, gt, mask)?;
    fit_slices(pred.as_slice(), gt.as_slice(), mask.as_slice())
}

/// Slice form of [`fit_scale_shift`]; the three slices must have equal length.
pub fn fit_slices(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<ScaleShift, AlignmentError> {
    debug_assert!(pred.len() == gt.len() && gt.len() == mask.len());
    // Centered sums keep the 2x2 solve well conditioned when the
    // predictions sit far from zero.
    let mut n = 0usize;
    let (mut sum_p, mut sum_g) = (0.0, 0.0);
    for (p, g) in masked_pairs(pred, gt, mask) {
        n += 1;
        sum_p += p;
        sum_g += g;
    }
    if n < 2 {
        return Err(AlignmentError::TooFewPixels(n));
    }
    let nf = n as f64;
    let (mean_p, mean_g) = (sum_p / nf, sum_g / nf);
    let (mut spp, mut spg) = (0.0, 0.0);
    for (p, g) in masked_pairs(pred, gt, mask) {
        let dp = p - mean_p;
        spp += dp * dp;
        spg += dp * (g - mean_g);
    }
    let variance = spp / nf;
    if !(variance >= DEGENERATE_VARIANCE) {
        return Err(AlignmentError::DegenerateFit(variance));
    }
    let s = spg / spp;
    Ok(ScaleShift {
        s,
        t: mean_g - s * mean_p,
    })
}

pub fn apply_scale_shift(pred: &Raster<f64>, ss: ScaleShift) -> Raster<f64> {
    pred.map(|&p| ss.apply(p))
}

/// Mean squared residual of the masked pixels under `ss`.
pub fn masked_mse(pred: &[f64], gt: &[f64], mask: &[bool], ss: ScaleShift) -> f64 {
    let mut n = 0usize;
    let mut acc = 0.0;
    for (p, g) in masked_pairs(pred, gt, mask) {
        let r = ss.apply(p) - g;
        acc += r * r;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Scale-and-shift-invariant loss: masked MSE after the optimal alignment.
pub fn ssi_loss(pred: &Raster<f64>, gt: &Raster<f64>, mask: &Raster<bool>) -> Result<f64, AlignmentError> {
    let ss = fit_scale_shift(pred, gt, mask)?;
    Ok(masked_mse(pred.as_slice(), gt.as_slice(), mask.as_slice(), ss))
}

/// Median of `reference / pred` over masked pixels where both are positive.
///
/// Even counts average the two middle ratios.
pub fn estimate_frame_scale(
    pred: &Raster<f64>,
    reference: &Raster<f64>,
    mask: &Raster<bool>,
) -> Result<f64, AlignmentError> {
    check_dims(pred, reference, mask)?;
    let mut ratios: Vec<f64> = masked_pairs(pred.as_slice(), reference.as_slice(), mask.as_slice())
        .filter(|&(p, r)| p > 0.0 && r > 0.0)
        .map(|(p, r)| r / p)
        .collect();
    if ratios.is_empty() {
        return Err(AlignmentError::NoValidPixels);
    }
    ratios.sort_by(f64::total_cmp);
    let mid = ratios.len() / 2;
    Ok(if ratios.len() % 2 == 1 {
        ratios[mid]
    } else {
        0.5 * (ratios[mid - 1] + ratios[mid])
    })
}
