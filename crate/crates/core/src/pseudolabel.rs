//! Pseudo-ground-truth tooling: multi-resolution disparity fusion,
//! content-adaptive resolution selection and uncertainty-guided refinement
//! of coarse segmentation.
//!
//! Teacher networks are not part of this module. Their outputs arrive as
//! rasters, and point refinement goes through a caller-supplied callback.

use log::warn;
use thiserror::Error;

use crate::alignment::{fit_scale_shift, AlignmentError};
use crate::par::{self, Execution};
use crate::raster::{full_mask, Raster};

#[derive(Debug, Error, PartialEq)]
pub enum PseudoLabelError {
    #[error("no estimates to fuse")]
    EmptyInput,
    #[error("no candidate resolutions")]
    NoCandidates,
    #[error("probability {value} at pixel {index} lies outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("target size must be non-zero, got {0:?}")]
    EmptyTarget((usize, usize)),
    #[error("source raster is empty")]
    EmptySource,
    #[error("point ({u}, {v}) lies outside the {width}x{height} map")]
    PointOutOfBounds {
        u: usize,
        v: usize,
        width: usize,
        height: usize,
    },
    #[error("refiner failed at ({u}, {v}): {message}")]
    CallbackFailure { u: usize, v: usize, message: String },
    #[error("feature map dims {got:?} differ from the coarse map {want:?}")]
    FeatureDims { got: (usize, usize), want: (usize, usize) },
}

/// A disparity map and the `(width, height)` it was inferred at.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionEstimate {
    pub disparity: Raster<f64>,
    pub native_resolution: (usize, usize),
}

impl ResolutionEstimate {
    /// An estimate whose native resolution is its own size.
    pub fn native(disparity: Raster<f64>) -> Self {
        let native_resolution = disparity.dims();
        Self {
            disparity,
            native_resolution,
        }
    }

    fn pixel_count(&self) -> usize {
        self.native_resolution.0 * self.native_resolution.1
    }
}

/// Resample to `(width, height)` with the align-corners-false convention:
/// destination pixel `x` samples source coordinate `(x + 0.5) * src/dst - 0.5`,
/// clamped to the source extent.
pub fn bilinear_upsample(r: &Raster<f64>, target: (usize, usize)) -> Result<Raster<f64>, PseudoLabelError> {
    bilinear_upsample_with(r, target, Execution::default())
}

pub fn bilinear_upsample_with(
    r: &Raster<f64>,
    target: (usize, usize),
    exec: Execution,
) -> Result<Raster<f64>, PseudoLabelError> {
    let (tw, th) = target;
    if tw == 0 || th == 0 {
        return Err(PseudoLabelError::EmptyTarget(target));
    }
    let (sw, sh) = r.dims();
    if sw == 0 || sh == 0 {
        return Err(PseudoLabelError::EmptySource);
    }
    if (sw, sh) == target {
        return Ok(r.clone());
    }
    let taps = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|x| {
                let c = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = c.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, c - lo as f64)
            })
            .collect()
    };
    let cols = taps(sw, tw);
    let rows = taps(sh, th);
    let data = par::map_range(exec, th, |y| {
        let (v0, v1, fy) = rows[y];
        cols.iter()
            .map(|&(u0, u1, fx)| {
                let top = lerp(*r.at(u0, v0), *r.at(u1, v0), fx);
                let bottom = lerp(*r.at(u0, v1), *r.at(u1, v1), fx);
                lerp(top, bottom, fy)
            })
            .collect::<Vec<_>>()
    });
    Ok(Raster::from_vec(tw, th, data.into_iter().flatten().collect()).expect("sized by construction"))
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a * (1.0 - t) + b * t
    }
}

/// Merge disparity estimates of one image made at several resolutions.
///
/// The estimate with the lowest native resolution is the structural base.
/// Every estimate is resampled to `target`; the others are aligned to the
/// base by least-squares scale and shift over the whole frame. The output
/// is a weighted mean with weights proportional to native pixel count.
/// Estimates that cannot be aligned are skipped with a warning.
pub fn fuse_multi_resolution(
    estimates: &[ResolutionEstimate],
    target: (usize, usize),
) -> Result<Raster<f64>, PseudoLabelError> {
    let base_index = estimates
        .iter()
        .enumerate()
        .min_by_key(|(_, e)| e.pixel_count())
        .map(|(i, _)| i)
        .ok_or(PseudoLabelError::EmptyInput)?;
    let base = bilinear_upsample(&estimates[base_index].disparity, target)?;
    let mask = full_mask(target.0, target.1);

    let mut acc: Vec<f64> = base
        .as_slice()
        .iter()
        .map(|&b| b * estimates[base_index].pixel_count() as f64)
        .collect();
    let mut total_weight = estimates[base_index].pixel_count() as f64;

    for (i, est) in estimates.iter().enumerate() {
        if i == base_index {
            continue;
        }
        let resampled = bilinear_upsample(&est.disparity, target)?;
        let fit = match fit_scale_shift(&resampled, &base, &mask) {
            Ok(fit) => fit,
            Err(e @ (AlignmentError::DegenerateFit(_) | AlignmentError::TooFewPixels(_))) => {
                warn!("skipping estimate {i} at {:?}: {e}", est.native_resolution);
                continue;
            }
            Err(e) => unreachable!("dims fixed by resampling: {e}"),
        };
        let w = est.pixel_count() as f64;
        for (a, &x) in acc.iter_mut().zip(resampled.as_slice()) {
            *a += w * fit.apply(x);
        }
        total_weight += w;
    }
    let data = acc.into_iter().map(|a| a / total_weight).collect();
    Ok(Raster::from_vec(target.0, target.1, data).expect("sized by construction"))
}

/// Central-difference gradient magnitude with clamped borders.
pub fn gradient_magnitude(r: &Raster<f64>) -> Raster<f64> {
    let (w, h) = r.dims();
    Raster::from_fn(w, h, |u, v| {
        let gx = (*r.at((u + 1).min(w - 1), v) - *r.at(u.saturating_sub(1), v)) / 2.0;
        let gy = (*r.at(u, (v + 1).min(h - 1)) - *r.at(u, v.saturating_sub(1))) / 2.0;
        (gx * gx + gy * gy).sqrt()
    })
}

/// Otsu threshold over a 256-bin histogram of `values`; `None` when the
/// values are (numerically) constant.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    if !(hi - lo > 1e-12) {
        return None;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &x in values {
        hist[(((x - lo) / width) as usize).min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0usize);
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0.0 {
            break;
        }
        sum0 += i as f64 * c as f64;
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    Some(lo + (best_bin + 1) as f64 * width)
}

/// Pixels whose gradient magnitude exceeds the Otsu threshold.
pub fn edge_mask(r: &Raster<f64>) -> Raster<bool> {
    let mag = gradient_magnitude(r);
    match otsu_threshold(mag.as_slice()) {
        Some(t) => mag.map(|&m| m > t),
        None => mag.map(|_| false),
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel (separable lower-envelope transform). Infinite when there are none.
pub fn squared_distance_to(mask: &Raster<bool>) -> Raster<f64> {
    let (w, h) = mask.dims();
    let mut grid: Vec<f64> = mask
        .as_slice()
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    let mut line = vec![0.0; w.max(h)];
    let mut out = vec![0.0; w.max(h)];
    for u in 0..w {
        for v in 0..h {
            line[v] = grid[v * w + u];
        }
        distance_1d(&line[..h], &mut out[..h]);
        for v in 0..h {
            grid[v * w + u] = out[v];
        }
    }
    for v in 0..h {
        line[..w].copy_from_slice(&grid[v * w..(v + 1) * w]);
        distance_1d(&line[..w], &mut out[..w]);
        grid[v * w..(v + 1) * w].copy_from_slice(&out[..w]);
    }
    Raster::from_vec(w, h, grid).expect("sized by construction")
}

fn distance_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        d.fill(f64::INFINITY);
        return;
    }
    // Lower envelope of the parabolas rooted at finite samples.
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let intersect =
        |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
    for &q in &sites {
        while let Some(&p) = v.last() {
            let s = intersect(q, p);
            if s <= z[z.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            z.clear();
            z.push(f64::NEG_INFINITY);
        } else {
            z.push(intersect(q, *v.last().unwrap()));
        }
        v.push(q);
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Fraction of pixels farther than `radius` from every edge pixel after
/// resampling `image` to `size`.
pub fn far_pixel_fraction(image: &Raster<f64>, size: (usize, usize), radius: f64) -> Result<f64, PseudoLabelError> {
    let resampled = bilinear_upsample(image, size)?;
    let dist = squared_distance_to(&edge_mask(&resampled));
    let r2 = radius * radius;
    let far = dist.as_slice().iter().filter(|&&d| d > r2).count();
    Ok(far as f64 / dist.len() as f64)
}

/// Context radius in pixels: a tenth of the smaller side of the smallest
/// candidate, held fixed across candidates.
pub fn receptive_radius(smallest: (usize, usize)) -> f64 {
    smallest.0.min(smallest.1) as f64 / 10.0
}

/// Largest candidate (not exceeding `cap`) at which at most `x_percent` of
/// pixels lie farther than [`receptive_radius`] from an edge. Falls back to
/// the smallest admissible candidate. `candidates` must be sorted ascending.
pub fn select_adaptive_resolution(
    image: &Raster<f64>,
    x_percent: f64,
    candidates: &[(usize, usize)],
    cap: Option<(usize, usize)>,
) -> Result<(usize, usize), PseudoLabelError> {
    let admissible: Vec<(usize, usize)> = candidates
        .iter()
        .copied()
        .filter(|&(w, h)| cap.is_none_or(|(cw, ch)| w <= cw && h <= ch))
        .collect();
    let smallest = *admissible.first().ok_or(PseudoLabelError::NoCandidates)?;
    let radius = receptive_radius(smallest);
    let fractions = par::map_slice(Execution::default(), &admissible, |&size| {
        far_pixel_fraction(image, size, radius)
    });
    let mut chosen = smallest;
    for (&size, frac) in admissible.iter().zip(fractions) {
        if frac? <= x_percent {
            chosen = size;
        }
    }
    Ok(chosen)
}

/// Per-pixel uncertainty of a binary probability map: `1 - 2|p - 0.5|`.
pub fn binary_uncertainty(prob: &Raster<f64>) -> Result<Raster<f64>, PseudoLabelError> {
    if let Some((index, &value)) = prob
        .as_slice()
        .iter()
        .enumerate()
        .find(|(_, p)| !(0.0..=1.0).contains(*p))
    {
        return Err(PseudoLabelError::OutOfRange { index, value });
    }
    Ok(prob.map(|&p| 1.0 - 2.0 * (p - 0.5).abs()))
}

/// The `n` most uncertain pixels as `(u, v)`, ties in row-major order.
pub fn select_uncertain_points(uncertainty: &Raster<f64>, n: usize) -> Vec<(usize, usize)> {
    let w = uncertainty.width();
    let mut order: Vec<usize> = (0..uncertainty.len()).collect();
    let values = uncertainty.as_slice();
    // Stable sort keeps row-major order among equal values.
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.into_iter().take(n).map(|i| (i % w, i / w)).collect()
}

/// Overwrite the listed pixels of `coarse` with the refiner's answers. The
/// refiner sees the pixel and the stacked feature values sampled there.
pub fn refine_with_hook<F>(
    coarse: &Raster<u8>,
    points: &[(usize, usize)],
    features: &[Raster<f64>],
    mut refiner: F,
) -> Result<Raster<u8>, PseudoLabelError>
where
    F: FnMut((usize, usize), &[f64]) -> Result<u8, String>,
{
    for f in features {
        if f.dims() != coarse.dims() {
            return Err(PseudoLabelError::FeatureDims {
                got: f.dims(),
                want: coarse.dims(),
            });
        }
    }
    let (width, height) = coarse.dims();
    let mut out = coarse.clone();
    let mut feature = Vec::with_capacity(features.len());
    for &(u, v) in points {
        if u >= width || v >= height {
            return Err(PseudoLabelError::PointOutOfBounds { u, v, width, height });
        }
        feature.clear();
        feature.extend(features.iter().map(|f| *f.at(u, v)));
        let label = refiner((u, v), &feature).map_err(|message| PseudoLabelError::CallbackFailure { u, v, message })?;
        *out.get_mut(u, v).expect("bounds checked") = label;
    }
    Ok(out)
}
