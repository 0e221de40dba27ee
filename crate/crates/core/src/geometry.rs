//! Pinhole projection between the image plane and metric camera space.
//!
//! A pixel `(u, v)` with disparity `d` maps to
//!
//! ```text
//! x = b (u - o_x) / d
//! y = b f_x (v - o_y) / (f_y d)
//! z = b f_x / d
//! ```
//!
//! Pixel coordinates refer to sample centers; there is no half-pixel offset.

use thiserror::Error;

use crate::par::{self, Execution};
use crate::raster::{Raster, RasterError, UNLABELED};

/// Disparities at or below this are treated as points at infinity.
pub const DEFAULT_EPSILON_DISPARITY: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("disparity {0} is at or below epsilon (point at infinity)")]
    DisparityTooSmall(f64),
    #[error("point depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Pinhole intrinsics plus the stereo baseline the disparity refers to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub f_x: f64,
    pub f_y: f64,
    pub o_x: f64,
    pub o_y: f64,
    /// Baseline in meters.
    pub b: f64,
}

impl CameraIntrinsics {
    pub fn new(f_x: f64, f_y: f64, o_x: f64, o_y: f64, b: f64) -> Result<Self, GeometryError> {
        let k = Self { f_x, f_y, o_x, o_y, b };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.f_x > 0.0 && self.f_x.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("f_x must be positive"));
        }
        if !(self.f_y > 0.0 && self.f_y.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("f_y must be positive"));
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("baseline must be positive"));
        }
        if !self.o_x.is_finite() || !self.o_y.is_finite() {
            return Err(GeometryError::InvalidIntrinsics("principal point must be finite"));
        }
        Ok(())
    }

    /// Same camera with a different baseline.
    pub fn with_baseline(self, b: f64) -> Self {
        Self { b, ..self }
    }
}

/// A metric 3D point in the camera frame (z forward) with an optional class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub label: Option<u8>,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z, label: None }
    }

    pub fn labeled(x: f64, y: f64, z: f64, label: u8) -> Self {
        Self {
            x,
            y,
            z,
            label: Some(label),
        }
    }
}

/// Points in row-major source-pixel order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledCloud {
    pub points: Vec<Point3>,
}

impl LabeledCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn project_pixel(u: f64, v: f64, d: f64, k: &CameraIntrinsics) -> Result<Point3, GeometryError> {
    project_pixel_eps(u, v, d, k, DEFAULT_EPSILON_DISPARITY)
}

/// [`project_pixel`] with an explicit disparity cutoff.
pub fn project_pixel_eps(u: f64, v: f64, d: f64, k: &CameraIntrinsics, epsilon: f64) -> Result<Point3, GeometryError> {
    // NaN disparities fail this comparison too.
    if !(d > epsilon) {
        return Err(GeometryError::DisparityTooSmall(d));
    }
    Ok(Point3::new(
        k.b * (u - k.o_x) / d,
        k.b * k.f_x * (v - k.o_y) / (k.f_y * d),
        k.b * k.f_x / d,
    ))
}

/// Inverse of [`project_pixel`]: returns `(u, v, d)`.
pub fn unproject_point(p: &Point3, k: &CameraIntrinsics) -> Result<(f64, f64, f64), GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok((p.x * k.f_x / p.z + k.o_x, p.y * k.f_y / p.z + k.o_y, k.b * k.f_x / p.z))
}

/// Lift every pixel with disparity above `min_disparity` into 3D, carrying
/// its label. Pixels labeled [`UNLABELED`] become unlabeled points.
///
/// The cutoff never drops below [`DEFAULT_EPSILON_DISPARITY`], so every
/// emitted point is finite.
pub fn project_map(
    disparity: &Raster<f64>,
    labels: &Raster<u8>,
    k: &CameraIntrinsics,
    min_disparity: f64,
) -> Result<LabeledCloud, GeometryError> {
    project_map_with(disparity, labels, k, min_disparity, Execution::default())
}

pub fn project_map_with(
    disparity: &Raster<f64>,
    labels: &Raster<u8>,
    k: &CameraIntrinsics,
    min_disparity: f64,
    exec: Execution,
) -> Result<LabeledCloud, GeometryError> {
    disparity.ensure_same_dims(labels)?;
    let width = disparity.width();
    let cutoff = min_disparity.max(DEFAULT_EPSILON_DISPARITY);
    let rows = par::map_range(exec, disparity.height(), |v| {
        let mut out = Vec::new();
        for u in 0..width {
            let d = *disparity.at(u, v);
            if !(d > cutoff) {
                continue;
            }
            let mut p = Point3::new(
                k.b * (u as f64 - k.o_x) / d,
                k.b * k.f_x * (v as f64 - k.o_y) / (k.f_y * d),
                k.b * k.f_x / d,
            );
            let label = *labels.at(u, v);
            if label != UNLABELED {
                p.label = Some(label);
            }
            out.push(p);
        }
        out
    });
    Ok(LabeledCloud {
        points: rows.into_iter().flatten().collect(),
    })
}
