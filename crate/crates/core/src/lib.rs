//! Monocular semantic occupancy toolkit.
//!
//! Disparity and per-pixel labels are lifted into 3D with a pinhole model,
//! accumulated into voxel grids, filtered by point support and resolved to
//! per-voxel classes. Around that pipeline sit the pieces needed to produce
//! and score the inputs: least-squares scale/shift alignment, depth and
//! segmentation metrics, multi-resolution pseudo-label fusion, a small
//! reverse-mode autodiff engine and the block-wise ("patch-wise") training
//! scheduler that bounds how many gradient buffers are live at once.

// `!(x > y)` is used on purpose so that NaN falls on the rejecting side.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod autodiff;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod par;
pub mod patchwise;
pub mod pipeline;
pub mod pseudolabel;
pub mod raster;
pub mod voxel;

pub use raster::Raster;
