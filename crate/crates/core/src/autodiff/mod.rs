//! Desk-scale reverse-mode automatic differentiation.
//!
//! A [`Tape`] records dense matrix operations; trainable parameter leaves
//! receive gradient buffers on [`Tape::backward`], frozen ones never do.
//! [`ToyModel`] is a small shared-trunk network with a disparity head and a
//! segmentation head, trained with the joint SSI + BCE loss.

mod model;
mod tape;
mod train;

use thiserror::Error;

pub use model::{
    joint_loss, ForwardPass, LossWeights, ModelConfig, Param, ParamSet, ParamSlot, ParamStore, ToyModel, Variant,
};
pub use tape::{bce_term, sigmoid, Matrix, Tape, Var, BCE_CLAMP};
pub use train::{
    evaluate_loss, loss_and_grad, pretrain_trunk, score, sgd_pass, synthetic_dataset, Dataset, SgdConfig,
    SyntheticSpec, TaskScores,
};

use crate::alignment::AlignmentError;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("trainable slot {0} has no gradient; run backward first")]
    MissingGradients(usize),
    #[error("segmentation target {0} is not binary")]
    NonBinaryTarget(f64),
    #[error("operation requires a V3 model, got {0:?}")]
    WrongVariant(Variant),
    #[error("loss diverged ({0})")]
    Diverged(f64),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
}
