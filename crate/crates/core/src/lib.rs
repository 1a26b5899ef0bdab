//! Temporally coherent left-ventricle segmentation on CINE sequences.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numerical piece of
//! the workflow:
//!
//! - [`sequence`]: frame/mask/probability sequences, boxes, resize/crop/pad and
//!   train/validation/test splitting that keeps twin pairs together.
//! - [`synth`]: a seeded generator of contracting-ellipse CINE sequences.
//! - [`autodiff`]: dense `f64` tensors with a reverse-mode tape covering the
//!   operators the networks use.
//! - [`nn`]: named parameter sets shared by the trainable models.
//! - [`tfcnn`]: the recurrent U-Net (Conv-GRU bottleneck) and its
//!   frame-independent baseline, trained with [`optim::Adadelta`].
//! - [`detector`]: a small box regressor plus IoU.
//! - [`crf`] and [`semflow`]: the two post-processing refiners, with
//!   [`lbfgs`] as the CRF minimizer.
//! - [`metrics`]: Dice, average perpendicular distance and conformity.
//!
//! File formats, the CLI and threading live in the `lvseg` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod crf;
pub mod detector;
pub mod error;
pub mod lbfgs;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod semflow;
pub mod sequence;
pub mod synth;
pub mod tfcnn;

pub use error::{Error, Result};
pub use sequence::{BoundingBox, CineSequence, DatasetSplit, MaskSequence, ProbSequence};
