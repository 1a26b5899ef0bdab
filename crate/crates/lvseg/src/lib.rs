//! File formats, run directories and the command-line workflow around
//! [`lvseg_core`].
//!
//! - [`pgm`]: 8-bit PGM frames and masks, PPM overlays.
//! - [`dataset`]: JSON manifest datasets.
//! - [`tensorfile`] and [`checkpoint`]: the binary tensor container and model
//!   checkpoints built on it.
//! - [`config`]: the JSON run configuration.
//! - [`pipeline`]: detection, cropped segmentation, refinement and evaluation
//!   on in-memory data.
//! - [`run`] and [`cli`]: run directories and the subcommands.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod overlay;
pub mod pgm;
pub mod pipeline;
pub mod run;
pub mod tensorfile;
