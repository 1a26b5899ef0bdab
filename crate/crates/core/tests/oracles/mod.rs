//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

pub mod contour;
pub mod crf;
pub mod grad;
pub mod semflow;
