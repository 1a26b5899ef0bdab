//! Contour overlays on grayscale frames.

use std::path::Path;

use anyhow::Result;
use lvseg_core::metrics::extract_contour;
use lvseg_core::sequence::{Image, Mask};

use crate::pgm::write_ppm;

pub const TRUTH: [u8; 3] = [255, 0, 0];
pub const FCNN: [u8; 3] = [0, 96, 255];
pub const TFCNN: [u8; 3] = [0, 255, 0];

/// RGB raster of `frame` with the contour of each mask painted in its colour;
/// later layers win.
pub fn render(frame: &Image, layers: &[(&Mask, [u8; 3])]) -> Vec<u8> {
    let (h, w) = frame.dims();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for &v in frame.data() {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        rgb.extend_from_slice(&[g, g, g]);
    }
    for (mask, colour) in layers {
        for (y, x) in extract_contour(mask).points {
            let i = 3 * (y * w + x);
            rgb[i..i + 3].copy_from_slice(colour);
        }
    }
    rgb
}

pub fn write_overlay(path: &Path, frame: &Image, layers: &[(&Mask, [u8; 3])]) -> Result<()> {
    let (h, w) = frame.dims();
    write_ppm(path, h, w, &render(frame, layers))
}
