//! Binary netpbm images: 8-bit grayscale PGM (P5) in and out, RGB PPM (P6) out.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lvseg_core::sequence::{Grid, Image, Mask};

/// Raw 8-bit pixels of a P5 file.
pub fn read_pgm(path: &Path) -> Result<Grid<u8>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_pgm(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Grid<u8>> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    let magic = token(bytes, &mut pos)?;
    if magic != b"P5" {
        bail!("not a binary PGM (magic {:?})", String::from_utf8_lossy(magic));
    }
    for f in &mut fields {
        let t = token(bytes, &mut pos)?;
        *f = std::str::from_utf8(t)?.parse().with_context(|| format!("bad header field {:?}", String::from_utf8_lossy(t)))?;
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        bail!("maxval {} is not an 8-bit PGM", maxval);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w * h;
    if bytes.len() < pos + n {
        bail!("raster holds {} bytes, {}x{} needs {}", bytes.len().saturating_sub(pos), w, h, n);
    }
    Ok(Grid::new(h, w, bytes[pos..pos + n].to_vec())?)
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        bail!("truncated header");
    }
    Ok(&bytes[start..*pos])
}

pub fn encode_pgm(g: &Grid<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", g.width(), g.height()).into_bytes();
    out.extend_from_slice(g.data());
    out
}

pub fn write_pgm(path: &Path, g: &Grid<u8>) -> Result<()> {
    fs::write(path, encode_pgm(g)).with_context(|| format!("writing {}", path.display()))
}

/// Intensities in `[0, 1]` from 8-bit values.
pub fn read_image(path: &Path) -> Result<Image> {
    Ok(read_pgm(path)?.map(|v| f64::from(v) / 255.0))
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_pgm(path, &img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

/// Masks are stored as 0/255.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let g = read_pgm(path)?;
    if let Some(v) = g.data().iter().find(|&&v| v != 0 && v != 255) {
        bail!("non-binary mask {}: value {}", path.display(), v);
    }
    Ok(g.map(|v| u8::from(v == 255)))
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    write_pgm(path, &m.map(|v| if v != 0 { 255 } else { 0 }))
}

/// P6 with `rgb` holding `3 * w * h` bytes in raster order.
pub fn write_ppm(path: &Path, height: usize, width: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * height * width {
        bail!("{} bytes for a {}x{} RGB image", rgb.len(), height, width);
    }
    let mut out = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    out.extend_from_slice(rgb);
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}
