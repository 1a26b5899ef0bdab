//! All-pairs contour distances and random test masks.

use lvseg_core::metrics::extract_contour;
use lvseg_core::sequence::Mask;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn brute_mean(from: &[(usize, usize)], to: &[(usize, usize)], (sy, sx): (f64, f64)) -> f64 {
    let total: f64 = from
        .iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    let dy = y.abs_diff(v) as f64 * sy;
                    let dx = x.abs_diff(u) as f64 * sx;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / from.len() as f64
}

/// Symmetric mean nearest-contour distance by comparing every point pair.
pub fn brute_apd(a: &Mask, b: &Mask, spacing: (f64, f64)) -> f64 {
    let (ca, cb) = (extract_contour(a).points, extract_contour(b).points);
    0.5 * (brute_mean(&ca, &cb, spacing) + brute_mean(&cb, &ca, spacing))
}

/// Ellipse, rectangle or salt-and-pepper mask with at least one pixel set.
pub fn blob(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let style = rng.random_range(0..3);
    let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let (ry, rx) = (rng.random_range(0.5..(h as f64 / 2.0).max(1.0)), rng.random_range(0.5..(w as f64 / 2.0).max(1.0)));
    let p = rng.random_range(0.2..0.6);
    let mut m = Mask::from_fn(h, w, |y, x| match style {
        0 => u8::from(((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2) <= 1.0),
        1 => u8::from((y as f64 - cy).abs() <= ry && (x as f64 - cx).abs() <= rx),
        _ => 0,
    });
    if style == 2 {
        for v in m.data_mut() {
            *v = u8::from(rng.random_bool(p));
        }
    }
    if m.count() == 0 {
        m.set(rng.random_range(0..h), rng.random_range(0..w), 1);
    }
    m
}
