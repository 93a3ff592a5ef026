//! Dependency-free raster output.
//!
//! Two binary Netpbm variants are written, both row-major from the top-left
//! pixel with no padding:
//!
//! - `P5` grayscale: the ASCII header `P5\n{width} {height}\n255\n`, then one
//!   byte per pixel.
//! - `P6` colour: the ASCII header `P6\n{width} {height}\n255\n`, then three
//!   bytes (R, G, B) per pixel.
//!
//! Values are mapped linearly from `[lo, hi]` onto `0..=255` with rounding
//! and clamping; a degenerate range maps every pixel to 0.

use std::path::Path;

use crate::{Error, Result};

fn check(values: &[f64], height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || values.len() != height * width {
        return Err(Error::config(format!(
            "raster of {} values does not fit {height}x{width}",
            values.len()
        )));
    }
    Ok(())
}

/// Position of `v` in `[lo, hi]` as a fraction in `[0, 1]`.
fn unit(v: f64, lo: f64, hi: f64) -> f64 {
    if !(hi > lo) || !v.is_finite() {
        return 0.0;
    }
    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
}

fn to_byte(u: f64) -> u8 {
    (u * 255.0).round() as u8
}

pub fn pgm_bytes(values: &[f64], height: usize, width: usize, lo: f64, hi: f64) -> Result<Vec<u8>> {
    check(values, height, width)?;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(unit(v, lo, hi))));
    Ok(out)
}

/// Dark blue → teal → yellow → white ramp.
const RAMP: [[f64; 3]; 4] = [
    [0.05, 0.03, 0.30],
    [0.10, 0.55, 0.55],
    [0.95, 0.85, 0.20],
    [1.0, 1.0, 1.0],
];

pub fn false_color(u: f64) -> [u8; 3] {
    let x = u.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let t = x - i as f64;
    let mut rgb = [0u8; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        *out = to_byte(RAMP[i][c] + t * (RAMP[i + 1][c] - RAMP[i][c]));
    }
    rgb
}

pub fn ppm_bytes(values: &[f64], height: usize, width: usize, lo: f64, hi: f64) -> Result<Vec<u8>> {
    check(values, height, width)?;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().flat_map(|&v| false_color(unit(v, lo, hi))));
    Ok(out)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout_is_exact() {
        let bytes = pgm_bytes(&[0.0, 0.5, 1.0, 2.0, -1.0, 0.25], 2, 3, 0.0, 1.0).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 255, 0, 64]);
    }

    #[test]
    fn constant_field_is_constant_image() {
        let bytes = pgm_bytes(&[7.0; 16], 4, 4, 0.0, 10.0).unwrap();
        let body = &bytes[bytes.len() - 16..];
        assert!(body.iter().all(|&b| b == body[0]));
        assert_eq!(body[0], 179);
    }

    #[test]
    fn degenerate_range_maps_to_zero() {
        let bytes = pgm_bytes(&[0.0; 4], 2, 2, 0.0, 0.0).unwrap();
        assert!(bytes[bytes.len() - 4..].iter().all(|&b| b == 0));
    }

    #[test]
    fn ppm_has_three_bytes_per_pixel() {
        let bytes = ppm_bytes(&[0.0, 1.0], 1, 2, 0.0, 1.0).unwrap();
        let header = b"P6\n2 1\n255\n";
        assert_eq!(bytes.len(), header.len() + 6);
        assert_eq!(&bytes[header.len() + 3..], &[255, 255, 255]);
        assert_eq!(false_color(0.0), [13, 8, 77]);
    }

    #[test]
    fn wrong_size_is_rejected() {
        assert!(pgm_bytes(&[0.0; 3], 2, 2, 0.0, 1.0).is_err());
    }
}
