//! Tiny visualization helpers: min-max normalization and binary PGM
//! (P5) export for attention heatmaps.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Scale values to [0,1]; a constant input maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min).is_normal() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

/// Write a grayscale map (values in [0,1], row-major) as binary PGM.
pub fn write_pgm(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::Invalid(format!(
            "pgm: {} values for {h}x{w} map",
            values.len()
        )));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}
