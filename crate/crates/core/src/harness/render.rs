//! Grayscale heatmaps of spectra on tensor grids.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::spectrum::{read_spectrum_csv, SpectrumRow};

/// Render rows of a spectrum CSV. Pixel brightness is `mass / max(mass)`;
/// `+y` points up and each cell becomes a `scale x scale` block.
pub fn render_rows(rows: &[SpectrumRow], scale: u32) -> Result<GrayImage> {
    if rows.is_empty() {
        return Err(Error::InvalidSpectrum("nothing to render".into()));
    }
    if scale == 0 {
        return Err(Error::InvalidParameter("render scale must be at least 1".into()));
    }
    if rows.iter().any(|r| !r.mass.is_finite() || r.mass < 0.0) {
        return Err(Error::InvalidSpectrum("masses must be finite and nonnegative".into()));
    }
    let xs = axis(rows.iter().map(|r| r.x));
    let ys = axis(rows.iter().map(|r| r.y));
    if xs.len() * ys.len() != rows.len() {
        return Err(Error::InvalidGrid(format!(
            "{} rows do not form a {}x{} tensor grid",
            rows.len(),
            xs.len(),
            ys.len()
        )));
    }
    let (nx, ny) = (xs.len() as u32, ys.len() as u32);
    let max = rows.iter().map(|r| r.mass).fold(0.0, f64::max);
    let mut img = GrayImage::new(nx * scale, ny * scale);
    for r in rows {
        let ix = xs.partition_point(|&x| x < r.x) as u32;
        let iy = ys.partition_point(|&y| y < r.y) as u32;
        let level = if max > 0.0 { (255.0 * r.mass / max).round() as u8 } else { 0 };
        let top = (ny - 1 - iy) * scale;
        for dy in 0..scale {
            for dx in 0..scale {
                img.put_pixel(ix * scale + dx, top + dy, Luma([level]));
            }
        }
    }
    Ok(img)
}

fn axis(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Read a spectrum CSV and write a PNG.
pub fn render_file(input: &Path, output: &Path, scale: u32) -> Result<()> {
    let file = std::fs::File::open(input)
        .map_err(|e| Error::Config(format!("cannot open spectrum {}: {e}", input.display())))?;
    let rows = read_spectrum_csv(file)?;
    render_rows(&rows, scale)?.save(output)?;
    Ok(())
}
