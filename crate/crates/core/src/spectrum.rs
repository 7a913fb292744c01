use std::io::Write;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::spatial::Grid;

/// Nonnegative mass per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum(DVector<f64>);

impl Spectrum {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if let Some((k, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidSpectrum(format!(
                "entry {k} is {v}; spectra must be finite and nonnegative"
            )));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    /// Power `mass` concentrated on cell `k` of an `n`-cell grid.
    pub fn point_mass(n: usize, k: usize, mass: f64) -> Result<Self> {
        let mut v = DVector::zeros(n);
        v[k] = mass;
        Self::new(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn total(&self) -> f64 {
        self.0.sum()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

/// Write values over a grid as CSV with columns `index,x,y,mass`.
pub fn write_spectrum_csv<W: Write>(writer: W, grid: &Grid, values: &[f64]) -> Result<()> {
    if values.len() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "spectrum has {} entries, grid has {}",
            values.len(),
            grid.len()
        )));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "x", "y", "mass"])?;
    for (k, (p, m)) in grid.points().iter().zip(values).enumerate() {
        w.write_record([k.to_string(), p.x.to_string(), p.y.to_string(), m.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a spectrum CSV.
#[derive(Debug, Clone, Copy, PartialEq, serde::Deserialize)]
pub struct SpectrumRow {
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub mass: f64,
}

pub fn read_spectrum_csv<R: std::io::Read>(reader: R) -> Result<Vec<SpectrumRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}
