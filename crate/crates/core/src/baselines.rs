//! Non-coherent MUSIC and MVDR: per-array pseudo-spectra combined by
//! summation, each using only that array's covariance and assumed geometry.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::array::{steering_vector, ArrayGeometry, Covariance};
use crate::error::{Error, Result};
use crate::spatial::Grid;

/// Floor applied to the MUSIC denominator.
pub const MUSIC_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSpectrum {
    pub values: Vec<f64>,
    pub method: &'static str,
    /// Grid points where the MUSIC denominator hit [`MUSIC_FLOOR`].
    pub floor_hits: usize,
}

fn check_inputs(covariances: &[Covariance], geometries: &[ArrayGeometry]) -> Result<()> {
    if covariances.is_empty() {
        return Err(Error::InvalidParameter("no covariances".into()));
    }
    if covariances.len() != geometries.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} covariances but {} geometries",
            covariances.len(),
            geometries.len()
        )));
    }
    for (r, g) in covariances.iter().zip(geometries) {
        if r.dim() != g.len() {
            return Err(Error::DimensionMismatch(format!(
                "array '{}' has {} sensors but covariance is {}x{}",
                g.label(),
                g.len(),
                r.dim(),
                r.dim()
            )));
        }
    }
    Ok(())
}

fn unit_steering(g: &ArrayGeometry, grid: &Grid, k: usize) -> Result<DVector<Complex64>> {
    let a = steering_vector(g, &grid.point(k))?;
    let norm = a.norm();
    Ok(a / Complex64::new(norm, 0.0))
}

/// `P(x) = 1 / sum_j |E_j^H a_j(x)|^2` with unit-norm steering vectors and
/// `E_j` the noise subspace of `R_j`.
pub fn noncoherent_music(
    covariances: &[Covariance],
    geometries: &[ArrayGeometry],
    grid: &Grid,
    n_sources: usize,
) -> Result<PseudoSpectrum> {
    check_inputs(covariances, geometries)?;
    let mut noise_subspaces: Vec<DMatrix<Complex64>> = Vec::with_capacity(covariances.len());
    for (r, g) in covariances.iter().zip(geometries) {
        let p = r.dim();
        if n_sources >= p {
            return Err(Error::InvalidParameter(format!(
                "{n_sources} sources need more than {p} sensors in array '{}'",
                g.label()
            )));
        }
        let (_, vectors) = r.eigen();
        noise_subspaces.push(vectors.columns(0, p - n_sources).into_owned());
    }
    let denominators: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let mut d = 0.0;
            for (g, en) in geometries.iter().zip(&noise_subspaces) {
                let a = unit_steering(g, grid, k)?;
                d += en.ad_mul(&a).norm_squared();
            }
            Ok(d)
        })
        .collect::<Result<_>>()?;
    let floor_hits = denominators.iter().filter(|&&d| d < MUSIC_FLOOR).count();
    Ok(PseudoSpectrum {
        values: denominators.iter().map(|d| 1.0 / d.max(MUSIC_FLOOR)).collect(),
        method: "music",
        floor_hits,
    })
}

/// Raw MUSIC denominator `sum_j |E_j^H a_j(x)|^2` at one position.
pub fn music_denominator(
    covariances: &[Covariance],
    geometries: &[ArrayGeometry],
    x: &crate::spatial::Point,
    n_sources: usize,
) -> Result<f64> {
    let grid = Grid::from_points(vec![*x])?;
    let s = noncoherent_music(covariances, geometries, &grid, n_sources)?;
    Ok(1.0 / s.values[0])
}

/// `P(x) = sum_j 1 / (a_j(x)^H (R_j + load I)^{-1} a_j(x))` with unit-norm
/// steering vectors.
pub fn noncoherent_mvdr(
    covariances: &[Covariance],
    geometries: &[ArrayGeometry],
    grid: &Grid,
    diagonal_load: f64,
) -> Result<PseudoSpectrum> {
    check_inputs(covariances, geometries)?;
    if !(diagonal_load >= 0.0 && diagonal_load.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "diagonal load must be nonnegative, got {diagonal_load}"
        )));
    }
    let mut inverses = Vec::with_capacity(covariances.len());
    for (r, g) in covariances.iter().zip(geometries) {
        let p = r.dim();
        let loaded = r.matrix() + DMatrix::<Complex64>::identity(p, p) * Complex64::new(diagonal_load, 0.0);
        let chol = loaded.cholesky().ok_or_else(|| {
            Error::InvalidCovariance(format!(
                "loaded covariance of array '{}' is singular; increase the diagonal load",
                g.label()
            ))
        })?;
        inverses.push(chol.inverse());
    }
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let mut acc = 0.0;
            for (g, inv) in geometries.iter().zip(&inverses) {
                let a = unit_steering(g, grid, k)?;
                let q = a.dotc(&(inv * &a)).re;
                acc += 1.0 / q;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    Ok(PseudoSpectrum {
        values,
        method: "mvdr",
        floor_hits: 0,
    })
}
