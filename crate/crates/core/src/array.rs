//! Near-field array model.
//!
//! A sensor at `y_k` observes a point source at `x` through the spherical-wave
//! response `|y_k - x|^{-1/2} exp(-2 pi i |y_k - x| / wavelength)`. The array
//! covariance of a spectrum is `R = sum_k phi_k a(x_k) a(x_k)^H`; its real lift
//! stacks the real parts of the column-major vectorization on top of the
//! imaginary parts, giving a `2p^2`-vector.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{Grid, Point};
use crate::spectrum::Spectrum;

const HERMITIAN_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    label: String,
    sensors: Vec<Point>,
    wavelength: f64,
}

impl ArrayGeometry {
    pub fn new(label: impl Into<String>, sensors: Vec<Point>, wavelength: f64) -> Result<Self> {
        let label = label.into();
        if sensors.is_empty() {
            return Err(Error::InvalidGeometry(format!("array '{label}' has no sensors")));
        }
        if !(wavelength.is_finite() && wavelength > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "array '{label}' wavelength must be positive, got {wavelength}"
            )));
        }
        for (i, s) in sensors.iter().enumerate() {
            if !s.x.is_finite() || !s.y.is_finite() {
                return Err(Error::InvalidGeometry(format!(
                    "array '{label}' sensor {i} is not finite"
                )));
            }
            if let Some(j) = sensors[..i].iter().position(|t| t == s) {
                return Err(Error::InvalidGeometry(format!(
                    "array '{label}' sensors {j} and {i} coincide"
                )));
            }
        }
        Ok(Self {
            label,
            sensors,
            wavelength,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn sensors(&self) -> &[Point] {
        &self.sensors
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn centroid(&self) -> Point {
        let n = self.sensors.len() as f64;
        let (sx, sy) = self
            .sensors
            .iter()
            .fold((0.0, 0.0), |(ax, ay), p| (ax + p.x, ay + p.y));
        Point::new(sx / n, sy / n)
    }

    /// Smallest distance between two sensors (infinite for a single sensor).
    pub fn min_spacing(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.sensors.iter().enumerate() {
            for b in &self.sensors[i + 1..] {
                best = best.min(a.distance(b));
            }
        }
        best
    }

    /// Apply the same map to every sensor, keeping label and wavelength.
    pub fn map_sensors(&self, f: impl Fn(&Point) -> Point) -> Result<Self> {
        Self::new(
            self.label.clone(),
            self.sensors.iter().map(f).collect(),
            self.wavelength,
        )
    }

    pub fn with_wavelength(&self, wavelength: f64) -> Result<Self> {
        Self::new(self.label.clone(), self.sensors.clone(), wavelength)
    }

    /// Write sensor positions as CSV with columns `sensor_index,x,y`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["sensor_index", "x", "y"])?;
        for (i, s) in self.sensors.iter().enumerate() {
            w.write_record([i.to_string(), s.x.to_string(), s.y.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read sensor positions written by [`ArrayGeometry::write_csv`]; the
    /// wavelength comes from the scenario configuration.
    pub fn read_csv<R: Read>(label: &str, reader: R, wavelength: f64) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            sensor_index: usize,
            x: f64,
            y: f64,
        }
        let mut r = csv::Reader::from_reader(reader);
        let mut rows: Vec<Row> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        rows.sort_by_key(|row| row.sensor_index);
        for (i, row) in rows.iter().enumerate() {
            if row.sensor_index != i {
                return Err(Error::InvalidGeometry(format!(
                    "array '{label}': sensor indices must be 0..p, found {}",
                    row.sensor_index
                )));
            }
        }
        Self::new(label, rows.iter().map(|r| Point::new(r.x, r.y)).collect(), wavelength)
    }
}

/// Complex response of `geometry` to a unit point source at `x`.
pub fn steering_vector(geometry: &ArrayGeometry, x: &Point) -> Result<DVector<Complex64>> {
    let k = 2.0 * PI / geometry.wavelength;
    let mut a = DVector::zeros(geometry.len());
    for (i, s) in geometry.sensors.iter().enumerate() {
        let d = s.distance(x);
        if d <= f64::EPSILON * (1.0 + s.x.abs().max(s.y.abs())) {
            return Err(Error::SensorCoincidence {
                array: geometry.label.clone(),
                sensor: i,
                x: x.x,
                y: x.y,
            });
        }
        a[i] = Complex64::from_polar(d.powf(-0.5), -k * d);
    }
    Ok(a)
}

/// Hermitian PSD array covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance(DMatrix<Complex64>);

impl Covariance {
    /// Validate Hermitian symmetry and positive semi-definiteness.
    pub fn new(matrix: DMatrix<Complex64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidCovariance(format!(
                "covariance must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidCovariance("non-finite entry".into()));
        }
        let scale = matrix.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let asym = hermitian_defect(&matrix);
        if asym > HERMITIAN_TOL * scale {
            return Err(Error::InvalidCovariance(format!(
                "not Hermitian (defect {asym:.3e}, scale {scale:.3e})"
            )));
        }
        let (eig, _) = hermitian_eigen(&matrix);
        let norm = eig.iter().map(|e| e.abs()).fold(0.0, f64::max);
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -PSD_TOL * norm {
            return Err(Error::InvalidCovariance(format!(
                "not positive semi-definite (minimum eigenvalue {min:.3e}, norm {norm:.3e})"
            )));
        }
        Ok(Self(matrix))
    }

    pub fn zeros(p: usize) -> Self {
        Self(DMatrix::zeros(p, p))
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn into_inner(self) -> DMatrix<Complex64> {
        self.0
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.0.map(|z| z * s))
    }

    /// Ascending eigenvalues and matching unit eigenvectors (columns).
    pub fn eigen(&self) -> (DVector<f64>, DMatrix<Complex64>) {
        hermitian_eigen(&self.0)
    }

    /// Write as CSV with columns `row,col,re,im` (all `p^2` entries).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["row", "col", "re", "im"])?;
        let p = self.dim();
        for r in 0..p {
            for c in 0..p {
                let z = self.0[(r, c)];
                w.write_record([r.to_string(), c.to_string(), z.re.to_string(), z.im.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            row: usize,
            col: usize,
            re: f64,
            im: f64,
        }
        let mut r = csv::Reader::from_reader(reader);
        let rows: Vec<Row> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        let p = rows.iter().map(|r| r.row.max(r.col) + 1).max().unwrap_or(0);
        if p == 0 || rows.len() != p * p {
            return Err(Error::InvalidCovariance(format!(
                "expected p^2 entries for p = {p}, got {}",
                rows.len()
            )));
        }
        let mut m = DMatrix::zeros(p, p);
        let mut seen = vec![false; p * p];
        for row in rows {
            let idx = row.row + row.col * p;
            if seen[idx] {
                return Err(Error::InvalidCovariance(format!(
                    "duplicate entry ({}, {})",
                    row.row, row.col
                )));
            }
            seen[idx] = true;
            m[(row.row, row.col)] = Complex64::new(row.re, row.im);
        }
        Self::new(m)
    }
}

fn hermitian_defect(m: &DMatrix<Complex64>) -> f64 {
    let p = m.nrows();
    let mut worst = 0.0f64;
    for r in 0..p {
        for c in r..p {
            worst = worst.max((m[(r, c)] - m[(c, r)].conj()).norm());
        }
    }
    worst
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
pub(crate) fn hermitian_eigen(m: &DMatrix<Complex64>) -> (DVector<f64>, DMatrix<Complex64>) {
    // symmetrize first; the solver reads only one triangle
    let h = (m + m.adjoint()).map(|z| z * 0.5);
    let eig = h.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Covariance of point sources at `positions` with the given powers plus
/// white sensor noise of variance `noise_var`.
pub fn point_source_covariance(
    geometry: &ArrayGeometry,
    positions: &[Point],
    powers: &[f64],
    noise_var: f64,
) -> Result<Covariance> {
    if positions.len() != powers.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} positions but {} powers",
            positions.len(),
            powers.len()
        )));
    }
    if powers.iter().any(|p| !p.is_finite() || *p < 0.0) || !(noise_var >= 0.0) {
        return Err(Error::InvalidParameter("powers must be nonnegative".into()));
    }
    let p = geometry.len();
    let mut r = DMatrix::<Complex64>::zeros(p, p);
    for (x, &power) in positions.iter().zip(powers) {
        if power == 0.0 {
            continue;
        }
        let a = steering_vector(geometry, x)?;
        r += &a * a.adjoint() * Complex64::new(power, 0.0);
    }
    for i in 0..p {
        r[(i, i)] += noise_var;
    }
    Covariance::new(r)
}

/// Discretized covariance operator: `R = sum_k phi_k a(x_k) a(x_k)^H`.
pub fn gamma_apply(geometry: &ArrayGeometry, grid: &Grid, spectrum: &Spectrum) -> Result<Covariance> {
    if spectrum.len() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "spectrum has {} entries, grid has {}",
            spectrum.len(),
            grid.len()
        )));
    }
    point_source_covariance(geometry, grid.points(), spectrum.as_slice(), 0.0)
}

/// Column-major vectorization, real parts first then imaginary parts.
pub fn lift_covariance(r: &DMatrix<Complex64>) -> Result<DVector<f64>> {
    if !r.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "lift needs a square matrix, got {}x{}",
            r.nrows(),
            r.ncols()
        )));
    }
    let m = r.len();
    let mut out = DVector::zeros(2 * m);
    // nalgebra storage is column-major
    for (i, z) in r.iter().enumerate() {
        out[i] = z.re;
        out[m + i] = z.im;
    }
    Ok(out)
}

/// Inverse of [`lift_covariance`] for a `p x p` matrix.
pub fn unlift_covariance(v: &DVector<f64>, p: usize) -> Result<DMatrix<Complex64>> {
    let m = p * p;
    if v.len() != 2 * m {
        return Err(Error::DimensionMismatch(format!(
            "lifted vector has length {}, expected {} for p = {p}",
            v.len(),
            2 * m
        )));
    }
    Ok(DMatrix::from_fn(p, p, |r, c| {
        let i = r + c * p;
        Complex64::new(v[i], v[m + i])
    }))
}

/// Real `(2p^2) x n` matrix mapping a spectrum to its lifted covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOperator {
    matrix: DMatrix<f64>,
    label: String,
    sensors: usize,
}

impl ForwardOperator {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    pub fn grid_len(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn apply(&self, spectrum: &Spectrum) -> Result<DVector<f64>> {
        if spectrum.len() != self.grid_len() {
            return Err(Error::DimensionMismatch(format!(
                "spectrum has {} entries, operator expects {}",
                spectrum.len(),
                self.grid_len()
            )));
        }
        Ok(&self.matrix * spectrum.values())
    }
}

pub fn build_forward_operator(geometry: &ArrayGeometry, grid: &Grid) -> Result<ForwardOperator> {
    let p = geometry.len();
    let m = p * p;
    let mut a = DMatrix::zeros(2 * m, grid.len());
    for (k, x) in grid.points().iter().enumerate() {
        let sv = steering_vector(geometry, x).map_err(|e| match e {
            Error::SensorCoincidence { array, sensor, .. } => Error::SensorOnGrid {
                array,
                sensor,
                point: k,
            },
            other => other,
        })?;
        let mut col = a.column_mut(k);
        for c in 0..p {
            for r in 0..p {
                let z = sv[r] * sv[c].conj();
                col[r + c * p] = z.re;
                col[m + r + c * p] = z.im;
            }
        }
    }
    Ok(ForwardOperator {
        matrix: a,
        label: geometry.label.clone(),
        sensors: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::{make_grid, Bounds, Resolution};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn origin_array(wavelength: f64) -> ArrayGeometry {
        ArrayGeometry::new("o", vec![Point::new(0.0, 0.0)], wavelength).unwrap()
    }

    fn test_array() -> ArrayGeometry {
        ArrayGeometry::new(
            "t",
            vec![
                Point::new(-1.0, 0.1),
                Point::new(-1.1, -0.2),
                Point::new(-0.9, 0.35),
                Point::new(-1.3, 0.0),
            ],
            0.3,
        )
        .unwrap()
    }

    #[test]
    fn full_wavelength_phase_wrap() {
        let a = steering_vector(&origin_array(1.0), &Point::new(1.0, 0.0)).unwrap();
        assert!((a[0] - c(1.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn quarter_wave_phase() {
        let a = steering_vector(&origin_array(1.0), &Point::new(0.25, 0.0)).unwrap();
        assert!((a[0] - c(0.0, -2.0)).norm() < 1e-14);
    }

    #[test]
    fn radial_symmetry_of_amplitude() {
        let g = origin_array(0.37);
        let r: f64 = 0.8;
        for t in 0..12 {
            let th = t as f64 * 0.5;
            let a = steering_vector(&g, &Point::new(r * th.cos(), r * th.sin())).unwrap();
            assert!((a[0].norm() - r.powf(-0.5)).abs() < 1e-14);
        }
    }

    #[test]
    fn coincident_source_names_sensor() {
        let g = test_array();
        match steering_vector(&g, &Point::new(-0.9, 0.35)) {
            Err(Error::SensorCoincidence { sensor, .. }) => assert_eq!(sensor, 2),
            other => panic!("unexpected {other:?}"),
        }
        let grid = Grid::from_points(vec![Point::new(0.0, 0.0), Point::new(-1.3, 0.0)]).unwrap();
        match build_forward_operator(&g, &grid) {
            Err(Error::SensorOnGrid { sensor, point, .. }) => assert_eq!((sensor, point), (3, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn geometry_validation() {
        assert!(ArrayGeometry::new("e", vec![], 1.0).is_err());
        assert!(ArrayGeometry::new("w", vec![Point::new(0.0, 0.0)], 0.0).is_err());
        let p = Point::new(1.0, 2.0);
        assert!(ArrayGeometry::new("d", vec![p, p], 1.0).is_err());
    }

    #[test]
    fn zero_spectrum_maps_to_zero() {
        let grid = make_grid(Bounds::square(0.5).unwrap(), Resolution::square(3)).unwrap();
        let r = gamma_apply(&test_array(), &grid, &Spectrum::zeros(9)).unwrap();
        assert!(r.matrix().iter().all(|z| *z == c(0.0, 0.0)));
    }

    #[test]
    fn single_cell_is_rank_one() {
        let grid = make_grid(Bounds::square(0.5).unwrap(), Resolution::square(3)).unwrap();
        let g = test_array();
        let phi = Spectrum::point_mass(9, 4, 7.5).unwrap();
        let r = gamma_apply(&g, &grid, &phi).unwrap();
        let a = steering_vector(&g, &grid.point(4)).unwrap();
        let expected = &a * a.adjoint() * c(7.5, 0.0);
        assert!((r.matrix() - &expected).norm() < 1e-12);
        let (eig, _) = r.eigen();
        let nonzero = eig.iter().filter(|e| e.abs() > 1e-9 * eig.amax()).count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn gamma_matches_double_loop() {
        let grid = Grid::from_points(vec![
            Point::new(0.0, 0.0),
            Point::new(0.3, -0.1),
            Point::new(-0.2, 0.4),
            Point::new(0.45, 0.45),
            Point::new(-0.4, -0.3),
        ])
        .unwrap();
        let g = test_array();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let phi: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 10.0).collect();
            let r = gamma_apply(&g, &grid, &Spectrum::from_slice(&phi).unwrap()).unwrap();
            // independent oracle: closed-form entries, no shared steering code
            let kw = 2.0 * PI / g.wavelength();
            for i in 0..g.len() {
                for j in 0..g.len() {
                    let mut acc = c(0.0, 0.0);
                    for (k, x) in grid.points().iter().enumerate() {
                        let di = ((g.sensors()[i].x - x.x).powi(2) + (g.sensors()[i].y - x.y).powi(2)).sqrt();
                        let dj = ((g.sensors()[j].x - x.x).powi(2) + (g.sensors()[j].y - x.y).powi(2)).sqrt();
                        let amp = 1.0 / (di * dj).sqrt();
                        let phase = -kw * (di - dj);
                        acc += c(phi[k] * amp * phase.cos(), phi[k] * amp * phase.sin());
                    }
                    assert!((r.matrix()[(i, j)] - acc).norm() < 1e-12 * (1.0 + acc.norm()));
                }
            }
        }
    }

    #[test]
    fn rigid_motion_invariance() {
        let grid = make_grid(Bounds::square(0.5).unwrap(), Resolution::square(4)).unwrap();
        let g = test_array();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let phi: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
        let phi = Spectrum::from_slice(&phi).unwrap();
        let r0 = gamma_apply(&g, &grid, &phi).unwrap();
        for _ in 0..5 {
            let th = rng.random_range(0.0..2.0 * PI);
            let (dx, dy) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let motion = |p: &Point| {
                let q = p.rotated_about(&Point::new(0.0, 0.0), th);
                Point::new(q.x + dx, q.y + dy)
            };
            let moved_grid = Grid::from_points(grid.points().iter().map(motion).collect()).unwrap();
            let r1 = gamma_apply(&g.map_sensors(motion).unwrap(), &moved_grid, &phi).unwrap();
            assert!((r1.matrix() - r0.matrix()).norm() <= 1e-12 * r0.matrix().norm());
        }
    }

    #[test]
    fn single_column_operator() {
        let grid = Grid::from_points(vec![Point::new(0.1, 0.2)]).unwrap();
        let g = test_array();
        let op = build_forward_operator(&g, &grid).unwrap();
        let a = steering_vector(&g, &grid.point(0)).unwrap();
        let lifted = lift_covariance(&(&a * a.adjoint())).unwrap();
        assert_eq!(op.matrix().ncols(), 1);
        assert!((op.matrix().column(0) - lifted).norm() < 1e-14);
    }

    #[test]
    fn operator_consistent_with_gamma() {
        let grid = make_grid(Bounds::square(0.5).unwrap(), Resolution::square(3)).unwrap();
        let g = test_array();
        let op = build_forward_operator(&g, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let phi = Spectrum::new(DVector::from_fn(9, |_, _| rng.random::<f64>() * 5.0)).unwrap();
            let direct = lift_covariance(gamma_apply(&g, &grid, &phi).unwrap().matrix()).unwrap();
            let via_op = op.apply(&phi).unwrap();
            assert!((direct - via_op).amax() < 1e-12);
        }
    }

    #[test]
    fn wavelength_changes_only_phase_rows() {
        let grid = make_grid(Bounds::square(0.5).unwrap(), Resolution::square(2)).unwrap();
        let g = test_array();
        let p = g.len();
        let a1 = build_forward_operator(&g, &grid).unwrap();
        let a2 = build_forward_operator(&g.with_wavelength(0.71).unwrap(), &grid).unwrap();
        // diagonal covariance entries carry only amplitude: |a_r|^2
        for r in 0..p {
            let idx = r + r * p;
            for k in 0..grid.len() {
                assert!((a1.matrix()[(idx, k)] - a2.matrix()[(idx, k)]).abs() < 1e-14);
                assert_eq!(a1.matrix()[(p * p + idx, k)], 0.0);
            }
        }
        // off-diagonal entries carry phase and do change
        assert!((a1.matrix().row(1) - a2.matrix().row(1)).amax() > 1e-3);
    }

    #[test]
    fn lift_examples() {
        let eye = DMatrix::<Complex64>::identity(2, 2);
        let l = lift_covariance(&eye).unwrap();
        assert_eq!(l.as_slice(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let m = DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, 1.0), c(0.0, -1.0), c(0.0, 0.0)]);
        let l = lift_covariance(&m).unwrap();
        assert_eq!(l.as_slice(), &[0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0]);
        assert!(lift_covariance(&DMatrix::<Complex64>::zeros(2, 3)).is_err());
    }

    #[test]
    fn covariance_validation() {
        let not_herm = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 1.0), c(0.0, 1.0), c(1.0, 0.0)]);
        assert!(Covariance::new(not_herm).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(2.0, 0.0), c(2.0, 0.0), c(1.0, 0.0)]);
        assert!(Covariance::new(indefinite).is_err());
    }

    #[test]
    fn covariance_csv_round_trip() {
        let grid = make_grid(Bounds::square(0.5).unwrap(), Resolution::square(2)).unwrap();
        let r = gamma_apply(&test_array(), &grid, &Spectrum::from_slice(&[1.0, 2.0, 0.5, 3.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let back = Covariance::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn geometry_csv_round_trip() {
        let g = test_array();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let back = ArrayGeometry::read_csv("t", buf.as_slice(), 0.3).unwrap();
        assert_eq!(back, g);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_hermitian(p: usize, seed: u64) -> DMatrix<Complex64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(p, p, |_, _| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
            &x + x.adjoint()
        }

        proptest! {
            #[test]
            fn lift_round_trip_and_linearity(p in 1usize..6, seed in 0u64..10_000) {
                let r1 = random_hermitian(p, seed);
                let r2 = random_hermitian(p, seed + 1);
                let l1 = lift_covariance(&r1).unwrap();
                prop_assert_eq!(unlift_covariance(&l1, p).unwrap(), r1.clone());
                let l2 = lift_covariance(&r2).unwrap();
                let l12 = lift_covariance(&(&r1 + &r2)).unwrap();
                prop_assert!((l12 - (l1 + l2)).amax() < 1e-15);
            }

            #[test]
            fn gamma_is_hermitian_psd(seed in 0u64..10_000) {
                let grid = make_grid(Bounds::square(0.5).unwrap(), Resolution::new(4, 3)).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let phi = Spectrum::new(DVector::from_fn(12, |_, _| rng.random::<f64>() * 100.0)).unwrap();
                // Covariance::new enforces both properties
                prop_assert!(gamma_apply(&test_array(), &grid, &phi).is_ok());
            }
        }
    }
}
