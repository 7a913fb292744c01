//! Synthetic scenarios: two asynchronous arrays observing uncorrelated
//! circular Gaussian sources in white sensor noise.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::array::{point_source_covariance, steering_vector, ArrayGeometry, Covariance};
use crate::error::{Error, Result};
use crate::spatial::{Bounds, Point};

/// Generator used for every stochastic operation.
pub type SimRng = ChaCha20Rng;

/// Mix a master seed with a list of indices into an independent stream seed
/// (splitmix64 finalizer folded over the inputs).
pub fn derive_seed(master: u64, indices: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    indices.iter().fold(mix(master), |acc, &i| mix(acc ^ mix(i)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Geometries that generate the data.
    pub arrays: Vec<ArrayGeometry>,
    /// Geometries the estimators believe in.
    pub assumed_arrays: Vec<ArrayGeometry>,
    pub sources: Vec<Point>,
    pub powers: Vec<f64>,
    pub noise_var: f64,
    pub snapshots: usize,
    pub seed: u64,
    /// Region the sources are drawn from.
    pub region: Bounds,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.arrays.is_empty() {
            return Err(Error::InvalidParameter("scenario has no arrays".into()));
        }
        if self.arrays.len() != self.assumed_arrays.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} true arrays but {} assumed arrays",
                self.arrays.len(),
                self.assumed_arrays.len()
            )));
        }
        for (t, a) in self.arrays.iter().zip(&self.assumed_arrays) {
            if t.len() != a.len() {
                return Err(Error::DimensionMismatch(format!(
                    "array '{}' has {} true sensors but {} assumed",
                    t.label(),
                    t.len(),
                    a.len()
                )));
            }
        }
        if self.sources.len() != self.powers.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} sources but {} powers",
                self.sources.len(),
                self.powers.len()
            )));
        }
        if let Some(s) = self.sources.iter().find(|s| !self.region.contains(s)) {
            return Err(Error::InvalidParameter(format!(
                "source ({}, {}) lies outside the source region",
                s.x, s.y
            )));
        }
        if self.powers.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidParameter("source powers must be positive".into()));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::InvalidParameter("noise variance must be nonnegative".into()));
        }
        if self.snapshots == 0 {
            return Err(Error::InvalidParameter("need at least one snapshot".into()));
        }
        Ok(())
    }

    /// Rotate true array `index` by `angle_deg` about its own centroid,
    /// leaving the assumed geometry untouched.
    pub fn with_misalignment(&self, index: usize, angle_deg: f64) -> Result<Self> {
        let geom = self.arrays.get(index).ok_or_else(|| {
            Error::InvalidParameter(format!("no array at index {index} to misalign"))
        })?;
        let mut out = self.clone();
        out.arrays[index] = rotate_array(geom, angle_deg, &geom.centroid())?;
        Ok(out)
    }

    /// Replace the sources, keeping everything else.
    pub fn with_sources(&self, sources: Vec<Point>) -> Result<Self> {
        let mut out = self.clone();
        out.sources = sources;
        out.validate()?;
        Ok(out)
    }

    /// Expected covariances `sum_i P_i a(s_i) a(s_i)^H + noise_var I`, i.e. the
    /// infinite-snapshot limit, generated with the true geometries.
    pub fn expected_covariances(&self) -> Result<Vec<Covariance>> {
        self.arrays
            .iter()
            .map(|g| point_source_covariance(g, &self.sources, &self.powers, self.noise_var))
            .collect()
    }

    /// Noise-free model covariances `Gamma(Phi)` of the true source spectrum.
    pub fn exact_covariances(&self) -> Result<Vec<Covariance>> {
        self.arrays
            .iter()
            .map(|g| point_source_covariance(g, &self.sources, &self.powers, 0.0))
            .collect()
    }

    /// Sample covariances over `snapshots` simulated snapshots.
    pub fn sample_covariances(&self) -> Result<Vec<Covariance>> {
        generate_snapshots(self)?
            .iter()
            .map(sample_covariance)
            .collect()
    }
}

/// Layout parameters for the default two-array setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefaultLayout {
    pub wavelength: f64,
    pub ellipse_sensors: usize,
    pub ellipse_center: [f64; 2],
    /// Semi-axes as multiples of `0.5 * wavelength * sensors / (2 pi)`.
    pub ellipse_axis_factors: [f64; 2],
    pub linear_sensors: usize,
    pub linear_center: [f64; 2],
    /// Direction of the linear array, degrees from +x.
    pub linear_angle_deg: f64,
}

impl Default for DefaultLayout {
    fn default() -> Self {
        Self {
            wavelength: 0.2,
            ellipse_sensors: 8,
            ellipse_center: [-1.2, 0.0],
            ellipse_axis_factors: [1.0, 0.6],
            linear_sensors: 7,
            linear_center: [1.2, 0.0],
            linear_angle_deg: 90.0,
        }
    }
}

impl DefaultLayout {
    /// Sensors equally spaced in angle on an axis-aligned ellipse.
    pub fn ellipse(&self) -> Result<ArrayGeometry> {
        let n = self.ellipse_sensors;
        let base = 0.5 * self.wavelength * n as f64 / (2.0 * PI);
        let (ax, ay) = (base * self.ellipse_axis_factors[0], base * self.ellipse_axis_factors[1]);
        let c = Point::from(self.ellipse_center);
        let sensors = (0..n)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / n as f64;
                Point::new(c.x + ax * t.cos(), c.y + ay * t.sin())
            })
            .collect();
        ArrayGeometry::new("ellipse", sensors, self.wavelength)
    }

    /// Uniform linear array with half-wavelength spacing.
    pub fn linear(&self) -> Result<ArrayGeometry> {
        let n = self.linear_sensors;
        let d = 0.5 * self.wavelength;
        let c = Point::from(self.linear_center);
        let (sin, cos) = self.linear_angle_deg.to_radians().sin_cos();
        let sensors = (0..n)
            .map(|k| {
                let offset = (k as f64 - (n as f64 - 1.0) / 2.0) * d;
                Point::new(c.x + offset * cos, c.y + offset * sin)
            })
            .collect();
        ArrayGeometry::new("linear", sensors, self.wavelength)
    }
}

/// Two uncorrelated sources of variance 100 in unit-variance noise, 500
/// snapshots, an 8-sensor ellipse and a 7-sensor ULA whose wavelength is
/// twice its sensor spacing.
pub fn default_scenario() -> Scenario {
    scenario_from_layout(&DefaultLayout::default()).expect("default layout is valid")
}

pub fn scenario_from_layout(layout: &DefaultLayout) -> Result<Scenario> {
    let arrays = vec![layout.ellipse()?, layout.linear()?];
    let s = Scenario {
        assumed_arrays: arrays.clone(),
        arrays,
        sources: vec![Point::new(-0.2, 0.15), Point::new(0.25, -0.2)],
        powers: vec![100.0, 100.0],
        noise_var: 1.0,
        snapshots: 500,
        seed: 0,
        region: Bounds::square(0.5)?,
    };
    s.validate()?;
    Ok(s)
}

/// Rigid rotation of all sensors by `angle_deg` (counter-clockwise) about
/// `center`.
pub fn rotate_array(geometry: &ArrayGeometry, angle_deg: f64, center: &Point) -> Result<ArrayGeometry> {
    let angle = angle_deg.to_radians();
    geometry.map_sensors(|p| p.rotated_about(center, angle))
}

/// Draw `n` positions uniformly on `region`.
pub fn uniform_sources(region: &Bounds, n: usize, rng: &mut impl Rng) -> Vec<Point> {
    (0..n)
        .map(|_| {
            Point::new(
                region.x_min + region.width() * rng.random::<f64>(),
                region.y_min + region.height() * rng.random::<f64>(),
            )
        })
        .collect()
}

fn circular_gaussian(rng: &mut impl Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Simulated snapshots, one `p_j x N` matrix per array.
///
/// Source waveforms are shared by all arrays within a snapshot; sensor noise
/// is independent across sensors, arrays and snapshots. Draw order: all
/// source samples (snapshot-major), then the noise of array 0, 1, ...
pub fn generate_snapshots(scenario: &Scenario) -> Result<Vec<DMatrix<Complex64>>> {
    scenario.validate()?;
    let mut rng = SimRng::seed_from_u64(scenario.seed);
    let n = scenario.snapshots;
    let s = scenario.sources.len();
    let mut waveforms = DMatrix::<Complex64>::zeros(s, n);
    for t in 0..n {
        for (i, &p) in scenario.powers.iter().enumerate() {
            waveforms[(i, t)] = circular_gaussian(&mut rng, p);
        }
    }
    let mut out = Vec::with_capacity(scenario.arrays.len());
    for geom in &scenario.arrays {
        let p = geom.len();
        let mut steering = DMatrix::<Complex64>::zeros(p, s);
        for (i, src) in scenario.sources.iter().enumerate() {
            steering.set_column(i, &steering_vector(geom, src)?);
        }
        let mut x = &steering * &waveforms;
        if scenario.noise_var > 0.0 {
            for t in 0..n {
                for k in 0..p {
                    x[(k, t)] += circular_gaussian(&mut rng, scenario.noise_var);
                }
            }
        }
        out.push(x);
    }
    Ok(out)
}

/// `(1/N) X X^H`
pub fn sample_covariance(snapshots: &DMatrix<Complex64>) -> Result<Covariance> {
    let n = snapshots.ncols();
    if n == 0 || snapshots.nrows() == 0 {
        return Err(Error::InvalidParameter("empty snapshot matrix".into()));
    }
    let r = snapshots * snapshots.adjoint() / Complex64::new(n as f64, 0.0);
    // exact Hermitian symmetry; the product is only symmetric to round-off
    let r = (&r + r.adjoint()) / Complex64::new(2.0, 0.0);
    Covariance::new(r)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub p: usize,
    pub n: usize,
    pub label: String,
}

/// Binary snapshot dump: a little-endian `u32` header length, the JSON
/// [`SnapshotHeader`], then `p * n` interleaved `(re, im)` little-endian `f64`
/// pairs, snapshot-major (all sensors of snapshot 0 first).
pub fn write_snapshots<W: Write>(mut w: W, label: &str, x: &DMatrix<Complex64>) -> Result<()> {
    let header = serde_json::to_vec(&SnapshotHeader {
        p: x.nrows(),
        n: x.ncols(),
        label: label.to_string(),
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for z in x.iter() {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshots<R: Read>(mut r: R) -> Result<(SnapshotHeader, DMatrix<Complex64>)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: SnapshotHeader =
        serde_json::from_slice(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut buf = [0u8; 8];
    let mut next = |r: &mut R| -> Result<f64> {
        r.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    };
    let mut x = DMatrix::zeros(header.p, header.n);
    for t in 0..header.n {
        for k in 0..header.p {
            let re = next(&mut r)?;
            let im = next(&mut r)?;
            x[(k, t)] = Complex64::new(re, im);
        }
    }
    Ok((header, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_matches_setup() {
        let s = default_scenario();
        assert_eq!(s.arrays.len(), 2);
        assert_eq!(s.arrays[0].len(), 8);
        assert_eq!(s.arrays[1].len(), 7);
        let ula = &s.arrays[1];
        assert!((ula.wavelength() / ula.min_spacing() - 2.0).abs() < 1e-12);
        assert_eq!(s.powers, vec![100.0, 100.0]);
        assert_eq!(s.noise_var, 1.0);
        assert_eq!(s.snapshots, 500);
        assert_eq!(s.arrays, s.assumed_arrays);
    }

    #[test]
    fn rotation_properties() {
        let g = ArrayGeometry::new("r", vec![Point::new(1.0, 0.0), Point::new(0.3, -0.7)], 0.5).unwrap();
        let o = Point::new(0.0, 0.0);
        let full = rotate_array(&g, 360.0, &o).unwrap();
        for (a, b) in full.sensors().iter().zip(g.sensors()) {
            assert!(a.distance(b) < 1e-12);
        }
        let quarter = rotate_array(&g, 90.0, &o).unwrap();
        assert!(quarter.sensors()[0].distance(&Point::new(0.0, 1.0)) < 1e-15);
        assert_eq!(quarter.wavelength(), 0.5);
        let c = Point::new(0.2, 0.4);
        let two_step = rotate_array(&rotate_array(&g, 17.0, &c).unwrap(), 25.5, &c).unwrap();
        let one_step = rotate_array(&g, 42.5, &c).unwrap();
        for (a, b) in two_step.sensors().iter().zip(one_step.sensors()) {
            assert!(a.distance(b) < 1e-12);
        }
    }

    #[test]
    fn snapshots_are_deterministic() {
        let mut s = default_scenario();
        s.snapshots = 50;
        s.seed = 99;
        let a = generate_snapshots(&s).unwrap();
        let b = generate_snapshots(&s).unwrap();
        assert_eq!(a, b);
        s.seed = 100;
        assert_ne!(generate_snapshots(&s).unwrap(), a);
    }

    #[test]
    fn noise_free_sample_covariance_converges() {
        let mut s = default_scenario();
        s.sources = vec![Point::new(0.1, -0.3)];
        s.powers = vec![100.0];
        s.noise_var = 0.0;
        s.snapshots = 100_000;
        s.seed = 4;
        let x = generate_snapshots(&s).unwrap();
        let exact = s.expected_covariances().unwrap();
        for (xj, rj) in x.iter().zip(&exact) {
            let r_hat = sample_covariance(xj).unwrap();
            let rel = (r_hat.matrix() - rj.matrix()).norm() / rj.matrix().norm();
            assert!(rel < 0.1, "relative error {rel}");
        }
    }

    #[test]
    fn noise_only_diagonal_concentrates() {
        let mut s = default_scenario();
        s.sources.clear();
        s.powers.clear();
        s.snapshots = 10_000;
        s.seed = 5;
        for x in generate_snapshots(&s).unwrap() {
            let r = sample_covariance(&x).unwrap();
            let mean = r.matrix().diagonal().iter().map(|z| z.re).sum::<f64>() / r.dim() as f64;
            assert!((0.9..=1.1).contains(&mean), "mean diagonal {mean}");
        }
    }

    #[test]
    fn sources_shared_noise_independent() {
        let mut s = default_scenario();
        s.snapshots = 2000;
        s.seed = 8;
        s.sources = vec![Point::new(0.0, 0.0)];
        s.powers = vec![100.0];
        let with_noise = generate_snapshots(&s).unwrap();
        let mut quiet = s.clone();
        quiet.noise_var = 0.0;
        let clean = generate_snapshots(&quiet).unwrap();
        // same seed and draw order: the source component is identical
        let a0 = steering_vector(&s.arrays[0], &s.sources[0]).unwrap();
        let a1 = steering_vector(&s.arrays[1], &s.sources[0]).unwrap();
        let w0 = clean[0][(0, 0)] / a0[0];
        let w1 = clean[1][(0, 0)] / a1[0];
        assert!((w0 - w1).norm() < 1e-9 * w0.norm());
        // the noise residuals of the two arrays are uncorrelated
        let n0 = &with_noise[0] - &clean[0];
        let n1 = &with_noise[1] - &clean[1];
        let cross: Complex64 = n0.row(0).iter().zip(n1.row(0).iter()).map(|(a, b)| a * b.conj()).sum();
        let cross = cross.norm() / s.snapshots as f64;
        assert!(cross < 0.1, "cross-array noise correlation {cross}");
    }

    #[test]
    fn sample_covariance_examples() {
        let x = nalgebra::DVector::from_column_slice(&[Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.1)]);
        let cols = DMatrix::from_fn(2, 5, |r, _| x[r]);
        let r = sample_covariance(&cols).unwrap();
        assert!((r.matrix() - &x * x.adjoint()).norm() < 1e-14);
        let eye = DMatrix::<Complex64>::identity(3, 3);
        let r = sample_covariance(&eye).unwrap();
        assert!((r.matrix() - eye / Complex64::new(3.0, 0.0)).norm() < 1e-15);
        assert!(sample_covariance(&DMatrix::zeros(2, 0)).is_err());
    }

    #[test]
    fn sample_covariance_is_psd() {
        let mut rng = SimRng::seed_from_u64(1);
        for _ in 0..20 {
            let x = DMatrix::from_fn(5, 3, |_, _| circular_gaussian(&mut rng, 1.0));
            let r = sample_covariance(&x).unwrap();
            let (eig, _) = r.eigen();
            assert!(eig.min() >= -1e-12 * eig.amax());
        }
    }

    #[test]
    fn snapshot_dump_round_trip() {
        let mut s = default_scenario();
        s.snapshots = 7;
        let x = generate_snapshots(&s).unwrap();
        let mut buf = Vec::new();
        write_snapshots(&mut buf, "ellipse", &x[0]).unwrap();
        let (h, back) = read_snapshots(buf.as_slice()).unwrap();
        assert_eq!(h, SnapshotHeader { p: 8, n: 7, label: "ellipse".into() });
        assert_eq!(back, x[0]);
    }

    #[test]
    fn invalid_scenarios() {
        let mut s = default_scenario();
        s.sources[0] = Point::new(0.9, 0.0);
        assert!(s.validate().is_err());
        let mut s = default_scenario();
        s.snapshots = 0;
        assert!(s.validate().is_err());
        let mut s = default_scenario();
        s.powers[1] = 0.0;
        assert!(s.validate().is_err());
        let mut s = default_scenario();
        s.assumed_arrays.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, &[0, 0]);
        assert_ne!(a, derive_seed(1, &[0, 1]));
        assert_ne!(a, derive_seed(2, &[0, 0]));
        assert_eq!(a, derive_seed(1, &[0, 0]));
    }
}
