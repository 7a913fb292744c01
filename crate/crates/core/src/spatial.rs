//! Discretization of the search region and the squared-Euclidean ground cost.
//!
//! Grid points are cell centers of a uniform lattice. Ordering is row-major
//! with x varying fastest: point `k = iy * nx + ix` sits at
//! `(x_min + (ix + 0.5) * dx, y_min + (iy + 0.5) * dy)`.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A position in the plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn distance_squared(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    /// Rotate by `angle` radians counter-clockwise about `center`.
    pub fn rotated_about(&self, center: &Point, angle: f64) -> Point {
        let (s, c) = angle.sin_cos();
        let dx = self.x - center.x;
        let dy = self.y - center.y;
        Point::new(center.x + c * dx - s * dy, center.y + s * dx + c * dy)
    }
}

impl From<[f64; 2]> for Point {
    fn from(p: [f64; 2]) -> Self {
        Point::new(p[0], p[1])
    }
}

/// Axis-aligned rectangle `[x_min, x_max] x [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    /// The square `[-half, half]^2`.
    pub fn square(half: f64) -> Result<Self> {
        Self::new(-half, half, -half, half)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidGrid("bounds must be finite".into()));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::InvalidGrid(format!(
                "inverted or degenerate bounds [{}, {}] x [{}, {}]",
                self.x_min, self.x_max, self.y_min, self.y_max
            )));
        }
        Ok(())
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn diameter_squared(&self) -> f64 {
        self.width().powi(2) + self.height().powi(2)
    }
}

/// Cell counts along x and y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub nx: usize,
    pub ny: usize,
}

impl Resolution {
    pub const fn new(nx: usize, ny: usize) -> Self {
        Self { nx, ny }
    }

    pub const fn square(n: usize) -> Self {
        Self { nx: n, ny: n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<Point>,
    bounds: Bounds,
    resolution: Resolution,
    tensor: bool,
}

/// Build a uniform cell-centered grid over `bounds`.
pub fn make_grid(bounds: Bounds, resolution: Resolution) -> Result<Grid> {
    bounds.validate()?;
    if resolution.nx == 0 || resolution.ny == 0 {
        return Err(Error::InvalidGrid(format!(
            "resolution must be at least 1 per axis, got {}x{}",
            resolution.nx, resolution.ny
        )));
    }
    let dx = bounds.width() / resolution.nx as f64;
    let dy = bounds.height() / resolution.ny as f64;
    let mut points = Vec::with_capacity(resolution.nx * resolution.ny);
    for iy in 0..resolution.ny {
        let y = bounds.y_min + (iy as f64 + 0.5) * dy;
        for ix in 0..resolution.nx {
            let x = bounds.x_min + (ix as f64 + 0.5) * dx;
            points.push(Point::new(x, y));
        }
    }
    Ok(Grid {
        points,
        bounds,
        resolution,
        tensor: true,
    })
}

impl Grid {
    /// A grid over an explicit point list. Used for tests and ad-hoc
    /// supports; `resolution` is recorded as `n x 1`.
    pub fn from_points(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one point".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::InvalidGrid(format!("point {i} is not finite")));
            }
            if points[..i].iter().any(|q| q == p) {
                return Err(Error::InvalidGrid(format!("duplicate point {i}")));
            }
        }
        let x_min = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let x_max = points.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let y_min = points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let y_max = points.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        // pad zero-extent axes so the bounds stay non-degenerate
        let pad = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let (x_min, x_max) = pad(x_min, x_max);
        let (y_min, y_max) = pad(y_min, y_max);
        let n = points.len();
        Ok(Self {
            points,
            bounds: Bounds {
                x_min,
                x_max,
                y_min,
                y_max,
            },
            resolution: Resolution::new(n, 1),
            tensor: false,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Axis coordinates `(xs, ys)` for grids built by [`make_grid`].
    pub fn axes(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        if !self.tensor {
            return None;
        }
        let Resolution { nx, ny } = self.resolution;
        let xs = (0..nx).map(|ix| self.points[ix].x).collect();
        let ys = (0..ny).map(|iy| self.points[iy * nx].y).collect();
        Some((xs, ys))
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, k: usize) -> Point {
        self.points[k]
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    /// Length of a cell diagonal.
    pub fn cell_diagonal(&self) -> f64 {
        let dx = self.bounds.width() / self.resolution.nx as f64;
        let dy = self.bounds.height() / self.resolution.ny as f64;
        dx.hypot(dy)
    }

    /// Index of the grid point closest to `p` (lowest index on ties).
    pub fn nearest(&self, p: &Point) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, q) in self.points.iter().enumerate() {
            let d = q.distance_squared(p);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Lattice neighbours of `k` in the 8-neighbourhood.
    pub fn neighbours(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        let Resolution { nx, ny } = self.resolution;
        let ix = (k % nx) as isize;
        let iy = (k / nx) as isize;
        (-1isize..=1)
            .flat_map(move |dy| (-1isize..=1).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| dx != 0 || dy != 0)
            .filter_map(move |(dx, dy)| {
                let jx = ix + dx;
                let jy = iy + dy;
                if jx < 0 || jy < 0 || jx >= nx as isize || jy >= ny as isize {
                    None
                } else {
                    Some(jy as usize * nx + jx as usize)
                }
            })
    }

    /// Write the grid as CSV with columns `index,x,y`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["index", "x", "y"])?;
        for (k, p) in self.points.iter().enumerate() {
            w.write_record([k.to_string(), p.x.to_string(), p.y.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Squared Euclidean ground cost between grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    matrix: DMatrix<f64>,
    axes: Option<(Vec<f64>, Vec<f64>)>,
}

impl CostMatrix {
    /// Wrap an arbitrary cost. Entries must be finite and nonnegative.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "cost matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidParameter(
                "cost entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { matrix: m, axes: None })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Tensor-grid axes when the cost separates as `(dx)^2 + (dy)^2`.
    pub fn axes(&self) -> Option<(&[f64], &[f64])> {
        self.axes.as_ref().map(|(x, y)| (x.as_slice(), y.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn max(&self) -> f64 {
        self.matrix.iter().copied().fold(0.0, f64::max)
    }
}

pub fn cost_matrix(grid: &Grid) -> CostMatrix {
    let pts = grid.points();
    let n = pts.len();
    CostMatrix {
        matrix: DMatrix::from_fn(n, n, |k, l| pts[k].distance_squared(&pts[l])),
        axes: grid.axes(),
    }
}
