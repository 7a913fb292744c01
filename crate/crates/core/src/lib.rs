//! Non-coherent sensor fusion for 2-D source localization.
//!
//! Each sensor array contributes only its own covariance matrix. The fused
//! spatial spectrum is the entropy-regularized optimal-transport barycenter
//! of per-array spectra, each of which must (up to a penalized slack)
//! reproduce its array's covariance. Because transport cost measures
//! displacement on the plane, arrays whose assumed geometry is slightly off
//! still agree on a nearby barycenter instead of producing spurious peaks.
//!
//! Modules, bottom up:
//!
//! - [`spatial`]: search grid and squared-Euclidean ground cost
//! - [`array`]: near-field steering vectors, covariance operator, real lift
//! - [`transport`]: Gibbs kernel, Sinkhorn, exact LP oracle for small cases
//! - [`fusion`]: Sinkhorn-Newton block ascent for the constrained barycenter
//! - [`simulate`]: scenarios, snapshots, sample covariances, misalignment
//! - [`baselines`]: non-coherent MUSIC and MVDR
//! - [`harness`]: peaks, error metric, Monte-Carlo sweeps, config, rendering

pub mod array;
pub mod baselines;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod simulate;
pub mod spatial;
pub mod spectrum;
pub mod transport;

pub use error::{Error, Result};
pub use spatial::{Bounds, Grid, Point, Resolution};
pub use spectrum::Spectrum;
