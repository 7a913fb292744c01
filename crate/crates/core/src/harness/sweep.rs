//! Monte-Carlo misalignment sweeps.
//!
//! For every `(angle, trial)` the sources are drawn uniformly from the source
//! region and the data are simulated with the misaligned array rotated by
//! `angle`. The estimators only see the nominal geometry. Seeds
//! depend on the trial alone, so every angle sees the same sources and noise.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{build_forward_operator, ArrayGeometry, Covariance, ForwardOperator};
use crate::baselines::{noncoherent_music, noncoherent_mvdr};
use crate::error::{Error, Result};
use crate::fusion::{FusionProblem, FusionSolver};
use crate::simulate::{derive_seed, uniform_sources, Scenario, SimRng};
use crate::spatial::{cost_matrix, CostMatrix, Grid, Point};

use super::config::Config;
use super::{extract_peaks, localization_error};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Proposed,
    Music,
    Mvdr,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Music => "music",
            Method::Mvdr => "mvdr",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "proposed" | "omt" => Ok(Method::Proposed),
            "music" => Ok(Method::Music),
            "mvdr" => Ok(Method::Mvdr),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected proposed, music or mvdr)"
            ))),
        }
    }
}

/// A spectrum estimate on the grid.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub values: Vec<f64>,
    pub outer_iterations: usize,
    pub converged: bool,
}

/// Reusable per-grid data for the estimators.
pub struct Estimators {
    grid: Grid,
    geometries: Vec<ArrayGeometry>,
    operators: Vec<ForwardOperator>,
    cost: CostMatrix,
}

impl Estimators {
    pub fn new(grid: Grid, geometries: Vec<ArrayGeometry>) -> Result<Self> {
        let operators = geometries
            .iter()
            .map(|g| build_forward_operator(g, &grid))
            .collect::<Result<_>>()?;
        let cost = cost_matrix(&grid);
        Ok(Self {
            grid,
            geometries,
            operators,
            cost,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn geometries(&self) -> &[ArrayGeometry] {
        &self.geometries
    }

    pub fn operators(&self) -> &[ForwardOperator] {
        &self.operators
    }

    pub fn cost(&self) -> &CostMatrix {
        &self.cost
    }

    pub fn fusion_problem(&self, covariances: &[Covariance], config: &Config) -> Result<FusionProblem> {
        FusionProblem::from_covariances(
            &self.operators,
            covariances,
            self.cost.clone(),
            config.solver.epsilon,
            config.solver.gamma,
        )
    }

    /// Run one method. Non-convergence of the fusion solver is reported in
    /// the estimate, not as an error.
    pub fn estimate(&self, method: Method, covariances: &[Covariance], config: &Config) -> Result<Estimate> {
        match method {
            Method::Proposed => {
                let problem = self.fusion_problem(covariances, config)?;
                let result = FusionSolver::new(&problem, config.solver.options())?.run()?;
                Ok(Estimate {
                    outer_iterations: result.outer_iterations(),
                    converged: result.converged,
                    values: result.barycenter.as_slice().to_vec(),
                })
            }
            Method::Music => {
                let s = noncoherent_music(covariances, &self.geometries, &self.grid, config.methods.n_sources)?;
                if s.floor_hits > 0 {
                    log::debug!("MUSIC denominator floored at {} grid points", s.floor_hits);
                }
                Ok(Estimate {
                    values: s.values,
                    outer_iterations: 0,
                    converged: true,
                })
            }
            Method::Mvdr => {
                let s = noncoherent_mvdr(
                    covariances,
                    &self.geometries,
                    &self.grid,
                    config.methods.mvdr_diagonal_load,
                )?;
                Ok(Estimate {
                    values: s.values,
                    outer_iterations: 0,
                    converged: true,
                })
            }
        }
    }
}

/// One row of the sweep output.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub method: Method,
    pub angle_deg: f64,
    pub trial: usize,
    pub trial_seed: u64,
    pub sources: Vec<Point>,
    /// Empty when the estimator failed.
    pub estimates: Vec<Point>,
    /// NaN when the estimator failed.
    pub mean_error: f64,
    pub outer_iterations: usize,
    pub converged: bool,
    pub note: String,
    /// Wall-clock time of the estimator; not written to CSV.
    pub seconds: f64,
}

impl TrialResult {
    pub fn ok(&self) -> bool {
        self.mean_error.is_finite()
    }
}

/// Seed of a trial; shared by all angles and methods.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, &[trial as u64])
}

/// Scenario for one trial: fresh sources, nominal arrays, rotation applied.
pub fn trial_scenario(config: &Config, angle_deg: f64, trial: usize) -> Result<Scenario> {
    let seed = trial_seed(config.seed, trial);
    let nominal = config.nominal_scenario()?;
    let mut rng = SimRng::seed_from_u64(derive_seed(seed, &[0]));
    let sources = uniform_sources(&nominal.region, nominal.powers.len(), &mut rng);
    let mut s = nominal.with_sources(sources)?;
    s.seed = derive_seed(seed, &[1]);
    s.with_misalignment(config.scenario.misaligned_array, angle_deg)
}

fn run_job(config: &Config, est: &Estimators, angle_deg: f64, trial: usize) -> Result<Vec<TrialResult>> {
    let seed = trial_seed(config.seed, trial);
    let scenario = trial_scenario(config, angle_deg, trial)?;
    let covariances = if config.scenario.exact {
        scenario.exact_covariances()
    } else {
        scenario.sample_covariances()
    };
    let row = |method: Method| TrialResult {
        method,
        angle_deg,
        trial,
        trial_seed: seed,
        sources: scenario.sources.clone(),
        estimates: Vec::new(),
        mean_error: f64::NAN,
        outer_iterations: 0,
        converged: false,
        note: String::new(),
        seconds: 0.0,
    };
    let covariances = match covariances {
        Ok(c) => c,
        Err(e) => {
            return Ok(config
                .sweep
                .methods
                .iter()
                .map(|&m| TrialResult {
                    note: format!("simulation failed: {e}"),
                    ..row(m)
                })
                .collect())
        }
    };
    let mut rows = Vec::with_capacity(config.sweep.methods.len());
    for &method in &config.sweep.methods {
        let mut r = row(method);
        let start = Instant::now();
        let outcome = est.estimate(method, &covariances, config).and_then(|e| {
            let peaks = extract_peaks(&e.values, est.grid(), config.methods.n_sources)?;
            let err = localization_error(&peaks, &scenario.sources)?;
            Ok((e, peaks, err))
        });
        match outcome {
            Ok((e, peaks, err)) => {
                r.estimates = peaks;
                r.mean_error = err;
                r.outer_iterations = e.outer_iterations;
                r.converged = e.converged;
                if !e.converged {
                    r.note = "not converged".into();
                }
            }
            Err(e) => r.note = e.to_string(),
        }
        r.seconds = start.elapsed().as_secs_f64();
        log::info!(
            "angle {angle_deg} trial {trial} {method}: error {:.4} ({} outer iterations)",
            r.mean_error,
            r.outer_iterations
        );
        rows.push(r);
    }
    Ok(rows)
}

/// Run every `(angle, trial, method)` combination of the config.
///
/// Set-up problems (bad config, sensors on grid points) are errors; failures
/// inside a single trial are recorded in that row's `note`.
pub fn mc_sweep(config: &Config) -> Result<Vec<TrialResult>> {
    config.validate()?;
    if config.sweep.methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    if config.scenario.powers.len() != config.methods.n_sources {
        return Err(Error::Config(format!(
            "{} sources simulated but n_sources is {}",
            config.scenario.powers.len(),
            config.methods.n_sources
        )));
    }
    let est = Estimators::new(config.grid()?, config.nominal_arrays()?)?;
    let jobs: Vec<(usize, f64, usize)> = config
        .sweep
        .angles
        .iter()
        .enumerate()
        .flat_map(|(ai, &a)| (0..config.sweep.trials).map(move |t| (ai, a, t)))
        .collect();
    let per_job: Vec<(usize, Vec<TrialResult>)> = jobs
        .par_iter()
        .map(|&(ai, angle, trial)| Ok((ai, run_job(config, &est, angle, trial)?)))
        .collect::<Result<_>>()?;
    let mut rows: Vec<(usize, TrialResult)> = per_job
        .into_iter()
        .flat_map(|(ai, rs)| rs.into_iter().map(move |r| (ai, r)))
        .collect();
    rows.sort_by(|(a1, r1), (a2, r2)| (a1, r1.trial, r1.method).cmp(&(a2, r2.trial, r2.method)));
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// Mean error of one method at one angle over trials that produced an estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub angle_deg: f64,
    pub mean_error: f64,
    pub trials: usize,
    pub failures: usize,
}

pub fn summarize(results: &[TrialResult]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    for r in results {
        let slot = match out
            .iter_mut()
            .find(|s| s.method == r.method && s.angle_deg == r.angle_deg)
        {
            Some(s) => s,
            None => {
                out.push(SummaryRow {
                    method: r.method,
                    angle_deg: r.angle_deg,
                    mean_error: 0.0,
                    trials: 0,
                    failures: 0,
                });
                out.last_mut().unwrap()
            }
        };
        if r.ok() {
            slot.mean_error += r.mean_error;
            slot.trials += 1;
        } else {
            slot.failures += 1;
        }
    }
    for s in &mut out {
        s.mean_error = if s.trials > 0 { s.mean_error / s.trials as f64 } else { f64::NAN };
    }
    out.sort_by(|a, b| a.method.cmp(&b.method).then(a.angle_deg.total_cmp(&b.angle_deg)));
    out
}

/// CSV with one row per `(angle, trial, method)`.
///
/// Floats use Rust's shortest round-trip formatting, so equal results give
/// byte-identical files.
pub fn write_results_csv<W: Write>(writer: W, results: &[TrialResult], config: &Config) -> Result<()> {
    let k = config.methods.n_sources;
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = vec!["method".into(), "angle_deg".into(), "trial".into()];
    for prefix in ["src", "est"] {
        for i in 1..=k {
            header.push(format!("{prefix}{i}_x"));
            header.push(format!("{prefix}{i}_y"));
        }
    }
    header.extend(
        [
            "mean_error",
            "outer_iters",
            "converged",
            "epsilon",
            "gamma",
            "grid_nx",
            "grid_ny",
            "snapshots",
            "exact",
            "trial_seed",
            "note",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    let res = config.grid.resolution;
    for r in results {
        let mut rec: Vec<String> = vec![r.method.to_string(), r.angle_deg.to_string(), r.trial.to_string()];
        for pts in [&r.sources, &r.estimates] {
            for i in 0..k {
                match pts.get(i) {
                    Some(p) => {
                        rec.push(p.x.to_string());
                        rec.push(p.y.to_string());
                    }
                    None => {
                        rec.push(String::new());
                        rec.push(String::new());
                    }
                }
            }
        }
        rec.push(r.mean_error.to_string());
        rec.push(r.outer_iterations.to_string());
        rec.push(r.converged.to_string());
        rec.push(config.solver.epsilon.to_string());
        rec.push(config.solver.gamma.to_string());
        rec.push(res.nx.to_string());
        rec.push(res.ny.to_string());
        rec.push(config.scenario.snapshots.to_string());
        rec.push(config.scenario.exact.to_string());
        rec.push(r.trial_seed.to_string());
        rec.push(r.note.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
