//! TOML run configuration: scenario, grid, solver, sweep and method options.
//!
//! ```toml
//! seed = 7
//!
//! [scenario]
//! wavelength = 0.2
//! sources = [[-0.2, 0.15], [0.25, -0.2]]
//! powers = [100.0, 100.0]
//! noise_var = 1.0
//! snapshots = 500
//! misalignment_deg = 0.0
//!
//! [grid]
//! resolution = { nx = 40, ny = 40 }
//!
//! [solver]
//! epsilon = 0.005
//! gamma = 0.01
//!
//! [sweep]
//! angles = [0.0, 5.0, 10.0]
//! trials = 20
//! methods = ["proposed", "music"]
//! ```
//!
//! Every key is optional; omitted keys take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::ArrayGeometry;
use crate::error::{Error, Result};
use crate::fusion::FusionOptions;
use crate::simulate::{DefaultLayout, Scenario};
use crate::spatial::{make_grid, Bounds, Grid, Point, Resolution};

use super::sweep::Method;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed for every stochastic step.
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub grid: GridConfig,
    pub solver: SolverConfig,
    pub sweep: SweepConfig,
    pub methods: MethodConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            scenario: ScenarioConfig::default(),
            grid: GridConfig::default(),
            solver: SolverConfig::default(),
            sweep: SweepConfig::default(),
            methods: MethodConfig::default(),
        }
    }
}

/// Explicitly placed array; its wavelength is the scenario wavelength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub label: String,
    pub sensors: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Parametric ellipse + ULA layout, used unless `arrays` is given.
    #[serde(flatten)]
    pub layout: DefaultLayout,
    pub arrays: Option<Vec<ArrayConfig>>,
    pub sources: Vec<[f64; 2]>,
    pub powers: Vec<f64>,
    pub noise_var: f64,
    pub snapshots: usize,
    pub source_region: Bounds,
    /// Index of the array whose true geometry is rotated.
    pub misaligned_array: usize,
    pub misalignment_deg: f64,
    /// Use expected covariances instead of sample covariances.
    pub exact: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            layout: DefaultLayout::default(),
            arrays: None,
            sources: vec![[-0.2, 0.15], [0.25, -0.2]],
            powers: vec![100.0, 100.0],
            noise_var: 1.0,
            snapshots: 500,
            source_region: Bounds {
                x_min: -0.5,
                x_max: 0.5,
                y_min: -0.5,
                y_max: 0.5,
            },
            misaligned_array: 0,
            misalignment_deg: 0.0,
            exact: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub bounds: Bounds,
    pub resolution: Resolution,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            bounds: Bounds {
                x_min: -0.6,
                x_max: 0.6,
                y_min: -0.6,
                y_max: 0.6,
            },
            resolution: Resolution::square(40),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub gamma: f64,
    pub outer_tol: f64,
    pub max_outer: usize,
    pub newton_tol: f64,
    pub max_newton: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = FusionOptions::default();
        Self {
            epsilon: 0.005,
            gamma: 0.01,
            outer_tol: o.outer_tol,
            max_outer: o.max_outer,
            newton_tol: o.newton_tol,
            max_newton: o.max_newton,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> FusionOptions {
        FusionOptions {
            outer_tol: self.outer_tol,
            max_outer: self.max_outer,
            newton_tol: self.newton_tol,
            max_newton: self.max_newton,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub angles: Vec<f64>,
    pub trials: usize,
    pub methods: Vec<Method>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            angles: (0..=10).map(f64::from).collect(),
            trials: 100,
            methods: vec![Method::Proposed, Method::Music, Method::Mvdr],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    /// Model order given to MUSIC and to peak extraction.
    pub n_sources: usize,
    pub mvdr_diagonal_load: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            n_sources: 2,
            mvdr_diagonal_load: 0.0,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        let s = self.nominal_scenario()?;
        if self.scenario.misaligned_array >= s.arrays.len() {
            return Err(Error::Config(format!(
                "misaligned_array {} but only {} arrays",
                self.scenario.misaligned_array,
                s.arrays.len()
            )));
        }
        if !(self.solver.epsilon > 0.0 && self.solver.gamma > 0.0) {
            return Err(Error::Config("epsilon and gamma must be positive".into()));
        }
        if self.methods.n_sources == 0 {
            return Err(Error::Config("n_sources must be at least 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        make_grid(self.grid.bounds, self.grid.resolution)
    }

    pub fn wavelength(&self) -> f64 {
        self.scenario.layout.wavelength
    }

    /// Geometries assumed by the estimators.
    pub fn nominal_arrays(&self) -> Result<Vec<ArrayGeometry>> {
        match &self.scenario.arrays {
            Some(list) => list
                .iter()
                .map(|a| {
                    ArrayGeometry::new(
                        a.label.clone(),
                        a.sensors.iter().map(|&p| Point::from(p)).collect(),
                        self.wavelength(),
                    )
                })
                .collect(),
            None => Ok(vec![self.scenario.layout.ellipse()?, self.scenario.layout.linear()?]),
        }
    }

    /// Scenario with true geometry equal to the assumed one.
    pub fn nominal_scenario(&self) -> Result<Scenario> {
        let arrays = self.nominal_arrays()?;
        let s = Scenario {
            assumed_arrays: arrays.clone(),
            arrays,
            sources: self.scenario.sources.iter().map(|&p| Point::from(p)).collect(),
            powers: self.scenario.powers.clone(),
            noise_var: self.scenario.noise_var,
            snapshots: self.scenario.snapshots,
            seed: self.seed,
            region: self.scenario.source_region,
        };
        s.validate()?;
        Ok(s)
    }

    /// Scenario with the configured misalignment applied to the true geometry.
    pub fn scenario(&self) -> Result<Scenario> {
        self.nominal_scenario()?
            .with_misalignment(self.scenario.misaligned_array, self.scenario.misalignment_deg)
    }
}
