//! Run configuration: a single flat JSON file describing the physical model,
//! the discretization, and the thermodynamic point.

use std::path::PathBuf;

use num_complex::Complex64;
use serde::Deserialize;

use orbmag_core::fiber::PlaneWaveBasis;
use orbmag_core::potential::{named_potential, FourierPotential, ReciprocalVector};
use orbmag_core::bz::BZGrid;

/// Errors produced while reading or validating a configuration; all of them
/// are usage errors (exit code 1).
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] orbmag_core::Error),
}

fn default_shifted() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_per_axis: usize,
    /// Shifted (half-cell offset) Monkhorst-Pack-style grid; avoids
    /// high-symmetry degeneracies. Default true.
    #[serde(default = "default_shifted")]
    pub shifted: bool,
}

/// One inline Fourier coefficient V̂(2π·n).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffSpec {
    pub n: [i32; 3],
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

/// Either a named fixture (`free`, `cosine3d`, `separable_gap`) with an
/// amplitude, or inline Fourier coefficients.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub amplitude: Option<f64>,
    #[serde(default)]
    pub coefficients: Option<Vec<CoeffSpec>>,
}

/// Energy ladder for the `ids` table.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyLadder {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub potential: PotentialSpec,
    pub cutoff_n: i32,
    pub grid: GridSpec,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub rho0: Option<f64>,
    #[serde(default)]
    pub mu: Option<f64>,
    /// Band cutoff J of the susceptibility sums; default min(8, basis dim).
    #[serde(default)]
    pub j_cutoff: Option<usize>,
    /// Density ladder for `sweep`; default [1e-3, 5e-4, 2e-4].
    #[serde(default)]
    pub rho_ladder: Option<Vec<f64>>,
    /// Energy ladder for `ids`; default spans the sampled spectrum.
    #[serde(default)]
    pub ids_energies: Option<EnergyLadder>,
    /// Per-check tolerance overrides for `verify`, keyed by check name.
    #[serde(default)]
    pub tolerances: Option<std::collections::BTreeMap<String, f64>>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &str) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_string(),
            source,
        })?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_string(),
                source,
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        match (&self.potential.name, &self.potential.coefficients) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "potential: give either a name or inline coefficients, not both".into(),
                ))
            }
            (None, None) => {
                return Err(ConfigError::Invalid(
                    "potential: either a name or inline coefficients is required".into(),
                ))
            }
            _ => {}
        }
        if self.grid.n_per_axis == 0 {
            return Err(ConfigError::Invalid("grid.n_per_axis must be ≥ 1".into()));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0) {
                return Err(ConfigError::Invalid("beta must be positive".into()));
            }
        }
        if let Some(tols) = &self.tolerances {
            if let Some((k, _)) = tols.iter().find(|(_, &v)| !(v > 0.0)) {
                return Err(ConfigError::Invalid(format!(
                    "tolerances.{k} must be positive"
                )));
            }
        }
        if let Some(l) = &self.ids_energies {
            if l.count < 2 || !(l.max > l.min) {
                return Err(ConfigError::Invalid(
                    "ids_energies needs max > min and count ≥ 2".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn build_potential(&self) -> Result<FourierPotential, ConfigError> {
        if let Some(name) = &self.potential.name {
            Ok(named_potential(name, self.potential.amplitude.unwrap_or(1.0))?)
        } else {
            let coeffs = self.potential.coefficients.as_ref().unwrap();
            let pot = FourierPotential::from_coefficients(coeffs.iter().map(|c| {
                (
                    ReciprocalVector::new(c.n[0], c.n[1], c.n[2]),
                    Complex64::new(c.re, c.im),
                )
            }));
            let violations = pot.validate();
            if let Some(v) = violations.first() {
                return Err(ConfigError::Invalid(format!(
                    "potential coefficients are not a real potential: {}",
                    v.reason
                )));
            }
            Ok(pot)
        }
    }

    pub fn basis(&self) -> PlaneWaveBasis {
        PlaneWaveBasis::new(self.cutoff_n)
    }

    pub fn bz_grid(&self) -> BZGrid {
        BZGrid::new(self.grid.n_per_axis, self.grid.shifted)
    }

    pub fn j_cutoff_or_default(&self) -> usize {
        self.j_cutoff.unwrap_or_else(|| self.basis().dim().min(8))
    }

    /// Exactly one of (rho0, mu), as required by the thermodynamic commands.
    pub fn density_or_mu(&self) -> Result<DensitySpec, ConfigError> {
        match (self.rho0, self.mu) {
            (Some(r), None) => Ok(DensitySpec::Rho0(r)),
            (None, Some(m)) => Ok(DensitySpec::Mu(m)),
            (Some(_), Some(_)) => Err(ConfigError::Invalid(
                "rho0 and mu are both set; thermodynamic commands need exactly one".into(),
            )),
            (None, None) => Err(ConfigError::Invalid(
                "neither rho0 nor mu is set; thermodynamic commands need exactly one".into(),
            )),
        }
    }

    pub fn rho0_required(&self) -> Result<f64, ConfigError> {
        match self.density_or_mu()? {
            DensitySpec::Rho0(r) => Ok(r),
            DensitySpec::Mu(_) => Err(ConfigError::Invalid(
                "this command works at fixed density: set rho0, not mu".into(),
            )),
        }
    }

    pub fn beta_required(&self) -> Result<f64, ConfigError> {
        self.beta
            .ok_or_else(|| ConfigError::Invalid("beta is required for this command".into()))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum DensitySpec {
    Rho0(f64),
    Mu(f64),
}
