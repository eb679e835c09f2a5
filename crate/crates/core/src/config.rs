//! Run configuration: one JSON file fixes the physical system, the
//! integration parameters, the ensemble plan, and the output location for
//! a command. Unknown keys are rejected by name, and every field that the
//! file omits takes the documented default — the reference parameter set
//! where one exists.

use crate::dynamics::{steps_for_time, Scheme};
use crate::ensemble::{EnsembleMode, EnsemblePlan};
use crate::model::{IonParams, LJParams, SimulationBox, SystemPotential};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("could not read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("could not parse configuration: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Which physical system a run simulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SystemKind {
    /// One walker on the unit circle in the cosine landscape.
    #[serde(rename = "cosine1d")]
    Cosine1d,
    /// A tagged ion and `particles` neutral solvent particles in a periodic
    /// cubic box at number density `density`.
    #[serde(rename = "solvated-ion")]
    SolvatedIon,
}

fn default_beta() -> f64 {
    1.0
}
fn default_replicas() -> usize {
    10_000
}
fn default_gk_tau() -> f64 {
    0.3
}
fn default_n_therm() -> usize {
    10
}
fn default_dt_therm() -> f64 {
    0.01
}
fn default_particles() -> usize {
    20
}
fn default_density() -> f64 {
    0.4
}
fn default_n_grid() -> usize {
    4096
}
fn default_n_mc() -> usize {
    200_000
}
fn default_out() -> PathBuf {
    PathBuf::from(".")
}
fn default_mode() -> EnsembleMode {
    EnsembleMode::ParallelReplicas
}
fn default_scheme() -> Scheme {
    Scheme::Mala
}

/// Everything a command needs, read from one JSON file.
///
/// Exactly one of `dt` (single-step-size commands) and `dt_list`
/// (sweep commands) must be present. Trajectory length is given either as
/// a step count `n_steps` or as a physical horizon `tau`, whichever the
/// command needs; `gk_tau` is the separate, usually much shorter, cutoff
/// of the force-autocorrelation sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemKind,
    /// Inverse temperature.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Production step size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Step sizes for sweep commands.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_list: Option<Vec<f64>>,
    /// Replica count (parallel mode) or trajectory count (sequential mode).
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    /// Steps per trajectory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
    /// Physical trajectory horizon; an alternative to `n_steps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Cutoff time of the force-autocorrelation sum.
    #[serde(default = "default_gk_tau")]
    pub gk_tau: f64,
    #[serde(default = "default_mode")]
    pub mode: EnsembleMode,
    /// Production update rule; equilibration is always Metropolized.
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default)]
    pub seed: u64,
    /// Equilibration steps between replicas (and before a sequential run).
    #[serde(default = "default_n_therm")]
    pub n_therm: usize,
    /// Equilibration step size.
    #[serde(default = "default_dt_therm")]
    pub dt_therm: f64,
    /// First mean-square-displacement index used by the through-origin
    /// slope fit, to discard the short-time transient if desired.
    #[serde(default)]
    pub fit_window_start: usize,
    /// Solvent particle count (`solvated-ion` only).
    #[serde(default = "default_particles")]
    pub particles: usize,
    /// Solvent number density (`solvated-ion` only).
    #[serde(default = "default_density")]
    pub density: f64,
    /// Solvent-solvent interaction parameters (`solvated-ion` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<LJParams>,
    /// Ion-solvent interaction parameters (`solvated-ion` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ion: Option<IonParams>,
    /// Grid resolution of the quadrature reference values.
    #[serde(default = "default_n_grid")]
    pub n_grid: usize,
    /// Monte-Carlo draw count of the sampled reference values.
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    /// Directory the CSV outputs are written into.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Emit progress lines to standard error.
    #[serde(default)]
    pub progress: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.dt, &self.dt_list) {
            (None, None) => {
                return Err(invalid("exactly one of `dt` and `dt_list` must be set"));
            }
            (Some(_), Some(_)) => {
                return Err(invalid("`dt` and `dt_list` are mutually exclusive"));
            }
            _ => {}
        }
        if let Some(dt) = self.dt {
            positive("dt", dt)?;
        }
        if let Some(list) = &self.dt_list {
            if list.is_empty() {
                return Err(invalid("`dt_list` must not be empty"));
            }
            for &dt in list {
                positive("dt_list", dt)?;
            }
        }
        positive("beta", self.beta)?;
        positive("gk_tau", self.gk_tau)?;
        positive("dt_therm", self.dt_therm)?;
        positive("density", self.density)?;
        if let Some(tau) = self.tau {
            positive("tau", tau)?;
        }
        if self.replicas == 0 {
            return Err(invalid("`replicas` must be at least 1"));
        }
        if self.n_steps == Some(0) {
            return Err(invalid("`n_steps` must be at least 1 when given"));
        }
        if self.system == SystemKind::SolvatedIon && self.particles == 0 {
            return Err(invalid("`particles` must be at least 1"));
        }
        if self.system == SystemKind::Cosine1d && (self.pair.is_some() || self.ion.is_some()) {
            return Err(invalid(
                "`pair` and `ion` parameters apply only to the solvated-ion system",
            ));
        }
        Ok(())
    }

    /// The single step size, for commands that take one.
    pub fn single_dt(&self) -> Result<f64, ConfigError> {
        self.dt
            .ok_or_else(|| invalid("this command needs the scalar `dt` field, not `dt_list`"))
    }

    /// The step-size list, for sweep commands.
    pub fn sweep_dts(&self) -> Result<&[f64], ConfigError> {
        self.dt_list
            .as_deref()
            .ok_or_else(|| invalid("this command needs the `dt_list` field, not `dt`"))
    }

    /// Trajectory length in steps at the given step size: `n_steps` if set,
    /// otherwise `floor(tau / dt)`.
    pub fn trajectory_steps(&self, dt: f64) -> Result<usize, ConfigError> {
        if let Some(n) = self.n_steps {
            return Ok(n);
        }
        if let Some(tau) = self.tau {
            let n = steps_for_time(tau, dt);
            if n == 0 {
                return Err(invalid(format!(
                    "`tau` = {tau} is shorter than one step at dt = {dt}"
                )));
            }
            return Ok(n);
        }
        Err(invalid(
            "set `n_steps` or `tau` to fix the trajectory length",
        ))
    }

    /// The ensemble plan for a trajectory of `n_steps` production steps.
    pub fn plan(&self, n_steps: usize) -> EnsemblePlan {
        let mut plan = EnsemblePlan::new(self.replicas, n_steps, self.seed)
            .with_scheme(self.scheme)
            .with_therm(self.dt_therm, self.n_therm)
            .with_progress(self.progress);
        plan.mode = self.mode;
        plan
    }

    /// The periodic cell of the configured system.
    pub fn cell(&self) -> Result<SimulationBox, ConfigError> {
        let cell = match self.system {
            SystemKind::Cosine1d => SimulationBox::new(1.0, 1, 1),
            SystemKind::SolvatedIon => SimulationBox::from_density(self.particles, self.density, 3),
        };
        cell.map_err(|e| invalid(e.to_string()))
    }

    /// The interaction of the `solvated-ion` system, with omitted
    /// parameters at their reference values.
    pub fn ion_potential(&self) -> Result<SystemPotential, ConfigError> {
        SystemPotential::new(
            Some(self.pair.unwrap_or_default()),
            Some(self.ion.unwrap_or_default()),
        )
        .map_err(|e| invalid(e.to_string()))
    }
}

fn positive(key: &str, value: f64) -> Result<(), ConfigError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("`{key}` must be positive, got {value}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> RunConfig {
        RunConfig::parse(r#"{"system": "cosine1d", "dt": 0.01}"#).unwrap()
    }

    #[test]
    fn minimal_file_takes_documented_defaults() {
        let cfg = minimal();
        assert_eq!(cfg.beta, 1.0);
        assert_eq!(cfg.replicas, 10_000);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.mode, EnsembleMode::ParallelReplicas);
        assert_eq!(cfg.scheme, Scheme::Mala);
        assert_eq!(cfg.n_therm, 10);
        assert_eq!(cfg.dt_therm, 0.01);
        assert_eq!(cfg.gk_tau, 0.3);
        assert_eq!(cfg.out, PathBuf::from("."));
        assert!(!cfg.progress);
    }

    #[test]
    fn serialize_parse_round_trip() {
        let mut cfg = minimal();
        cfg.dt = None;
        cfg.dt_list = Some(vec![0.002, 0.005, 0.01]);
        cfg.tau = Some(10.0);
        cfg.seed = 42;
        cfg.mode = EnsembleMode::SequentialTrajectories;
        cfg.scheme = Scheme::BareEm;
        cfg.out = PathBuf::from("results/run-a");
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named_in_the_error() {
        let err = RunConfig::parse(r#"{"system": "cosine1d", "dt": 0.01, "dtt": 1}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("dtt"), "error should name the key: {err}");
    }

    #[test]
    fn negative_dt_is_named_in_the_error() {
        let err = RunConfig::parse(r#"{"system": "cosine1d", "dt": -0.01}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("`dt`"), "error should name the key: {err}");
        assert!(err.contains("-0.01"));
    }

    #[test]
    fn dt_and_dt_list_are_exclusive() {
        let both = r#"{"system": "cosine1d", "dt": 0.01, "dt_list": [0.01]}"#;
        let err = RunConfig::parse(both).unwrap_err().to_string();
        assert!(err.contains("mutually exclusive"));
        let neither = r#"{"system": "cosine1d"}"#;
        let err = RunConfig::parse(neither).unwrap_err().to_string();
        assert!(err.contains("exactly one"));
    }

    #[test]
    fn partial_interaction_params_fill_from_reference_values() {
        let cfg =
            RunConfig::parse(r#"{"system": "solvated-ion", "dt": 0.001, "ion": {"e_min": 0.9}}"#)
                .unwrap();
        let ion = cfg.ion.unwrap();
        assert_eq!(ion.e_min, 0.9);
        assert_eq!(ion.kappa, IonParams::reference().kappa);
        assert_eq!(cfg.pair, None);
    }

    #[test]
    fn interaction_params_are_rejected_on_the_circle_system() {
        let err =
            RunConfig::parse(r#"{"system": "cosine1d", "dt": 0.01, "pair": {"epsilon": 2.0}}"#)
                .unwrap_err()
                .to_string();
        assert!(err.contains("pair"));
    }

    #[test]
    fn trajectory_length_comes_from_steps_or_horizon() {
        let mut cfg = minimal();
        assert!(cfg.trajectory_steps(0.01).is_err());
        cfg.tau = Some(1.0);
        assert_eq!(cfg.trajectory_steps(0.01).unwrap(), 100);
        cfg.n_steps = Some(7);
        assert_eq!(cfg.trajectory_steps(0.01).unwrap(), 7);
    }

    #[test]
    fn cell_matches_the_system() {
        let cfg = minimal();
        let cell = cfg.cell().unwrap();
        assert_eq!((cell.dim(), cell.particles(), cell.length()), (1, 1, 1.0));
        let cfg = RunConfig::parse(r#"{"system": "solvated-ion", "dt": 0.001}"#).unwrap();
        let cell = cfg.cell().unwrap();
        assert_eq!((cell.dim(), cell.particles()), (3, 20));
        assert!((cell.length() - (20.0f64 / 0.4).cbrt()).abs() < 1e-12);
    }
}
