//! Run configuration, read from TOML. Every field has a default, so an empty
//! file describes the reference 6x6 swing-grid experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conic::{Backend, Settings};
use crate::consensus::{inner_settings, AdmmOptions, LmiMode, ObjectiveMode};
use crate::central::reference_settings;
use crate::error::{arg, Error, Result};
use crate::system::SwingRanges;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream used by generation and simulation.
    pub seed: u64,
    pub instance: InstanceConfig,
    pub cost: CostConfig,
    pub noise: NoiseConfig,
    pub terminal: TerminalConfig,
    pub admm: AdmmConfig,
    pub solver: SolverConfig,
    pub sim: SimConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceSource {
    Generate,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceConfig {
    pub source: InstanceSource,
    /// Instance file read when `source = "load"`.
    pub path: Option<PathBuf>,
    pub rows: usize,
    pub cols: usize,
    pub horizon: usize,
    pub locality: usize,
    pub dt: f64,
    pub swing: SwingRanges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    /// State weights repeated over the components of every subsystem.
    pub q_pattern: Vec<f64>,
    pub r_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// `W_t = w_scale I`.
    pub w_scale: f64,
    /// Diagonal of `Sigma_0` drawn uniformly from `(0, sigma0_max]`.
    pub sigma0_max: f64,
    /// `mu_0 = mu0_scale * N(0, I)`.
    pub mu0_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminalConfig {
    /// `Sigma_f = M M^T + shift I` with `M_ii ~ N(diag_mean, diag_var)` and
    /// `M_ij ~ N(0, offdiag_var)`; the second parameters are variances.
    pub diag_mean: f64,
    pub diag_var: f64,
    pub offdiag_var: f64,
    pub shift: f64,
    /// Every entry of `mu_f`.
    pub mu_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmConfig {
    pub rho: f64,
    pub eps: f64,
    pub max_iter: usize,
    pub mode: ObjectiveMode,
    pub lmi: LmiMode,
    pub allow_disconnected: bool,
    pub record_exchange: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Solver for both the whole-network program and the subproblems.
    pub backend: Backend,
    /// Settings for whole-network solves.
    pub central: Settings,
    /// Settings for the ADMM subproblems.
    pub inner: Settings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Monte-Carlo rollouts; zero gives analytic moments only.
    pub samples: usize,
    /// Offset added to the root seed for the rollouts.
    pub seed_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            instance: InstanceConfig::default(),
            cost: CostConfig::default(),
            noise: NoiseConfig::default(),
            terminal: TerminalConfig::default(),
            admm: AdmmConfig::default(),
            solver: SolverConfig::default(),
            sim: SimConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            source: InstanceSource::Generate,
            path: None,
            rows: 6,
            cols: 6,
            horizon: 10,
            locality: 1,
            dt: 0.2,
            swing: SwingRanges::default(),
        }
    }
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            q_pattern: vec![100.0, 500.0],
            r_scale: 0.01,
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            w_scale: 0.2,
            sigma0_max: 60.0,
            mu0_scale: 30.0,
        }
    }
}

impl Default for TerminalConfig {
    fn default() -> Self {
        Self {
            diag_mean: 0.5,
            diag_var: 0.1,
            offdiag_var: 0.1,
            shift: DEFAULT_SIGMA_F_SHIFT,
            mu_f: 0.0,
        }
    }
}

/// Identity added to the sampled `M M^T`. Without it the sampled target is
/// below the covariance the noise alone forces at the final step.
pub const DEFAULT_SIGMA_F_SHIFT: f64 = 0.5;

impl Default for AdmmConfig {
    fn default() -> Self {
        let d = AdmmOptions::default();
        Self {
            rho: d.rho,
            eps: d.eps,
            max_iter: d.max_iter,
            mode: d.mode,
            lmi: d.lmi,
            allow_disconnected: d.allow_disconnected,
            record_exchange: d.record_exchange,
        }
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            backend: Backend::preferred(),
            // the backend lives in `backend`; the stored copies keep the neutral default
            central: Settings {
                backend: Backend::default(),
                ..reference_settings()
            },
            inner: Settings {
                backend: Backend::default(),
                ..inner_settings()
            },
        }
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed_offset: 0,
        }
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let i = &self.instance;
        if i.source == InstanceSource::Load && i.path.is_none() {
            return arg("instance.source = \"load\" needs instance.path");
        }
        if i.rows == 0 || i.cols == 0 || i.horizon == 0 {
            return arg("grid dimensions and horizon must be at least 1");
        }
        if !(i.dt > 0.0) {
            return arg("dt must be positive");
        }
        if self.cost.q_pattern.is_empty() || self.cost.q_pattern.iter().any(|q| !(*q >= 0.0)) {
            return arg("q_pattern needs nonnegative entries");
        }
        if !(self.cost.r_scale > 0.0) {
            return arg("R must be positive definite");
        }
        let n = &self.noise;
        if !(n.w_scale >= 0.0 && n.sigma0_max > 0.0 && n.mu0_scale >= 0.0) {
            return arg("noise scales must be nonnegative and sigma0_max positive");
        }
        let t = &self.terminal;
        if !(t.diag_var >= 0.0 && t.offdiag_var >= 0.0 && t.shift >= 0.0) {
            return arg("terminal sampler variances and shift must be nonnegative");
        }
        if !(self.admm.rho > 0.0 && self.admm.eps > 0.0) {
            return arg("ADMM penalty and tolerance must be positive");
        }
        if !self.solver.backend.is_available() {
            return arg(format!("solver backend '{}' was not compiled in", self.solver.backend));
        }
        Ok(())
    }

    pub fn admm_options(&self) -> AdmmOptions {
        AdmmOptions {
            rho: self.admm.rho,
            eps: self.admm.eps,
            max_iter: self.admm.max_iter,
            seed: self.seed,
            mode: self.admm.mode,
            lmi: self.admm.lmi,
            allow_disconnected: self.admm.allow_disconnected,
            record_exchange: self.admm.record_exchange,
            inner: Settings {
                backend: self.solver.backend,
                ..self.solver.inner.clone()
            },
        }
    }

    /// Settings for whole-network solves with the configured backend.
    pub fn central_settings(&self) -> Settings {
        Settings {
            backend: self.solver.backend,
            ..self.solver.central.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.instance.horizon, 10);
        assert_eq!(cfg.admm.rho, 0.01);
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.instance.rows = 3;
        cfg.terminal.shift = 0.25;
        cfg.admm.mode = ObjectiveMode::Transformed;
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_backend_rejected() {
        let err = RunConfig::from_toml_str("[solver]\nbackend = \"mosek\"\n").unwrap_err();
        assert!(err.to_string().contains("mosek"));
    }

    #[test]
    fn backend_reaches_solver_settings() {
        let cfg = RunConfig::from_toml_str("[solver]\nbackend = \"internal\"\n").unwrap();
        assert_eq!(cfg.central_settings().backend, Backend::Internal);
        assert_eq!(cfg.admm_options().inner.backend, Backend::Internal);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::from_toml_str("[admm]\npenalty = 1.0\n").is_err());
    }
}
