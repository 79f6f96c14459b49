//! Run configuration: a single JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evt::PpParameters;
use crate::priors::PriorConfig;
use crate::smooth::{ChainConfig, HyperParameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub threshold_quantile: f64,
    /// Point process rescaling; `n_times / block_size` when absent.
    pub n_block: Option<f64>,
    pub block_size: f64,
    pub min_exceedances: usize,
    pub mesh: MeshConfig,
    /// Defaults derived from the domain diameter when absent.
    pub prior: Option<PriorConfig>,
    pub chain: ChainConfig,
    pub return_periods: Vec<f64>,
    pub predict: PredictSettings,
    pub variogram: VariogramSettings,
    pub simulate: Option<SimulateConfig>,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            threshold_quantile: 0.75,
            n_block: None,
            block_size: 365.25,
            min_exceedances: 15,
            mesh: MeshConfig::default(),
            prior: None,
            chain: ChainConfig::default(),
            return_periods: vec![20.0, 50.0, 100.0],
            predict: PredictSettings::default(),
            variogram: VariogramSettings::default(),
            simulate: None,
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// 1.5 times the smallest site separation when absent.
    pub spacing: Option<f64>,
    /// Twice the spacing when absent.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSettings {
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for PredictSettings {
    fn default() -> Self {
        Self { n_draws: 1000, seed: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariogramParameter {
    Psi,
    Tau,
    Phi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariogramSettings {
    pub n_bins: usize,
    /// Half the largest site separation when absent.
    pub max_dist: Option<f64>,
    pub parameter: VariogramParameter,
}

impl Default for VariogramSettings {
    fn default() -> Self {
        Self { n_bins: 15, max_dist: None, parameter: VariogramParameter::Psi }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    #[serde(default)]
    pub lon0: f64,
    #[serde(default)]
    pub lat0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "mode", rename_all = "lowercase")]
pub enum SimulateMode {
    Fixed { mu: f64, sigma: f64, xi: f64 },
    Generative { theta: HyperParameters, intercepts: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub grid: GridConfig,
    pub n_times: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub truth: SimulateMode,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub fits: Option<PathBuf>,
    pub posterior: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidInput(msg) => Error::InvalidInput(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_quantile > 0.0 && self.threshold_quantile < 1.0) {
            return Err(Error::invalid("threshold_quantile must lie in (0,1)"));
        }
        if let Some(n) = self.n_block {
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::invalid("n_block must be positive"));
            }
        }
        if !(self.block_size > 0.0 && self.block_size.is_finite()) {
            return Err(Error::invalid("block_size must be positive"));
        }
        for v in [self.mesh.spacing, self.mesh.margin].into_iter().flatten() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("mesh spacing and margin must be nonnegative"));
            }
        }
        if let Some(p) = &self.prior {
            p.validate()?;
        }
        self.chain.validate()?;
        if self.return_periods.is_empty() || self.return_periods.iter().any(|m| !(*m > 1.0 && m.is_finite())) {
            return Err(Error::invalid("return periods must exceed 1"));
        }
        if self.variogram.n_bins == 0 {
            return Err(Error::invalid("variogram needs at least one bin"));
        }
        if let Some(s) = &self.simulate {
            if s.n_times == 0 || s.grid.nx == 0 || s.grid.ny == 0 || !(s.grid.spacing > 0.0) {
                return Err(Error::invalid("simulation grid and length must be positive"));
            }
            match &s.truth {
                SimulateMode::Fixed { mu, sigma, xi } => {
                    PpParameters::new(*mu, *sigma, *xi)?;
                }
                SimulateMode::Generative { theta, .. } => theta.validate()?,
            }
        }
        Ok(())
    }

    /// `n_block` for a series of `n_times` values.
    pub fn n_block_for(&self, n_times: usize) -> f64 {
        self.n_block.unwrap_or(n_times as f64 / self.block_size)
    }

    pub fn prior_for(&self, diameter: f64) -> PriorConfig {
        self.prior.clone().unwrap_or_else(|| PriorConfig::default_for_domain(diameter))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.chain.n_iterations, 10_000);
        assert_eq!(c.chain.n_burnin, 2_000);
        assert_eq!(c.return_periods, vec![20.0, 50.0, 100.0]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"threshold": 0.9}"#).is_err());
        assert!(RunConfig::from_json(r#"{"chain": {"iterations": 5}}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"threshold_quantile": 1.0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"chain": {"n_iterations": 10, "n_burnin": 10}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"return_periods": [1.0]}"#).is_err());
    }

    #[test]
    fn simulate_section_parses() {
        let c = RunConfig::from_json(
            r#"{"simulate": {"grid": {"nx": 3, "ny": 2, "spacing": 0.5}, "n_times": 100,
                "truth": {"mode": "fixed", "mu": 10, "sigma": 5, "xi": 0.1}}}"#,
        )
        .unwrap();
        let s = c.simulate.as_ref().unwrap();
        assert_eq!(s.seed, 1);
        assert!(matches!(s.truth, SimulateMode::Fixed { .. }));
        assert_eq!(c.n_block_for(7305), 7305.0 / 365.25);
    }
}
