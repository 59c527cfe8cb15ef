//! JSON run configuration shared by every CLI command.
//!
//! One document describes a complete problem: arena geometry, target
//! pattern, noise level, optimizer budgets, and the top-level seed that all
//! randomness derives from.  Optional fields select alternate flows: a fixed
//! activation sequence skips the sequence search, `n_min` switches on the
//! electrode-placement search, and `epsilon` is a failure-rate goal that
//! reports quote back but never enforce.

use crate::design::DesignOpts;
use crate::model::{Geometry, NoiseParams};
use crate::roa::Pattern;
use crate::sim::SimModel;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Field { field: &'static str, message: String },
    #[error("config JSON: {0}")]
    Parse(#[from] serde_json::Error),
}

fn bad(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field,
        message: message.into(),
    }
}

/// Arena block of the config; `N` is kept explicit and cross-checked
/// against the gap sum so a silently edited gap list cannot reinterpret the
/// pattern string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    #[serde(rename = "N")]
    pub cells: usize,
    pub d0: f64,
    pub gaps: Vec<usize>,
    pub n: usize,
}

/// Optimizer budgets; defaults mirror [`DesignOpts`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub u_max: f64,
    pub restarts: usize,
    pub opt_samples: usize,
    pub final_samples: usize,
    pub max_evals: usize,
    pub warm_start: bool,
    pub max_interior: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let d = DesignOpts::default();
        Self {
            u_max: d.u_max,
            restarts: d.restarts,
            opt_samples: d.opt_samples,
            final_samples: d.final_samples,
            max_evals: d.max_evals,
            warm_start: d.warm_start,
            max_interior: d.max_interior,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    /// Target occupancy as a 0/1 string, leftmost cell first.
    pub pattern: String,
    pub sigma: f64,
    #[serde(default = "default_model")]
    pub model: SimModel,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Fixed activation sequence (interior electrode indices per stage);
    /// bypasses the sequence search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<Vec<Vec<usize>>>,
    /// Smallest admissible electrode gap in cells; presence turns on the
    /// electrode-placement search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_min: Option<usize>,
    /// Failure-rate goal; reported against 1 - p_total, never enforced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

fn default_model() -> SimModel {
    SimModel::Continuous
}

fn default_trials() -> usize {
    2000
}

fn default_dt() -> f64 {
    1e-4
}

impl RunConfig {
    /// Parse and validate a JSON document.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Field-level validation beyond what deserialization enforces.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let geo = &self.geometry;
        if geo.gaps.is_empty() {
            return Err(bad("geometry.gaps", "at least one gap required"));
        }
        if let Some(k) = geo.gaps.iter().position(|&w| w == 0) {
            return Err(bad("geometry.gaps", format!("gap {k} is zero cells wide")));
        }
        let total: usize = geo.gaps.iter().sum();
        if geo.cells != total {
            return Err(bad(
                "geometry.N",
                format!("N = {} but the gaps sum to {total}", geo.cells),
            ));
        }
        if !(geo.d0.is_finite() && geo.d0 > 0.0) {
            return Err(bad("geometry.d0", format!("cell width {} not positive", geo.d0)));
        }
        if geo.n == 0 {
            return Err(bad("geometry.n", "no particles"));
        }
        if geo.n > geo.cells {
            return Err(bad(
                "geometry.n",
                format!("{} particles will not fit in {} cells", geo.n, geo.cells),
            ));
        }
        if self.pattern.len() != geo.cells {
            return Err(bad(
                "pattern",
                format!("{} cells in pattern, geometry has {}", self.pattern.len(), geo.cells),
            ));
        }
        let ones = self.pattern.chars().filter(|&c| c == '1').count();
        if self.pattern.chars().any(|c| c != '0' && c != '1') {
            return Err(bad("pattern", "only '0' and '1' allowed"));
        }
        if ones != geo.n {
            return Err(bad(
                "pattern",
                format!("{ones} occupied cells for {} particles", geo.n),
            ));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(bad("sigma", format!("noise level {} not positive", self.sigma)));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(bad("dt", format!("step {} not positive", self.dt)));
        }
        if self.trials == 0 {
            return Err(bad("trials", "at least one trial required"));
        }
        let opt = &self.optimizer;
        if !(opt.u_max.is_finite() && opt.u_max > 0.0) {
            return Err(bad("optimizer.u_max", format!("charge cap {} not positive", opt.u_max)));
        }
        if opt.restarts == 0 {
            return Err(bad("optimizer.restarts", "at least one start required"));
        }
        if opt.opt_samples < crate::steady::MIN_SAMPLES {
            return Err(bad(
                "optimizer.opt_samples",
                format!("estimator needs at least {} samples", crate::steady::MIN_SAMPLES),
            ));
        }
        if opt.final_samples < crate::steady::MIN_SAMPLES {
            return Err(bad(
                "optimizer.final_samples",
                format!("estimator needs at least {} samples", crate::steady::MIN_SAMPLES),
            ));
        }
        if opt.max_evals == 0 {
            return Err(bad("optimizer.max_evals", "evaluation budget must be positive"));
        }
        if opt.max_interior == 0 {
            return Err(bad("optimizer.max_interior", "stage cap must be positive"));
        }
        let interior = geo.gaps.len().saturating_sub(1);
        if let Some(seq) = &self.sequence {
            if seq.is_empty() {
                return Err(bad("sequence", "override given but empty"));
            }
            for (s, block) in seq.iter().enumerate() {
                if block.is_empty() {
                    return Err(bad("sequence", format!("stage {s} activates nothing")));
                }
                for &e in block {
                    if e == 0 || e > interior {
                        return Err(bad(
                            "sequence",
                            format!("stage {s} uses electrode {e}; interior range is 1..={interior}"),
                        ));
                    }
                }
            }
        }
        if let Some(m) = self.n_min {
            if m == 0 {
                return Err(bad("n_min", "minimum gap must be positive"));
            }
            if m * geo.gaps.len() > geo.cells {
                return Err(bad(
                    "n_min",
                    format!(
                        "{} gaps of at least {m} cells exceed N = {}",
                        geo.gaps.len(),
                        geo.cells
                    ),
                ));
            }
        }
        if let Some(eps) = self.epsilon {
            if !(eps.is_finite() && eps > 0.0 && eps < 1.0) {
                return Err(bad("epsilon", format!("failure-rate goal {eps} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn build_geometry(&self) -> Result<Geometry, ConfigError> {
        Geometry::new(&self.geometry.gaps, self.geometry.d0, self.geometry.n)
            .map_err(|e| bad("geometry", e.to_string()))
    }

    pub fn build_pattern(&self) -> Result<Pattern, ConfigError> {
        Pattern::parse(&self.pattern).map_err(|e| bad("pattern", e.to_string()))
    }

    pub fn build_noise(&self) -> Result<NoiseParams, ConfigError> {
        NoiseParams::new(self.sigma).map_err(|e| bad("sigma", e.to_string()))
    }

    pub fn design_opts(&self) -> DesignOpts {
        let opt = &self.optimizer;
        DesignOpts {
            u_max: opt.u_max,
            restarts: opt.restarts,
            opt_samples: opt.opt_samples,
            final_samples: opt.final_samples,
            max_evals: opt.max_evals,
            warm_start: opt.warm_start,
            max_interior: opt.max_interior,
            seed: self.seed,
            ..DesignOpts::default()
        }
    }
}

/// Grids for the sweep command; a missing axis holds the config value fixed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_min: Option<Vec<usize>>,
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Cross product of the given axes as (sigma, n_min) overrides.  No axes
    /// at all, or any empty axis, gives an empty grid.
    pub fn grid(&self, cfg: &RunConfig) -> Vec<(f64, Option<usize>)> {
        if self.sigma.is_none() && self.n_min.is_none() {
            return Vec::new();
        }
        let sigmas = match &self.sigma {
            Some(v) => v.clone(),
            None => vec![cfg.sigma],
        };
        let n_mins: Vec<Option<usize>> = match &self.n_min {
            Some(v) => v.iter().copied().map(Some).collect(),
            None => vec![cfg.n_min],
        };
        let mut grid = Vec::with_capacity(sigmas.len() * n_mins.len());
        for &s in &sigmas {
            for &m in &n_mins {
                grid.push((s, m));
            }
        }
        grid
    }
}
