//! Self-contained JSON reports for CLI runs.
//!
//! A report carries everything needed to reproduce it: the echoed config
//! (with its SHA-256 for quick comparison), the tool version, the designed
//! schedule, and any validation estimates appended later.  Validation runs
//! can therefore consume a previous report file directly instead of a bare
//! schedule.

use crate::config::{ConfigError, RunConfig};
use crate::design::{ElectrodeDesign, Schedule};
use crate::sim::SimModel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One Monte Carlo validation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationEstimate {
    pub model: SimModel,
    pub trials: usize,
    /// Integrator step; unused by the discrete model and recorded as given.
    pub dt: f64,
    pub value: f64,
    pub std_err: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub design_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validate_seconds: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub config: RunConfig,
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    /// Electrode-placement search results when the config asked for one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub electrode_search: Option<ElectrodeDesign>,
    pub stage_probabilities: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_total_std_err: Option<f64>,
    /// 1 - p_total, the quantity the epsilon goal speaks about.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_rate: Option<f64>,
    /// Whether the failure rate met the config's epsilon goal, if one was set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_met: Option<bool>,
    pub validations: Vec<ValidationEstimate>,
    /// Absolute gap between the continuous and discrete estimates once both
    /// are present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_gap: Option<f64>,
    pub timings: Timings,
}

impl RunReport {
    pub fn new(config: RunConfig) -> Self {
        let config_sha256 = config_hash(&config);
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            config_sha256,
            schedule: None,
            electrode_search: None,
            stage_probabilities: Vec::new(),
            p_total: None,
            p_total_std_err: None,
            failure_rate: None,
            epsilon_met: None,
            validations: Vec::new(),
            model_gap: None,
            timings: Timings::default(),
        }
    }

    /// Attach a designed schedule and fill the derived summary fields.
    pub fn record_schedule(&mut self, sched: Schedule) {
        self.stage_probabilities = sched.stages.iter().map(|s| s.p_stage.value).collect();
        self.p_total = Some(sched.p_total);
        self.p_total_std_err = Some(sched.p_total_std_err);
        let failure = 1.0 - sched.p_total;
        self.failure_rate = Some(failure);
        self.epsilon_met = self.config.epsilon.map(|eps| failure <= eps);
        self.schedule = Some(sched);
    }

    /// Append a validation estimate and refresh the cross-model gap.
    pub fn record_validation(&mut self, est: ValidationEstimate) {
        self.validations.push(est);
        let last = |m: SimModel| {
            self.validations
                .iter()
                .rev()
                .find(|v| v.model == m)
                .map(|v| v.value)
        };
        self.model_gap = match (last(SimModel::Continuous), last(SimModel::Discrete)) {
            (Some(c), Some(d)) => Some((c - d).abs()),
            _ => None,
        };
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Hex SHA-256 of the canonical JSON encoding of a config.
pub fn config_hash(cfg: &RunConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Accept either a bare schedule file or a full report containing one.
pub fn schedule_from_json(text: &str) -> Result<Schedule, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    if value.get("schedule").is_some() {
        let report: RunReport = serde_json::from_value(value)?;
        return report.schedule.ok_or(ConfigError::Field {
            field: "schedule",
            message: "report carries no schedule".into(),
        });
    }
    Ok(serde_json::from_value(value)?)
}
