//! Command orchestration behind the CLI: design, validate, simulate, and
//! sweep flows over parsed configs, with a stable exit-code contract.
//!
//! File handling and argument parsing stay in the binary; everything here
//! takes parsed values and returns reports, so the flows are directly
//! testable.  Exit codes: 0 success, 1 for config or schema problems, 2 for
//! numerical failures.

use crate::config::{ConfigError, RunConfig, SweepSpec};
use crate::design::{self, DesignError, Schedule};
use crate::model::ModelError;
use crate::report::{RunReport, ValidationEstimate};
use crate::sim::{self, SimError, SimModel, Trajectory};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl RunError {
    /// Stable CLI exit code; 0 is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Schema(_) => 1,
            // A trial-count below the estimator's minimum is caller input,
            // not a numerical breakdown.
            RunError::Sim(SimError::TooFewTrials { .. }) => 1,
            _ => 2,
        }
    }
}

/// Which model(s) a validation run exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidateModel {
    Continuous,
    Discrete,
    Both,
}

impl ValidateModel {
    fn models(self) -> Vec<SimModel> {
        match self {
            ValidateModel::Continuous => vec![SimModel::Continuous],
            ValidateModel::Discrete => vec![SimModel::Discrete],
            ValidateModel::Both => vec![SimModel::Continuous, SimModel::Discrete],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValidateRequest {
    pub model: ValidateModel,
    pub trials: usize,
    pub dt: f64,
    pub seed: u64,
}

/// Full design flow: optional electrode-placement search, then the
/// activation-sequence search (or the configured override), then the report.
pub fn run_design(cfg: &RunConfig) -> Result<RunReport, RunError> {
    cfg.validate()?;
    let t0 = Instant::now();
    let p = cfg.build_pattern()?;
    let np = cfg.build_noise()?;
    let opts = cfg.design_opts();
    let mut report = RunReport::new(cfg.clone());

    let mut g = cfg.build_geometry()?;
    if let Some(min_cells) = cfg.n_min {
        let search = design::optimize_electrodes(&p, &g, min_cells, &np, &opts)?;
        g = crate::model::Geometry::new(&search.gaps, cfg.geometry.d0, cfg.geometry.n)?;
        report.electrode_search = Some(search);
    }

    let sched = match &cfg.sequence {
        Some(seq) => design::plan_schedule(&p, &g, &np, seq, &opts)?,
        None => design::search_activation_sequences(&p, &g, &np, &opts)?.0,
    };
    report.record_schedule(sched);
    report.timings.design_seconds = Some(t0.elapsed().as_secs_f64());
    Ok(report)
}

/// Monte Carlo validation of an existing schedule against the config.
pub fn run_validate(
    cfg: &RunConfig,
    sched: &Schedule,
    req: &ValidateRequest,
) -> Result<RunReport, RunError> {
    cfg.validate()?;
    check_schedule(cfg, sched)?;
    let t0 = Instant::now();
    let mut report = RunReport::new(cfg.clone());
    report.record_schedule(sched.clone());
    for model in req.model.models() {
        let tm = Instant::now();
        let est = sim::estimate_success(sched, model, req.trials, req.dt, req.seed)?;
        report.record_validation(ValidationEstimate {
            model,
            trials: req.trials,
            dt: req.dt,
            value: est.value,
            std_err: est.std_err,
            seconds: tm.elapsed().as_secs_f64(),
        });
    }
    report.timings.validate_seconds = Some(t0.elapsed().as_secs_f64());
    Ok(report)
}

/// One continuous trajectory from a sampled initial state, for CSV export.
pub fn run_simulate(cfg: &RunConfig, sched: &Schedule, seed: u64) -> Result<Trajectory, RunError> {
    cfg.validate()?;
    check_schedule(cfg, sched)?;
    let np = cfg.build_noise()?;
    let x0 = sim::sample_initial_state(sched, 0, seed)?;
    Ok(sim::simulate_sde(&x0, sched, &np, cfg.dt, seed)?)
}

/// Design once per grid point; returns the reports and an aggregate CSV of
/// `sigma,p_total` rows in grid order.
pub fn run_sweep(cfg: &RunConfig, spec: &SweepSpec) -> Result<(Vec<RunReport>, String), RunError> {
    cfg.validate()?;
    let mut reports = Vec::new();
    let mut csv = String::from("sigma,p_total\n");
    for (sigma, n_min) in spec.grid(cfg) {
        let mut point = cfg.clone();
        point.sigma = sigma;
        point.n_min = n_min;
        let report = run_design(&point)?;
        let p_total = report.p_total.unwrap_or(f64::NAN);
        csv.push_str(&format!("{sigma},{p_total}\n"));
        reports.push(report);
    }
    Ok((reports, csv))
}

/// The schedule must describe the same problem as the config.  Gap layout is
/// exempt when the config requests placement search, since the schedule then
/// carries the optimized layout.
fn check_schedule(cfg: &RunConfig, sched: &Schedule) -> Result<(), RunError> {
    let g = &sched.geometry;
    let geo = &cfg.geometry;
    if g.cell_count() != geo.cells || g.particle_count() != geo.n || g.cell_width() != geo.d0 {
        return Err(RunError::Schema(format!(
            "schedule is for {} cells of width {} and {} particles; config says {} / {} / {}",
            g.cell_count(),
            g.cell_width(),
            g.particle_count(),
            geo.cells,
            geo.d0,
            geo.n
        )));
    }
    if cfg.n_min.is_none() && g.gaps() != &geo.gaps[..] {
        return Err(RunError::Schema(format!(
            "schedule gap layout {:?} differs from config {:?}",
            g.gaps(),
            geo.gaps
        )));
    }
    let pattern = cfg.build_pattern()?;
    if sched.pattern != pattern {
        return Err(RunError::Schema("schedule targets a different pattern".into()));
    }
    if sched.sigma != cfg.sigma {
        return Err(RunError::Schema(format!(
            "schedule was designed at sigma = {}, config says {}",
            sched.sigma, cfg.sigma
        )));
    }
    Ok(())
}
