//! Command-line front end over the design and validation flows.
//!
//! Exit codes are a stable contract: 0 on success, 1 for configuration,
//! file, or schema problems, 2 for numerical failures inside a run.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dsa1d_core::config::{RunConfig, SweepSpec};
use dsa1d_core::report::{self, RunReport};
use dsa1d_core::run::{self, RunError, ValidateModel, ValidateRequest};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dsa1d", version, about = "Design and validate electrode schedules that steer charged particles into a target pattern")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Design a control schedule for the configured pattern.
    Design {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Where to write the report (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the success rate of an existing schedule by simulation.
    Validate {
        #[arg(long)]
        config: PathBuf,
        /// Schedule JSON, or a previous report containing one.
        #[arg(long)]
        schedule: PathBuf,
        /// Trial count; defaults to the config value.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, value_enum, default_value_t = ModelArg::Continuous)]
        model: ModelArg,
        /// Integrator step for the continuous model; defaults to the config value.
        #[arg(long)]
        dt: Option<f64>,
        /// Seed for the validation trials; defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate a single continuous trajectory and write it as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Schedule JSON, or a previous report containing one.
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trajectory CSV destination.
        #[arg(long)]
        traj: PathBuf,
    },
    /// Run one design per grid point of a parameter sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Sweep grids (JSON with optional "sigma" and "n_min" arrays).
        #[arg(long)]
        sweep: PathBuf,
        /// Directory for the per-point reports and the aggregate CSV.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Continuous,
    Discrete,
    Both,
}

impl From<ModelArg> for ValidateModel {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Continuous => ValidateModel::Continuous,
            ModelArg::Discrete => ValidateModel::Discrete,
            ModelArg::Both => ValidateModel::Both,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<RunError>()
                .map_or(1, RunError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Design { config, out } => {
            let cfg = load_config(&config)?;
            let report = run::run_design(&cfg)?;
            write_report(&report, &out)?;
            summarize(&report);
            Ok(())
        }
        Cmd::Validate {
            config,
            schedule,
            trials,
            model,
            dt,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let sched = load_schedule(&schedule)?;
            let req = ValidateRequest {
                model: model.into(),
                trials: trials.unwrap_or(cfg.trials),
                dt: dt.unwrap_or(cfg.dt),
                seed: seed.unwrap_or(cfg.seed),
            };
            let report = run::run_validate(&cfg, &sched, &req)?;
            match &out {
                Some(path) => write_report(&report, path)?,
                None => println!("{}", report.to_json()),
            }
            for v in &report.validations {
                eprintln!(
                    "{:?}: success {:.4} +- {:.4} over {} trials in {:.2}s",
                    v.model, v.value, v.std_err, v.trials, v.seconds
                );
            }
            Ok(())
        }
        Cmd::Simulate {
            config,
            schedule,
            seed,
            traj,
        } => {
            let cfg = load_config(&config)?;
            let sched = load_schedule(&schedule)?;
            let trajectory = run::run_simulate(&cfg, &sched, seed)?;
            let mut csv = Vec::new();
            trajectory
                .write_csv(&mut csv)
                .context("serializing trajectory")?;
            fs::write(&traj, csv).with_context(|| format!("writing {}", traj.display()))?;
            eprintln!(
                "wrote {} samples over t = 0..{:.4} to {}",
                trajectory.len(),
                trajectory.times.last().unwrap_or(&0.0),
                traj.display()
            );
            Ok(())
        }
        Cmd::Sweep {
            config,
            sweep,
            out_dir,
        } => {
            let cfg = load_config(&config)?;
            let text = fs::read_to_string(&sweep)
                .with_context(|| format!("reading {}", sweep.display()))?;
            let spec = SweepSpec::parse(&text).map_err(RunError::Config)?;
            let (reports, csv) = run::run_sweep(&cfg, &spec)?;
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            for (i, report) in reports.iter().enumerate() {
                write_report(report, &out_dir.join(format!("report_{i:03}.json")))?;
            }
            let csv_path = out_dir.join("sweep.csv");
            fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
            eprintln!(
                "{} grid points; aggregate in {}",
                reports.len(),
                csv_path.display()
            );
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RunConfig::parse(&text).map_err(RunError::Config)?)
}

fn load_schedule(path: &Path) -> Result<dsa1d_core::design::Schedule> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(report::schedule_from_json(&text).map_err(RunError::Config)?)
}

fn write_report(report: &RunReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_json()).with_context(|| format!("writing {}", path.display()))
}

/// One-paragraph design summary on stderr; the JSON report is the artifact.
fn summarize(report: &RunReport) {
    let Some(sched) = &report.schedule else { return };
    eprintln!(
        "{} dynamic stage(s), p_total = {:.4} +- {:.4}",
        sched.stage_count(),
        sched.p_total,
        sched.p_total_std_err
    );
    eprintln!("switch times: {:?}", sched.switch_times);
    if let (Some(eps), Some(met)) = (report.config.epsilon, report.epsilon_met) {
        let failure = report.failure_rate.unwrap_or(f64::NAN);
        eprintln!(
            "failure rate {:.4} {} the goal {}",
            failure,
            if met { "meets" } else { "misses" },
            eps
        );
    }
}
