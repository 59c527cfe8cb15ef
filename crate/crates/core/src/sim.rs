//! Forward simulation of designed schedules: Langevin dynamics for the
//! continuous model, Gillespie jumps for the discrete chain, and Monte Carlo
//! success-rate estimation over random initial conditions.
//!
//! The Langevin integrator is plain Euler-Maruyama with rejection stepping: a
//! proposed step that breaks particle ordering, leaves the segment, carries a
//! particle across a charged electrode, or collapses a separation by more
//! than a fixed contraction cap is thrown away and retried with half the
//! step and fresh noise, down to a floor of dt/1024.  True crossings have
//! vanishing probability under the singular repulsion, so rejections are
//! rare and concentrated where the potential is steep; halving there mimics
//! the stronger drift resolution the stiff region needs without inventing
//! reflective boundary physics.
//!
//! Discrete success estimation re-derives stage durations from the chain's
//! own relaxation (five time constants of each stage block) instead of
//! reusing the continuous settling times: the lattice dynamics relaxes on an
//! Arrhenius timescale unrelated to the continuous one, and holding the
//! continuous durations would cut its transients short.

use crate::design::Schedule;
use crate::ising::{self, DiscreteStateSpace, Generator, IsingError};
use crate::model::{self, ControlVector, ModelError, NoiseParams, State};
use crate::rng::{self, DOMAIN_INITIAL_STATE, DOMAIN_SDE_TRIAL, DOMAIN_SSA_TRIAL};
use crate::roa::{self, RoaError};
use crate::steady::ProbEstimate;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

/// Smallest fraction of the nominal step the rejection loop may reach.
const STEP_FLOOR_DIV: f64 = 1024.0;
/// Trajectories keep at most this many samples; longer runs are decimated.
const MAX_SAMPLES: usize = 10_000;
/// Hard ceiling on jump events in one discrete trial.  Arrhenius rates
/// separate exponentially in the barrier heights, so a relaxation horizon
/// set by a tall barrier can demand astronomically many fast events; hitting
/// the ceiling reports the stiffness instead of spinning forever.
const MAX_JUMP_EVENTS: usize = 2_000_000;

/// Initial states keep this many cell widths of clearance from neighbors and
/// from the charged electrodes of the opening stage.  The bound is set by the
/// step floor: a particle squeezed between a neighbor and a charged wall at
/// distance m feels forces of order u/m^2, and the smallest admissible step
/// must still move it by less than m.  One tenth of a cell keeps that
/// resolvable with a factor-two reserve at the largest charges the
/// optimizer emits.
const INIT_MARGIN_CELLS: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Roa(#[from] RoaError),
    #[error(transparent)]
    Ising(#[from] IsingError),
    #[error("step size hit the floor {floor:.3e} at t = {t:.6} near x = {position:.6}")]
    StepFloor { t: f64, position: f64, floor: f64 },
    #[error("dt must be positive and finite, got {0}")]
    BadDt(f64),
    #[error("{got} trials requested; at least {min} required")]
    TooFewTrials { got: usize, min: usize },
    #[error("initial state rejected: {0}")]
    BadInitialState(String),
    #[error("could not draw an admissible initial state after {0} attempts")]
    InitialSampling(usize),
    #[error(
        "jump simulation exceeded {cap} events at t = {t:.3e} of {t_end:.3e}; \
         the chain is too stiff to follow event by event at this temperature"
    )]
    EventCap { cap: usize, t: f64, t_end: f64 },
    #[error("schedule geometry does not match: {0}")]
    ScheduleMismatch(String),
}

/// Which dynamical model backs a validation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimModel {
    Continuous,
    Discrete,
}

/// Sampled continuous trajectory; `stages` holds the schedule stage index in
/// force at each sample (stage count = static phase).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub stages: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &State {
        self.states.last().expect("trajectory has samples")
    }

    /// CSV rows `t,x1,...,xn,stage`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let n = self.states.first().map_or(0, |s| s.positions().len());
        write!(w, "t")?;
        for i in 1..=n {
            write!(w, ",x{i}")?;
        }
        writeln!(w, ",stage")?;
        for k in 0..self.len() {
            write!(w, "{:.10}", self.times[k])?;
            for x in self.states[k].positions() {
                write!(w, ",{x:.10}")?;
            }
            writeln!(w, ",{}", self.stages[k])?;
        }
        Ok(())
    }
}

/// Jump-process trajectory of the discrete chain: state after each event,
/// including schedule switches (which keep the state but change the rates).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JumpTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<usize>,
    pub stages: Vec<usize>,
}

impl JumpTrajectory {
    pub fn final_state(&self) -> usize {
        *self.states.last().expect("trajectory has samples")
    }
}

/// Euler-Maruyama integration of one trajectory under the schedule.
pub fn simulate_sde(
    x0: &State,
    sched: &Schedule,
    np: &NoiseParams,
    dt: f64,
    seed: u64,
) -> Result<Trajectory, SimError> {
    let mut rng = rng::stream(seed, DOMAIN_SDE_TRIAL, 0);
    run_sde(x0, sched, np, dt, &mut rng)
}

fn run_sde(
    x0: &State,
    sched: &Schedule,
    np: &NoiseParams,
    dt: f64,
    rng: &mut impl Rng,
) -> Result<Trajectory, SimError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(SimError::BadDt(dt));
    }
    let g = &sched.geometry;
    let (lo, hi) = g.span();
    let n = g.particle_count();
    if x0.positions().len() != n {
        return Err(SimError::BadInitialState(format!(
            "{} particles, geometry wants {n}",
            x0.positions().len()
        )));
    }
    if x0[0] <= lo || x0[n - 1] >= hi {
        return Err(SimError::BadInitialState("outside the segment".into()));
    }
    let sigma = np.sigma();
    let t_final = sched.final_time();
    let floor = dt / STEP_FLOOR_DIV;

    let total_steps = (t_final / dt).ceil() as usize + sched.stage_count() + 2;
    let stride = total_steps.div_ceil(MAX_SAMPLES).max(1);

    let mut x: Vec<f64> = x0.positions().to_vec();
    let mut y = vec![0.0; n];
    let mut t = 0.0;
    let mut stage = 0usize;
    let mut u = stage_control(sched, stage);
    let mut active_pos = active_positions(sched, u);
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![x0.clone()],
        stages: vec![stage],
    };

    let mut step_count = 0usize;
    while t < t_final {
        let stage_end = sched.switch_times[stage];
        let mut h = dt.min(stage_end - t);
        loop {
            let state = State::new(x.clone())?;
            let f = model::force(&state, u, g)?;
            let noise = sigma * h.sqrt();
            for i in 0..n {
                let z: f64 = if sigma > 0.0 {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                };
                y[i] = x[i] + f[i] * h + noise * z;
            }
            if admissible(&y, lo, hi, &active_pos, &x) {
                break;
            }
            h *= 0.5;
            if h < floor {
                return Err(SimError::StepFloor {
                    t,
                    position: x[0],
                    floor,
                });
            }
        }
        x.copy_from_slice(&y);
        t += h;
        step_count += 1;

        // Snap onto the switch instant and roll the control over.
        let at_switch = t >= stage_end - 1e-15 && stage < sched.stage_count();
        if at_switch {
            t = stage_end;
            stage += 1;
            u = stage_control(sched, stage);
            active_pos = active_positions(sched, u);
        }
        if at_switch || step_count % stride == 0 || t >= t_final {
            traj.times.push(t);
            traj.states.push(State::new(x.clone())?);
            traj.stages.push(stage);
        }
    }
    Ok(traj)
}

fn stage_control(sched: &Schedule, stage: usize) -> &ControlVector {
    if stage < sched.stage_count() {
        &sched.stages[stage].u
    } else {
        &sched.static_u
    }
}

/// Positions of the charged electrodes under `u`.
fn active_positions(sched: &Schedule, u: &ControlVector) -> Vec<f64> {
    let g = &sched.geometry;
    u.active_set()
        .into_iter()
        .map(|j| g.electrodes()[j])
        .collect()
}

/// Fraction of a pre-step separation a single step may keep at most shrink
/// to.  Explicit Euler overshoots into the singular core of the repulsion
/// when the drift is stiff; capping the per-step contraction keeps the
/// recovery step proportional to the separation itself, so the halving
/// cascade never has to go below the floor to climb back out.
const MAX_CONTRACTION: f64 = 0.25;

/// A step is admissible when ordering survives, the segment contains every
/// particle, nobody changed sides of a charged electrode, and no separation
/// (between neighbors or to a charged electrode) collapsed by more than the
/// contraction cap.
fn admissible(y: &[f64], lo: f64, hi: f64, active_pos: &[f64], x: &[f64]) -> bool {
    let n = y.len();
    if y[0] <= lo || y[n - 1] >= hi {
        return false;
    }
    for i in 1..n {
        if y[i] <= y[i - 1] {
            return false;
        }
        if y[i] - y[i - 1] < MAX_CONTRACTION * (x[i] - x[i - 1]) {
            return false;
        }
    }
    for (xi, yi) in x.iter().zip(y) {
        let k = active_pos.partition_point(|&p| p < *xi);
        if k != active_pos.partition_point(|&p| p < *yi) {
            return false;
        }
        if k > 0 && yi - active_pos[k - 1] < MAX_CONTRACTION * (xi - active_pos[k - 1]) {
            return false;
        }
        if k < active_pos.len() && active_pos[k] - yi < MAX_CONTRACTION * (active_pos[k] - xi) {
            return false;
        }
    }
    true
}

/// Gillespie simulation of the discrete chain under the schedule's stage
/// controls and switch times.
pub fn simulate_ssa(
    z0: usize,
    sched: &Schedule,
    ss: &DiscreteStateSpace,
    np: &NoiseParams,
    seed: u64,
) -> Result<JumpTrajectory, SimError> {
    check_discrete_geometry(sched, ss)?;
    let generators = stage_generators(sched, ss, np)?;
    let mut rng = rng::stream(seed, DOMAIN_SSA_TRIAL, 0);
    run_ssa(
        z0,
        &sched.switch_times,
        &generators,
        ss.len(),
        &mut rng,
    )
}

fn run_ssa(
    z0: usize,
    switch_times: &[f64],
    generators: &[Generator],
    state_count: usize,
    rng: &mut impl Rng,
) -> Result<JumpTrajectory, SimError> {
    if z0 >= state_count {
        return Err(SimError::Ising(IsingError::BadStateIndex {
            index: z0,
            states: state_count,
        }));
    }
    let mut traj = JumpTrajectory {
        times: vec![0.0],
        states: vec![z0],
        stages: vec![0],
    };
    let mut z = z0;
    let mut t = 0.0;
    let mut events = 0usize;
    let horizon = *switch_times.last().expect("schedule has a final time");
    for (stage, gen) in generators.iter().enumerate() {
        let t_end = switch_times[stage];
        loop {
            let exit = gen.exit_rate(z);
            if exit <= 0.0 {
                break;
            }
            // Exponential holding time by inversion.
            let wait = -rng.random::<f64>().ln() / exit;
            if t + wait >= t_end {
                break;
            }
            events += 1;
            if events > MAX_JUMP_EVENTS {
                return Err(SimError::EventCap {
                    cap: MAX_JUMP_EVENTS,
                    t,
                    t_end: horizon,
                });
            }
            t += wait;
            let mut pick = rng.random::<f64>() * exit;
            let rates = gen.rates_from(z);
            let mut chosen = rates.len() - 1;
            for (k, &(_, r)) in rates.iter().enumerate() {
                if pick < r {
                    chosen = k;
                    break;
                }
                pick -= r;
            }
            z = rates[chosen].0;
            traj.times.push(t);
            traj.states.push(z);
            traj.stages.push(stage);
        }
        t = t_end;
        traj.times.push(t);
        traj.states.push(z);
        traj.stages.push((stage + 1).min(generators.len() - 1));
    }
    Ok(traj)
}

/// One generator per dynamic stage plus the static phase, in order.
fn stage_generators(
    sched: &Schedule,
    ss: &DiscreteStateSpace,
    np: &NoiseParams,
) -> Result<Vec<Generator>, SimError> {
    let mut gens = Vec::with_capacity(sched.stage_count() + 1);
    for s in &sched.stages {
        gens.push(ising::build_generator(ss, &s.u, np)?);
    }
    gens.push(ising::build_generator(ss, &sched.static_u, np)?);
    Ok(gens)
}

fn check_discrete_geometry(sched: &Schedule, ss: &DiscreteStateSpace) -> Result<(), SimError> {
    let g = ss.geometry();
    if g.cell_count() != sched.geometry.cell_count()
        || g.particle_count() != sched.geometry.particle_count()
    {
        return Err(SimError::ScheduleMismatch(format!(
            "state space is for {} cells / {} particles, schedule for {} / {}",
            g.cell_count(),
            g.particle_count(),
            sched.geometry.cell_count(),
            sched.geometry.particle_count()
        )));
    }
    Ok(())
}

/// Switch times for discrete validation: cumulative five-time-constant
/// settling of each stage's relaxation block under the stage's own rates.
fn discrete_switch_times(
    sched: &Schedule,
    ss: &DiscreteStateSpace,
    generators: &[Generator],
) -> Result<Vec<f64>, SimError> {
    let mut times = Vec::with_capacity(generators.len());
    let mut t = 0.0;
    for (i, gen) in generators.iter().enumerate() {
        let nu = if i < sched.stage_count() {
            sched.stages[i].from_nu.clone()
        } else {
            let active = sched.static_u.active_set();
            roa::roa_of_pattern(&sched.pattern, &sched.geometry, &active)?
        };
        let block = ss.block_indices(&nu)?;
        t += ising::discrete_settling(gen, &block)?.time;
        times.push(t);
    }
    Ok(times)
}

/// Monte Carlo success estimate: fraction of independent trials whose final
/// state realizes the target pattern, with binomial standard error.
pub fn estimate_success(
    sched: &Schedule,
    model: SimModel,
    trials: usize,
    dt: f64,
    seed: u64,
) -> Result<ProbEstimate, SimError> {
    if trials < 100 {
        return Err(SimError::TooFewTrials {
            got: trials,
            min: 100,
        });
    }
    let np = NoiseParams::new(sched.sigma)?;
    match model {
        SimModel::Continuous => estimate_success_sde(sched, &np, trials, dt, seed),
        SimModel::Discrete => estimate_success_ssa(sched, &np, trials, seed),
    }
}

/// Refinement attempts granted to a trial whose rejection cascade bottoms
/// out.  A switch can charge an electrode with a particle sitting next to
/// it, and the force there outruns any fixed step floor; halving the
/// trial's own dt deepens the floor and re-rolls the near-singular
/// geometry, so repeated bottom-outs die off geometrically.
const TRIAL_REFINEMENTS: usize = 3;

fn estimate_success_sde(
    sched: &Schedule,
    np: &NoiseParams,
    trials: usize,
    dt: f64,
    seed: u64,
) -> Result<ProbEstimate, SimError> {
    let g = &sched.geometry;
    let bx = roa::pattern_box(&sched.pattern, g)?;
    let successes = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<usize, SimError> {
            let x0 = sample_initial_state(sched, trial as u64, seed)?;
            let mut attempt_dt = dt;
            loop {
                let mut rng = rng::stream(seed, DOMAIN_SDE_TRIAL, trial as u64);
                match run_sde(&x0, sched, np, attempt_dt, &mut rng) {
                    Ok(traj) => {
                        return Ok(bx.contains(traj.final_state().positions()) as usize)
                    }
                    Err(e @ SimError::StepFloor { .. }) => {
                        if attempt_dt <= dt / (1 << TRIAL_REFINEMENTS) as f64 {
                            return Err(e);
                        }
                        attempt_dt *= 0.5;
                    }
                    Err(e) => return Err(e),
                }
            }
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum::<usize>();
    Ok(binomial_estimate(successes, trials))
}

fn estimate_success_ssa(
    sched: &Schedule,
    np: &NoiseParams,
    trials: usize,
    seed: u64,
) -> Result<ProbEstimate, SimError> {
    let ss = ising::enumerate_states(&sched.geometry)?;
    check_discrete_geometry(sched, &ss)?;
    let generators = stage_generators(sched, &ss, np)?;
    let switch_times = discrete_switch_times(sched, &ss, &generators)?;
    let target = ss
        .index_of_pattern(&sched.pattern)
        .ok_or_else(|| SimError::ScheduleMismatch("pattern not in state space".into()))?;
    let state_count = ss.len();

    let successes = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<usize, SimError> {
            let mut init = rng::stream(seed, DOMAIN_INITIAL_STATE, trial as u64);
            let z0 = init.random_range(0..state_count);
            let mut rng = rng::stream(seed, DOMAIN_SSA_TRIAL, trial as u64);
            let traj = run_ssa(z0, &switch_times, &generators, state_count, &mut rng)?;
            Ok((traj.final_state() == target) as usize)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum::<usize>();
    Ok(binomial_estimate(successes, trials))
}

fn binomial_estimate(successes: usize, trials: usize) -> ProbEstimate {
    let p = successes as f64 / trials as f64;
    ProbEstimate {
        value: p,
        std_err: (p * (1.0 - p) / trials as f64).sqrt(),
        method: crate::steady::ProbMethod::ExactMc,
    }
}

/// Uniform ordered initial state on the open segment, redrawn until every
/// particle clears its neighbors and the opening stage's charged electrodes
/// by the margin.
pub fn sample_initial_state(sched: &Schedule, trial: u64, seed: u64) -> Result<State, SimError> {
    let g = &sched.geometry;
    let (lo, hi) = g.span();
    let n = g.particle_count();
    let margin = INIT_MARGIN_CELLS * g.cell_width();
    let charged = active_positions(sched, stage_control(sched, 0));
    let mut rng = rng::stream(seed, DOMAIN_INITIAL_STATE, trial);
    const ATTEMPTS: usize = 10_000;
    for _ in 0..ATTEMPTS {
        let mut xs: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        xs.sort_by(f64::total_cmp);
        let clear = xs.windows(2).all(|w| w[1] - w[0] >= margin)
            && xs
                .iter()
                .all(|&x| charged.iter().all(|&q| (x - q).abs() >= margin));
        if clear {
            return Ok(State::new(xs)?);
        }
    }
    Err(SimError::InitialSampling(ATTEMPTS))
}
