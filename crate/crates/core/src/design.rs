//! Control design: charge optimization, stage planning, and layout search.
//!
//! The final (static) control maximizes the steady-state probability that the
//! particles realize the target pattern inside its invariant region.  During
//! the search the objective is the cheap saddle-point estimate with common
//! random numbers (one frozen sampling seed for every evaluation), optimized
//! by the bounded simplex method from multiple starts; the winner is then
//! re-estimated once with the exact importance-sampled ratio at a larger
//! budget and a fresh stream.
//!
//! A multistage schedule steers the particles from a blank initial state into
//! the pattern's region before the static phase takes over.  Stage `i` holds
//! a subset of electrodes charged; its capture probability is the chance that
//! a steady-state draw from the current region already sits in the refined
//! region delimited by the next activation, and its duration follows the
//! five-time-constant settling rule.  Activating electrodes in different
//! orders gives different schedules; `search_activation_sequences` enumerates
//! every ordered set partition of the interior electrodes (their number is
//! capped, the count grows like the ordered Bell numbers) and keeps the plan
//! with the highest product of stage probabilities, preferring fewer stages
//! and lexicographically smaller sequences on ties.
//!
//! `optimize_electrodes` searches over electrode placements instead: every
//! sufficiently wide assignment of lattice cells to the gaps is designed with
//! a reduced budget and ranked by the re-estimated static probability.
//!
//! Objectives are bounded (probabilities, or negated distances), but charge
//! magnitudes are not: sparse patterns reward ever-larger charges, so all
//! searches run inside the box `[0, u_max]` and a boundary solution simply
//! reports charges at the cap.

use crate::equilibrium::{self, SolveError, SolverOpts};
use crate::model::{ControlVector, Geometry, ModelError, NoiseParams, State};
use crate::rng::{self, derive_seed, DOMAIN_OPT_RESTART};
use crate::roa::{self, Composition, Pattern, RoaError};
use crate::simplex::{self, SimplexOpts};
use crate::steady::{self, ProbError, ProbEstimate};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Sub-seed tags (see [`crate::rng::derive_seed`]).
const TAG_OBJECTIVE: u64 = 0xd5;
const TAG_FINAL: u64 = 0xf1;
const TAG_STAGE: u64 = 0x57;
const TAG_CANDIDATE: u64 = 0xca;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Roa(#[from] RoaError),
    #[error(transparent)]
    Solve(#[from] Box<SolveError>),
    #[error(transparent)]
    Prob(#[from] ProbError),
    #[error("stage regions are not a consistent refinement: {0}")]
    NotARefinement(String),
    #[error("invalid activation sequence: {0}")]
    BadSequence(String),
    #[error("{got} interior electrodes exceed the enumeration cap {cap}")]
    TooManyInterior { got: usize, cap: usize },
    #[error("no electrode layout satisfies the minimum gap of {min_cells} cells")]
    EmptySearchSpace { min_cells: usize },
    #[error("every optimizer start failed to produce a feasible design")]
    NoFeasibleDesign,
}

impl From<SolveError> for DesignError {
    fn from(e: SolveError) -> Self {
        DesignError::Solve(Box::new(e))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignOpts {
    /// Charge cap; optimizers operate inside `[0, u_max]`.
    pub u_max: f64,
    /// Lower bound for charges that must stay active (endpoints, and every
    /// stage electrode): keeps the barrier structure well defined.
    pub u_min_active: f64,
    /// Random simplex starts per optimization (a deterministic anchor start
    /// and, for the static design, the surrogate warm start come on top).
    pub restarts: usize,
    /// Monte Carlo samples per objective evaluation during the search.
    pub opt_samples: usize,
    /// Samples for the final exact re-estimate of a winning design.
    pub final_samples: usize,
    /// Simplex evaluation budget per start.
    pub max_evals: usize,
    /// Seed the surrogate solution as an extra start of the static search.
    pub warm_start: bool,
    /// Interior electrode count beyond which sequence enumeration refuses.
    pub max_interior: usize,
    /// Top-level seed; every stream the design consumes derives from it.
    pub seed: u64,
}

impl Default for DesignOpts {
    fn default() -> Self {
        Self {
            u_max: 50.0,
            u_min_active: 0.01,
            restarts: 8,
            opt_samples: 4096,
            final_samples: 65_536,
            max_evals: 400,
            warm_start: true,
            max_interior: 4,
            seed: 0,
        }
    }
}

/// Distance-based stand-in objectives for the static design; cheap because
/// they need no sampling, used to warm-start the probability search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateVariant {
    /// Minimize the worst coordinate offset of the equilibrium from the
    /// pattern cell midpoints.
    InfNorm,
    /// Minimize squared offset plus total stationary variance, balancing
    /// placement against confinement.
    MeanSquare,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StaticDesign {
    pub u: ControlVector,
    pub x_ss: State,
    /// Exact importance-sampled re-estimate of the winning control.
    pub prob: ProbEstimate,
    /// Saddle-point objective value seen by the optimizer.
    pub saddle_objective: f64,
    pub evals: usize,
}

/// One transient stage of a schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePlan {
    /// Electrodes charged during the stage.
    pub active: Vec<usize>,
    pub u: ControlVector,
    /// Region the stage starts from (delimited by `active`).
    pub from_nu: Composition,
    /// Region to capture, delimited by the next stage's electrodes.
    pub target_nu: Composition,
    /// Exact Gibbs-conditional capture probability.
    pub p_stage: ProbEstimate,
    /// Stage length: five time constants of the slowest relaxation mode.
    pub duration: f64,
    /// Stage equilibrium the particles settle around.
    pub x_eq: State,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignDiagnostics {
    pub sequence: Vec<Vec<usize>>,
    pub static_evals: usize,
    pub static_saddle_objective: f64,
}

/// Complete design artifact: per-stage controls and durations plus the final
/// static control, ready for simulation or export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schedule {
    pub geometry: Geometry,
    pub pattern: Pattern,
    pub sigma: f64,
    pub stages: Vec<StagePlan>,
    pub static_u: ControlVector,
    pub static_x_ss: State,
    pub static_p: ProbEstimate,
    pub static_settling: f64,
    /// Cumulative stage end times `t_1 < ... < t_D`, then the final time
    /// `t_f = t_D + static_settling`.
    pub switch_times: Vec<f64>,
    /// Product of stage capture probabilities and the static probability.
    pub p_total: f64,
    /// First-order error propagation through the product.
    pub p_total_std_err: f64,
    pub seed: u64,
    pub diagnostics: DesignDiagnostics,
}

impl Schedule {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Final time at which success is evaluated.
    pub fn final_time(&self) -> f64 {
        *self.switch_times.last().expect("schedule has a final time")
    }

    /// Control in force at time `t`: the active stage's charges, or the
    /// static charges once every stage has ended.
    pub fn control_at(&self, t: f64) -> &ControlVector {
        for (i, stage) in self.stages.iter().enumerate() {
            if t < self.switch_times[i] {
                return &stage.u;
            }
        }
        &self.static_u
    }

    /// Stage index at time `t`, with `stage_count()` meaning the static phase.
    pub fn stage_index_at(&self, t: f64) -> usize {
        self.switch_times[..self.stages.len()]
            .iter()
            .position(|&s| t < s)
            .unwrap_or(self.stages.len())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceOutcome {
    pub sequence: Vec<Vec<usize>>,
    pub stages: usize,
    pub p_total: f64,
    pub p_total_std_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapOutcome {
    pub gaps: Vec<usize>,
    pub p_static: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElectrodeDesign {
    pub gaps: Vec<usize>,
    pub design: StaticDesign,
    pub table: Vec<GapOutcome>,
}

/// Charges maximizing the steady-state pattern probability.
pub fn optimize_static(
    p: &Pattern,
    g: &Geometry,
    np: &NoiseParams,
    opts: &DesignOpts,
) -> Result<StaticDesign, DesignError> {
    p.check_against(g)?;
    np.inv_temperature()?;
    let dim = g.electrode_count();
    let (lo, hi) = charge_box(dim, opts);
    let obj_seed = derive_seed(opts.seed, TAG_OBJECTIVE);

    let mut starts = random_starts(dim, &lo, &hi, opts);
    if opts.warm_start {
        let warm = surrogate_static(p, g, np, SurrogateVariant::MeanSquare, opts)?;
        starts.push(warm.charges().to_vec());
    }

    let results: Vec<simplex::SimplexResult> = starts
        .par_iter()
        .map(|start| {
            let mut obj = |v: &[f64]| {
                static_saddle_objective(v, p, g, np, opts.opt_samples, obj_seed)
                    .unwrap_or(f64::NEG_INFINITY)
            };
            simplex::maximize(&mut obj, start, &lo, &hi, &simplex_opts(opts))
        })
        .collect();
    let best = pick_best(&results)?;

    let u = ControlVector::new(best.x.clone())?;
    let nu = roa::roa_of_pattern(p, g, &u.active_set())?;
    let eq = equilibrium::solve_fixed_point(&nu, &u, g, &SolverOpts::default())?;
    let stability = equilibrium::certify_stability(&eq.x_ss, &u, g)?;
    debug_assert!(stability.positive_definite);
    let prob = steady::p_ss_exact(
        &u,
        p,
        g,
        np,
        opts.final_samples,
        derive_seed(opts.seed, TAG_FINAL),
    )?;
    Ok(StaticDesign {
        u,
        x_ss: eq.x_ss,
        prob,
        saddle_objective: best.value,
        evals: results.iter().map(|r| r.evals).sum(),
    })
}

/// Distance-objective design, used standalone or as the warm start of
/// [`optimize_static`].  Deterministic: no sampling involved.
pub fn surrogate_static(
    p: &Pattern,
    g: &Geometry,
    np: &NoiseParams,
    variant: SurrogateVariant,
    opts: &DesignOpts,
) -> Result<ControlVector, DesignError> {
    p.check_against(g)?;
    let dim = g.electrode_count();
    let (lo, hi) = charge_box(dim, opts);
    let target = roa::pattern_box(p, g)?.center();

    let results: Vec<simplex::SimplexResult> = random_starts(dim, &lo, &hi, opts)
        .par_iter()
        .map(|start| {
            let mut obj = |v: &[f64]| {
                surrogate_objective(v, p, g, np, &target, variant).unwrap_or(f64::NEG_INFINITY)
            };
            simplex::maximize(&mut obj, start, &lo, &hi, &simplex_opts(opts))
        })
        .collect();
    let best = pick_best(&results)?;
    Ok(ControlVector::new(best.x.clone())?)
}

/// Charges for one transient stage: maximize the probability that a
/// steady-state draw from `from`'s region lies in `to`'s refined region.
pub fn optimize_stage(
    from: &Composition,
    to: &Composition,
    active: &[usize],
    g: &Geometry,
    np: &NoiseParams,
    opts: &DesignOpts,
) -> Result<StagePlan, DesignError> {
    if from.active() != active {
        return Err(DesignError::NotARefinement(format!(
            "stage active set {:?} does not delimit the from-region {:?}",
            active,
            from.active()
        )));
    }
    check_refinement(from, to)?;
    np.inv_temperature()?;
    let dim = active.len();
    let lo = vec![opts.u_min_active; dim];
    let hi = vec![opts.u_max; dim];
    let obj_seed = derive_seed(opts.seed, TAG_OBJECTIVE);
    let full = |v: &[f64]| -> Vec<f64> {
        let mut u = vec![0.0; g.electrode_count()];
        for (slot, &j) in active.iter().enumerate() {
            u[j] = v[slot];
        }
        u
    };

    let results: Vec<simplex::SimplexResult> = random_starts(dim, &lo, &hi, opts)
        .par_iter()
        .map(|start| {
            let mut obj = |v: &[f64]| {
                stage_saddle_objective(&full(v), from, to, g, np, opts.opt_samples, obj_seed)
                    .unwrap_or(f64::NEG_INFINITY)
            };
            simplex::maximize(&mut obj, start, &lo, &hi, &simplex_opts(opts))
        })
        .collect();
    let best = pick_best(&results)?;

    let u = ControlVector::new(full(&best.x))?;
    let eq = equilibrium::solve_fixed_point(from, &u, g, &SolverOpts::default())?;
    let p_stage = steady::region_capture(
        &eq.x_ss,
        &u,
        g,
        np,
        from,
        to,
        true,
        opts.final_samples,
        derive_seed(opts.seed, TAG_FINAL),
    )?;
    let duration = steady::settling_time(&eq.x_ss, &u, g)?;
    Ok(StagePlan {
        active: active.to_vec(),
        u,
        from_nu: from.clone(),
        target_nu: to.clone(),
        p_stage,
        duration,
        x_eq: eq.x_ss,
    })
}

/// Plan the full schedule for one activation sequence: stages first, the
/// optimized static control last.
pub fn plan_schedule(
    p: &Pattern,
    g: &Geometry,
    np: &NoiseParams,
    sequence: &[Vec<usize>],
    opts: &DesignOpts,
) -> Result<Schedule, DesignError> {
    validate_sequence(g, sequence)?;
    let static_design = optimize_static(p, g, np, opts)?;
    let mut solver = |from: &Composition,
                      to: &Composition,
                      active: &[usize],
                      stage_opts: &DesignOpts|
     -> Result<StagePlan, DesignError> {
        optimize_stage(from, to, active, g, np, stage_opts)
    };
    assemble_schedule(p, g, np, sequence, static_design, opts, &mut solver)
}

fn assemble_schedule(
    p: &Pattern,
    g: &Geometry,
    np: &NoiseParams,
    sequence: &[Vec<usize>],
    static_design: StaticDesign,
    opts: &DesignOpts,
    stage_solver: &mut dyn FnMut(
        &Composition,
        &Composition,
        &[usize],
        &DesignOpts,
    ) -> Result<StagePlan, DesignError>,
) -> Result<Schedule, DesignError> {
    let endpoints = [0, g.electrode_count() - 1];
    let static_active = static_design.u.active_set();

    let mut stages = Vec::with_capacity(sequence.len());
    let mut active_now: Vec<usize> = endpoints.to_vec();
    for (i, block) in sequence.iter().enumerate() {
        let active_next = if i + 1 < sequence.len() {
            let mut a = active_now.clone();
            a.extend_from_slice(block);
            a.sort_unstable();
            a
        } else {
            static_active.clone()
        };
        let from = roa::roa_of_pattern(p, g, &active_now)?;
        let to = roa::roa_of_pattern(p, g, &active_next)?;
        let stage_opts = DesignOpts {
            seed: stage_seed(opts.seed, &active_now, &active_next),
            ..opts.clone()
        };
        stages.push(stage_solver(&from, &to, &active_now, &stage_opts)?);
        if i + 1 < sequence.len() {
            active_now = active_next;
        }
    }

    let static_settling = steady::settling_time(&static_design.x_ss, &static_design.u, g)?;
    let mut switch_times = Vec::with_capacity(stages.len() + 1);
    let mut t = 0.0;
    for s in &stages {
        t += s.duration;
        switch_times.push(t);
    }
    switch_times.push(t + static_settling);

    let mut factors: Vec<(f64, f64)> = stages
        .iter()
        .map(|s| (s.p_stage.value, s.p_stage.std_err))
        .collect();
    factors.push((static_design.prob.value, static_design.prob.std_err));
    let (p_total, p_total_std_err) = product_with_std_err(&factors);
    Ok(Schedule {
        geometry: g.clone(),
        pattern: p.clone(),
        sigma: np.sigma(),
        stages,
        static_u: static_design.u,
        static_x_ss: static_design.x_ss,
        static_p: static_design.prob,
        static_settling,
        switch_times,
        p_total,
        p_total_std_err,
        seed: opts.seed,
        diagnostics: DesignDiagnostics {
            sequence: sequence.to_vec(),
            static_evals: static_design.evals,
            static_saddle_objective: static_design.saddle_objective,
        },
    })
}

/// Every ordered set partition of `elements`, blocks sorted ascending,
/// enumerated deterministically (first block chosen by increasing bitmask).
pub fn enumerate_activation_sequences(elements: &[usize]) -> Vec<Vec<Vec<usize>>> {
    if elements.is_empty() {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    let full = (1u32 << elements.len()) - 1;
    for mask in 1..=full {
        let block: Vec<usize> = (0..elements.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| elements[i])
            .collect();
        let rest: Vec<usize> = (0..elements.len())
            .filter(|i| mask & (1 << i) == 0)
            .map(|i| elements[i])
            .collect();
        for mut tail in enumerate_activation_sequences(&rest) {
            let mut seq = vec![block.clone()];
            seq.append(&mut tail);
            out.push(seq);
        }
    }
    out
}

/// Exhaustive activation-sequence search; returns the winning schedule and
/// the outcome table in enumeration order.
pub fn search_activation_sequences(
    p: &Pattern,
    g: &Geometry,
    np: &NoiseParams,
    opts: &DesignOpts,
) -> Result<(Schedule, Vec<SequenceOutcome>), DesignError> {
    let interior: Vec<usize> = g.interior_electrodes().collect();
    if interior.len() > opts.max_interior {
        return Err(DesignError::TooManyInterior {
            got: interior.len(),
            cap: opts.max_interior,
        });
    }
    let sequences = enumerate_activation_sequences(&interior);
    let static_design = optimize_static(p, g, np, opts)?;

    // Different sequences share stage problems (same from/to/active triple),
    // and a stage's seed depends only on its own active sets, so memoized and
    // fresh plans coincide and the search result is order-independent.
    let mut memo: HashMap<(Vec<usize>, Vec<usize>), StagePlan> = HashMap::new();
    let mut schedules = Vec::with_capacity(sequences.len());
    let mut outcomes = Vec::with_capacity(sequences.len());
    for sequence in &sequences {
        let mut solver = |from: &Composition,
                          to: &Composition,
                          active: &[usize],
                          stage_opts: &DesignOpts|
         -> Result<StagePlan, DesignError> {
            let key = (active.to_vec(), to.active().to_vec());
            if let Some(plan) = memo.get(&key) {
                return Ok(plan.clone());
            }
            let plan = optimize_stage(from, to, active, g, np, stage_opts)?;
            memo.insert(key, plan.clone());
            Ok(plan)
        };
        let schedule = assemble_schedule(
            p,
            g,
            np,
            sequence,
            static_design.clone(),
            opts,
            &mut solver,
        )?;
        outcomes.push(SequenceOutcome {
            sequence: sequence.clone(),
            stages: schedule.stage_count(),
            p_total: schedule.p_total,
            p_total_std_err: schedule.p_total_std_err,
        });
        schedules.push(schedule);
    }

    // Highest probability wins, but Monte Carlo noise must not decide: once
    // near-perfect stages saturate, many sequences differ by less than a
    // standard error, and a strict float argmax would pick among them at
    // random.  Sequences whose stage products lie within two combined
    // standard errors of the best are treated as tied; ties prefer fewer
    // stages (shorter schedules), then the lexicographically smaller
    // sequence.  The static factor is shared by every sequence and is left
    // out so its sampling error does not widen the tie window.
    let stage_products: Vec<(f64, f64)> = schedules
        .iter()
        .map(|s| {
            let factors: Vec<(f64, f64)> = s
                .stages
                .iter()
                .map(|st| (st.p_stage.value, st.p_stage.std_err))
                .collect();
            product_with_std_err(&factors)
        })
        .collect();
    let top = (0..schedules.len())
        .max_by(|&a, &b| stage_products[a].0.total_cmp(&stage_products[b].0))
        .ok_or(DesignError::NoFeasibleDesign)?;
    let (top_p, top_se) = stage_products[top];
    let best = (0..schedules.len())
        .filter(|&i| {
            let (p, se) = stage_products[i];
            p + 2.0 * (se + top_se) >= top_p
        })
        .min_by(|&a, &b| {
            schedules[a]
                .stage_count()
                .cmp(&schedules[b].stage_count())
                .then(schedules[a].diagnostics.sequence.cmp(&schedules[b].diagnostics.sequence))
        })
        .ok_or(DesignError::NoFeasibleDesign)?;
    Ok((schedules.swap_remove(best), outcomes))
}

/// Product of estimates with first-order (delta-method) error propagation;
/// zero factors contribute through the other factors' products, so no
/// division is involved.
fn product_with_std_err(factors: &[(f64, f64)]) -> (f64, f64) {
    let prod: f64 = factors.iter().map(|f| f.0).product();
    let var: f64 = (0..factors.len())
        .map(|i| {
            let others: f64 = factors
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, f)| f.0)
                .product();
            (factors[i].1 * others).powi(2)
        })
        .sum();
    (prod, var.sqrt())
}

/// Every way to spread `total_cells` over `parts` gaps with at least
/// `min_cells` each, lexicographic.
pub fn enumerate_gap_layouts(total_cells: usize, parts: usize, min_cells: usize) -> Vec<Vec<usize>> {
    fn rec(remaining: usize, parts: usize, min: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            if remaining >= min {
                prefix.push(remaining);
                out.push(prefix.clone());
                prefix.pop();
            }
            return;
        }
        for first in min..=remaining.saturating_sub(min * (parts - 1)) {
            prefix.push(first);
            rec(remaining - first, parts - 1, min, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if parts > 0 {
        rec(total_cells, parts, min_cells, &mut Vec::new(), &mut out);
    }
    out
}

/// Electrode-placement search: redesign the static control for every gap
/// layout wide enough per gap, rank by the exact probability re-estimate.
pub fn optimize_electrodes(
    p: &Pattern,
    g: &Geometry,
    min_cells: usize,
    np: &NoiseParams,
    opts: &DesignOpts,
) -> Result<ElectrodeDesign, DesignError> {
    let layouts = enumerate_gap_layouts(g.cell_count(), g.gaps().len(), min_cells);
    if layouts.is_empty() {
        return Err(DesignError::EmptySearchSpace { min_cells });
    }
    let mut table = Vec::with_capacity(layouts.len());
    let mut best: Option<(usize, StaticDesign)> = None;
    for (idx, gaps) in layouts.iter().enumerate() {
        let candidate = Geometry::new(gaps, g.cell_width(), g.particle_count())?;
        let cand_opts = DesignOpts {
            restarts: 2,
            max_evals: opts.max_evals.min(150),
            opt_samples: opts.opt_samples.min(2048),
            final_samples: opts.final_samples.min(16_384),
            seed: derive_seed(opts.seed, TAG_CANDIDATE + idx as u64),
            ..opts.clone()
        };
        let design = optimize_static(p, &candidate, np, &cand_opts)?;
        table.push(GapOutcome {
            gaps: gaps.clone(),
            p_static: design.prob.value,
        });
        let better = match &best {
            None => true,
            Some((_, b)) => design.prob.value > b.prob.value,
        };
        if better {
            best = Some((idx, design));
        }
    }
    let (idx, design) = best.ok_or(DesignError::NoFeasibleDesign)?;
    Ok(ElectrodeDesign {
        gaps: layouts[idx].clone(),
        design,
        table,
    })
}

// ---------------------------------------------------------------------------
// objectives and helpers

fn static_saddle_objective(
    v: &[f64],
    p: &Pattern,
    g: &Geometry,
    np: &NoiseParams,
    samples: usize,
    seed: u64,
) -> Result<f64, DesignError> {
    let u = ControlVector::new(v.to_vec())?;
    let nu = roa::roa_of_pattern(p, g, &u.active_set())?;
    let eq = equilibrium::solve_fixed_point(&nu, &u, g, &SolverOpts::default())?;
    Ok(steady::p_ss_saddle(&eq.x_ss, &u, p, g, np, samples, seed)?.value)
}

fn stage_saddle_objective(
    v: &[f64],
    from: &Composition,
    to: &Composition,
    g: &Geometry,
    np: &NoiseParams,
    samples: usize,
    seed: u64,
) -> Result<f64, DesignError> {
    let u = ControlVector::new(v.to_vec())?;
    let eq = equilibrium::solve_fixed_point(from, &u, g, &SolverOpts::default())?;
    Ok(steady::region_capture(&eq.x_ss, &u, g, np, from, to, false, samples, seed)?.value)
}

fn surrogate_objective(
    v: &[f64],
    p: &Pattern,
    g: &Geometry,
    np: &NoiseParams,
    target: &[f64],
    variant: SurrogateVariant,
) -> Result<f64, DesignError> {
    let u = ControlVector::new(v.to_vec())?;
    let nu = roa::roa_of_pattern(p, g, &u.active_set())?;
    let eq = equilibrium::solve_fixed_point(&nu, &u, g, &SolverOpts::default())?;
    let xs = eq.x_ss.positions();
    match variant {
        SurrogateVariant::InfNorm => {
            let worst = xs
                .iter()
                .zip(target)
                .map(|(x, t)| (x - t).abs())
                .fold(0.0f64, f64::max);
            Ok(-worst)
        }
        SurrogateVariant::MeanSquare => {
            let sq: f64 = xs.iter().zip(target).map(|(x, t)| (x - t) * (x - t)).sum();
            let spread = steady::steady_covariance(&eq.x_ss, &u, g, np)?.trace();
            Ok(-(sq + spread))
        }
    }
}

/// Full-vector charge bounds: interior electrodes may switch off entirely,
/// endpoints keep the active floor.
fn charge_box(dim: usize, opts: &DesignOpts) -> (Vec<f64>, Vec<f64>) {
    let hi = vec![opts.u_max; dim];
    let mut lo = vec![0.0; dim];
    lo[0] = opts.u_min_active;
    lo[dim - 1] = opts.u_min_active;
    (lo, hi)
}

/// Deterministic start points: one mid-range anchor plus `restarts` random
/// draws on `(seed, restart index)` streams, uniform in `[0.5, min(20, cap)]`.
fn random_starts(dim: usize, lo: &[f64], hi: &[f64], opts: &DesignOpts) -> Vec<Vec<f64>> {
    let top = 20.0f64.min(opts.u_max).max(1.0);
    let mut starts = vec![(0..dim)
        .map(|i| 2.0f64.clamp(lo[i], hi[i]))
        .collect::<Vec<f64>>()];
    for r in 0..opts.restarts {
        let mut rng = rng::stream(opts.seed, DOMAIN_OPT_RESTART, r as u64);
        let start = (0..dim)
            .map(|i| rng.random_range(0.5..top).clamp(lo[i], hi[i]))
            .collect();
        starts.push(start);
    }
    starts
}

fn simplex_opts(opts: &DesignOpts) -> SimplexOpts {
    SimplexOpts {
        max_evals: opts.max_evals,
        ..SimplexOpts::default()
    }
}

fn pick_best(results: &[simplex::SimplexResult]) -> Result<&simplex::SimplexResult, DesignError> {
    results
        .iter()
        .filter(|r| r.value.is_finite())
        .max_by(|a, b| a.value.total_cmp(&b.value))
        .ok_or(DesignError::NoFeasibleDesign)
}

fn stage_seed(base: u64, active_now: &[usize], active_next: &[usize]) -> u64 {
    let mut s = derive_seed(base, TAG_STAGE);
    for &j in active_now {
        s = derive_seed(s, 2 * j as u64 + 1);
    }
    s = derive_seed(s, u64::MAX);
    for &j in active_next {
        s = derive_seed(s, 2 * j as u64 + 1);
    }
    s
}

fn check_refinement(from: &Composition, to: &Composition) -> Result<(), DesignError> {
    let fa = from.active();
    let ta = to.active();
    if !fa.iter().all(|j| ta.contains(j)) {
        return Err(DesignError::NotARefinement(format!(
            "{fa:?} is not a subset of {ta:?}"
        )));
    }
    // Each to-interval nests in exactly one from-interval; counts must agree.
    let mut sums = vec![0usize; from.interval_count()];
    for t in 0..to.interval_count() {
        let (lo, hi) = (ta[t], ta[t + 1]);
        let k = (0..from.interval_count())
            .find(|&k| fa[k] <= lo && hi <= fa[k + 1])
            .ok_or_else(|| {
                DesignError::NotARefinement(format!(
                    "interval ({lo}, {hi}) straddles a boundary of {fa:?}"
                ))
            })?;
        sums[k] += to.counts()[t];
    }
    if sums != from.counts() {
        return Err(DesignError::NotARefinement(format!(
            "counts {:?} do not aggregate to {:?}",
            to.counts(),
            from.counts()
        )));
    }
    Ok(())
}

fn validate_sequence(g: &Geometry, sequence: &[Vec<usize>]) -> Result<(), DesignError> {
    let interior: Vec<usize> = g.interior_electrodes().collect();
    let mut seen = Vec::new();
    for block in sequence {
        if block.is_empty() {
            return Err(DesignError::BadSequence("empty block".into()));
        }
        for &j in block {
            if !interior.contains(&j) {
                return Err(DesignError::BadSequence(format!(
                    "{j} is not an interior electrode"
                )));
            }
            if seen.contains(&j) {
                return Err(DesignError::BadSequence(format!("{j} appears twice")));
            }
            seen.push(j);
        }
    }
    if seen.len() != interior.len() {
        return Err(DesignError::BadSequence(format!(
            "sequence covers {seen:?} but the interior electrodes are {interior:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Geometry, NoiseParams};
    use crate::roa::Pattern;

    #[test]
    fn activation_sequence_counts_follow_ordered_bell_numbers() {
        assert_eq!(enumerate_activation_sequences(&[]).len(), 1);
        assert_eq!(enumerate_activation_sequences(&[1]).len(), 1);
        assert_eq!(enumerate_activation_sequences(&[1, 2]).len(), 3);
        let seqs = enumerate_activation_sequences(&[1, 2, 3]);
        assert_eq!(seqs.len(), 13);
        let mut distinct = std::collections::HashSet::new();
        for s in &seqs {
            let flat: Vec<usize> = s.iter().flatten().copied().collect();
            let mut sorted = flat.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![1, 2, 3], "not a partition: {s:?}");
            assert!(distinct.insert(format!("{s:?}")), "duplicate {s:?}");
        }
    }

    #[test]
    fn gap_layout_enumeration_counts() {
        assert_eq!(enumerate_gap_layouts(16, 4, 3).len(), 35);
        let tight = enumerate_gap_layouts(16, 4, 4);
        assert_eq!(tight, vec![vec![4, 4, 4, 4]]);
        assert!(enumerate_gap_layouts(16, 4, 5).is_empty());
    }

    #[test]
    fn refinement_checks_catch_mismatches() {
        let from = Composition::new(vec![3, 1], vec![0, 2, 4]).unwrap();
        let good = Composition::new(vec![2, 1, 1, 0], vec![0, 1, 2, 3, 4]).unwrap();
        assert!(check_refinement(&from, &good).is_ok());
        // Aggregated counts (4, 0) disagree with (3, 1).
        let bad = Composition::new(vec![2, 2, 0, 0], vec![0, 1, 2, 3, 4]).unwrap();
        assert!(matches!(
            check_refinement(&from, &bad),
            Err(DesignError::NotARefinement(_))
        ));
        // Active sets must nest.
        let disjoint = Composition::new(vec![3, 1], vec![0, 3, 4]).unwrap();
        assert!(matches!(
            check_refinement(&from, &disjoint),
            Err(DesignError::NotARefinement(_))
        ));
    }

    #[test]
    fn static_design_confines_a_single_particle() {
        // One particle, one interval, two cells: ask for the left cell.
        let g = Geometry::new(&[2], 0.5, 1).unwrap();
        let p = Pattern::parse("10").unwrap();
        let np = NoiseParams::new(0.3).unwrap();
        let opts = DesignOpts {
            restarts: 3,
            opt_samples: 2048,
            final_samples: 8192,
            max_evals: 200,
            seed: 3,
            ..DesignOpts::default()
        };
        let d = optimize_static(&p, &g, &np, &opts).unwrap();
        assert!(d.x_ss[0] < 0.5, "equilibrium at {}", d.x_ss[0]);
        assert!(d.prob.value > 0.8, "p = {}", d.prob.value);
        // Repulsion from the right electrode is what holds the particle in
        // the left cell, so the right charge must dominate.
        assert!(d.u[1] > d.u[0], "charges {:?}", d.u.charges());
    }

    #[test]
    fn sparse_pattern_drives_charges_to_the_cap() {
        // A quarter-width target cell at the left edge: stronger left charge
        // always helps, so the optimum pins it at the cap.
        let g = Geometry::new(&[4], 0.25, 1).unwrap();
        let p = Pattern::parse("1000").unwrap();
        let np = NoiseParams::new(0.3).unwrap();
        let opts = DesignOpts {
            u_max: 30.0,
            restarts: 3,
            opt_samples: 2048,
            final_samples: 8192,
            max_evals: 300,
            seed: 5,
            ..DesignOpts::default()
        };
        let d = optimize_static(&p, &g, &np, &opts).unwrap();
        let max_charge = d.u.charges().iter().fold(0.0f64, |a, &b| a.max(b));
        assert!(
            max_charge > 0.99 * opts.u_max,
            "expected a boundary solution, got {:?}",
            d.u.charges()
        );
    }

    #[test]
    fn degenerate_stage_has_unit_probability() {
        let g = Geometry::new(&[2, 2], 0.5, 2).unwrap();
        let nu = Composition::new(vec![1, 1], vec![0, 1, 2]).unwrap();
        let np = NoiseParams::new(0.4).unwrap();
        let opts = DesignOpts {
            restarts: 1,
            opt_samples: 1024,
            final_samples: 2048,
            max_evals: 60,
            seed: 1,
            ..DesignOpts::default()
        };
        let plan = optimize_stage(&nu, &nu, &[0, 1, 2], &g, &np, &opts).unwrap();
        assert_eq!(plan.p_stage.value, 1.0);
        assert_eq!(plan.p_stage.std_err, 0.0);
        assert!(plan.duration > 0.0);
    }

    #[test]
    fn schedule_times_and_product_are_consistent() {
        let g = Geometry::new(&[2, 2], 0.5, 2).unwrap();
        let p = Pattern::parse("0101").unwrap();
        let np = NoiseParams::new(0.35).unwrap();
        let opts = DesignOpts {
            restarts: 2,
            opt_samples: 2048,
            final_samples: 8192,
            max_evals: 150,
            seed: 7,
            ..DesignOpts::default()
        };
        let sched = plan_schedule(&p, &g, &np, &[vec![1]], &opts).unwrap();
        assert_eq!(sched.stage_count(), 1);
        assert!(sched.switch_times.windows(2).all(|w| w[1] > w[0]));
        let product =
            sched.stages.iter().map(|s| s.p_stage.value).product::<f64>() * sched.static_p.value;
        assert!((sched.p_total - product).abs() < 1e-15);
        assert_eq!(sched.stages[0].active, vec![0, 2]);
        assert_eq!(sched.stages[0].from_nu.counts(), &[2]);
    }

    #[test]
    fn sequence_search_is_deterministic_and_tabulated() {
        let g = Geometry::new(&[2, 2], 0.5, 2).unwrap();
        let p = Pattern::parse("0101").unwrap();
        let np = NoiseParams::new(0.35).unwrap();
        let opts = DesignOpts {
            restarts: 2,
            opt_samples: 1024,
            final_samples: 4096,
            max_evals: 100,
            seed: 11,
            ..DesignOpts::default()
        };
        let (best_a, table_a) = search_activation_sequences(&p, &g, &np, &opts).unwrap();
        let (best_b, table_b) = search_activation_sequences(&p, &g, &np, &opts).unwrap();
        assert_eq!(table_a.len(), 1, "one interior electrode, one sequence");
        assert_eq!(
            serde_json::to_string(&best_a).unwrap(),
            serde_json::to_string(&best_b).unwrap()
        );
        assert_eq!(table_a[0].p_total, table_b[0].p_total);
    }

    #[test]
    fn warm_start_never_loses_to_cold_start() {
        let g = Geometry::new(&[2], 0.5, 1).unwrap();
        let p = Pattern::parse("10").unwrap();
        let np = NoiseParams::new(0.4).unwrap();
        let base = DesignOpts {
            restarts: 2,
            opt_samples: 1024,
            final_samples: 4096,
            max_evals: 120,
            seed: 13,
            warm_start: false,
            ..DesignOpts::default()
        };
        let cold = optimize_static(&p, &g, &np, &base).unwrap();
        let warm = optimize_static(
            &p,
            &g,
            &np,
            &DesignOpts {
                warm_start: true,
                ..base
            },
        )
        .unwrap();
        assert!(warm.saddle_objective >= cold.saddle_objective);
    }

    #[test]
    fn product_error_propagation_handles_zero_factors() {
        let (p, se) = product_with_std_err(&[(0.5, 0.01), (0.8, 0.02)]);
        assert!((p - 0.4).abs() < 1e-15);
        let expect = ((0.01f64 * 0.8).powi(2) + (0.02f64 * 0.5).powi(2)).sqrt();
        assert!((se - expect).abs() < 1e-15);
        let (pz, sez) = product_with_std_err(&[(0.0, 0.01), (0.8, 0.02)]);
        assert_eq!(pz, 0.0);
        assert!((sez - 0.008).abs() < 1e-15, "dominant term survives: {sez}");
    }

    #[test]
    fn bad_sequences_are_rejected() {
        let g = Geometry::new(&[2, 2, 2], 0.5, 2).unwrap();
        let p = Pattern::parse("010010").unwrap();
        let np = NoiseParams::new(0.4).unwrap();
        let opts = DesignOpts::default();
        for seq in [
            vec![vec![1usize]],           // misses electrode 2
            vec![vec![1, 1], vec![2]],    // duplicate
            vec![vec![1], vec![]],        // empty block
            vec![vec![0], vec![1, 2]],    // endpoint is not interior
        ] {
            assert!(matches!(
                plan_schedule(&p, &g, &np, &seq, &opts),
                Err(DesignError::BadSequence(_))
            ));
        }
    }
}
