//! Steady-state statistics of the particle system under a fixed control.
//!
//! With noise level `sigma` the stationary density on an invariant region `S`
//! is the Gibbs measure `rho(x) ∝ exp(-2 sigma^-2 V(x, u))`.  The probability
//! that a steady-state draw realizes a pattern is a ratio of Gibbs integrals:
//! mass of the pattern box over mass of the whole region.
//!
//! Both integrals are estimated together by self-normalized importance
//! sampling from the Gaussian saddle-point law `N(x_ss, 0.5 sigma^2 H^-1)`
//! centered at the region's equilibrium.  Raw Gibbs factors underflow doubles
//! at realistic noise levels (`exp(-2 sigma^-2 V)` with `V` in the tens), so
//! all weights live in the log domain and are combined by streaming
//! log-sum-exp.  Samples outside `S` carry zero weight and the numerator
//! region is a subset of `S`, so the estimate always lands in `[0, 1]`.
//!
//! The saddle-point variant replaces the Gibbs weights by indicator counts of
//! the proposal itself, which is the small-noise limit of the exact ratio.
//!
//! Standard errors come from 32 independent batches, one random stream each,
//! so estimates do not depend on how batches are scheduled across threads.

use crate::equilibrium::{self, SolveError, SolverOpts};
use crate::model::{self, ControlVector, Geometry, ModelError, NoiseParams, State};
use crate::rng::{self, DOMAIN_GIBBS_BATCH};
use crate::roa::{self, Composition, Pattern, PatternBox, RoaError};
use nalgebra::{Cholesky, DMatrix, Dyn};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Batches used for batch-means standard errors.
pub const BATCHES: usize = 32;

/// Fewest total samples accepted by the estimators.
pub const MIN_SAMPLES: usize = 1_000;

#[derive(Debug, Error)]
pub enum ProbError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Roa(#[from] RoaError),
    #[error(transparent)]
    Solve(#[from] Box<SolveError>),
    #[error("need at least {MIN_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("degenerate proposal: {0}")]
    DegenerateProposal(String),
    #[error("equilibrium is not a stable minimum (min eigenvalue {min_eig:.3e})")]
    UnstablePoint { min_eig: f64 },
}

impl From<SolveError> for ProbError {
    fn from(e: SolveError) -> Self {
        ProbError::Solve(Box::new(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbMethod {
    /// Importance-sampled Gibbs ratio.
    ExactMc,
    /// Gaussian saddle-point indicator ratio.
    SaddlePoint,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbEstimate {
    pub value: f64,
    /// Batch-means standard error over [`BATCHES`] batches.
    pub std_err: f64,
    pub method: ProbMethod,
}

/// Steady-state probability of realizing pattern `p` under control `u`,
/// conditioned on the invariant region that contains the pattern's box.
pub fn p_ss_exact(
    u: &ControlVector,
    p: &Pattern,
    g: &Geometry,
    np: &NoiseParams,
    samples: usize,
    seed: u64,
) -> Result<ProbEstimate, ProbError> {
    u.check_static(g)?;
    let beta = np.inv_temperature()?;
    let nu = roa::roa_of_pattern(p, g, &u.active_set())?;
    let eq = equilibrium::solve_fixed_point(&nu, u, g, &SolverOpts::default())?;
    let bx = roa::pattern_box(p, g)?;
    let proposal = saddle_proposal(&eq.x_ss, u, g, np)?;
    let est = gibbs_ratio(
        &proposal,
        &nu,
        Target::Box(&bx),
        Weighting::Gibbs { beta, u, g },
        g,
        samples,
        seed,
    )?;
    Ok(ProbEstimate {
        method: ProbMethod::ExactMc,
        ..est
    })
}

/// Saddle-point approximation of [`p_ss_exact`]: the mass the Gaussian law
/// `N(x_ss, 0.5 sigma^2 H^-1)` assigns to the pattern box, relative to the
/// mass it leaves inside the region.
pub fn p_ss_saddle(
    x_ss: &State,
    u: &ControlVector,
    p: &Pattern,
    g: &Geometry,
    np: &NoiseParams,
    samples: usize,
    seed: u64,
) -> Result<ProbEstimate, ProbError> {
    u.check_static(g)?;
    let nu = roa::roa_of_pattern(p, g, &u.active_set())?;
    let bx = roa::pattern_box(p, g)?;
    let proposal = saddle_proposal(x_ss, u, g, np)?;
    let est = gibbs_ratio(
        &proposal,
        &nu,
        Target::Box(&bx),
        Weighting::Indicator,
        g,
        samples,
        seed,
    )?;
    Ok(ProbEstimate {
        method: ProbMethod::SaddlePoint,
        ..est
    })
}

/// Probability that a steady-state draw from `from`'s region (equilibrium
/// `x_eq`, control `u`) falls into the region of `to`, whose delimiters may
/// involve additional electrodes.  This is the capture probability of a
/// control stage: the chance the state is in the right refined region the
/// moment the next electrodes switch on.
pub(crate) fn region_capture(
    x_eq: &State,
    u: &ControlVector,
    g: &Geometry,
    np: &NoiseParams,
    from: &Composition,
    to: &Composition,
    weighted: bool,
    samples: usize,
    seed: u64,
) -> Result<ProbEstimate, ProbError> {
    let proposal = saddle_proposal(x_eq, u, g, np)?;
    let to_bounds = to.boundaries(g);
    let weighting = if weighted {
        Weighting::Gibbs {
            beta: np.inv_temperature()?,
            u,
            g,
        }
    } else {
        Weighting::Indicator
    };
    let method = match weighting {
        Weighting::Gibbs { .. } => ProbMethod::ExactMc,
        Weighting::Indicator => ProbMethod::SaddlePoint,
    };
    let est = gibbs_ratio(
        &proposal,
        from,
        Target::Region {
            nu: to,
            bounds: &to_bounds,
        },
        weighting,
        g,
        samples,
        seed,
    )?;
    Ok(ProbEstimate { method, ..est })
}

/// Stationary covariance `0.5 sigma^2 H^-1` of the fluctuations around a
/// stable equilibrium; solves the steady-state Lyapunov equation
/// `-H S - S H + sigma^2 I = 0`.
pub fn steady_covariance(
    x_ss: &State,
    u: &ControlVector,
    g: &Geometry,
    np: &NoiseParams,
) -> Result<DMatrix<f64>, ProbError> {
    let h = model::hessian(x_ss, u, g)?;
    covariance_from_hessian(&h, np)
}

fn covariance_from_hessian(h: &DMatrix<f64>, np: &NoiseParams) -> Result<DMatrix<f64>, ProbError> {
    let chol = Cholesky::new(h.clone()).ok_or_else(|| {
        let min_eig = equilibrium::smallest_eigenvalue(h);
        ProbError::UnstablePoint { min_eig }
    })?;
    let sigma = np.sigma();
    Ok(chol.inverse() * (0.5 * sigma * sigma))
}

/// Settling-time rule of thumb `5 / lambda_min(H)`: five time constants of
/// the slowest linearized relaxation mode around the equilibrium.
pub fn settling_time(x_ss: &State, u: &ControlVector, g: &Geometry) -> Result<f64, ProbError> {
    let h = model::hessian(x_ss, u, g)?;
    let min_eig = equilibrium::smallest_eigenvalue(&h);
    if min_eig <= 0.0 {
        return Err(ProbError::UnstablePoint { min_eig });
    }
    Ok(5.0 / min_eig)
}

/// Gaussian proposal centered at an equilibrium with the stationary
/// covariance; `l` is the lower Cholesky factor of the covariance.
pub(crate) struct GaussianProposal {
    mean: Vec<f64>,
    l: DMatrix<f64>,
}

pub(crate) fn saddle_proposal(
    x_ss: &State,
    u: &ControlVector,
    g: &Geometry,
    np: &NoiseParams,
) -> Result<GaussianProposal, ProbError> {
    let cov = steady_covariance(x_ss, u, g, np)?;
    let chol: Cholesky<f64, Dyn> = Cholesky::new(cov).ok_or_else(|| {
        ProbError::DegenerateProposal("stationary covariance is not positive definite".into())
    })?;
    Ok(GaussianProposal {
        mean: x_ss.positions().to_vec(),
        l: chol.unpack_dirty(),
    })
}

enum Target<'a> {
    Box(&'a PatternBox),
    Region {
        nu: &'a Composition,
        bounds: &'a [f64],
    },
}

impl Target<'_> {
    fn contains(&self, x: &[f64]) -> bool {
        match self {
            Target::Box(b) => b.contains(x),
            Target::Region { nu, bounds } => roa::contains_raw(nu, bounds, x),
        }
    }
}

enum Weighting<'a> {
    Gibbs {
        beta: f64,
        u: &'a ControlVector,
        g: &'a Geometry,
    },
    Indicator,
}

/// Streaming log-sum-exp accumulator: represents `log sum_i exp(l_i)`.
#[derive(Clone, Copy)]
struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    const EMPTY: LogSum = LogSum {
        max: f64::NEG_INFINITY,
        sum: 0.0,
    };

    fn add(&mut self, l: f64) {
        if l == f64::NEG_INFINITY {
            return;
        }
        if l > self.max {
            self.sum = self.sum * (self.max - l).exp() + 1.0;
            self.max = l;
        } else {
            self.sum += (l - self.max).exp();
        }
    }

    fn merge(&mut self, other: LogSum) {
        if other.sum == 0.0 {
            return;
        }
        if other.max > self.max {
            self.sum = self.sum * (self.max - other.max).exp() + other.sum;
            self.max = other.max;
        } else {
            self.sum += other.sum * (other.max - self.max).exp();
        }
    }

    fn log(&self) -> f64 {
        if self.sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

fn gibbs_ratio(
    proposal: &GaussianProposal,
    from: &Composition,
    target: Target<'_>,
    weighting: Weighting<'_>,
    g: &Geometry,
    samples: usize,
    seed: u64,
) -> Result<ProbEstimate, ProbError> {
    if samples < MIN_SAMPLES {
        return Err(ProbError::TooFewSamples(samples));
    }
    let per_batch = samples.div_ceil(BATCHES);
    let n = proposal.mean.len();
    let from_bounds = from.boundaries(g);

    // (numerator, denominator) log-sums per batch, computed on independent
    // streams; the batch list is reduced in index order afterwards so the
    // result is identical under any parallel schedule.
    let batches: Vec<(LogSum, LogSum)> = (0..BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(seed, DOMAIN_GIBBS_BATCH, b as u64);
            let mut num = LogSum::EMPTY;
            let mut den = LogSum::EMPTY;
            let mut z = vec![0.0f64; n];
            let mut x = vec![0.0f64; n];
            for _ in 0..per_batch {
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                for i in 0..n {
                    let mut xi = proposal.mean[i];
                    for j in 0..=i {
                        xi += proposal.l[(i, j)] * z[j];
                    }
                    x[i] = xi;
                }
                if !strictly_ascending(&x) || !roa::contains_raw(from, &from_bounds, &x) {
                    continue;
                }
                let log_w = match &weighting {
                    Weighting::Gibbs { beta, u, g } => {
                        let v = model::energy_or_inf(&x, u, g);
                        if v == f64::INFINITY {
                            continue;
                        }
                        // w = exp(-beta V) / phi(x); the proposal's
                        // normalizing constant cancels in the ratio.
                        -beta * v + 0.5 * z.iter().map(|zi| zi * zi).sum::<f64>()
                    }
                    Weighting::Indicator => 0.0,
                };
                den.add(log_w);
                if target.contains(&x) {
                    num.add(log_w);
                }
            }
            (num, den)
        })
        .collect();

    let mut num_all = LogSum::EMPTY;
    let mut den_all = LogSum::EMPTY;
    let mut batch_values = Vec::with_capacity(BATCHES);
    for (num, den) in &batches {
        if den.sum == 0.0 {
            return Err(ProbError::DegenerateProposal(
                "a sample batch produced no weight inside the region".into(),
            ));
        }
        batch_values.push((num.log() - den.log()).exp());
        num_all.merge(*num);
        den_all.merge(*den);
    }
    let value = (num_all.log() - den_all.log()).exp();
    let mean = batch_values.iter().sum::<f64>() / BATCHES as f64;
    let var = batch_values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (BATCHES as f64 - 1.0);
    let std_err = (var / BATCHES as f64).sqrt();
    Ok(ProbEstimate {
        value,
        std_err,
        method: ProbMethod::ExactMc,
    })
}

fn strictly_ascending(x: &[f64]) -> bool {
    x.windows(2).all(|w| w[1] > w[0])
}
