//! Electrode-driven self-assembly of charged particles on a line segment.
//!
//! A population of `n` identical positive charges diffuses on a segment that
//! carries `c + 1` fixed electrodes.  Charging the electrodes shapes a Coulomb
//! potential whose stable equilibria place the particles in prescribed cells of
//! a regular lattice; the noise level decides how sharply the steady-state
//! distribution concentrates around those equilibria.  This crate provides the
//! whole design loop for that system:
//!
//! * [`model`]: geometry, control and state types, and the interaction
//!   potential with its gradient and Hessian;
//! * [`roa`]: target patterns, regions of attraction (particle-count
//!   compositions over the active electrode intervals), and pattern boxes;
//! * [`equilibrium`]: fixed-point and gradient-flow equilibrium solvers plus
//!   stability certificates;
//! * [`steady`]: steady-state probability estimates (importance-sampled Gibbs
//!   ratios and their Gaussian saddle-point approximation), covariances, and
//!   settling times;
//! * [`design`]: static and staged control optimization, activation-sequence
//!   search, and electrode-placement search;
//! * [`ising`]: the companion finite-state jump model: state enumeration,
//!   generator assembly, master-equation integration, and spectral settling
//!   times;
//! * [`sim`]: stochastic simulators for both models and Monte Carlo success
//!   estimation of a designed schedule;
//! * [`config`], [`report`], [`run`]: JSON-facing front end used by the CLI.
//!
//! Every random quantity in the crate flows from a single `u64` seed through
//! the stream-splitting rule in [`rng`], so results are reproducible and
//! independent of worker-thread count.

pub mod config;
pub mod design;
pub mod equilibrium;
pub mod ising;
pub mod model;
pub mod report;
pub mod rng;
pub mod roa;
pub mod run;
pub mod sim;
pub mod simplex;
pub mod steady;

pub use model::{ControlVector, Geometry, GeometrySpec, ModelError, NoiseParams, State};
pub use roa::{Composition, Pattern, PatternBox};
