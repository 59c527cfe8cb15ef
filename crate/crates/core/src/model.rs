//! Interaction potential of charged particles between charged electrodes.
//!
//! `n` unit positive charges sit at positions `x_1 < ... < x_n` strictly
//! inside the segment `(q_0, q_c)`.  The segment carries `c + 1` electrodes at
//! `q_0 < q_1 < ... < q_c` holding nonnegative charges `u_0, ..., u_c`, and is
//! divided into `N` lattice cells of width `d_0`; electrodes always sit on
//! cell boundaries.  In normalized units the potential is plain Coulomb:
//!
//! ```text
//! V(x, u) = sum_{i<j} 1 / |x_i - x_j|  +  sum_i sum_k u_k / |x_i - q_k|
//! ```
//!
//! The overdamped drift is the negated gradient, available componentwise in
//! closed form, and the Hessian is tridiagonal-plus-diagonal-dominant with
//! strictly positive electrode contributions on the diagonal.  Electrodes with
//! zero charge contribute nothing and are skipped entirely, so only charged
//! (active) electrodes act as barriers.
//!
//! All distances must stay above a singularity floor; evaluating a
//! configuration that touches another particle or a charged electrode is an
//! error, not an infinity.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Distances below this are treated as singular by the default entry points.
pub const DEFAULT_SINGULAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("geometry needs at least one electrode gap")]
    NoGaps,
    #[error("electrode gap {0} spans zero cells")]
    EmptyGap(usize),
    #[error("cell width must be positive and finite, got {0}")]
    BadCellWidth(f64),
    #[error("{n} particles do not fit into {cells} cells")]
    TooManyParticles { n: usize, cells: usize },
    #[error("need at least one particle")]
    NoParticles,
    #[error("state has {got} positions, geometry expects {expected}")]
    StateLength { got: usize, expected: usize },
    #[error("control has {got} charges, geometry has {expected} electrodes")]
    ControlLength { got: usize, expected: usize },
    #[error("position {index} is not finite")]
    NonFinitePosition { index: usize },
    #[error("positions must be strictly increasing, but x[{index}] <= x[{}]", index - 1)]
    Unordered { index: usize },
    #[error("charge u[{index}] = {value} is negative or not finite")]
    BadCharge { index: usize, value: f64 },
    #[error("endpoint electrode {index} must carry a positive charge")]
    UnchargedEndpoint { index: usize },
    #[error("electrode {index} must stay uncharged in this stage, got u = {value}")]
    ChargeOffActiveSet { index: usize, value: f64 },
    #[error("x[{index}] = {value} lies outside the open segment ({lo}, {hi})")]
    OutsideSegment {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("singular configuration: {a} and {b} are {dist:.3e} apart (floor {floor:.1e})")]
    Singular {
        a: String,
        b: String,
        dist: f64,
        floor: f64,
    },
    #[error("noise level must be finite and nonnegative, got {0}")]
    BadSigma(f64),
}

/// Electrode layout over a regular cell lattice.
///
/// Built from the number of cells in each inter-electrode gap, so electrode
/// spacings are integer multiples of the cell width by construction.  The
/// leftmost electrode is pinned at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometrySpec", into = "GeometrySpec")]
pub struct Geometry {
    q: Vec<f64>,
    gaps: Vec<usize>,
    d0: f64,
    n: usize,
}

/// Serialized form of [`Geometry`]: exactly the constructor arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub gaps: Vec<usize>,
    pub d0: f64,
    pub n: usize,
}

impl TryFrom<GeometrySpec> for Geometry {
    type Error = ModelError;
    fn try_from(s: GeometrySpec) -> Result<Self, ModelError> {
        Geometry::new(&s.gaps, s.d0, s.n)
    }
}

impl From<Geometry> for GeometrySpec {
    fn from(g: Geometry) -> GeometrySpec {
        GeometrySpec {
            gaps: g.gaps,
            d0: g.d0,
            n: g.n,
        }
    }
}

impl Geometry {
    /// `gaps[k]` is the number of cells between electrodes `k` and `k + 1`.
    pub fn new(gaps: &[usize], d0: f64, n: usize) -> Result<Self, ModelError> {
        if gaps.is_empty() {
            return Err(ModelError::NoGaps);
        }
        if let Some(k) = gaps.iter().position(|&g| g == 0) {
            return Err(ModelError::EmptyGap(k));
        }
        if !(d0.is_finite() && d0 > 0.0) {
            return Err(ModelError::BadCellWidth(d0));
        }
        if n == 0 {
            return Err(ModelError::NoParticles);
        }
        let cells: usize = gaps.iter().sum();
        if n > cells {
            return Err(ModelError::TooManyParticles { n, cells });
        }
        let mut q = Vec::with_capacity(gaps.len() + 1);
        let mut boundary = 0usize;
        q.push(0.0);
        for &g in gaps {
            boundary += g;
            q.push(boundary as f64 * d0);
        }
        Ok(Self {
            q,
            gaps: gaps.to_vec(),
            d0,
            n,
        })
    }

    /// Electrode positions `q_0, ..., q_c`.
    pub fn electrodes(&self) -> &[f64] {
        &self.q
    }

    /// Number of electrodes, `c + 1`.
    pub fn electrode_count(&self) -> usize {
        self.q.len()
    }

    /// Cells per gap, as passed to [`Geometry::new`].
    pub fn gaps(&self) -> &[usize] {
        &self.gaps
    }

    /// Total number of lattice cells `N`.
    pub fn cell_count(&self) -> usize {
        self.gaps.iter().sum()
    }

    /// Cell width `d_0`.
    pub fn cell_width(&self) -> f64 {
        self.d0
    }

    /// Number of mobile particles `n`.
    pub fn particle_count(&self) -> usize {
        self.n
    }

    /// The open segment `(q_0, q_c)` the particles live on.
    pub fn span(&self) -> (f64, f64) {
        (self.q[0], *self.q.last().unwrap())
    }

    /// Midpoint of cell `i` (0-based from the left).
    pub fn cell_midpoint(&self, i: usize) -> f64 {
        debug_assert!(i < self.cell_count());
        (i as f64 + 0.5) * self.d0
    }

    /// Closed bounds of cell `i` (0-based).
    pub fn cell_bounds(&self, i: usize) -> (f64, f64) {
        (i as f64 * self.d0, (i as f64 + 1.0) * self.d0)
    }

    /// Index of the cell boundary an electrode sits on (0 = left end).
    pub fn electrode_boundary(&self, electrode: usize) -> usize {
        self.gaps[..electrode].iter().sum()
    }

    /// Indices of the interior electrodes `1, ..., c - 1`.
    pub fn interior_electrodes(&self) -> impl Iterator<Item = usize> {
        1..self.q.len() - 1
    }
}

/// Electrode charges `u_0, ..., u_c`, all nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ControlVector(Vec<f64>);

impl TryFrom<Vec<f64>> for ControlVector {
    type Error = ModelError;
    fn try_from(v: Vec<f64>) -> Result<Self, ModelError> {
        ControlVector::new(v)
    }
}

impl From<ControlVector> for Vec<f64> {
    fn from(u: ControlVector) -> Vec<f64> {
        u.0
    }
}

impl ControlVector {
    pub fn new(charges: Vec<f64>) -> Result<Self, ModelError> {
        for (index, &value) in charges.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(ModelError::BadCharge { index, value });
            }
        }
        Ok(Self(charges))
    }

    pub fn charges(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Indices of electrodes carrying a strictly positive charge.
    pub fn active_set(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&j| self.0[j] > 0.0).collect()
    }

    /// Admissibility for the final (static) phase: the segment ends must be
    /// charged so the particles stay confined; interior charges are free.
    pub fn check_static(&self, g: &Geometry) -> Result<(), ModelError> {
        self.check_len(g)?;
        for index in [0, self.0.len() - 1] {
            if self.0[index] <= 0.0 {
                return Err(ModelError::UnchargedEndpoint { index });
            }
        }
        Ok(())
    }

    /// Admissibility for a transient stage: charge only on `active`, which
    /// must include both endpoints.
    pub fn check_stage(&self, g: &Geometry, active: &[usize]) -> Result<(), ModelError> {
        self.check_static(g)?;
        for (index, &value) in self.0.iter().enumerate() {
            if value > 0.0 && !active.contains(&index) {
                return Err(ModelError::ChargeOffActiveSet { index, value });
            }
        }
        Ok(())
    }

    fn check_len(&self, g: &Geometry) -> Result<(), ModelError> {
        if self.0.len() != g.electrode_count() {
            return Err(ModelError::ControlLength {
                got: self.0.len(),
                expected: g.electrode_count(),
            });
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for ControlVector {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

/// Ordered particle positions; strict ordering is checked at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct State(Vec<f64>);

impl TryFrom<Vec<f64>> for State {
    type Error = ModelError;
    fn try_from(v: Vec<f64>) -> Result<Self, ModelError> {
        State::new(v)
    }
}

impl From<State> for Vec<f64> {
    fn from(x: State) -> Vec<f64> {
        x.0
    }
}

impl State {
    pub fn new(positions: Vec<f64>) -> Result<Self, ModelError> {
        for (index, &p) in positions.iter().enumerate() {
            if !p.is_finite() {
                return Err(ModelError::NonFinitePosition { index });
            }
            if index > 0 && p <= positions[index - 1] {
                return Err(ModelError::Unordered { index });
            }
        }
        Ok(Self(positions))
    }

    pub fn positions(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for State {
    type Output = f64;
    fn index(&self, k: usize) -> &f64 {
        &self.0[k]
    }
}

/// Diffusion strength of the particle dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    sigma: f64,
}

impl NoiseParams {
    pub fn new(sigma: f64) -> Result<Self, ModelError> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(ModelError::BadSigma(sigma));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Inverse temperature `2 / sigma^2` of the Gibbs steady state
    /// `exp(-2 sigma^-2 V)`.  Requires positive noise.
    pub fn inv_temperature(&self) -> Result<f64, ModelError> {
        if self.sigma <= 0.0 {
            return Err(ModelError::BadSigma(self.sigma));
        }
        Ok(2.0 / (self.sigma * self.sigma))
    }
}

fn validate(x: &[f64], u: &ControlVector, g: &Geometry) -> Result<(), ModelError> {
    if x.len() != g.particle_count() {
        return Err(ModelError::StateLength {
            got: x.len(),
            expected: g.particle_count(),
        });
    }
    if u.len() != g.electrode_count() {
        return Err(ModelError::ControlLength {
            got: u.len(),
            expected: g.electrode_count(),
        });
    }
    let (lo, hi) = g.span();
    for (index, &value) in x.iter().enumerate() {
        if !(value > lo && value < hi) {
            return Err(ModelError::OutsideSegment {
                index,
                value,
                lo,
                hi,
            });
        }
    }
    Ok(())
}

/// Total potential energy `V(x, u)`.
pub fn energy(x: &State, u: &ControlVector, g: &Geometry) -> Result<f64, ModelError> {
    energy_with_floor(x, u, g, DEFAULT_SINGULAR_FLOOR)
}

/// [`energy`] with an explicit singularity floor.
pub fn energy_with_floor(
    x: &State,
    u: &ControlVector,
    g: &Geometry,
    floor: f64,
) -> Result<f64, ModelError> {
    validate(x.positions(), u, g)?;
    let xs = x.positions();
    let mut v = 0.0;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let d = xs[j] - xs[i];
            if d < floor {
                return Err(singular_pair(i, j, d, floor));
            }
            v += 1.0 / d;
        }
    }
    for (i, &xi) in xs.iter().enumerate() {
        for (k, &qk) in g.electrodes().iter().enumerate() {
            if u[k] == 0.0 {
                continue;
            }
            let r = (xi - qk).abs();
            if r < floor {
                return Err(singular_electrode(i, k, r, floor));
            }
            v += u[k] / r;
        }
    }
    Ok(v)
}

/// Drift `f = -dV/dx`, componentwise.
pub fn force(x: &State, u: &ControlVector, g: &Geometry) -> Result<Vec<f64>, ModelError> {
    force_with_floor(x, u, g, DEFAULT_SINGULAR_FLOOR)
}

/// [`force`] with an explicit singularity floor.
pub fn force_with_floor(
    x: &State,
    u: &ControlVector,
    g: &Geometry,
    floor: f64,
) -> Result<Vec<f64>, ModelError> {
    validate(x.positions(), u, g)?;
    let xs = x.positions();
    let mut f = vec![0.0; xs.len()];
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let d = xs[j] - xs[i];
            if d < floor {
                return Err(singular_pair(i, j, d, floor));
            }
            let push = 1.0 / (d * d);
            // Pair repulsion pushes the left particle left, the right one right.
            f[i] -= push;
            f[j] += push;
        }
    }
    for (i, &xi) in xs.iter().enumerate() {
        for (k, &qk) in g.electrodes().iter().enumerate() {
            if u[k] == 0.0 {
                continue;
            }
            let d = xi - qk;
            let r = d.abs();
            if r < floor {
                return Err(singular_electrode(i, k, r, floor));
            }
            f[i] += u[k] * d.signum() / (r * r);
        }
    }
    Ok(f)
}

/// Hessian `d^2 V / dx^2`; symmetric with positive diagonal.
pub fn hessian(x: &State, u: &ControlVector, g: &Geometry) -> Result<DMatrix<f64>, ModelError> {
    hessian_with_floor(x, u, g, DEFAULT_SINGULAR_FLOOR)
}

/// [`hessian`] with an explicit singularity floor.
pub fn hessian_with_floor(
    x: &State,
    u: &ControlVector,
    g: &Geometry,
    floor: f64,
) -> Result<DMatrix<f64>, ModelError> {
    validate(x.positions(), u, g)?;
    let xs = x.positions();
    let n = xs.len();
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = xs[j] - xs[i];
            if d < floor {
                return Err(singular_pair(i, j, d, floor));
            }
            let curv = 2.0 / (d * d * d);
            h[(i, i)] += curv;
            h[(j, j)] += curv;
            h[(i, j)] -= curv;
            h[(j, i)] -= curv;
        }
    }
    for (i, &xi) in xs.iter().enumerate() {
        for (k, &qk) in g.electrodes().iter().enumerate() {
            if u[k] == 0.0 {
                continue;
            }
            let r = (xi - qk).abs();
            if r < floor {
                return Err(singular_electrode(i, k, r, floor));
            }
            h[(i, i)] += 2.0 * u[k] / (r * r * r);
        }
    }
    Ok(h)
}

/// Energy for sampling paths: singular or out-of-segment configurations give
/// `+inf` (vanishing Gibbs weight) instead of an error.  Lengths must match.
pub(crate) fn energy_or_inf(x: &[f64], u: &ControlVector, g: &Geometry) -> f64 {
    debug_assert_eq!(x.len(), g.particle_count());
    debug_assert_eq!(u.len(), g.electrode_count());
    let floor = DEFAULT_SINGULAR_FLOOR;
    let mut v = 0.0;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let d = x[j] - x[i];
            if d < floor {
                return f64::INFINITY;
            }
            v += 1.0 / d;
        }
    }
    for &xi in x {
        for (k, &qk) in g.electrodes().iter().enumerate() {
            if u[k] == 0.0 {
                continue;
            }
            let r = (xi - qk).abs();
            if r < floor {
                return f64::INFINITY;
            }
            v += u[k] / r;
        }
    }
    v
}

fn singular_pair(i: usize, j: usize, dist: f64, floor: f64) -> ModelError {
    ModelError::Singular {
        a: format!("particle {i}"),
        b: format!("particle {j}"),
        dist,
        floor,
    }
}

fn singular_electrode(i: usize, k: usize, dist: f64, floor: f64) -> ModelError {
    ModelError::Singular {
        a: format!("particle {i}"),
        b: format!("electrode {k}"),
        dist,
        floor,
    }
}
