//! Discrete lattice model: particles occupy grid cells, and the dynamics is a
//! continuous-time Markov chain over occupancy patterns.
//!
//! Transitions move a single particle to an adjacent empty cell.  A hop's
//! barrier height is the largest of the two endpoint energies and the energy
//! of the mid-hop configuration (mover at the shared cell boundary), which
//! makes barriers symmetric and at least the departure energy, so detailed
//! balance with respect to the Gibbs weights holds by construction.  A hop
//! whose shared boundary carries a positively charged electrode is forbidden
//! outright: the repulsive singularity there is an infinite barrier.  The
//! forbidden hops decouple the chain into one closed block per region of
//! attraction, mirroring the continuous model's invariant regions.
//!
//! The rate convention is column-based: `lambda[i][j]` is the rate from state
//! `j` into state `i`, columns sum to zero, and the master equation reads
//! dπ/dt = Λπ.

use crate::model::{self, ControlVector, Geometry, ModelError, NoiseParams, State};
use crate::roa::{Composition, Pattern, RoaError};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{self, Write};
use thiserror::Error;

/// Largest grid the state-space enumeration accepts; binomial(20, 10) is
/// 184k states, past the point where dense work stays interactive.
pub const DEFAULT_STATE_CAP: usize = 20;

/// Blocks up to this size use a dense symmetric eigensolve for the settling
/// rate; larger blocks fall back to deflated power iteration.
const DENSE_EIG_CAP: usize = 4000;

#[derive(Debug, Error)]
pub enum IsingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Roa(#[from] RoaError),
    #[error("{cells} cells exceed the enumeration cap {cap}")]
    CapExceeded { cells: usize, cap: usize },
    #[error("state index {index} out of range for {states} states")]
    BadStateIndex { index: usize, states: usize },
    #[error("probability vector has length {got}, generator dimension is {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("input is not a probability vector: {0}")]
    NotAProbability(String),
    #[error("conditioning set is empty")]
    EmptyWithin,
    #[error("region state {index} lies outside the conditioning set")]
    RegionNotInWithin { index: usize },
    #[error("block is empty")]
    EmptyBlock,
}

/// All placements of the particles on the grid, index ↔ pattern bijection.
#[derive(Debug, Clone)]
pub struct DiscreteStateSpace {
    geometry: Geometry,
    /// Occupancy bitmasks (bit i = cell i), lexicographic by occupied-cell
    /// tuple.
    states: Vec<u32>,
    lookup: HashMap<u32, usize>,
}

impl DiscreteStateSpace {
    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Occupied cell indices of state `index`, ascending.
    pub fn cells(&self, index: usize) -> Result<Vec<usize>, IsingError> {
        let mask = self.mask(index)?;
        Ok((0..self.geometry.cell_count())
            .filter(|i| mask & (1 << i) != 0)
            .collect())
    }

    /// Cell-midpoint coordinates of state `index`.
    pub fn coordinates(&self, index: usize) -> Result<State, IsingError> {
        let cells = self.cells(index)?;
        let xs = cells
            .iter()
            .map(|&i| self.geometry.cell_midpoint(i))
            .collect();
        Ok(State::new(xs)?)
    }

    pub fn pattern(&self, index: usize) -> Result<Pattern, IsingError> {
        let mask = self.mask(index)?;
        let bits: String = (0..self.geometry.cell_count())
            .map(|i| if mask & (1 << i) != 0 { '1' } else { '0' })
            .collect();
        Ok(Pattern::parse(&bits)?)
    }

    pub fn index_of_pattern(&self, p: &Pattern) -> Option<usize> {
        let mut mask = 0u32;
        for i in p.occupied_cells() {
            mask |= 1 << i;
        }
        self.lookup.get(&mask).copied()
    }

    /// Region label of a state under the given active electrodes.
    pub fn roa_of(&self, index: usize, active: &[usize]) -> Result<Composition, IsingError> {
        let p = self.pattern(index)?;
        Ok(crate::roa::roa_of_pattern(&p, &self.geometry, active)?)
    }

    /// Indices of every state in the given region, ascending.
    pub fn block_indices(&self, nu: &Composition) -> Result<Vec<usize>, IsingError> {
        let mut out = Vec::new();
        for index in 0..self.len() {
            if self.roa_of(index, nu.active())? == *nu {
                out.push(index);
            }
        }
        Ok(out)
    }

    fn mask(&self, index: usize) -> Result<u32, IsingError> {
        self.states.get(index).copied().ok_or(IsingError::BadStateIndex {
            index,
            states: self.states.len(),
        })
    }
}

/// Every placement of the geometry's particles on its cells, lexicographic by
/// occupied-cell tuple.
pub fn enumerate_states(g: &Geometry) -> Result<DiscreteStateSpace, IsingError> {
    enumerate_states_with_cap(g, DEFAULT_STATE_CAP)
}

pub fn enumerate_states_with_cap(
    g: &Geometry,
    cap: usize,
) -> Result<DiscreteStateSpace, IsingError> {
    let cells = g.cell_count();
    if cells > cap || cells > 32 {
        return Err(IsingError::CapExceeded { cells, cap: cap.min(32) });
    }
    let n = g.particle_count();
    let mut states = Vec::new();
    let mut chosen = Vec::with_capacity(n);
    fill_combinations(cells, n, 0, &mut chosen, &mut states);
    let lookup = states
        .iter()
        .enumerate()
        .map(|(i, &m)| (m, i))
        .collect();
    Ok(DiscreteStateSpace {
        geometry: g.clone(),
        states,
        lookup,
    })
}

fn fill_combinations(
    cells: usize,
    remaining: usize,
    next: usize,
    chosen: &mut Vec<usize>,
    out: &mut Vec<u32>,
) {
    if remaining == 0 {
        let mask = chosen.iter().fold(0u32, |m, &c| m | (1 << c));
        out.push(mask);
        return;
    }
    for c in next..=cells - remaining {
        chosen.push(c);
        fill_combinations(cells, remaining - 1, c + 1, chosen, out);
        chosen.pop();
    }
}

/// Sparse transition-rate matrix; column j holds the rates out of state j.
#[derive(Debug, Clone)]
pub struct Generator {
    /// Off-diagonal entries per column: (row, rate), row-sorted.
    cols: Vec<Vec<(usize, f64)>>,
    diag: Vec<f64>,
    /// State energies used to build the rates; kept for symmetrization.
    energies: Vec<f64>,
    inv_temperature: f64,
}

impl Generator {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diagonal(&self, j: usize) -> f64 {
        self.diag[j]
    }

    /// Off-diagonal rates out of state `j` as (target, rate) pairs.
    pub fn rates_from(&self, j: usize) -> &[(usize, f64)] {
        &self.cols[j]
    }

    /// Rate from `from` into `to`; zero when the states are not adjacent.
    pub fn rate(&self, to: usize, from: usize) -> f64 {
        self.cols[from]
            .iter()
            .find(|(i, _)| *i == to)
            .map(|(_, r)| *r)
            .unwrap_or(0.0)
    }

    /// Total exit rate of state `j`.
    pub fn exit_rate(&self, j: usize) -> f64 {
        -self.diag[j]
    }

    /// Complete matrix in `row col rate` triplet lines, column-major, for
    /// external inspection.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> io::Result<()> {
        for j in 0..self.dim() {
            writeln!(w, "{} {} {:.17e}", j, j, self.diag[j])?;
            for &(i, r) in &self.cols[j] {
                writeln!(w, "{} {} {:.17e}", i, j, r)?;
            }
        }
        Ok(())
    }
}

/// Transition rates for single-particle nearest-cell hops under control `u`.
pub fn build_generator(
    ss: &DiscreteStateSpace,
    u: &ControlVector,
    np: &NoiseParams,
) -> Result<Generator, IsingError> {
    let g = &ss.geometry;
    let beta = np.inv_temperature()?;
    let cells = g.cell_count();

    // Boundary cell index b blocks the hop b-1 <-> b when its electrode is
    // charged.
    let mut blocked = vec![false; cells + 1];
    for j in g.interior_electrodes() {
        if u[j] > 0.0 {
            blocked[g.electrode_boundary(j)] = true;
        }
    }

    let energies: Vec<f64> = (0..ss.len())
        .map(|i| {
            let x = ss.coordinates(i)?;
            Ok(model::energy(&x, u, g)?)
        })
        .collect::<Result<_, IsingError>>()?;

    let cols: Vec<Vec<(usize, f64)>> = (0..ss.len())
        .into_par_iter()
        .map(|j| -> Result<Vec<(usize, f64)>, IsingError> {
            let mask = ss.states[j];
            let mut entries = Vec::new();
            for a in 0..cells {
                if mask & (1 << a) == 0 {
                    continue;
                }
                for b in [a.wrapping_sub(1), a + 1] {
                    if b >= cells || mask & (1 << b) != 0 {
                        continue;
                    }
                    let boundary = a.max(b);
                    if blocked[boundary] {
                        continue;
                    }
                    let target_mask = mask & !(1 << a) | (1 << b);
                    let i = ss.lookup[&target_mask];
                    let mid = hop_midpoint_energy(ss, mask, a, boundary, u)?;
                    let barrier = energies[i].max(energies[j]).max(mid);
                    let rate = (-beta * (barrier - energies[j])).exp();
                    entries.push((i, rate));
                }
            }
            entries.sort_unstable_by_key(|e| e.0);
            Ok(entries)
        })
        .collect::<Result<_, IsingError>>()?;

    let diag = cols
        .iter()
        .map(|col| -col.iter().map(|(_, r)| r).sum::<f64>())
        .collect();
    Ok(Generator {
        cols,
        diag,
        energies,
        inv_temperature: beta,
    })
}

/// Energy with the hopping particle (from cell `a`) placed on the crossed
/// cell boundary and everyone else at their midpoints.
fn hop_midpoint_energy(
    ss: &DiscreteStateSpace,
    mask: u32,
    a: usize,
    boundary: usize,
    u: &ControlVector,
) -> Result<f64, IsingError> {
    let g = &ss.geometry;
    let mut xs: Vec<f64> = (0..g.cell_count())
        .filter(|&i| i != a && mask & (1 << i) != 0)
        .map(|i| g.cell_midpoint(i))
        .collect();
    let pos = boundary as f64 * g.cell_width();
    let at = xs.partition_point(|&x| x < pos);
    xs.insert(at, pos);
    Ok(model::energy(&State::new(xs)?, u, g)?)
}

/// π(t) from π(0) by uniformization: the series for e^{Λt} in terms of the
/// substochastic jump matrix, which keeps every partial sum nonnegative.
pub fn integrate_master(pi0: &[f64], gen: &Generator, t: f64) -> Result<Vec<f64>, IsingError> {
    if pi0.len() != gen.dim() {
        return Err(IsingError::DimensionMismatch {
            got: pi0.len(),
            want: gen.dim(),
        });
    }
    if pi0.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(IsingError::NotAProbability("negative or non-finite entry".into()));
    }
    let total: f64 = pi0.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(IsingError::NotAProbability(format!("sums to {total}")));
    }

    let q = gen.diag.iter().fold(0.0f64, |m, &d| m.max(-d));
    if q == 0.0 || t == 0.0 {
        return Ok(pi0.to_vec());
    }

    // Substeps keep the Poisson series short; q*dt <= 50 terms converge fast
    // and the truncation bound stays far below the conservation tolerance.
    let substeps = ((q * t / 50.0).ceil() as usize).max(1);
    let dt = t / substeps as f64;
    let qdt = q * dt;

    let mut pi = pi0.to_vec();
    let mut term = vec![0.0; pi.len()];
    let mut next = vec![0.0; pi.len()];
    let k_cap = (qdt + 10.0 * qdt.sqrt() + 60.0) as usize;
    for _ in 0..substeps {
        // e^{Λ dt} π = Σ_k e^{-q dt} (q dt)^k / k! · P^k π with P = I + Λ/q.
        term.copy_from_slice(&pi);
        let w0 = (-qdt).exp();
        let mut acc: Vec<f64> = term.iter().map(|&x| w0 * x).collect();
        let mut covered = w0;
        let mut log_w = -qdt;
        let mut k = 0usize;
        while 1.0 - covered > 1e-16 && k < k_cap {
            k += 1;
            apply_jump(gen, q, &term, &mut next);
            std::mem::swap(&mut term, &mut next);
            log_w += (qdt / k as f64).ln();
            let w = log_w.exp();
            for (a, &x) in acc.iter_mut().zip(term.iter()) {
                *a += w * x;
            }
            covered += w;
        }
        pi.copy_from_slice(&acc);
        // Renormalize away the truncation drift; it is bounded by the
        // Poisson tail, far below 1e-10 per substep.
        let s: f64 = pi.iter().sum();
        for p in pi.iter_mut() {
            *p /= s;
        }
    }
    Ok(pi)
}

/// next = P term where P = I + Λ/q (entrywise nonnegative by choice of q).
fn apply_jump(gen: &Generator, q: f64, term: &[f64], next: &mut [f64]) {
    for (i, n) in next.iter_mut().enumerate() {
        *n = (1.0 + gen.diag[i] / q) * term[i];
    }
    for (j, col) in gen.cols.iter().enumerate() {
        let tj = term[j];
        if tj == 0.0 {
            continue;
        }
        for &(i, r) in col {
            next[i] += r / q * tj;
        }
    }
}

/// Gibbs-weighted conditional probability of `region` within `within`,
/// accumulated in the log domain.
pub fn gibbs_conditional(
    ss: &DiscreteStateSpace,
    u: &ControlVector,
    np: &NoiseParams,
    region: &[usize],
    within: &[usize],
) -> Result<f64, IsingError> {
    if within.is_empty() {
        return Err(IsingError::EmptyWithin);
    }
    let inside: std::collections::HashSet<usize> = within.iter().copied().collect();
    for &i in region {
        if !inside.contains(&i) {
            return Err(IsingError::RegionNotInWithin { index: i });
        }
    }
    let beta = np.inv_temperature()?;
    let g = &ss.geometry;
    let log_weight = |i: usize| -> Result<f64, IsingError> {
        let x = ss.coordinates(i)?;
        Ok(-beta * model::energy(&x, u, g)?)
    };
    let num = log_sum(region.iter().map(|&i| log_weight(i)))?;
    let den = log_sum(within.iter().map(|&i| log_weight(i)))?;
    if num == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    Ok((num - den).exp())
}

fn log_sum(
    terms: impl Iterator<Item = Result<f64, IsingError>>,
) -> Result<f64, IsingError> {
    let mut max = f64::NEG_INFINITY;
    let mut vals = Vec::new();
    for t in terms {
        let v = t?;
        max = max.max(v);
        vals.push(v);
    }
    if vals.is_empty() || max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DiscreteSettling {
    /// Five time constants of the block's slowest relaxation mode.
    pub time: f64,
    /// A single-state block has no relaxation mode; time is zero.
    pub degenerate: bool,
}

/// Settling time of one closed region block: 5 over the smallest-magnitude
/// nonzero eigenvalue of the block's rate matrix.
pub fn discrete_settling(gen: &Generator, block: &[usize]) -> Result<DiscreteSettling, IsingError> {
    discrete_settling_with_cap(gen, block, DENSE_EIG_CAP)
}

fn discrete_settling_with_cap(
    gen: &Generator,
    block: &[usize],
    dense_cap: usize,
) -> Result<DiscreteSettling, IsingError> {
    if block.is_empty() {
        return Err(IsingError::EmptyBlock);
    }
    if block.len() == 1 {
        return Ok(DiscreteSettling {
            time: 0.0,
            degenerate: true,
        });
    }
    for &i in block {
        if i >= gen.dim() {
            return Err(IsingError::BadStateIndex {
                index: i,
                states: gen.dim(),
            });
        }
    }
    let rate = if block.len() <= dense_cap {
        dense_relaxation_rate(gen, block)
    } else {
        iterative_relaxation_rate(gen, block)
    };
    Ok(DiscreteSettling {
        time: 5.0 / rate,
        degenerate: false,
    })
}

/// Detailed balance makes D^{-1/2} Λ D^{1/2} symmetric (D = Gibbs weights);
/// its entries exp(-β(E_ij - (V_i+V_j)/2)) never overflow because barriers
/// dominate the mean energy.  The spectrum is that of Λ: 0 with eigenvector
/// sqrt-Gibbs, the rest strictly negative.
fn symmetrized_entry(gen: &Generator, i: usize, j: usize, rate: f64) -> f64 {
    let half = 0.5 * gen.inv_temperature * (gen.energies[i] - gen.energies[j]);
    rate * half.exp()
}

fn dense_relaxation_rate(gen: &Generator, block: &[usize]) -> f64 {
    let m = block.len();
    let local: HashMap<usize, usize> = block.iter().enumerate().map(|(l, &i)| (i, l)).collect();
    let mut s = DMatrix::zeros(m, m);
    for (lj, &j) in block.iter().enumerate() {
        s[(lj, lj)] = gen.diag[j];
        for &(i, r) in &gen.cols[j] {
            if let Some(&li) = local.get(&i) {
                s[(li, lj)] = symmetrized_entry(gen, i, j, r);
            }
        }
    }
    let eig = s.symmetric_eigen();
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    // vals[0] is the stationary mode's numerical zero.
    -vals[1]
}

/// Deflated power iteration for blocks too large to densify: shift the
/// symmetrized block to nonnegative spectrum, project out the known
/// stationary eigenvector (sqrt-Gibbs), and iterate for the next mode.
fn iterative_relaxation_rate(gen: &Generator, block: &[usize]) -> f64 {
    let m = block.len();
    let local: HashMap<usize, usize> = block.iter().enumerate().map(|(l, &i)| (i, l)).collect();
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    let mut diag = vec![0.0f64; m];
    for (lj, &j) in block.iter().enumerate() {
        diag[lj] = gen.diag[j];
        for &(i, r) in &gen.cols[j] {
            if let Some(&li) = local.get(&i) {
                cols[lj].push((li, symmetrized_entry(gen, i, j, r)));
            }
        }
    }
    let shift = 2.0 * diag.iter().fold(0.0f64, |a, &d| a.max(-d));

    let vmin = block
        .iter()
        .map(|&i| gen.energies[i])
        .fold(f64::INFINITY, f64::min);
    let mut phi = DVector::from_iterator(
        m,
        block
            .iter()
            .map(|&i| (-0.5 * gen.inv_temperature * (gen.energies[i] - vmin)).exp()),
    );
    phi /= phi.norm();

    // Deterministic start orthogonal to phi.
    let mut v = DVector::from_fn(m, |i, _| ((i as f64 + 1.0) * 0.7391).sin());
    v -= &phi * phi.dot(&v);
    v /= v.norm();

    // The eigenvalue estimate settles slower than each step's change
    // suggests when the next modes are close, so stop only after the value
    // holds still for several consecutive iterations.
    let mut value = 0.0;
    let mut streak = 0;
    for _ in 0..50_000 {
        // w = (S + shift I) v, then deflate the stationary direction.
        let mut w = DVector::zeros(m);
        for lj in 0..m {
            w[lj] += (diag[lj] + shift) * v[lj];
        }
        for (lj, col) in cols.iter().enumerate() {
            let vj = v[lj];
            for &(li, s) in col {
                w[li] += s * vj;
            }
        }
        w -= &phi * phi.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        w /= norm;
        let new_value = norm - shift;
        if (new_value - value).abs() <= 1e-11 * value.abs().max(1e-30) {
            streak += 1;
        } else {
            streak = 0;
        }
        value = new_value;
        v = w;
        if streak >= 5 {
            break;
        }
    }
    -value
}
