//! Target patterns and regions of attraction of the particle dynamics.
//!
//! A *pattern* marks `n` of the `N` lattice cells as occupied, written as a
//! `'0'`/`'1'` string from the left end of the segment.  Under a control whose
//! charged electrodes form the active set `A = {a_0 = 0 < a_1 < ... = c}`, the
//! segment splits into intervals between consecutive active electrodes.
//! Charged electrodes repel the particles strongly enough that the noiseless
//! dynamics never crosses them, so the particle count in each interval is an
//! invariant of motion: the ordered state space decomposes into one invariant
//! region per *composition* of `n` over the active intervals, and each region
//! is the basin of one stable equilibrium.
//!
//! `roa_of_pattern` maps a pattern to the composition whose region contains
//! the pattern's box (the product of its occupied cells), which is the region
//! a control phase must steer the particles into before the next refinement.

use crate::model::{Geometry, State};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RoaError {
    #[error("pattern may only contain '0' and '1', found {ch:?} at {index}")]
    BadPatternChar { index: usize, ch: char },
    #[error("pattern is empty")]
    EmptyPattern,
    #[error("pattern marks no cells")]
    NoOccupiedCells,
    #[error("pattern has {got} cells, geometry has {expected}")]
    PatternLength { got: usize, expected: usize },
    #[error("pattern marks {got} cells, geometry has {expected} particles")]
    PatternCount { got: usize, expected: usize },
    #[error("active set must contain both endpoint electrodes")]
    ActiveEndpoints,
    #[error("active set must be strictly increasing")]
    ActiveOrder,
    #[error("active electrode index {0} is out of range")]
    ActiveRange(usize),
    #[error("composition has {counts} counts for {intervals} active intervals")]
    CompositionShape { counts: usize, intervals: usize },
    #[error("state has {got} particles, composition holds {expected}")]
    CompositionTotal { got: usize, expected: usize },
    #[error("particle {particle} sits exactly on active electrode {electrode}; membership is ambiguous")]
    BoundaryHit { particle: usize, electrode: usize },
    #[error("particle {particle} lies outside the segment and belongs to no region")]
    NoRegion { particle: usize },
}

/// Occupancy of the cell lattice: which cells the particles should fill.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Pattern {
    bits: Vec<bool>,
}

impl Pattern {
    pub fn from_bits(bits: Vec<bool>) -> Result<Self, RoaError> {
        if bits.is_empty() {
            return Err(RoaError::EmptyPattern);
        }
        if !bits.iter().any(|&b| b) {
            return Err(RoaError::NoOccupiedCells);
        }
        Ok(Self { bits })
    }

    /// Parse a `'0'`/`'1'` string, leftmost cell first.
    pub fn parse(s: &str) -> Result<Self, RoaError> {
        let mut bits = Vec::with_capacity(s.len());
        for (index, ch) in s.chars().enumerate() {
            match ch {
                '0' => bits.push(false),
                '1' => bits.push(true),
                _ => return Err(RoaError::BadPatternChar { index, ch }),
            }
        }
        Self::from_bits(bits)
    }

    pub fn cell_count(&self) -> usize {
        self.bits.len()
    }

    pub fn particle_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Occupied cell indices, ascending, 0-based.
    pub fn occupied_cells(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn is_occupied(&self, cell: usize) -> bool {
        self.bits[cell]
    }

    /// Shape compatibility with a geometry: cell and particle counts match.
    pub fn check_against(&self, g: &Geometry) -> Result<(), RoaError> {
        if self.cell_count() != g.cell_count() {
            return Err(RoaError::PatternLength {
                got: self.cell_count(),
                expected: g.cell_count(),
            });
        }
        if self.particle_count() != g.particle_count() {
            return Err(RoaError::PatternCount {
                got: self.particle_count(),
                expected: g.particle_count(),
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl TryFrom<String> for Pattern {
    type Error = RoaError;
    fn try_from(s: String) -> Result<Self, RoaError> {
        Self::parse(&s)
    }
}

impl From<Pattern> for String {
    fn from(p: Pattern) -> String {
        p.to_string()
    }
}

/// Particle counts per interval of an active electrode set; identifies one
/// invariant region (and one stable equilibrium) of the dynamics.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Composition {
    counts: Vec<usize>,
    active: Vec<usize>,
}

impl Composition {
    pub fn new(counts: Vec<usize>, active: Vec<usize>) -> Result<Self, RoaError> {
        if active.len() != counts.len() + 1 {
            return Err(RoaError::CompositionShape {
                counts: counts.len(),
                intervals: active.len().saturating_sub(1),
            });
        }
        check_active_shape(&active)?;
        Ok(Self { counts, active })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Active electrode indices delimiting the intervals, endpoints included.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn interval_count(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Particle index range (0-based, ascending positions) in interval `k`.
    pub fn particle_range(&self, k: usize) -> std::ops::Range<usize> {
        let start: usize = self.counts[..k].iter().sum();
        start..start + self.counts[k]
    }

    /// Positions of the delimiting electrodes in a geometry.
    pub fn boundaries(&self, g: &Geometry) -> Vec<f64> {
        self.active.iter().map(|&j| g.electrodes()[j]).collect()
    }
}

fn check_active_shape(active: &[usize]) -> Result<(), RoaError> {
    if active.len() < 2 {
        return Err(RoaError::ActiveEndpoints);
    }
    for w in active.windows(2) {
        if w[1] <= w[0] {
            return Err(RoaError::ActiveOrder);
        }
    }
    Ok(())
}

fn check_active_against(active: &[usize], g: &Geometry) -> Result<(), RoaError> {
    check_active_shape(active)?;
    let last = g.electrode_count() - 1;
    if active[0] != 0 || *active.last().unwrap() != last {
        return Err(RoaError::ActiveEndpoints);
    }
    if let Some(&j) = active.iter().find(|&&j| j > last) {
        return Err(RoaError::ActiveRange(j));
    }
    Ok(())
}

/// Axis-aligned product of the occupied cells of a pattern; the set of ordered
/// states realizing the pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl PatternBox {
    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    /// Cell midpoints, the nominal target state.
    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    /// Open-interior membership; the cell walls carry no probability mass.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.lo.len()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&xi, (&lo, &hi))| xi > lo && xi < hi)
    }
}

/// All compositions of `n` particles over the intervals of an active set,
/// lexicographic in the count vector.  There are `C(n + m - 1, m - 1)` of
/// them for `m` intervals, irrespective of how many cells each interval has.
pub fn enumerate_roas(
    n: usize,
    active: &[usize],
    g: &Geometry,
) -> Result<Vec<Composition>, RoaError> {
    check_active_against(active, g)?;
    let m = active.len() - 1;
    let mut out = Vec::new();
    let mut counts = vec![0usize; m];
    fill_compositions(n, 0, &mut counts, &mut out, active);
    Ok(out)
}

fn fill_compositions(
    remaining: usize,
    k: usize,
    counts: &mut Vec<usize>,
    out: &mut Vec<Composition>,
    active: &[usize],
) {
    if k + 1 == counts.len() {
        counts[k] = remaining;
        out.push(Composition {
            counts: counts.clone(),
            active: active.to_vec(),
        });
        return;
    }
    for first in 0..=remaining {
        counts[k] = first;
        fill_compositions(remaining - first, k + 1, counts, out, active);
    }
}

/// The composition whose invariant region contains the pattern's box.
pub fn roa_of_pattern(
    p: &Pattern,
    g: &Geometry,
    active: &[usize],
) -> Result<Composition, RoaError> {
    p.check_against(g)?;
    check_active_against(active, g)?;
    // Interval k covers cells [boundary(a_k), boundary(a_{k+1})).
    let cell_bounds: Vec<usize> = active.iter().map(|&j| g.electrode_boundary(j)).collect();
    let mut counts = vec![0usize; active.len() - 1];
    for cell in p.occupied_cells() {
        let k = cell_bounds[1..]
            .iter()
            .position(|&b| cell < b)
            .expect("occupied cell beyond the last electrode");
        counts[k] += 1;
    }
    Ok(Composition {
        counts,
        active: active.to_vec(),
    })
}

/// Does the ordered state fall in the invariant region of this composition?
///
/// Errors if a particle sits exactly on a delimiting electrode, where
/// membership is genuinely ambiguous.
pub fn contains(nu: &Composition, x: &State, g: &Geometry) -> Result<bool, RoaError> {
    if x.len() != nu.total() {
        return Err(RoaError::CompositionTotal {
            got: x.len(),
            expected: nu.total(),
        });
    }
    let bounds = nu.boundaries(g);
    let mut counts = vec![0usize; nu.interval_count()];
    for (particle, &xi) in x.positions().iter().enumerate() {
        if let Some(hit) = bounds.iter().position(|&b| b == xi) {
            return Err(RoaError::BoundaryHit {
                particle,
                electrode: nu.active()[hit],
            });
        }
        // Outside the segment entirely: not in any interval, so not a member.
        match bounds[1..].iter().position(|&b| xi < b) {
            Some(k) if xi > bounds[k] => counts[k] += 1,
            _ => return Ok(false),
        }
    }
    Ok(counts == nu.counts())
}

/// Membership test on a raw coordinate slice; used in sampling hot loops
/// where boundary hits have probability zero and count as non-membership.
pub(crate) fn contains_raw(nu: &Composition, bounds: &[f64], x: &[f64]) -> bool {
    let mut counts = vec![0usize; nu.interval_count()];
    for &xi in x {
        match bounds[1..].iter().position(|&b| xi < b) {
            Some(k) if xi > bounds[k] => counts[k] += 1,
            _ => return false,
        }
    }
    counts == nu.counts()
}

/// The composition whose invariant region contains the given state.
///
/// Errors on an exact electrode hit; returns `CompositionTotal` if the state
/// leaves the segment (then it belongs to no region).
pub fn classify_state(
    x: &State,
    g: &Geometry,
    active: &[usize],
) -> Result<Composition, RoaError> {
    check_active_against(active, g)?;
    let bounds: Vec<f64> = active.iter().map(|&j| g.electrodes()[j]).collect();
    let mut counts = vec![0usize; active.len() - 1];
    for (particle, &xi) in x.positions().iter().enumerate() {
        if let Some(hit) = bounds.iter().position(|&b| b == xi) {
            return Err(RoaError::BoundaryHit {
                particle,
                electrode: active[hit],
            });
        }
        match bounds[1..].iter().position(|&b| xi < b) {
            Some(k) if xi > bounds[k] => counts[k] += 1,
            _ => return Err(RoaError::NoRegion { particle }),
        }
    }
    Ok(Composition {
        counts,
        active: active.to_vec(),
    })
}

/// Product-of-cells box for a pattern.
pub fn pattern_box(p: &Pattern, g: &Geometry) -> Result<PatternBox, RoaError> {
    p.check_against(g)?;
    let (lo, hi) = p
        .occupied_cells()
        .into_iter()
        .map(|cell| g.cell_bounds(cell))
        .unzip();
    Ok(PatternBox { lo, hi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Geometry;
    use proptest::prelude::*;

    fn benchmark_geometry() -> Geometry {
        Geometry::new(&[4, 4, 4, 4], 0.25, 8).unwrap()
    }

    const BENCHMARK_PATTERN: &str = "0111001100100101";

    #[test]
    fn pattern_roundtrip_and_counts() {
        let p = Pattern::parse(BENCHMARK_PATTERN).unwrap();
        assert_eq!(p.to_string(), BENCHMARK_PATTERN);
        assert_eq!(p.cell_count(), 16);
        assert_eq!(p.particle_count(), 8);
        assert_eq!(p.occupied_cells(), vec![1, 2, 3, 6, 7, 10, 13, 15]);
        assert!(matches!(
            Pattern::parse("01a1"),
            Err(RoaError::BadPatternChar { index: 2, ch: 'a' })
        ));
    }

    #[test]
    fn pattern_to_composition_under_different_active_sets() {
        let g = benchmark_geometry();
        let p = Pattern::parse(BENCHMARK_PATTERN).unwrap();
        let full = roa_of_pattern(&p, &g, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(full.counts(), &[3, 2, 1, 2]);
        let endpoints_and_middle = roa_of_pattern(&p, &g, &[0, 2, 4]).unwrap();
        assert_eq!(endpoints_and_middle.counts(), &[5, 3]);
        let endpoints_only = roa_of_pattern(&p, &g, &[0, 4]).unwrap();
        assert_eq!(endpoints_only.counts(), &[8]);
    }

    #[test]
    fn composition_count_matches_stars_and_bars() {
        let g = benchmark_geometry();
        let all = enumerate_roas(8, &[0, 1, 2, 3, 4], &g).unwrap();
        // C(8 + 3, 3) = 165 compositions of 8 into 4 parts.
        assert_eq!(all.len(), 165);
        // Lexicographic in the count vector.
        assert_eq!(all[0].counts(), &[0, 0, 0, 8]);
        assert_eq!(all.last().unwrap().counts(), &[8, 0, 0, 0]);
        let mut seen = std::collections::HashSet::new();
        for nu in &all {
            assert_eq!(nu.total(), 8);
            assert!(seen.insert(nu.counts().to_vec()), "duplicate composition");
        }
    }

    #[test]
    fn membership_counts_particles_per_interval() {
        let g = benchmark_geometry();
        let nu = Composition::new(vec![5, 3], vec![0, 2, 4]).unwrap();
        let inside = State::new(vec![0.2, 0.6, 1.0, 1.4, 1.8, 2.3, 3.0, 3.7]).unwrap();
        assert!(contains(&nu, &inside, &g).unwrap());
        let wrong_split = State::new(vec![0.2, 0.6, 1.0, 1.4, 2.3, 2.6, 3.0, 3.7]).unwrap();
        assert!(!contains(&nu, &wrong_split, &g).unwrap());
        let on_boundary = State::new(vec![0.2, 0.6, 1.0, 1.4, 2.0, 2.3, 3.0, 3.7]).unwrap();
        assert!(matches!(
            contains(&nu, &on_boundary, &g),
            Err(RoaError::BoundaryHit { electrode: 2, .. })
        ));
        let outside = State::new(vec![0.2, 0.6, 1.0, 1.4, 1.8, 2.3, 3.0, 4.2]).unwrap();
        assert!(!contains(&nu, &outside, &g).unwrap());
    }

    #[test]
    fn pattern_box_center_realizes_the_pattern() {
        let g = benchmark_geometry();
        let p = Pattern::parse(BENCHMARK_PATTERN).unwrap();
        let b = pattern_box(&p, &g).unwrap();
        let center = b.center();
        assert_eq!(
            center,
            vec![0.375, 0.625, 0.875, 1.625, 1.875, 2.625, 3.375, 3.875]
        );
        assert!(b.contains(&center));
        // The box sits inside the invariant region of its own composition.
        let nu = roa_of_pattern(&p, &g, &[0, 1, 2, 3, 4]).unwrap();
        let x = State::new(center).unwrap();
        assert!(contains(&nu, &x, &g).unwrap());
    }

    #[test]
    fn active_set_validation() {
        let g = benchmark_geometry();
        let p = Pattern::parse(BENCHMARK_PATTERN).unwrap();
        assert!(matches!(
            roa_of_pattern(&p, &g, &[1, 2, 4]),
            Err(RoaError::ActiveEndpoints)
        ));
        assert!(matches!(
            roa_of_pattern(&p, &g, &[0, 2, 2, 4]),
            Err(RoaError::ActiveOrder)
        ));
        let short = Pattern::parse("0101").unwrap();
        assert!(matches!(
            roa_of_pattern(&short, &g, &[0, 4]),
            Err(RoaError::PatternLength { .. })
        ));
    }

    proptest! {
        /// Every interior state belongs to exactly one enumerated composition.
        #[test]
        fn state_belongs_to_exactly_one_roa(
            raw in proptest::collection::vec(0.001f64..3.999, 4),
            keep1 in proptest::bool::ANY,
            keep3 in proptest::bool::ANY,
        ) {
            let g = Geometry::new(&[4, 4, 4, 4], 0.25, 4).unwrap();
            let mut sorted = raw.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            prop_assume!(sorted.len() == 4);
            prop_assume!(sorted.iter().all(|&v| v % 1.0 != 0.0));
            let x = State::new(sorted).unwrap();
            let mut active = vec![0usize, 2];
            if keep1 { active.push(1); }
            if keep3 { active.push(3); }
            active.push(4);
            active.sort_unstable();
            let hits = enumerate_roas(4, &active, &g)
                .unwrap()
                .iter()
                .filter(|nu| contains(nu, &x, &g).unwrap())
                .count();
            prop_assert_eq!(hits, 1);
        }

        /// Composition counts obey the stars-and-bars formula.
        #[test]
        fn enumeration_size_formula(n in 1usize..7, drop1 in proptest::bool::ANY) {
            let g = Geometry::new(&[2, 2, 2, 2], 0.25, n).unwrap();
            let active: Vec<usize> = if drop1 {
                vec![0, 2, 3, 4]
            } else {
                vec![0, 1, 2, 3, 4]
            };
            let m = active.len() - 1;
            let expected = binomial(n + m - 1, m - 1);
            prop_assert_eq!(enumerate_roas(n, &active, &g).unwrap().len(), expected);
        }
    }

    fn binomial(n: usize, k: usize) -> usize {
        (1..=k).fold(1usize, |acc, i| acc * (n - k + i) / i)
    }
}
