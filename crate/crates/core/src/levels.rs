//! Energy levels: Hermitian eigensolve, degeneracy grouping, Boltzmann
//! populations, and adiabatic tracking of levels across a field sweep.
//!
//! Level indices always refer to the energy-sorted order *within one field
//! point*; adiabatic identity across points is what [`track_levels`] adds on
//! top (a per-step permutation from branch to sorted index).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spin::{check_hermitian, FieldModel, FieldVec, HamMatrix, KELVIN_PER_MHZ};

/// Default gap below which two levels count as degenerate, MHz.
pub const DEGENERACY_THRESHOLD_MHZ: f64 = 0.1;
/// Hermiticity tolerance enforced before diagonalizing, MHz.
pub const HERMITICITY_TOLERANCE_MHZ: f64 = 1e-9;
/// Two tracking overlaps closer than this are an ambiguous assignment.
const TIE_MARGIN: f64 = 1e-6;
/// Below this best overlap the sweep step is too coarse to trust tracking.
const LOW_OVERLAP: f64 = 0.5;

/// Eigensystem of one Hamiltonian at one field point.
#[derive(Clone, Debug)]
pub struct LevelSet {
    /// Eigenvalues in MHz, ascending.
    pub energies: DVector<f64>,
    /// Eigenvectors as columns, ordered like `energies`. Each column's
    /// largest-magnitude component is made real and positive, so the phase is
    /// reproducible run to run.
    pub states: DMatrix<Complex64>,
    /// Field this set was solved at (metadata; `solve_levels` doesn't use it).
    pub field: FieldVec,
}

impl LevelSet {
    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    /// f = E_high − E_low ≥ 0, MHz.
    pub fn transition_frequency(&self, i: usize, j: usize) -> f64 {
        (self.energies[j] - self.energies[i]).abs()
    }

    /// Indices grouped into degenerate clusters: consecutive levels closer
    /// than `threshold_mhz` chain into one group.
    pub fn degeneracy_groups(&self, threshold_mhz: f64) -> Vec<Vec<usize>> {
        let n = self.dim();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for i in 0..n {
            match groups.last_mut() {
                Some(g) if self.energies[i] - self.energies[*g.last().unwrap()] < threshold_mhz => {
                    g.push(i)
                }
                _ => groups.push(vec![i]),
            }
        }
        groups
    }

    /// The degenerate cluster containing level `i` (singleton when isolated).
    pub fn group_of(&self, i: usize, threshold_mhz: f64) -> Vec<usize> {
        self.degeneracy_groups(threshold_mhz)
            .into_iter()
            .find(|g| g.contains(&i))
            .unwrap_or_else(|| vec![i])
    }

    /// Boltzmann populations at `temperature_k` kelvin, summing to 1.
    /// `f64::INFINITY` gives exactly uniform occupation.
    pub fn populations(&self, temperature_k: f64) -> Result<DVector<f64>> {
        if temperature_k <= 0.0 || temperature_k.is_nan() {
            return Err(Error::InvalidInput(format!(
                "temperature must be positive, got {temperature_k} K"
            )));
        }
        let e0 = self.energies.min();
        let weights: Vec<f64> = self
            .energies
            .iter()
            .map(|e| (-(e - e0) * KELVIN_PER_MHZ / temperature_k).exp())
            .collect();
        let z: f64 = weights.iter().sum();
        Ok(DVector::from_iterator(
            weights.len(),
            weights.iter().map(|w| w / z),
        ))
    }
}

/// Diagonalize a Hermitian `h` (MHz); eigenvalues ascending, phases fixed.
///
/// `field` is carried into the result as metadata. Rejects non-finite
/// entries and Hermiticity violations beyond [`HERMITICITY_TOLERANCE_MHZ`].
pub fn solve_levels(h: &HamMatrix, field: FieldVec) -> Result<LevelSet> {
    if h.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::InvalidInput(
            "Hamiltonian has non-finite entries".into(),
        ));
    }
    check_hermitian(h, HERMITICITY_TOLERANCE_MHZ)?;
    let eig = h.clone().symmetric_eigen();
    let n = h.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let energies = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut states = DMatrix::<Complex64>::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(src);
        // Deterministic gauge: rotate the largest-|component| entry to the
        // positive real axis. Strict > keeps the pick stable under ties.
        let mut best = 0;
        for r in 1..n {
            if v[r].norm() > v[best].norm() {
                best = r;
            }
        }
        let phase = v[best] / v[best].norm();
        let fix = phase.conj();
        for r in 0..n {
            states[(r, col)] = v[r] * fix;
        }
    }
    Ok(LevelSet {
        energies,
        states,
        field,
    })
}

/// Solve the model at one field point.
pub fn solve_at(model: &impl FieldModel, field: FieldVec) -> Result<LevelSet> {
    solve_levels(&model.hamiltonian(field), field)
}

/// An ambiguous tracking assignment: two candidate levels overlapped the same
/// branch equally well (within [`TIE_MARGIN`]).
#[derive(Clone, Copy, Debug)]
pub struct TieFlag {
    pub step: usize,
    pub branch: usize,
    /// |best| − |runner-up| overlap gap at the decision.
    pub margin: f64,
}

/// Tracking confidence warning: the best overlap for this branch fell below
/// 0.5, i.e. the sweep step is too coarse for reliable adiabatic identity.
#[derive(Clone, Copy, Debug)]
pub struct OverlapFlag {
    pub step: usize,
    pub branch: usize,
    pub overlap: f64,
}

/// Levels of a whole sweep with adiabatic branch labels.
#[derive(Clone, Debug)]
pub struct TrackedSweep {
    pub steps: Vec<LevelSet>,
    /// `labels[s][b]` = sorted index at step `s` occupied by branch `b`.
    /// Branch `b` is defined as sorted index `b` at step 0; each `labels[s]`
    /// is a permutation.
    pub labels: Vec<Vec<usize>>,
    pub ties: Vec<TieFlag>,
    pub low_overlap: Vec<OverlapFlag>,
}

impl TrackedSweep {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn n_branches(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    /// Energy of adiabatic branch `b` at step `s`, MHz.
    pub fn energy(&self, s: usize, b: usize) -> f64 {
        self.steps[s].energies[self.labels[s][b]]
    }

    /// Energies of one branch across the sweep, MHz.
    pub fn branch_energies(&self, b: usize) -> Vec<f64> {
        (0..self.n_steps()).map(|s| self.energy(s, b)).collect()
    }
}

/// Connect level identities across consecutive field points by maximizing
/// eigenvector overlap |⟨v(s)|v(s+1)⟩| (greedy on the global maximum).
///
/// Near-ties are flagged, not resolved silently; best overlaps below 0.5 are
/// flagged as a too-coarse step. Output order is deterministic.
#[allow(clippy::needless_range_loop)] // index math mirrors the overlap matrix
pub fn track_levels(steps: Vec<LevelSet>) -> Result<TrackedSweep> {
    if steps.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let n = steps[0].dim();
    if let Some((s, set)) = steps.iter().enumerate().find(|(_, set)| set.dim() != n) {
        return Err(Error::InvalidInput(format!(
            "level sets must share one dimension: step {s} has {} levels, step 0 has {n}",
            set.dim()
        )));
    }

    let mut labels = vec![(0..n).collect::<Vec<usize>>()];
    let mut ties = Vec::new();
    let mut low_overlap = Vec::new();

    for s in 1..steps.len() {
        let prev = &steps[s - 1];
        let cur = &steps[s];
        let prev_labels = &labels[s - 1];
        // overlap[b][j] = |⟨branch b at s−1 | sorted level j at s⟩|
        let mut overlap = vec![vec![0.0f64; n]; n];
        for b in 0..n {
            let vb = prev.states.column(prev_labels[b]);
            for j in 0..n {
                overlap[b][j] = vb.dotc(&cur.states.column(j)).norm();
            }
        }

        let assignment = greedy_assign(&overlap);
        for &(branch, margin) in &assignment.ties {
            ties.push(TieFlag {
                step: s,
                branch,
                margin,
            });
        }
        for (b, &j) in assignment.map.iter().enumerate() {
            if overlap[b][j] < LOW_OVERLAP {
                low_overlap.push(OverlapFlag {
                    step: s,
                    branch: b,
                    overlap: overlap[b][j],
                });
            }
        }
        labels.push(assignment.map);
    }

    Ok(TrackedSweep {
        steps,
        labels,
        ties,
        low_overlap,
    })
}

pub(crate) struct Assignment {
    /// map[i] = matched column on the other side.
    pub map: Vec<usize>,
    /// (row, margin) pairs where the decision was ambiguous.
    pub ties: Vec<(usize, f64)>,
    /// Smallest overlap among the chosen matches.
    pub worst: f64,
}

/// Greedy one-to-one assignment on an overlap matrix, always taking the
/// current global maximum. Deterministic: ties go to the lowest (row, col).
pub(crate) fn greedy_assign(overlap: &[Vec<f64>]) -> Assignment {
    let n = overlap.len();
    let mut map = vec![usize::MAX; n];
    let mut ties = Vec::new();
    let mut row_done = vec![false; n];
    let mut col_done = vec![false; n];
    let mut worst = f64::INFINITY;
    for _ in 0..n {
        let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
        let mut runner_up = f64::NEG_INFINITY;
        for r in 0..n {
            if row_done[r] {
                continue;
            }
            for c in 0..n {
                if col_done[c] {
                    continue;
                }
                let o = overlap[r][c];
                if o > best.0 {
                    runner_up = best.0;
                    best = (o, r, c);
                } else if o > runner_up {
                    runner_up = o;
                }
            }
        }
        let (o, r, c) = best;
        if runner_up.is_finite() && o - runner_up < TIE_MARGIN {
            ties.push((r, o - runner_up));
        }
        map[r] = c;
        row_done[r] = true;
        col_done[c] = true;
        worst = worst.min(o);
    }
    Assignment { map, ties, worst }
}

/// Match each level of `a` to its best-overlap partner in `b` (one-to-one).
/// Returns `map[i] = j` and the worst overlap among the matches — check it
/// against ~0.5 before trusting the identification.
#[allow(clippy::needless_range_loop)] // index math mirrors the overlap matrix
pub fn match_levels(a: &LevelSet, b: &LevelSet) -> (Vec<usize>, f64) {
    let n = a.dim();
    let mut overlap = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        let vi = a.states.column(i);
        for j in 0..n {
            overlap[i][j] = vi.dotc(&b.states.column(j)).norm();
        }
    }
    let assignment = greedy_assign(&overlap);
    (assignment.map, assignment.worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin::AffineModel;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn two_level(diag: f64, coupling: Complex64) -> HamMatrix {
        dmatrix![
            Complex64::new(diag, 0.0), coupling;
            coupling.conj(), Complex64::new(-diag, 0.0)
        ]
    }

    #[test]
    fn solves_symmetric_two_level_exactly() {
        // [[0, 1], [1, 0]] → eigenvalues ∓1, eigenvectors (1, ∓1)/√2.
        let h = two_level(0.0, Complex64::new(1.0, 0.0));
        let set = solve_levels(&h, FieldVec::zero()).unwrap();
        assert_relative_eq!(set.energies[0], -1.0, max_relative = 1e-12);
        assert_relative_eq!(set.energies[1], 1.0, max_relative = 1e-12);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // Phase convention: largest component real positive. Both components
        // tie in magnitude, so the first stays the anchor.
        assert_relative_eq!(set.states[(0, 0)].re, s, max_relative = 1e-9);
        assert_relative_eq!(set.states[(1, 0)].re, -s, max_relative = 1e-9);
        assert_relative_eq!(set.states[(0, 1)].re, s, max_relative = 1e-9);
        assert_relative_eq!(set.states[(1, 1)].re, s, max_relative = 1e-9);
    }

    #[test]
    fn phase_convention_survives_complex_couplings() {
        let h = two_level(0.3, Complex64::new(0.4, -1.1));
        let set = solve_levels(&h, FieldVec::zero()).unwrap();
        for col in 0..2 {
            let v = set.states.column(col);
            let big = if v[0].norm() >= v[1].norm() { v[0] } else { v[1] };
            assert!(big.re > 0.0);
            assert!(big.im.abs() < 1e-12);
        }
        // Residual ‖Hv − Ev‖ stays at solver precision.
        for col in 0..2 {
            let v = set.states.column(col).clone_owned();
            let r = &h * &v - &v * Complex64::new(set.energies[col], 0.0);
            assert!(r.norm() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_hermitian_input() {
        let h = dmatrix![
            Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0);
            Complex64::new(0.5, 0.0), Complex64::new(0.0, 0.0)
        ];
        match solve_levels(&h, FieldVec::zero()) {
            Err(Error::NotHermitian { deviation, .. }) => {
                assert_relative_eq!(deviation, 0.5, max_relative = 1e-12)
            }
            other => panic!("expected NotHermitian, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_finite_entries() {
        let h = dmatrix![
            Complex64::new(f64::NAN, 0.0), Complex64::new(0.0, 0.0);
            Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)
        ];
        assert!(solve_levels(&h, FieldVec::zero()).is_err());
    }

    #[test]
    fn degeneracy_groups_chain_consecutive_gaps() {
        let set = LevelSet {
            energies: DVector::from_vec(vec![0.0, 0.04, 0.08, 5.0, 10.0, 10.05]),
            states: DMatrix::identity(6, 6),
            field: FieldVec::zero(),
        };
        let groups = set.degeneracy_groups(0.1);
        assert_eq!(groups, vec![vec![0, 1, 2], vec![3], vec![4, 5]]);
        assert_eq!(set.group_of(5, 0.1), vec![4, 5]);
    }

    #[test]
    fn populations_follow_boltzmann_ratio() {
        let set = LevelSet {
            energies: DVector::from_vec(vec![0.0, 1000.0]),
            states: DMatrix::identity(2, 2),
            field: FieldVec::zero(),
        };
        // T chosen so ΔE·(h/k_B)/T = 1 → p1/p0 = e⁻¹.
        let t = 1000.0 * KELVIN_PER_MHZ;
        let p = set.populations(t).unwrap();
        assert_relative_eq!(p[1] / p[0], (-1.0f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(p[0] + p[1], 1.0, max_relative = 1e-12);
        // Infinite temperature → exactly uniform.
        let p = set.populations(f64::INFINITY).unwrap();
        assert_eq!(p[0], 0.5);
        assert_eq!(p[1], 0.5);
        assert!(set.populations(0.0).is_err());
    }

    /// 2×2 avoided crossing: H = [[sB, Δ/2], [Δ/2, −sB]] along the b axis.
    fn avoided_crossing(gap: f64, slope: f64) -> AffineModel {
        let h0 = dmatrix![
            Complex64::new(0.0, 0.0), Complex64::new(gap / 2.0, 0.0);
            Complex64::new(gap / 2.0, 0.0), Complex64::new(0.0, 0.0)
        ];
        let zero = DMatrix::zeros(2, 2);
        let hb = dmatrix![
            Complex64::new(slope, 0.0), Complex64::new(0.0, 0.0);
            Complex64::new(0.0, 0.0), Complex64::new(-slope, 0.0)
        ];
        AffineModel::new(h0, [zero.clone(), zero, hb]).unwrap()
    }

    #[test]
    fn tracking_keeps_identity_through_avoided_crossing() {
        let model = avoided_crossing(1.0, 100.0);
        let sets: Vec<LevelSet> = (0..41)
            .map(|i| {
                let b = -0.02 + 0.001 * i as f64;
                solve_at(&model, FieldVec::new(0.0, 0.0, b)).unwrap()
            })
            .collect();
        let tracked = track_levels(sets).unwrap();
        // Coupled branches repel: sorted order never swaps.
        for s in 0..tracked.n_steps() {
            assert_eq!(tracked.labels[s], vec![0, 1], "step {s}");
        }
        assert!(tracked.low_overlap.is_empty());
        // Branch energies are smooth hyperbolae: E±(B) = ±√((sB)² + (Δ/2)²).
        for (s, &e) in tracked.branch_energies(1).iter().enumerate() {
            let b = -0.02 + 0.001 * s as f64;
            let expect = ((100.0 * b).powi(2) + 0.25).sqrt();
            assert_relative_eq!(e, expect, max_relative = 1e-9);
        }
    }

    #[test]
    fn tracking_swaps_labels_at_exact_crossing() {
        // No coupling: levels cross for real; adiabatic identity follows the
        // eigenvectors, so labels swap relative to sorted order.
        let model = avoided_crossing(0.0, 100.0);
        let sets: Vec<LevelSet> = [-0.011, -0.003, 0.007, 0.015]
            .iter()
            .map(|&b| solve_at(&model, FieldVec::new(0.0, 0.0, b)).unwrap())
            .collect();
        let tracked = track_levels(sets).unwrap();
        assert_eq!(tracked.labels[0], vec![0, 1]);
        assert_eq!(tracked.labels[3], vec![1, 0]);
        // Tracked branch 0 stays on the falling line e = +100·B... branch with
        // basis vector e₀ has energy +sB: ascending before, descending after.
        let e0 = tracked.branch_energies(0);
        assert_relative_eq!(e0[0], -1.1, max_relative = 1e-9);
        assert_relative_eq!(e0[3], 1.5, max_relative = 1e-9);
    }

    #[test]
    fn tracking_rejects_mixed_dimensions() {
        let a = solve_levels(&two_level(1.0, Complex64::new(0.2, 0.0)), FieldVec::zero()).unwrap();
        let b = LevelSet {
            energies: DVector::from_vec(vec![0.0]),
            states: DMatrix::identity(1, 1),
            field: FieldVec::zero(),
        };
        assert!(track_levels(vec![a, b]).is_err());
        assert!(track_levels(vec![]).is_err());
    }

    #[test]
    fn match_levels_recovers_a_known_permutation() {
        let model = avoided_crossing(0.0, 100.0);
        let before = solve_at(&model, FieldVec::new(0.0, 0.0, -0.01)).unwrap();
        let after = solve_at(&model, FieldVec::new(0.0, 0.0, 0.01)).unwrap();
        let (map, worst) = match_levels(&before, &after);
        assert_eq!(map, vec![1, 0]); // uncoupled lines cross → sorted order swaps
        assert!(worst > 0.999);
    }

    #[test]
    fn tracking_is_permutation_per_step() {
        let model = avoided_crossing(0.3, 40.0);
        let sets: Vec<LevelSet> = (0..11)
            .map(|i| solve_at(&model, FieldVec::new(0.0, 0.0, -0.05 + 0.01 * i as f64)).unwrap())
            .collect();
        let tracked = track_levels(sets).unwrap();
        for labels in &tracked.labels {
            let mut sorted = labels.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![0, 1]);
        }
    }
}
