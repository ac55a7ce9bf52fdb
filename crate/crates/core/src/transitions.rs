//! Transition frequencies, RF strengths, and field derivatives.
//!
//! Strength convention: the reported strength of |i⟩→|j⟩ for a drive along
//! the unit vector n̂ is |⟨i| n̂·(μ_B g·S − μ_n g_n I) |j⟩| in MHz per tesla of
//! drive amplitude — i.e. the Rabi frequency is strength × B₁ (MHz for B₁ in
//! tesla). It is gauge invariant (eigenvector phases drop out in the modulus)
//! and always includes the nuclear moment, whether or not the static nuclear
//! Zeeman term is enabled.
//!
//! Gradients use Hellmann–Feynman on the exact ∂H/∂B_k; curvatures use
//! second-order central finite differences of adiabatically tracked
//! frequencies, because H is affine in B and second derivatives live entirely
//! in level repulsion.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::levels::{match_levels, solve_at, LevelSet, DEGENERACY_THRESHOLD_MHZ};
use crate::spin::{FieldModel, FieldVec, SpinSystem};

/// Default curvature finite-difference step, tesla.
pub const CURVATURE_STEP_T: f64 = 1e-4;

/// Knobs shared by the table/derivative operations.
#[derive(Clone, Copy, Debug)]
pub struct TransitionConfig {
    /// Levels closer than this count as one degenerate group, MHz.
    pub degeneracy_threshold_mhz: f64,
    /// Central-difference step for curvatures, tesla.
    pub curvature_step_t: f64,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        TransitionConfig {
            degeneracy_threshold_mhz: DEGENERACY_THRESHOLD_MHZ,
            curvature_step_t: CURVATURE_STEP_T,
        }
    }
}

/// One |low⟩→|high⟩ line with everything the screening workflows need.
#[derive(Clone, Debug)]
pub struct Transition {
    /// Sorted level indices at the evaluation field, low < high.
    pub low: usize,
    pub high: usize,
    /// E_high − E_low, MHz.
    pub frequency_mhz: f64,
    /// |matrix element| of the RF coupling along the drive direction, MHz/T.
    pub strength_mhz_per_t: f64,
    /// ∂f/∂B, MHz/T. For degenerate endpoints this is the extremal branch
    /// combination (see `freq_gradient`), flagged below.
    pub gradient_mhz_per_t: Vector3<f64>,
    /// Hessian ∂²f/∂B², MHz/T².
    pub curvature_mhz_per_t2: Matrix3<f64>,
    pub degenerate_low: bool,
    pub degenerate_high: bool,
    /// Human-readable tag, e.g. "4-12".
    pub label: String,
}

/// Frequency gradient of one transition, with degeneracy provenance.
#[derive(Clone, Copy, Debug)]
pub struct Gradient {
    pub gradient_mhz_per_t: Vector3<f64>,
    pub degenerate_low: bool,
    pub degenerate_high: bool,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.gradient_mhz_per_t.norm()
    }
}

/// |⟨low| n̂·(μ_B g·S − μ_n g_n I) |high⟩| in MHz/T (see module docs).
pub fn transition_strength(
    levels: &LevelSet,
    sys: &SpinSystem,
    low: usize,
    high: usize,
    rf_direction: &Vector3<f64>,
) -> Result<f64> {
    check_pair(levels, low, high)?;
    let op = sys.rf_operator(rf_direction)?;
    let vi = levels.states.column(low);
    let vj = levels.states.column(high);
    Ok(vi.dotc(&(&op * vj)).norm())
}

/// Rabi-calibrated strength from a measured π-pulse: a π pulse of length
/// `t_pi_us` at drive amplitude `b1_t` implies strength = 1/(2·tπ·B₁) MHz/T.
pub fn strength_from_pi_pulse(t_pi_us: f64, b1_t: f64) -> Result<f64> {
    for (name, v) in [("t_pi_us", t_pi_us), ("b1_t", b1_t)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{name} must be positive and finite, got {v}"
            )));
        }
    }
    Ok(1.0 / (2.0 * t_pi_us * b1_t))
}

/// Hellmann–Feynman gradient of f = E_high − E_low at the field of `levels`.
///
/// Non-degenerate levels use dE/dB_k = ⟨v|∂H/∂B_k|v⟩ exactly. A degenerate
/// level has a *set* of branch derivatives (the eigenvalues of the
/// group-projected ∂H/∂B_k); the transition gradient then reports, per axis,
/// the extremal (largest-magnitude) branch combination and raises the
/// corresponding flag — a worst case for ZEFOZ screening, not a unique value.
pub fn freq_gradient(
    levels: &LevelSet,
    model: &impl FieldModel,
    low: usize,
    high: usize,
    degeneracy_threshold_mhz: f64,
) -> Result<Gradient> {
    check_pair(levels, low, high)?;
    let group_low = levels.group_of(low, degeneracy_threshold_mhz);
    let group_high = levels.group_of(high, degeneracy_threshold_mhz);
    let mut gradient = Vector3::zeros();
    for axis in 0..3 {
        let hk = model.field_derivative(axis);
        let d_low = branch_derivatives(levels, &hk, &group_low);
        let d_high = branch_derivatives(levels, &hk, &group_high);
        gradient[axis] = extremal_difference(&d_high, &d_low);
    }
    Ok(Gradient {
        gradient_mhz_per_t: gradient,
        degenerate_low: group_low.len() > 1,
        degenerate_high: group_high.len() > 1,
    })
}

/// dE/dB eigenvalue set of one degenerate group: diagonalize P†(∂H/∂B_k)P on
/// the group's span. Singleton groups reduce to the plain expectation value.
fn branch_derivatives(levels: &LevelSet, hk: &crate::spin::HamMatrix, group: &[usize]) -> Vec<f64> {
    if group.len() == 1 {
        let v = levels.states.column(group[0]);
        return vec![v.dotc(&(hk * v)).re];
    }
    let g = group.len();
    let mut projected = nalgebra::DMatrix::<Complex64>::zeros(g, g);
    for (a, &ia) in group.iter().enumerate() {
        // Hermitian block: fill the upper triangle, mirror the rest.
        for (b, &ib) in group.iter().enumerate().skip(a) {
            let m = levels.states.column(ia).dotc(&(hk * levels.states.column(ib)));
            projected[(a, b)] = m;
            projected[(b, a)] = m.conj();
        }
    }
    let mut eig: Vec<f64> =
        projected.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    eig
}

/// Signed extremal difference between two branch-derivative sets: the
/// largest-magnitude value of (high − low) over branch pairs.
fn extremal_difference(high: &[f64], low: &[f64]) -> f64 {
    let h_max = high.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let h_min = high.iter().copied().fold(f64::INFINITY, f64::min);
    let l_max = low.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let l_min = low.iter().copied().fold(f64::INFINITY, f64::min);
    let a = h_max - l_min;
    let b = h_min - l_max;
    if a.abs() >= b.abs() {
        a
    } else {
        b
    }
}

/// Evaluation stencil for ∂²f/∂B_k∂B_l: the center solve plus 18 offset
/// solves (±h per axis, ±h±h per axis pair), each adiabatically matched back
/// to the center levels. Built once and shared by every transition pair.
struct CurvatureStencil {
    center: LevelSet,
    step_t: f64,
    /// (offset in units of h, energies re-indexed to center level order)
    offsets: Vec<([i32; 3], Vec<f64>)>,
}

const STENCIL_OFFSETS: [[i32; 3]; 18] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
    [1, 1, 0],
    [1, -1, 0],
    [-1, 1, 0],
    [-1, -1, 0],
    [1, 0, 1],
    [1, 0, -1],
    [-1, 0, 1],
    [-1, 0, -1],
    [0, 1, 1],
    [0, 1, -1],
    [0, -1, 1],
    [0, -1, -1],
];

impl CurvatureStencil {
    fn build(model: &impl FieldModel, center: LevelSet, step_t: f64) -> Result<Self> {
        if !(step_t > 0.0 && step_t.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "curvature step must be positive and finite, got {step_t} T"
            )));
        }
        let mut offsets = Vec::with_capacity(STENCIL_OFFSETS.len());
        for (k, off) in STENCIL_OFFSETS.iter().enumerate() {
            let field = center.field
                + FieldVec::new(
                    off[0] as f64 * step_t,
                    off[1] as f64 * step_t,
                    off[2] as f64 * step_t,
                );
            let set = solve_at(model, field)?;
            let (map, worst) = match_levels(&center, &set);
            if worst < 0.5 {
                return Err(Error::TrackingLost {
                    step: k,
                    overlap: worst,
                    advice: format!(
                        "curvature stencil point could not be matched to the center levels; \
                         reduce the step below {step_t} T"
                    ),
                });
            }
            let energies: Vec<f64> = map.iter().map(|&j| set.energies[j]).collect();
            offsets.push((*off, energies));
        }
        Ok(CurvatureStencil {
            center,
            step_t,
            offsets,
        })
    }

    fn energies_at(&self, off: [i32; 3]) -> &[f64] {
        &self
            .offsets
            .iter()
            .find(|(o, _)| *o == off)
            .expect("offset in stencil")
            .1
    }

    /// Signed tracked frequency E_high − E_low at a stencil offset.
    fn freq(&self, off: [i32; 3], low: usize, high: usize) -> f64 {
        if off == [0, 0, 0] {
            return self.center.energies[high] - self.center.energies[low];
        }
        let e = self.energies_at(off);
        e[high] - e[low]
    }

    fn hessian(&self, low: usize, high: usize) -> Matrix3<f64> {
        let h2 = self.step_t * self.step_t;
        let f0 = self.freq([0, 0, 0], low, high);
        let mut m = Matrix3::zeros();
        for k in 0..3 {
            let mut plus = [0; 3];
            plus[k] = 1;
            let mut minus = [0; 3];
            minus[k] = -1;
            m[(k, k)] =
                (self.freq(plus, low, high) - 2.0 * f0 + self.freq(minus, low, high)) / h2;
        }
        for k in 0..3 {
            for l in (k + 1)..3 {
                let mut pp = [0; 3];
                pp[k] = 1;
                pp[l] = 1;
                let mut pm = [0; 3];
                pm[k] = 1;
                pm[l] = -1;
                let mut mp = [0; 3];
                mp[k] = -1;
                mp[l] = 1;
                let mut mm = [0; 3];
                mm[k] = -1;
                mm[l] = -1;
                let v = (self.freq(pp, low, high) - self.freq(pm, low, high)
                    - self.freq(mp, low, high)
                    + self.freq(mm, low, high))
                    / (4.0 * h2);
                m[(k, l)] = v;
                m[(l, k)] = v;
            }
        }
        m
    }
}

/// Hessian of f = E_high − E_low with respect to B at `field`, MHz/T².
///
/// Central differences over a 19-point stencil with adiabatic level matching
/// at every stencil point; fails (rather than silently mislabeling) when an
/// offset point can't be matched to the center levels, with advice to shrink
/// the step.
pub fn freq_curvature(
    model: &impl FieldModel,
    field: FieldVec,
    low: usize,
    high: usize,
    cfg: &TransitionConfig,
) -> Result<Matrix3<f64>> {
    let center = solve_at(model, field)?;
    check_pair(&center, low, high)?;
    let stencil = CurvatureStencil::build(model, center, cfg.curvature_step_t)?;
    Ok(stencil.hessian(low, high))
}

/// All |low⟩→|high⟩ lines of `levels` with frequency inside `band_mhz`
/// (inclusive), sorted by frequency. Strength, gradient and curvature are
/// populated for every entry; degenerate endpoints are flagged.
pub fn transition_table(
    sys: &SpinSystem,
    levels: &LevelSet,
    rf_direction: &Vector3<f64>,
    band_mhz: (f64, f64),
    cfg: &TransitionConfig,
) -> Result<Vec<Transition>> {
    let (lo, hi) = band_mhz;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::InvalidInput(format!(
            "band must be finite with min ≤ max, got {lo}..{hi} MHz"
        )));
    }
    let n = levels.dim();
    let rf_op = sys.rf_operator(rf_direction)?;
    let groups = levels.degeneracy_groups(cfg.degeneracy_threshold_mhz);
    let mut group_of = vec![0usize; n];
    for (gi, g) in groups.iter().enumerate() {
        for &i in g {
            group_of[i] = gi;
        }
    }
    // Branch-derivative sets once per (group, axis), not per pair.
    let mut deriv_sets: Vec<[Vec<f64>; 3]> = Vec::with_capacity(groups.len());
    for g in &groups {
        let mut per_axis: [Vec<f64>; 3] = Default::default();
        for (axis, slot) in per_axis.iter_mut().enumerate() {
            let hk = sys.field_derivative(axis);
            *slot = branch_derivatives(levels, &hk, g);
        }
        deriv_sets.push(per_axis);
    }
    let stencil = CurvatureStencil::build(sys, levels.clone(), cfg.curvature_step_t)?;

    let mut table = Vec::new();
    for low in 0..n {
        for high in (low + 1)..n {
            let f = levels.energies[high] - levels.energies[low];
            if f < lo || f > hi {
                continue;
            }
            let vi = levels.states.column(low);
            let vj = levels.states.column(high);
            let strength = vi.dotc(&(&rf_op * vj)).norm();
            let (gl, gh) = (group_of[low], group_of[high]);
            let mut gradient = Vector3::zeros();
            for axis in 0..3 {
                gradient[axis] =
                    extremal_difference(&deriv_sets[gh][axis], &deriv_sets[gl][axis]);
            }
            table.push(Transition {
                low,
                high,
                frequency_mhz: f,
                strength_mhz_per_t: strength,
                gradient_mhz_per_t: gradient,
                curvature_mhz_per_t2: stencil.hessian(low, high),
                degenerate_low: groups[gl].len() > 1,
                degenerate_high: groups[gh].len() > 1,
                label: format!("{low}-{high}"),
            });
        }
    }
    table.sort_by(|a, b| {
        a.frequency_mhz
            .total_cmp(&b.frequency_mhz)
            .then(a.low.cmp(&b.low))
            .then(a.high.cmp(&b.high))
    });
    Ok(table)
}

fn check_pair(levels: &LevelSet, low: usize, high: usize) -> Result<()> {
    let n = levels.dim();
    if low >= n || high >= n {
        return Err(Error::InvalidInput(format!(
            "level indices ({low}, {high}) out of range for {n} levels"
        )));
    }
    if low >= high {
        return Err(Error::InvalidInput(format!(
            "transition needs low < high, got ({low}, {high})"
        )));
    }
    Ok(())
}
