//! Shared fixtures and oracles for the integration suites.

#![allow(dead_code)] // each test binary uses a different subset

use kramers::levels::solve_at;
use kramers::spin::{AffineModel, HamMatrix, MAX_SPIN};
use kramers::{FieldModel, FieldVec, HalfSpin, SpinParams, SpinSystem};
use nalgebra::{DMatrix, Matrix3};
use num_complex::Complex64;
use rand::Rng;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};

/// Run one acceptance criterion and print its single PASS/FAIL line.
pub fn criterion<F: FnOnce()>(id: u32, summary: &str, body: F) {
    let outcome = catch_unwind(AssertUnwindSafe(body));
    match &outcome {
        Ok(()) => println!("criterion {id:02} PASS — {summary}"),
        Err(_) => println!("criterion {id:02} FAIL — {summary}"),
    }
    if let Err(payload) = outcome {
        resume_unwind(payload);
    }
}

/// Anisotropic S = 1/2 ⊗ I = 7/2 fixture: invented tensors with the full
/// low-symmetry structure (all entries populated, strong hyperfine).
pub fn er_like_params() -> SpinParams {
    SpinParams {
        electron_spin: HalfSpin::new(0.5).unwrap(),
        nuclear_spin: HalfSpin::new(3.5).unwrap(),
        g: Matrix3::new(3.1, -2.5, 1.9, -2.5, 5.8, -1.2, 1.9, -1.2, 10.3),
        a_mhz: Matrix3::new(
            120.0, -60.0, 45.0, -60.0, 210.0, -30.0, 45.0, -30.0, -480.0,
        ),
        q_mhz: Matrix3::new(25.0, 10.0, -5.0, 10.0, -12.0, 8.0, -5.0, 8.0, -13.0),
        nuclear_g: -0.1618,
        nuclear_zeeman: true,
        label: "er_like".into(),
    }
}

/// Electron-only doublet with an isotropic g factor.
pub fn electron_doublet(g: f64) -> SpinParams {
    SpinParams {
        electron_spin: HalfSpin::new(0.5).unwrap(),
        nuclear_spin: HalfSpin::new(0.0).unwrap(),
        g: Matrix3::identity() * g,
        a_mhz: Matrix3::zeros(),
        q_mhz: Matrix3::zeros(),
        nuclear_g: 0.0,
        nuclear_zeeman: false,
        label: "doublet".into(),
    }
}

/// Pure nuclear I = 1 quadrupole system: non-degenerate at zero field, with
/// every transition gradient forced to zero at B = 0 by time-reversal parity.
pub fn parity_toy() -> SpinParams {
    SpinParams {
        electron_spin: HalfSpin::new(0.0).unwrap(),
        nuclear_spin: HalfSpin::new(1.0).unwrap(),
        g: Matrix3::zeros(),
        a_mhz: Matrix3::zeros(),
        q_mhz: Matrix3::from_diagonal(&nalgebra::Vector3::new(30.0, -10.0, -20.0)),
        nuclear_g: 1.0,
        nuclear_zeeman: true,
        label: "parity_toy".into(),
    }
}

/// Flat spectator + 2×2 avoided crossing: energies −offset and
/// ±√((s·B_b)² + (Δ/2)²). The spectator→upper-branch transition has
/// curvature 2s²/Δ at B = 0 along b and zero along the other axes.
pub fn avoided_crossing_toy(gap_mhz: f64, slope_mhz_per_t: f64, offset_mhz: f64) -> AffineModel {
    let z = Complex64::new(0.0, 0.0);
    let c = |v: f64| Complex64::new(v, 0.0);
    let h0 = DMatrix::from_row_slice(
        3,
        3,
        &[
            c(-offset_mhz),
            z,
            z,
            z,
            z,
            c(gap_mhz / 2.0),
            z,
            c(gap_mhz / 2.0),
            z,
        ],
    );
    let zero = DMatrix::<Complex64>::zeros(3, 3);
    let mut hb: HamMatrix = zero.clone();
    hb[(1, 1)] = c(slope_mhz_per_t);
    hb[(2, 2)] = c(-slope_mhz_per_t);
    AffineModel::new(h0, [zero.clone(), zero, hb]).unwrap()
}

fn random_matrix(rng: &mut impl Rng, scale: f64) -> Matrix3<f64> {
    Matrix3::from_fn(|_, _| rng.random_range(-scale..scale))
}

/// Random valid spin parameters for property sweeps: S = 1/2, any nuclear
/// spin up to the supported cap, dense anisotropic tensors.
pub fn random_params(rng: &mut impl Rng) -> SpinParams {
    let max_twice = (2.0 * MAX_SPIN) as u32;
    let nuclear = HalfSpin::from_twice(rng.random_range(0..=max_twice.min(7)));
    // Symmetric traceless quadrupole from a random symmetric seed.
    let raw = random_matrix(rng, 50.0);
    let sym = (raw + raw.transpose()) * 0.5;
    let q = sym - Matrix3::identity() * (sym.trace() / 3.0);
    SpinParams {
        electron_spin: HalfSpin::new(0.5).unwrap(),
        nuclear_spin: nuclear,
        g: random_matrix(rng, 15.0),
        a_mhz: random_matrix(rng, 500.0),
        q_mhz: q,
        nuclear_g: rng.random_range(-2.0..2.0),
        nuclear_zeeman: true,
        label: String::new(),
    }
}

pub fn random_field(rng: &mut impl Rng, scale_t: f64) -> FieldVec {
    FieldVec::new(
        rng.random_range(-scale_t..scale_t),
        rng.random_range(-scale_t..scale_t),
        rng.random_range(-scale_t..scale_t),
    )
}

/// Central finite-difference gradient of f = E_high − E_low, the oracle the
/// Hellmann–Feynman path is checked against. Levels are identified by sorted
/// index, so callers must stay away from degeneracies.
pub fn fd_freq_gradient(
    model: &impl FieldModel,
    field: FieldVec,
    low: usize,
    high: usize,
    step_t: f64,
) -> nalgebra::Vector3<f64> {
    let mut grad = nalgebra::Vector3::zeros();
    for axis in 0..3 {
        let mut dp = nalgebra::Vector3::zeros();
        dp[axis] = step_t;
        let plus = solve_at(model, field + FieldVec(dp)).unwrap();
        let minus = solve_at(model, field - FieldVec(dp)).unwrap();
        let fp = plus.energies[high] - plus.energies[low];
        let fm = minus.energies[high] - minus.energies[low];
        grad[axis] = (fp - fm) / (2.0 * step_t);
    }
    grad
}

/// Minimum gap between level `i` and its sorted neighbors, MHz.
pub fn neighbor_gap(energies: &nalgebra::DVector<f64>, i: usize) -> f64 {
    let mut gap = f64::INFINITY;
    if i > 0 {
        gap = gap.min(energies[i] - energies[i - 1]);
    }
    if i + 1 < energies.len() {
        gap = gap.min(energies[i + 1] - energies[i]);
    }
    gap
}

pub fn er_like_system() -> SpinSystem {
    SpinSystem::new(&er_like_params()).unwrap()
}
