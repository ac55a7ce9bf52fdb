//! Spin operators and the static spin Hamiltonian.
//!
//! The model is an effective electron spin S coupled to a nuclear spin I:
//!
//! ```text
//! H(B) = μ_B B·g·S + I·A·S + I·Q·I − μ_n g_n B·I      (MHz)
//! ```
//!
//! with B in tesla in the right-handed optical frame (D1, D2, b). H is affine
//! in the field, `H(B) = H0 + Σ_k B_k H_k`, and the per-axis derivatives `H_k`
//! are stored exactly — no finite differences anywhere in the builder.
//!
//! Sign convention: the nuclear Zeeman term enters as −μ_n g_n B·I. Spectra are
//! invariant under B → −B (time reversal), so level energies cannot distinguish
//! the sign of `nuclear_g`; either sign is accepted.

use std::fmt;
use std::ops::{Add, Index, Mul, Neg, Sub};

use nalgebra::{DMatrix, Matrix3, Vector3};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Bohr magneton over h, MHz per tesla.
pub const MU_B_MHZ_PER_T: f64 = 13_996.2;
/// Nuclear magneton over h, MHz per tesla.
pub const MU_N_MHZ_PER_T: f64 = 7.6226;
/// h/k_B in kelvin per MHz, for Boltzmann factors exp(−E / (T/KELVIN_PER_MHZ)).
pub const KELVIN_PER_MHZ: f64 = 4.799_243_073e-5;
/// Largest spin accepted; beyond this the dense 16×16-class solvers need a second look.
pub const MAX_SPIN: f64 = 7.5;
/// Symmetry/tracelessness tolerance for the quadrupole tensor, MHz.
pub const Q_TOLERANCE_MHZ: f64 = 1e-9;

/// Dense complex Hamiltonian in MHz.
pub type HamMatrix = DMatrix<Complex64>;

/// A spin quantum number constrained to non-negative integer multiples of 1/2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HalfSpin(u32); // stores 2j

impl HalfSpin {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::InvalidSpin(value));
        }
        let twice = value * 2.0;
        if (twice - twice.round()).abs() > 1e-9 {
            return Err(Error::InvalidSpin(value));
        }
        Ok(HalfSpin(twice.round() as u32))
    }

    /// Construct from 2j (always valid).
    pub fn from_twice(twice: u32) -> Self {
        HalfSpin(twice)
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 2.0
    }

    pub fn twice(self) -> u32 {
        self.0
    }

    /// Number of m states, 2j + 1.
    pub fn multiplicity(self) -> usize {
        self.0 as usize + 1
    }
}

impl fmt::Display for HalfSpin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_multiple_of(2) {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}/2", self.0)
        }
    }
}

/// Angular momentum operators `[Jx, Jy, Jz]` for spin j, in ħ units.
///
/// Basis ordering is m = j, j−1, …, −j. Built from the ladder operators, so
/// Jx is real symmetric and Jy purely imaginary antisymmetric — Hermitian to
/// the last bit, not just to rounding.
pub fn angular_momentum_ops(j: HalfSpin) -> [DMatrix<Complex64>; 3] {
    let dim = j.multiplicity();
    let jv = j.value();
    let mut jz = DMatrix::<Complex64>::zeros(dim, dim);
    let mut jp = DMatrix::<Complex64>::zeros(dim, dim);
    for i in 0..dim {
        let m = jv - i as f64;
        jz[(i, i)] = Complex64::new(m, 0.0);
        if i > 0 {
            // J+|j,m⟩ = √(j(j+1) − m(m+1)) |j,m+1⟩
            let c = (jv * (jv + 1.0) - m * (m + 1.0)).sqrt();
            jp[(i - 1, i)] = Complex64::new(c, 0.0);
        }
    }
    let jm = jp.adjoint();
    let jx = (&jp + &jm) * Complex64::new(0.5, 0.0);
    let jy = (&jp - &jm) * Complex64::new(0.0, -0.5);
    [jx, jy, jz]
}

/// Static magnetic field in tesla, components along (D1, D2, b).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldVec(pub Vector3<f64>);

impl FieldVec {
    pub fn new(d1: f64, d2: f64, b: f64) -> Self {
        FieldVec(Vector3::new(d1, d2, b))
    }

    pub fn zero() -> Self {
        FieldVec(Vector3::zeros())
    }

    pub fn d1(self) -> f64 {
        self.0.x
    }

    pub fn d2(self) -> f64 {
        self.0.y
    }

    pub fn b(self) -> f64 {
        self.0.z
    }

    pub fn norm(self) -> f64 {
        self.0.norm()
    }

    /// The same lab field seen from the other C2-related subsite:
    /// a 180° rotation about the b axis, (D1, D2, b) → (−D1, −D2, b).
    pub fn c2_subsite(self) -> Self {
        FieldVec(Vector3::new(-self.0.x, -self.0.y, self.0.z))
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }
}

impl Index<usize> for FieldVec {
    type Output = f64;
    fn index(&self, axis: usize) -> &f64 {
        &self.0[axis]
    }
}

impl Add for FieldVec {
    type Output = FieldVec;
    fn add(self, rhs: FieldVec) -> FieldVec {
        FieldVec(self.0 + rhs.0)
    }
}

impl Sub for FieldVec {
    type Output = FieldVec;
    fn sub(self, rhs: FieldVec) -> FieldVec {
        FieldVec(self.0 - rhs.0)
    }
}

impl Neg for FieldVec {
    type Output = FieldVec;
    fn neg(self) -> FieldVec {
        FieldVec(-self.0)
    }
}

impl Mul<f64> for FieldVec {
    type Output = FieldVec;
    fn mul(self, s: f64) -> FieldVec {
        FieldVec(self.0 * s)
    }
}

impl fmt::Display for FieldVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}) T", self.0.x, self.0.y, self.0.z)
    }
}

/// Spin-Hamiltonian parameters for one electronic doublet of one site.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinParams {
    pub electron_spin: HalfSpin,
    pub nuclear_spin: HalfSpin,
    /// Electron g tensor (dimensionless); row = field axis, column = spin axis.
    pub g: Matrix3<f64>,
    /// Hyperfine tensor in MHz; couples I (row) to S (column).
    pub a_mhz: Matrix3<f64>,
    /// Quadrupole tensor in MHz; must be symmetric and traceless.
    pub q_mhz: Matrix3<f64>,
    /// Nuclear g factor multiplying μ_n (either sign accepted).
    pub nuclear_g: f64,
    /// Include the −μ_n g_n B·I term in H.
    pub nuclear_zeeman: bool,
    /// Free-form tag (e.g. which crystallographic site / doublet) carried into outputs.
    pub label: String,
}

impl SpinParams {
    /// Hilbert-space dimension (2S+1)(2I+1).
    pub fn dimension(&self) -> usize {
        self.electron_spin.multiplicity() * self.nuclear_spin.multiplicity()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, j) in [
            ("electron_spin", self.electron_spin),
            ("nuclear_spin", self.nuclear_spin),
        ] {
            if j.value() > MAX_SPIN {
                return Err(Error::SpinTooLarge {
                    spin: j.value(),
                    max: MAX_SPIN,
                })
                .map_err(|e| tag_spin(e, name));
            }
        }
        for (name, m) in [("g", &self.g), ("A_MHz", &self.a_mhz), ("Q_MHz", &self.q_mhz)] {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParams(format!("{name} has a non-finite entry")));
            }
        }
        if !self.nuclear_g.is_finite() {
            return Err(Error::InvalidParams("nuclear_g is not finite".into()));
        }
        let q = &self.q_mhz;
        for i in 0..3 {
            for k in (i + 1)..3 {
                if (q[(i, k)] - q[(k, i)]).abs() > Q_TOLERANCE_MHZ {
                    return Err(Error::InvalidParams(format!(
                        "Q_MHz must be symmetric: |Q[{i}][{k}] - Q[{k}][{i}]| = {:.3e} MHz",
                        (q[(i, k)] - q[(k, i)]).abs()
                    )));
                }
            }
        }
        let trace = q.trace();
        if trace.abs() > Q_TOLERANCE_MHZ {
            return Err(Error::InvalidParams(format!(
                "Q_MHz must follow the traceless convention (Qxx + Qyy + Qzz = 0); trace = {trace:.3e} MHz"
            )));
        }
        Ok(())
    }
}

fn tag_spin(e: Error, name: &str) -> Error {
    match e {
        Error::SpinTooLarge { spin, max } => {
            Error::InvalidParams(format!("{name} = {spin} exceeds the supported maximum {max}"))
        }
        other => other,
    }
}

/// Anything with an affine field dependence that the level/transition machinery can analyze.
pub trait FieldModel {
    fn dim(&self) -> usize;

    /// H(B) in MHz; must be Hermitian.
    fn hamiltonian(&self, field: FieldVec) -> HamMatrix;

    /// Exact ∂H/∂B_axis in MHz/T. Panics if `axis >= 3` (index error).
    fn field_derivative(&self, axis: usize) -> HamMatrix;
}

/// A bare affine model H(B) = H0 + Σ_k B_k H_k. Useful for reduced-dimension
/// toy systems (avoided crossings, single doublets) that don't come from
/// `SpinParams`.
#[derive(Clone, Debug)]
pub struct AffineModel {
    h0: HamMatrix,
    h_field: [HamMatrix; 3],
}

impl AffineModel {
    pub fn new(h0: HamMatrix, h_field: [HamMatrix; 3]) -> Result<Self> {
        let n = h0.nrows();
        if h0.ncols() != n || h_field.iter().any(|m| m.nrows() != n || m.ncols() != n) {
            return Err(Error::InvalidParams(
                "affine model blocks must be square with a common dimension".into(),
            ));
        }
        for m in std::iter::once(&h0).chain(h_field.iter()) {
            check_hermitian(m, 1e-9)?;
        }
        Ok(AffineModel { h0, h_field })
    }
}

impl FieldModel for AffineModel {
    fn dim(&self) -> usize {
        self.h0.nrows()
    }

    fn hamiltonian(&self, field: FieldVec) -> HamMatrix {
        let mut h = self.h0.clone();
        for k in 0..3 {
            h += &self.h_field[k] * Complex64::new(field[k], 0.0);
        }
        h
    }

    fn field_derivative(&self, axis: usize) -> HamMatrix {
        assert!(axis < 3, "field axis {axis} out of range 0..3");
        self.h_field[axis].clone()
    }
}

/// Precomputed operator representation of one `SpinParams` set.
///
/// Build it once per parameter set; `hamiltonian` is then a 16×16-class
/// matrix sum per field point with no re-assembly of spin operators.
#[derive(Clone, Debug)]
pub struct SpinSystem {
    params: SpinParams,
    dim: usize,
    h_static: HamMatrix,
    h_field: [HamMatrix; 3],
    /// −∂(magnetic moment)/∂... the full RF coupling μ_B g·S − μ_n g_n I per lab
    /// axis, MHz/T. Unlike `h_field` this always includes the nuclear part: an
    /// RF field couples to the nuclear moment even when the static nuclear
    /// Zeeman term is toggled off in the energies.
    moment: [HamMatrix; 3],
}

impl SpinSystem {
    #[allow(clippy::needless_range_loop)] // tensor indices (k, a) read as written
    pub fn new(params: &SpinParams) -> Result<Self> {
        params.validate()?;
        let s_ops = angular_momentum_ops(params.electron_spin);
        let i_ops = angular_momentum_ops(params.nuclear_spin);
        let dim_s = params.electron_spin.multiplicity();
        let dim_i = params.nuclear_spin.multiplicity();
        let dim = dim_s * dim_i;
        let id_s = DMatrix::<Complex64>::identity(dim_s, dim_s);

        // Hyperfine I·A·S: S_a and I_k act on different tensor factors, so the
        // product is a single Kronecker block — exact, no matrix products.
        let mut h_static = DMatrix::<Complex64>::zeros(dim, dim);
        for k in 0..3 {
            for a in 0..3 {
                let c = params.a_mhz[(k, a)];
                if c != 0.0 {
                    h_static += s_ops[a].kronecker(&i_ops[k]) * Complex64::new(c, 0.0);
                }
            }
        }

        // Quadrupole I·Q·I, symmetrized so Hermiticity survives floating point:
        // Σ Q_kl (I_k I_l + I_l I_k)/2 with Q symmetric equals Σ Q_kl I_k I_l.
        let mut quad = DMatrix::<Complex64>::zeros(dim_i, dim_i);
        for k in 0..3 {
            for l in 0..3 {
                let c = params.q_mhz[(k, l)];
                if c != 0.0 {
                    let sym = (&i_ops[k] * &i_ops[l] + &i_ops[l] * &i_ops[k])
                        * Complex64::new(0.5, 0.0);
                    quad += sym * Complex64::new(c, 0.0);
                }
            }
        }
        h_static += id_s.kronecker(&quad);

        // Zeeman derivatives per lab axis k: μ_B Σ_a g_ka S_a − μ_n g_n I_k.
        let mut h_field: [HamMatrix; 3] = std::array::from_fn(|_| DMatrix::zeros(dim, dim));
        let mut moment: [HamMatrix; 3] = std::array::from_fn(|_| DMatrix::zeros(dim, dim));
        let id_i = DMatrix::<Complex64>::identity(dim_i, dim_i);
        for k in 0..3 {
            let mut electron = DMatrix::<Complex64>::zeros(dim, dim);
            for a in 0..3 {
                let c = params.g[(k, a)];
                if c != 0.0 {
                    electron += s_ops[a].kronecker(&id_i) * Complex64::new(MU_B_MHZ_PER_T * c, 0.0);
                }
            }
            let nuclear =
                id_s.kronecker(&i_ops[k]) * Complex64::new(MU_N_MHZ_PER_T * params.nuclear_g, 0.0);
            moment[k] = &electron - &nuclear;
            h_field[k] = if params.nuclear_zeeman {
                moment[k].clone()
            } else {
                electron
            };
        }

        Ok(SpinSystem {
            params: params.clone(),
            dim,
            h_static,
            h_field,
            moment,
        })
    }

    pub fn params(&self) -> &SpinParams {
        &self.params
    }

    /// RF/microwave coupling operator n̂·(μ_B g·S − μ_n g_n I) in MHz/T for a
    /// drive field along `direction` (normalized internally).
    pub fn rf_operator(&self, direction: &Vector3<f64>) -> Result<HamMatrix> {
        let n = direction.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::InvalidInput(
                "RF direction must be a finite non-zero vector".into(),
            ));
        }
        let u = direction / n;
        let mut op = DMatrix::<Complex64>::zeros(self.dim, self.dim);
        for k in 0..3 {
            op += &self.moment[k] * Complex64::new(u[k], 0.0);
        }
        Ok(op)
    }
}

impl FieldModel for SpinSystem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn hamiltonian(&self, field: FieldVec) -> HamMatrix {
        let mut h = self.h_static.clone();
        for k in 0..3 {
            if field[k] != 0.0 {
                h += &self.h_field[k] * Complex64::new(field[k], 0.0);
            }
        }
        h
    }

    fn field_derivative(&self, axis: usize) -> HamMatrix {
        assert!(axis < 3, "field axis {axis} out of range 0..3");
        self.h_field[axis].clone()
    }
}

/// One-shot H(B) for `params`. For sweeps, build a [`SpinSystem`] once instead.
pub fn build_hamiltonian(params: &SpinParams, field: FieldVec) -> Result<HamMatrix> {
    Ok(SpinSystem::new(params)?.hamiltonian(field))
}

/// One-shot exact ∂H/∂B_axis for `params`.
pub fn field_derivative(params: &SpinParams, axis: usize) -> Result<HamMatrix> {
    Ok(SpinSystem::new(params)?.field_derivative(axis))
}

/// Largest entrywise deviation from Hermiticity, max |H − H†|, in MHz.
pub fn hermiticity_deviation(h: &HamMatrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..h.nrows() {
        for k in i..h.ncols() {
            let d = (h[(i, k)] - h[(k, i)].conj()).norm();
            worst = worst.max(d);
        }
    }
    worst
}

pub fn check_hermitian(h: &HamMatrix, tolerance: f64) -> Result<()> {
    let deviation = hermiticity_deviation(h);
    if deviation > tolerance {
        return Err(Error::NotHermitian {
            deviation,
            tolerance,
        });
    }
    Ok(())
}
