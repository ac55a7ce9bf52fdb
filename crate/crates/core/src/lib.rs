//! Hyperfine structure of Kramers rare-earth ions in low magnetic fields.
//!
//! The crate models an effective electron spin coupled to a nuclear spin
//! (S = 1/2, I = 7/2 for the motivating erbium system, but any half-integer
//! pair works) and builds everything an RF/microwave spectroscopy workflow
//! needs on top of that: energy levels and adiabatic tracking across field
//! sweeps, transition strengths and frequency gradients/curvatures,
//! zero-first-order-Zeeman (ZEFOZ) point search, synthesized spectrum maps,
//! spin-echo pulse sequences, and least-squares fits of decay times and
//! spin-Hamiltonian parameters.
//!
//! Units are MHz for energies and frequencies, tesla for magnetic fields,
//! and microseconds for times unless a name says otherwise. Field vectors
//! live in the right-handed optical frame (D1, D2, b).

pub mod dynamics;
pub mod error;
pub mod fitting;
pub mod levels;
pub mod params_file;
pub mod spectrum;
pub mod spin;
pub mod transitions;
pub mod zefoz;

pub use error::{Error, Result};
pub use spin::{FieldModel, FieldVec, HalfSpin, HamMatrix, SpinParams, SpinSystem};
