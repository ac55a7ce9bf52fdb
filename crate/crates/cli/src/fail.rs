//! Exit codes and the machine-readable error line.
//!
//! Every failure leaves through [`Failure::report_and_exit`], which prints a
//! single JSON object to stderr (`{"error": kind, "exit": code, "message":
//! text}`) so batch drivers can classify failures without scraping prose.
//! Code 2 (bad flags, unknown command) is produced by the argument parser
//! itself and never reaches this type.

use std::path::Path;

/// Flag/usage errors (emitted by clap, listed here for documentation).
pub const EXIT_USAGE: i32 = 2;
/// A file could not be read or written.
pub const EXIT_IO: i32 = 3;
/// Inputs were readable but failed parsing or validation.
pub const EXIT_VALIDATION: i32 = 4;
/// The computation itself failed (lost tracking, singular fit, ...).
pub const EXIT_COMPUTE: i32 = 5;

#[derive(Debug)]
pub struct Failure {
    pub exit: i32,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn io(path: &Path, err: std::io::Error) -> Failure {
        Failure {
            exit: EXIT_IO,
            kind: "io",
            message: format!("{}: {err}", path.display()),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Failure {
        Failure {
            exit: EXIT_VALIDATION,
            kind: "invalid-input",
            message: message.into(),
        }
    }

    pub fn report_and_exit(self) -> ! {
        eprintln!(
            "{}",
            serde_json::json!({
                "error": self.kind,
                "exit": self.exit,
                "message": self.message,
            })
        );
        std::process::exit(self.exit)
    }
}

impl From<kramers::Error> for Failure {
    fn from(err: kramers::Error) -> Failure {
        use kramers::Error as E;
        let (exit, kind) = match &err {
            E::Io { .. } => (EXIT_IO, "io"),
            E::InvalidSpin(_) => (EXIT_VALIDATION, "invalid-spin"),
            E::SpinTooLarge { .. } => (EXIT_VALIDATION, "spin-too-large"),
            E::InvalidParams(_) => (EXIT_VALIDATION, "invalid-params"),
            E::ParamFile { .. } => (EXIT_VALIDATION, "param-file"),
            E::GridFormat { .. } => (EXIT_VALIDATION, "grid-format"),
            E::SweepNotColinear { .. } => (EXIT_VALIDATION, "sweep-not-colinear"),
            E::Undersampled { .. } => (EXIT_VALIDATION, "undersampled"),
            E::InvalidSequence(_) => (EXIT_VALIDATION, "invalid-sequence"),
            E::InsufficientData { .. } => (EXIT_VALIDATION, "insufficient-data"),
            E::NonPositiveIntensity { .. } => (EXIT_VALIDATION, "non-positive-intensity"),
            E::Underdetermined { .. } => (EXIT_VALIDATION, "underdetermined"),
            E::InvalidInput(_) => (EXIT_VALIDATION, "invalid-input"),
            // Readable, valid inputs on which the numerics still gave up.
            E::NotHermitian { .. } => (EXIT_COMPUTE, "not-hermitian"),
            E::TrackingLost { .. } => (EXIT_COMPUTE, "tracking-lost"),
            E::DisjointGrids { .. } => (EXIT_COMPUTE, "disjoint-grids"),
            E::SingularFit(_) => (EXIT_COMPUTE, "singular-fit"),
        };
        Failure {
            exit,
            kind,
            message: err.to_string(),
        }
    }
}
