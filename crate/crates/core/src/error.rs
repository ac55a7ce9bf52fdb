use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the crate, with enough context to act on.
#[derive(Debug, Error)]
pub enum Error {
    #[error("spin {0} is not a non-negative integer multiple of 1/2")]
    InvalidSpin(f64),

    #[error("spin {spin} exceeds the supported maximum {max}; larger spins need a dense-solver review first")]
    SpinTooLarge { spin: f64, max: f64 },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("matrix not Hermitian: max |H - H^†| = {deviation:.3e} MHz exceeds tolerance {tolerance:.1e} MHz")]
    NotHermitian { deviation: f64, tolerance: f64 },

    #[error("{path}:{line}: {message}")]
    ParamFile {
        path: String,
        line: usize,
        message: String,
    },

    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("grid file {path}: {message}")]
    GridFormat { path: String, message: String },

    #[error("field sweep is not colinear: step {index} is {deviation:.3e} T off the common axis")]
    SweepNotColinear { index: usize, deviation: f64 },

    #[error("maps share no usable {axis} range")]
    DisjointGrids { axis: &'static str },

    #[error("level tracking lost at step {step}: best eigenvector overlap {overlap:.3}; {advice}")]
    TrackingLost {
        step: usize,
        overlap: f64,
        advice: String,
    },

    #[error(
        "sample rate {given_mhz} MHz undersamples detunings up to {max_detuning_mhz} MHz; \
         use at least {required_mhz} MHz"
    )]
    Undersampled {
        given_mhz: f64,
        max_detuning_mhz: f64,
        required_mhz: f64,
    },

    #[error("invalid pulse sequence: {0}")]
    InvalidSequence(String),

    #[error("need at least {needed} data points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("log-domain fit needs positive intensities: point {index} has value {value}")]
    NonPositiveIntensity { index: usize, value: f64 },

    #[error("fit is underdetermined: {points} data points for {dof} free parameters ({names})")]
    Underdetermined {
        points: usize,
        dof: usize,
        names: String,
    },

    #[error("singular fit design: {0}")]
    SingularFit(String),

    #[error("{0}")]
    InvalidInput(String),
}
