//! Error type shared by every stage of the simulator.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid array geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("absorption spectrum line {line}: {message}")]
    AbsorptionSpectrum { line: usize, message: String },

    #[error("ray list must contain exactly one LOS ray, found {found}")]
    LosRayCount { found: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("codebook is empty")]
    EmptyCodebook,

    #[error("channel matrix is identically zero")]
    ZeroChannel,

    #[error(
        "H H^H is singular on subcarrier {subcarrier} ({frequency_hz:e} Hz): \
         reciprocal condition number {rcond:e}"
    )]
    SingularChannel {
        subcarrier: usize,
        frequency_hz: f64,
        rcond: f64,
    },

    #[error("subarray {index} is not driven by the precoder (zero row)")]
    UndrivenSubarray { index: usize },

    #[error("normalized correlation {value} at ({row}, {col}) exceeds unit magnitude")]
    CorrelationOutOfRange { row: usize, col: usize, value: f64 },

    #[error("distortion power for user {user} is negative ({value:e})")]
    NegativeDistortion { user: u32, value: f64 },

    #[error("quadratic form has imaginary residue {residue:e} (relative) for user {user}")]
    ImaginaryResidue { user: u32, residue: f64 },

    #[error("asymptotic distortion term for user {user} is not positive ({value:e})")]
    NonPositiveDistortionTerm { user: u32, value: f64 },

    #[error("rate reports overlap on user {user}, subcarrier {subcarrier}")]
    DuplicateReport { user: u32, subcarrier: usize },

    #[error("overlapping subarray allocation: {0}")]
    OverlappingAllocation(String),

    #[error("scenario {path}: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),

    #[error("sweep point {axis} = {value}: {source}")]
    Sweep {
        axis: &'static str,
        value: f64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
