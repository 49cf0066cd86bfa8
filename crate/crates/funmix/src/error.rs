use thiserror::Error;

/// Crate-wide error type.
///
/// Variants distinguish caller mistakes (dimensions, domains, parameter
/// ranges, malformed input files) from genuine numerical failures so that
/// front ends can map them to different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// A dimension argument is out of range or two arguments disagree in shape.
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    /// An evaluation point lies outside the supported domain.
    #[error("point {point} outside domain [{lo}, {hi}]")]
    Domain { point: f64, lo: f64, hi: f64 },

    /// A scalar parameter violates its documented range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input data are structurally inconsistent (grids, headers, shapes).
    #[error("invalid data: {0}")]
    Data(String),

    /// Reading or writing a dataset / result file failed.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A numerical operation failed (non-finite values, indefinite systems).
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// The ECM iteration produced a non-finite objective; the payload records
    /// where it happened so the caller can report a useful diagnostic.
    #[error("non-finite log posterior at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    /// Every tuning grid point failed; per-point diagnostics are listed.
    #[error("all {count} tuning fits failed:\n{diagnostics}")]
    TuningFailed { count: usize, diagnostics: String },
}

pub type Result<T> = std::result::Result<T, Error>;
