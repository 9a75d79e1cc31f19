//! Error type shared across the crate.

use std::fmt;

/// Errors produced by matrix kernels, the autodiff engine, preconditioner
/// updates, and the optimizer loops.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Data length does not match the declared dimensions.
    InvalidData { expected: usize, got: usize },
    /// A constructor was handed a NaN or infinite entry.
    NonFinite { context: &'static str },
    /// Shapes are incompatible for the requested operation.
    ShapeMismatch { context: String },
    /// Triangular solve hit a zero diagonal entry.
    SingularDiagonal { row: usize },
    /// The matrix is not symmetric within the admitted tolerance.
    NotSymmetric { max_asymmetry: f64 },
    /// An eigenvalue is outside the operation's domain.
    NotPositiveDefinite { eigenvalue: f64 },
    /// A scalar argument is outside its admitted range.
    OutOfRange { what: &'static str, value: f64 },
    /// A group factor has a zero diagonal entry and cannot be inverted.
    SingularFactor { row: usize },
    /// Densification was requested above the configured dimension cap.
    DimensionCap { dim: usize, cap: usize },
    /// The requested group kind is not admitted (e.g. nested Kronecker).
    InvalidGroup { reason: String },
    /// The tape's output node is not a scalar.
    NonScalarOutput { rows: usize, cols: usize },
    /// A non-finite loss, gradient, or Hessian-vector product aborted a run.
    NonFiniteAbort { iteration: u64, what: &'static str },
    /// A checkpoint or serialized factor could not be parsed.
    Parse { line: usize, message: String },
    /// A key-value document is missing a required key.
    MissingKey { key: String },
    /// A configuration field failed validation.
    BadConfig { field: &'static str, message: String },
    /// An I/O error, carried as text so the error type stays comparable.
    Io { message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidData { expected, got } => {
                write!(f, "data length mismatch: expected {expected}, got {got}")
            }
            Error::NonFinite { context } => write!(f, "non-finite entry in {context}"),
            Error::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            Error::SingularDiagonal { row } => {
                write!(f, "singular triangular matrix: zero diagonal at row {row}")
            }
            Error::NotSymmetric { max_asymmetry } => {
                write!(f, "matrix is not symmetric (relative asymmetry {max_asymmetry:.3e})")
            }
            Error::NotPositiveDefinite { eigenvalue } => {
                write!(f, "matrix is not positive definite (eigenvalue {eigenvalue:.3e})")
            }
            Error::OutOfRange { what, value } => write!(f, "{what} out of range: {value}"),
            Error::SingularFactor { row } => {
                write!(f, "singular group factor: zero diagonal at row {row}")
            }
            Error::DimensionCap { dim, cap } => {
                write!(f, "dimension {dim} exceeds densification cap {cap}")
            }
            Error::InvalidGroup { reason } => write!(f, "invalid group: {reason}"),
            Error::NonScalarOutput { rows, cols } => {
                write!(f, "tape output must be a 1x1 scalar, got {rows}x{cols}")
            }
            Error::NonFiniteAbort { iteration, what } => {
                write!(f, "non-finite {what} at iteration {iteration}; run aborted")
            }
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::MissingKey { key } => write!(f, "missing key: {key}"),
            Error::BadConfig { field, message } => write!(f, "bad config field {field}: {message}"),
            Error::Io { message } => write!(f, "io error: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io { message: e.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
