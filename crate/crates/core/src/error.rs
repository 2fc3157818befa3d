use std::fmt;

/// Errors surfaced by the tensor stack, the detection world, and file I/O.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    ShapeMismatch(String),
    /// Input is outside the mathematical domain of the operation
    /// (sqrt of a negative, division by zero, log of a non-positive, ...).
    DomainError(String),
    /// An axis index is out of range or an axis set is empty/duplicated.
    InvalidAxis(String),
    /// `backward` was called on a tensor that is not a scalar.
    NotScalar,
    /// The tensor carries no tape node (it was never recorded or was detached).
    DetachedTensor,
    /// A tensor recorded on one tape was used with a different tape.
    TapeMismatch,
    /// A mask region contains no active cells.
    EmptyRegion,
    /// A proposal box lies outside its feature map.
    BoxOutOfBounds(String),
    /// Spatial dims are not divisible by the requested patch size.
    IndivisibleShape(String),
    /// Too few samples to compute batch statistics.
    DegenerateBatch(String),
    /// A bounding box violates x_min < x_max, y_min < y_max.
    InvalidBox(String),
    /// No anchors were sampled for a classification/regression loss.
    NoSampledAnchors,
    /// A loss component is NaN or infinite.
    NonFiniteComponent(String),
    /// AP requested for a class with no ground-truth instances.
    NoGroundTruth,
    /// Run configuration failed validation.
    ConfigError(String),
    /// Checkpoint contents do not match the expected format or shapes.
    CheckpointMismatch(String),
    /// A finite-difference suite found a gradient violation.
    GradCheckFailure(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            Error::DomainError(m) => write!(f, "domain error: {m}"),
            Error::InvalidAxis(m) => write!(f, "invalid axis: {m}"),
            Error::NotScalar => write!(f, "backward requires a scalar loss"),
            Error::DetachedTensor => write!(f, "tensor is not recorded on a tape"),
            Error::TapeMismatch => write!(f, "tensor belongs to a different tape"),
            Error::EmptyRegion => write!(f, "mask region has no active cells"),
            Error::BoxOutOfBounds(m) => write!(f, "box out of bounds: {m}"),
            Error::IndivisibleShape(m) => write!(f, "indivisible shape: {m}"),
            Error::DegenerateBatch(m) => write!(f, "degenerate batch: {m}"),
            Error::InvalidBox(m) => write!(f, "invalid box: {m}"),
            Error::NoSampledAnchors => write!(f, "no sampled anchors"),
            Error::NonFiniteComponent(m) => write!(f, "non-finite loss component: {m}"),
            Error::NoGroundTruth => write!(f, "no ground truth for class"),
            Error::ConfigError(m) => write!(f, "config error: {m}"),
            Error::CheckpointMismatch(m) => write!(f, "checkpoint mismatch: {m}"),
            Error::GradCheckFailure(m) => write!(f, "gradient check failure: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
