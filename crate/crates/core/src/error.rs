use std::fmt;

/// Crate-wide error type. Numerical code returns these instead of panicking
/// so callers (training loops in particular) can abort cleanly.
#[derive(Debug)]
pub enum CoreError {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Data length does not match the product of the shape dimensions.
    DataLength {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// Input outside the mathematical domain of the operation (log/sqrt of a
    /// non-positive value, reciprocal of zero).
    Domain { op: &'static str },
    /// A NaN or infinity was produced or fed in. Stored tensors are always
    /// finite, so this is the first line of defence against divergence.
    NonFinite { op: &'static str },
    /// `backward` was called on a tensor that is not a single scalar.
    NonScalarRoot { shape: Vec<usize> },
    /// |1 + u^T phi(z) w| fell below the invertibility threshold.
    SingularFlow { min_abs: f64 },
    /// The flow direction `w` has (numerically) zero norm, so the
    /// invertibility projection is undefined.
    DegenerateDirection { norm: f64 },
    /// A cluster set must contain at least one center.
    EmptyClusters,
    /// Two cluster centers coincide, which would make the nearest-center
    /// assignment ambiguous under perturbation.
    DuplicateCenters { a: usize, b: usize },
    /// k-means was asked for more clusters than there are points.
    TooFewPoints { points: usize, clusters: usize },
    /// The unbiased MMD estimator needs at least two samples per side.
    TooFewSamples { n: usize },
    /// The mutual-information estimator needs a minimum sample count to keep
    /// its variance meaningful.
    TooFewMcSamples { m: usize, min: usize },
    /// A token id outside the embedding table / vocabulary.
    VocabOutOfRange { id: usize, size: usize },
    /// An operation that needs data got an empty corpus or batch.
    EmptyInput { what: &'static str },
    /// Malformed on-disk artifact (vocab file, cluster file, ...).
    Parse { what: String },
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            CoreError::DataLength { op, expected, got } => {
                write!(f, "{op}: expected {expected} scalars, got {got}")
            }
            CoreError::Domain { op } => write!(f, "{op}: input outside domain"),
            CoreError::NonFinite { op } => write!(f, "{op}: non-finite value"),
            CoreError::NonScalarRoot { shape } => {
                write!(f, "backward: root must be a scalar, got shape {shape:?}")
            }
            CoreError::SingularFlow { min_abs } => write!(
                f,
                "planar flow is numerically singular: |1 + u^T phi w| = {min_abs:e}"
            ),
            CoreError::DegenerateDirection { norm } => write!(
                f,
                "planar flow direction w has norm {norm:e}; projection undefined"
            ),
            CoreError::EmptyClusters => write!(f, "cluster set is empty"),
            CoreError::DuplicateCenters { a, b } => {
                write!(f, "cluster centers {a} and {b} are identical")
            }
            CoreError::TooFewPoints { points, clusters } => {
                write!(f, "k-means needs at least {clusters} points, got {points}")
            }
            CoreError::TooFewSamples { n } => {
                write!(f, "unbiased MMD needs at least 2 samples per set, got {n}")
            }
            CoreError::TooFewMcSamples { m, min } => {
                write!(f, "estimator needs at least {min} Monte Carlo samples, got {m}")
            }
            CoreError::VocabOutOfRange { id, size } => {
                write!(f, "token id {id} out of range for table of size {size}")
            }
            CoreError::EmptyInput { what } => write!(f, "{what} is empty"),
            CoreError::Parse { what } => write!(f, "parse error: {what}"),
            CoreError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CoreError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CoreError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> Self {
        CoreError::Io(e)
    }
}
