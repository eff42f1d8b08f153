use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the tensor engine, the gated modules and the trainers.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Two operands of `op` have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Data length does not match the product of the shape.
    DataLength { expected: usize, got: usize },
    /// `backward` was called on a non-scalar value.
    NonScalarLoss { shape: Vec<usize> },
    /// A gradient or value contained NaN/Inf.
    NonFinite { what: String },
    /// A gate vector activates fewer components than the module requires.
    TooFewActive {
        module: usize,
        active: usize,
        min_active: usize,
    },
    /// Gate vectors do not line up with the network's gated modules.
    GateMismatch { module: usize, expected: usize, got: usize },
    /// Sliced execution requires a nested (prefix) gate pattern.
    NotNested { module: usize },
    /// Training diverged (loss became NaN or infinite).
    Diverged { epoch: usize },
    /// A configuration value is out of range.
    InvalidConfig(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Error::DataLength { expected, got } => {
                write!(f, "data length mismatch: expected {expected}, got {got}")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Error::TooFewActive {
                module,
                active,
                min_active,
            } => write!(
                f,
                "module {module}: {active} active components, at least {min_active} required"
            ),
            Error::GateMismatch { module, expected, got } => write!(
                f,
                "module {module}: gate vector has {got} entries, module has {expected} components"
            ),
            Error::NotNested { module } => {
                write!(f, "module {module}: sliced execution needs a nested gate pattern")
            }
            Error::Diverged { epoch } => write!(f, "training diverged in epoch {epoch}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

impl std::error::Error for Error {}
