use thiserror::Error;

/// Errors raised by the quantization toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate quantizer bounds: lower={lower}, upper={upper}")]
    DegenerateBounds { lower: f32, upper: f32 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("code {code} does not fit in {bits} bits")]
    CodeOutOfRange { code: u32, bits: u8 },

    #[error("feature tap {0} has zero norm")]
    DegenerateFeature(usize),

    #[error("no quantizer state for site `{0}`")]
    MissingQuantizer(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Numeric failures (NaN/Inf, collapsed features) as opposed to bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::DegenerateFeature(_))
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
