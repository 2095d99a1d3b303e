use crate::tensor::Dims;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch { op: &'static str, left: Dims, right: Dims },

    #[error("{op}: {what} has {got} channels, expected {expected}")]
    ChannelMismatch { op: &'static str, what: &'static str, got: usize, expected: usize },

    #[error("{op}: {channels} channels not divisible by {divisor} {unit}")]
    Divisibility { op: &'static str, channels: usize, divisor: usize, unit: &'static str },

    #[error("{op}: spatial dims ({d}, {h}, {w}) must each be divisible by {required}")]
    SpatialDivisibility { op: &'static str, d: usize, h: usize, w: usize, required: usize },

    #[error("{op}: kernel {k} with stride {stride}, padding {padding} does not fit input {dims}")]
    KernelFit { op: &'static str, k: usize, stride: usize, padding: usize, dims: Dims },

    #[error("dims {dims} hold {expected} values but buffer has {got}")]
    DataLength { dims: Dims, expected: usize, got: usize },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be scalar, got {dims}")]
    LossNotScalar { dims: Dims },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("{context}: bad file format: {detail}")]
    Format { context: &'static str, detail: String },

    #[error("training diverged at step {step} (loss not finite)")]
    Diverged { step: usize },

    #[error("{0}")]
    Msg(String),
}

impl Error {
    pub fn msg(s: impl Into<String>) -> Self {
        Error::Msg(s.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
