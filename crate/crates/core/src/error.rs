use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular basis at batch index {index}")]
    SingularBasis { index: usize },

    #[error("clip too small: {height}x{width} frames need at least {kernel}x{kernel} for the aggregation kernel")]
    ClipTooSmall {
        height: usize,
        width: usize,
        kernel: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("objective not finite")]
    ObjectiveNotFinite,

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("basis initialization stayed rank deficient after {attempts} attempts")]
    RankDeficientInit { attempts: usize },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated input: {0}")]
    Truncated(&'static str),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("frame error: {0}")]
    Frames(String),

    #[error("inconsistent frame size: {0}")]
    InconsistentFrameSize(String),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
