use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape { expected: Vec<usize>, found: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("split has {available} classes, need {needed}")]
    NotEnoughClasses { available: usize, needed: usize },

    #[error("class {class} has {available} images, need {needed}")]
    NotEnoughImages { class: usize, available: usize, needed: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("loss became non-finite at step {step}: {value}")]
    NonFinite { step: u64, value: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
