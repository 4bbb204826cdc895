use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Pipeline stage an adapter failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TextEncoding,
    IdEncoding,
    ImageEncoding,
    Inversion,
    InitialImage,
    Depth,
    SpatialControl,
    Denoising,
    Decoding,
    Detection,
    Embedding,
    Scoring,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::TextEncoding => "text-encoding",
            Stage::IdEncoding => "id-encoding",
            Stage::ImageEncoding => "image-encoding",
            Stage::Inversion => "inversion",
            Stage::InitialImage => "initial-image",
            Stage::Depth => "depth",
            Stage::SpatialControl => "spatial-control",
            Stage::Denoising => "denoising",
            Stage::Decoding => "decoding",
            Stage::Detection => "detection",
            Stage::Embedding => "embedding",
            Stage::Scoring => "scoring",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands have incompatible shapes.
    Shape {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Shape extents do not describe the supplied buffer.
    InvalidShape { shape: Vec<usize>, len: usize },
    NonFinite { index: usize },
    /// Every key of a query row was excluded by the bias.
    FullyMasked { query: usize },
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    Config(String),
    Validation(String),
    Adapter {
        stage: Stage,
        step: Option<usize>,
        identity: Option<usize>,
        message: String,
    },
}

impl Error {
    pub fn shape(context: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            context,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn adapter(stage: Stage, message: impl Into<String>) -> Self {
        Error::Adapter {
            stage,
            step: None,
            identity: None,
            message: message.into(),
        }
    }

    /// Attributes this error to a stage, keeping any context already attached.
    pub fn in_stage(self, stage: Stage, step: Option<usize>, identity: Option<usize>) -> Self {
        match self {
            Error::Adapter {
                stage: s,
                step: st,
                identity: id,
                message,
            } => Error::Adapter {
                stage: s,
                step: st.or(step),
                identity: id.or(identity),
                message,
            },
            other => Error::Adapter {
                stage,
                step,
                identity,
                message: other.to_string(),
            },
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape {
                context,
                left,
                right,
            } => write!(f, "{context}: shape mismatch {left:?} vs {right:?}"),
            Error::InvalidShape { shape, len } => {
                write!(f, "shape {shape:?} does not describe {len} elements")
            }
            Error::NonFinite { index } => write!(f, "non-finite value at flat index {index}"),
            Error::FullyMasked { query } => {
                write!(f, "query {query} has every key excluded by the attention bias")
            }
            Error::OutOfRange { what, index, bound } => {
                write!(f, "{what} {index} out of range (bound {bound})")
            }
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::Adapter {
                stage,
                step,
                identity,
                message,
            } => {
                write!(f, "{stage} adapter failed")?;
                if let Some(s) = step {
                    write!(f, " at step {s}")?;
                }
                if let Some(i) = identity {
                    write!(f, " for identity {i}")?;
                }
                write!(f, ": {message}")
            }
        }
    }
}

impl core::error::Error for Error {}
