use std::path::PathBuf;

/// Errors produced anywhere in the avatar pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("mask row {row} has no unmasked entry")]
    FullyMaskedRow { row: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("degenerate triangle at face {face} (doubled area {area:e})")]
    DegenerateFace { face: usize, area: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no valid patch anchor under the alpha mask")]
    NoPatchAnchor,

    #[error("render state missing: backward needs the forward contributor lists")]
    MissingRenderState,

    #[error("format error in {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
