use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("{0} is outside the valid domain")]
    OutOfDomain(String),

    #[error("no foreground pixels")]
    NoForeground,

    #[error("no diffuse pixels available")]
    NoDiffusePixels,

    #[error("guide depth has no valid anchor pixels")]
    NoAnchors,

    #[error("{} isolated pixel(s) have no neighbour along an axis: {}", .0.len(), format_pixels(.0))]
    IsolatedPixels(Vec<(usize, usize)>),

    #[error("valid masks do not overlap")]
    EmptyOverlap,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

fn format_pixels(pixels: &[(usize, usize)]) -> String {
    const SHOWN: usize = 8;
    let mut out = pixels
        .iter()
        .take(SHOWN)
        .map(|(x, y)| format!("({x},{y})"))
        .collect::<Vec<_>>()
        .join(", ");
    if pixels.len() > SHOWN {
        out.push_str(", ...");
    }
    out
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
