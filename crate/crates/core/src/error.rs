//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {reason}")]
    ImageFormat { path: PathBuf, reason: String },

    #[error("frame {path} is not 8-bit grayscale")]
    NonGrayscale { path: PathBuf },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("malformed ground-truth file: {0}")]
    GroundTruth(String),

    #[error("ground-truth box (frame {frame}, id {id}) lies outside the image bounds")]
    GtBoxOutOfBounds { frame: usize, id: i64 },

    #[error("duplicate ground-truth box for (frame {frame}, id {id})")]
    DuplicateGtBox { frame: usize, id: i64 },

    #[error("track file line {line}: {reason}")]
    TrackRow { line: usize, reason: String },

    #[error(
        "dimension mismatch: {context} (expected {expected_w}x{expected_h}, got {got_w}x{got_h})"
    )]
    DimensionMismatch {
        context: String,
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("image must be non-empty")]
    ZeroSizedImage,

    #[error("sequence contains no frames")]
    EmptySequence,

    #[error("track contains no points")]
    EmptyTrack,

    #[error("hole mask covers the entire image; no boundary data to inpaint from")]
    HoleCoversImage,

    #[error("frame index {index} out of range for {context} (sequence length {len})")]
    FrameIndexOutOfRange {
        index: usize,
        len: usize,
        context: &'static str,
    },

    #[error("target {target_id} leaves the fan field of view at frame {frame}")]
    TargetLeavesFov { target_id: i64, frame: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid_param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name,
            reason: reason.into(),
        }
    }

    pub fn dimension_mismatch(
        context: impl Into<String>,
        expected: (usize, usize),
        got: (usize, usize),
    ) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected_w: expected.0,
            expected_h: expected.1,
            got_w: got.0,
            got_h: got.1,
        }
    }

    /// True for failures caused by the filesystem rather than the data or parameters.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
