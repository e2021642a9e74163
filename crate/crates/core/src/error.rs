use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown slide format: {0}")]
    UnknownFormat(String),
    #[error("corrupt slide metadata: {0}")]
    CorruptMetadata(String),
    #[error("region ({x}, {y}, {w}x{h}) out of bounds for {width}x{height} raster")]
    OutOfBounds {
        x: i64,
        y: i64,
        w: u64,
        h: u64,
        width: u64,
        height: u64,
    },
    #[error("decode error: {0}")]
    Decode(String),
    #[error("crop of {size} px does not fit a {width}x{height} image")]
    CropTooLarge { size: u32, width: u32, height: u32 },
    #[error("expected {expected} channels, got {actual}")]
    ChannelMismatch { expected: u8, actual: u8 },
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("no tissue found")]
    NoTissue,
    #[error("only {accepted} of {requested} patches accepted after {attempts} draws")]
    InsufficientTissue {
        requested: usize,
        accepted: usize,
        attempts: usize,
    },
    #[error("tumor slide {0} has no annotation")]
    MissingAnnotation(String),
    #[error("illegal mask label {0}")]
    IllegalLabel(u8),
    #[error("organ {organ} has {available} slides, {requested} requested")]
    InsufficientSlides {
        organ: String,
        requested: usize,
        available: usize,
    },
    #[error("slide {slide_id} has {available} patches, {requested} requested")]
    InsufficientPatches {
        slide_id: String,
        requested: usize,
        available: usize,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("slide {0} has no ISUP grade")]
    MissingGrade(String),
    #[error("slide {0} has no origin tag")]
    MissingOrigin(String),
    #[error("record is missing a class label")]
    Unlabeled,
    #[error("accumulator is empty")]
    EmptyAccumulator,
    #[error("configuration conflict: {0}")]
    ConfigConflict(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{input} px is not divisible by patch size {patch} px")]
    NotDivisible { input: u32, patch: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("layer {layer} out of range 1..={depth}")]
    OutOfRange { layer: u32, depth: u32 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("unknown preset {0}")]
    UnknownPreset(String),
    #[error("unknown class {0}")]
    UnknownClass(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("slide {slide_id}: {source}")]
    Slide {
        slide_id: String,
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

    pub(crate) fn in_slide(self, slide_id: &str) -> Self {
        match self {
            e @ Error::Slide { .. } => e,
            e => Error::Slide {
                slide_id: slide_id.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// True for failures caused by the filesystem or undecodable files.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Decode(_) => true,
            Error::Slide { source, .. } => source.is_io(),
            _ => false,
        }
    }
}
