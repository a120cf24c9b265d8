use std::path::PathBuf;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch on axis {axis}: {left} vs {right}")]
    ShapeMismatch {
        axis: &'static str,
        left: usize,
        right: usize,
    },
    #[error("expected a rank-{expected} tensor, got shape {got:?}")]
    Rank { expected: usize, got: Vec<usize> },
    #[error("invalid shape {0:?}: extents must be positive and rank at most 4")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated input: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("tensor extents overflow: {0}")]
    ExtentOverflow(String),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("zero extent: {0}")]
    ZeroExtent(&'static str),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("odd extent on axis {axis}: {extent}")]
    OddExtent { axis: &'static str, extent: usize },
    #[error("spatial extent {extent} on axis {axis} is smaller than the kernel extent {kernel}")]
    KernelTooLarge {
        axis: &'static str,
        extent: usize,
        kernel: usize,
    },
    #[error("invalid depth {0}: must be in 1..=5")]
    InvalidDepth(usize),
    #[error("invalid widths: {0}")]
    InvalidWidths(String),
    #[error("extent {extent} on axis {axis} is not divisible by {factor}")]
    Divisibility {
        axis: &'static str,
        extent: usize,
        factor: usize,
    },
    #[error("circle of radius {radius} at {center:?} does not fit in a {height}x{width} image")]
    CircleOutsideImage {
        radius: usize,
        center: (usize, usize),
        height: usize,
        width: usize,
    },
    #[error("invalid dataset configuration: {0}")]
    DatasetConfig(String),
    #[error("unsupported image format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("image {image:?} and mask {mask:?} sizes differ")]
    ImageMaskMismatch {
        image: (usize, usize),
        mask: (usize, usize),
    },
    #[error("invalid mask value {value} for {task}")]
    InvalidMask { value: f64, task: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss became {value} at step {step} (epoch {epoch})")]
    NonFiniteLoss { step: usize, epoch: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("gradient check has no cases")]
    EmptyGradcheck,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Rank { .. } => "rank",
            Error::InvalidShape(_) => "invalid_shape",
            Error::DataLength { .. } => "data_length",
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated { .. } => "truncated",
            Error::ExtentOverflow(_) => "extent_overflow",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Header(_) => "header",
            Error::ZeroExtent(_) => "zero_extent",
            Error::ChannelMismatch { .. } => "channel_mismatch",
            Error::OddExtent { .. } => "odd_extent",
            Error::KernelTooLarge { .. } => "kernel_too_large",
            Error::InvalidDepth(_) => "invalid_depth",
            Error::InvalidWidths(_) => "invalid_widths",
            Error::Divisibility { .. } => "divisibility",
            Error::CircleOutsideImage { .. } => "circle_outside_image",
            Error::DatasetConfig(_) => "dataset_config",
            Error::UnsupportedFormat { .. } => "unsupported_format",
            Error::ImageMaskMismatch { .. } => "image_mask_mismatch",
            Error::InvalidMask { .. } => "invalid_mask",
            Error::EmptyDataset => "empty_dataset",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Config(_) => "config",
            Error::EmptyGradcheck => "empty_gradcheck",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
