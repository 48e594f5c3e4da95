use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} must be strictly positive, got {value}")]
    ZeroOrNegativeInput { what: &'static str, value: f64 },
    #[error("TR {tr_ms} ms exceeds the frame budget of {t_acq_ms} ms (fewer than one interleave)")]
    ResultBelowOne { t_acq_ms: f64, tr_ms: f64 },
    #[error("{field} = {value} is outside [{min}, {max}]")]
    OutOfBounds {
        field: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("normalized radius {0} is outside [0, 1]")]
    RadiusOutOfRange(f64),
    #[error("readout needs k-space speed {required:.4} but the gradient system allows {max:.4} (normalized units per ms)")]
    InfeasibleReadout { required: f64, max: f64 },
    #[error("degenerate density design: {0}")]
    DegenerateDensity(String),
    #[error("k-space coordinate {index} = ({kx}, {ky}) is outside [-0.5, 0.5]")]
    CoordOutOfRange { index: usize, kx: f64, ky: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("split '{0}' is empty")]
    EmptySplit(&'static str),
    #[error("reference image has zero norm")]
    ZeroReference,
    #[error("reference image has zero Laplacian energy")]
    ZeroReferenceEnergy,
    #[error("image {h}x{w} is smaller than the {window}x{window} SSIM window")]
    ImageSmallerThanWindow { h: usize, w: usize, window: usize },
    #[error("denoiser window must hold 5 frames, got {0}")]
    BadWindowLength(usize),
    #[error("image dimensions {h}x{w} must be divisible by 4")]
    IndivisibleDims { h: usize, w: usize },
    #[error("series has {0} frames, need at least 5")]
    SeriesTooShort(usize),
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("no feasible configuration after {0} draws")]
    ExhaustedRetries(usize),
    #[error("trial evaluation failed: {0}")]
    EvaluatorFailure(String),
    #[error("source produced no frame within {timeout_ms} ms")]
    SourceStall { timeout_ms: u64 },
    #[error("{stage} stage failed on frame {frame}: {message}")]
    StageError {
        stage: &'static str,
        frame: usize,
        message: String,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable identifier, printed by the command line tool.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ZeroOrNegativeInput { .. } => "ZERO_OR_NEGATIVE_INPUT",
            Error::ResultBelowOne { .. } => "RESULT_BELOW_ONE",
            Error::OutOfBounds { .. } => "OUT_OF_BOUNDS",
            Error::RadiusOutOfRange(_) => "RADIUS_OUT_OF_RANGE",
            Error::InfeasibleReadout { .. } => "INFEASIBLE_READOUT",
            Error::DegenerateDensity(_) => "DEGENERATE_DENSITY",
            Error::CoordOutOfRange { .. } => "COORD_OUT_OF_RANGE",
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::InvalidDims(_) => "INVALID_DIMS",
            Error::EmptySplit(_) => "EMPTY_SPLIT",
            Error::ZeroReference => "ZERO_REFERENCE",
            Error::ZeroReferenceEnergy => "ZERO_REFERENCE_ENERGY",
            Error::ImageSmallerThanWindow { .. } => "IMAGE_SMALLER_THAN_WINDOW",
            Error::BadWindowLength(_) => "BAD_WINDOW_LENGTH",
            Error::IndivisibleDims { .. } => "INDIVISIBLE_DIMS",
            Error::SeriesTooShort(_) => "SERIES_TOO_SHORT",
            Error::NonFiniteLoss { .. } => "NON_FINITE_LOSS",
            Error::ExhaustedRetries(_) => "EXHAUSTED_RETRIES",
            Error::EvaluatorFailure(_) => "EVALUATOR_FAILURE",
            Error::SourceStall { .. } => "SOURCE_STALL",
            Error::StageError { .. } => "STAGE_ERROR",
            Error::Format(_) => "FORMAT",
            Error::Config(_) => "CONFIG",
            Error::Io(_) => "IO",
            Error::Json(_) => "JSON",
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }

    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::OutOfBounds { .. }
                | Error::Config(_)
                | Error::ZeroOrNegativeInput { .. }
                | Error::ResultBelowOne { .. }
                | Error::DegenerateDensity(_)
                | Error::InfeasibleReadout { .. }
        )
    }
}
