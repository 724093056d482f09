use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Each variant maps to exactly one stable machine code via [`Error::code`];
/// the gateway forwards that code verbatim to HTTP and CLI clients.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("image error: {0}")]
    Image(String),

    #[error("degenerate path: {0}")]
    DegeneratePath(String),
    #[error("no overlap: closest candidate is {closest_m:.3} m away")]
    NoOverlap { closest_m: f64 },

    #[error("panorama must be 2:1, got {width}x{height}")]
    BadAspect { width: u32, height: u32 },
    #[error("pitch {pitch_deg} deg out of range (limit {limit_deg} deg)")]
    PitchOutOfRange { pitch_deg: f64, limit_deg: f64 },
    #[error("incompatible dimensions: {0}")]
    IncompatibleDims(String),
    #[error("condition span of {len} frames is shorter than the minimum {min}")]
    ConditionTooShort { len: usize, min: usize },

    #[error("no coverage between arc length {start_m:.2} m and {end_m:.2} m")]
    NoCoverage { start_m: f64, end_m: f64 },

    #[error("backend failure: {0}")]
    BackendFailure(String),
    #[error("backend returned {got} frames, expected {expected}")]
    FrameCountMismatch { expected: usize, got: usize },
    #[error("step cancelled")]
    Cancelled,
    #[error("session is not active")]
    SessionNotActive,
    #[error("session is not complete")]
    SessionIncomplete,

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("every pixel is masked")]
    AllMasked,
    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    TooSmall { width: u32, height: u32, window: u32 },
    #[error("matrix square root did not converge (relative residual {residual:e})")]
    SqrtNonConvergence { residual: f64 },
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidCoordinate(_) => "invalid_coordinate",
            Error::InvalidPose(_) => "invalid_pose",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::EmptyTrajectory => "empty_trajectory",
            Error::InvalidParams(_) => "invalid_params",
            Error::FileNotFound(_) => "file_not_found",
            Error::Io(_) => "io_error",
            Error::Parse(_) => "parse_error",
            Error::Image(_) => "image_error",
            Error::DegeneratePath(_) => "degenerate_path",
            Error::NoOverlap { .. } => "no_overlap",
            Error::BadAspect { .. } => "bad_aspect",
            Error::PitchOutOfRange { .. } => "pitch_out_of_range",
            Error::IncompatibleDims(_) => "incompatible_dims",
            Error::ConditionTooShort { .. } => "condition_too_short",
            Error::NoCoverage { .. } => "no_coverage",
            Error::BackendFailure(_) => "backend_failure",
            Error::FrameCountMismatch { .. } => "frame_count_mismatch",
            Error::Cancelled => "cancelled",
            Error::SessionNotActive => "session_not_active",
            Error::SessionIncomplete => "session_incomplete",
            Error::DimMismatch(_) => "dim_mismatch",
            Error::AllMasked => "all_masked",
            Error::TooSmall { .. } => "too_small",
            Error::SqrtNonConvergence { .. } => "sqrt_non_convergence",
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
