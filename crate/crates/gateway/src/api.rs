//! Wire types shared by the HTTP service, the CLI and the remote backend.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use streetgen_core::geodesy::GeodeticCoord;
use streetgen_core::retrieval_planner::{PlanDiagnostics, PlannerParams, RetrievalPlan, UserPath};
use streetgen_core::session_engine::{SessionManifest, SessionParams};
use streetgen_core::{Error, ImageBuffer};

/// Every JSON body carries this under `version`.
pub const API_VERSION: &str = "streetgen/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub detail: Value,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into(), detail: Value::Null }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new("bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new("not_found", message)
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn http_status(&self) -> u16 {
        match self.code.as_str() {
            "bad_request" | "invalid_coordinate" | "invalid_pose" | "degenerate_input" | "invalid_params"
            | "parse_error" | "image_error" | "degenerate_path" | "bad_aspect" | "pitch_out_of_range"
            | "incompatible_dims" | "dim_mismatch" | "too_small" => 400,
            "not_found" | "file_not_found" => 404,
            "session_busy" | "session_exists" | "session_not_active" | "session_incomplete" => 409,
            "no_coverage" | "no_overlap" | "condition_too_short" | "all_masked" | "empty_trajectory" => 422,
            "backend_failure" | "frame_count_mismatch" => 502,
            "cancelled" => 503,
            _ => 500,
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let detail = match &e {
            Error::NoCoverage { start_m, end_m } => json!({ "uncovered": { "start_m": start_m, "end_m": end_m } }),
            Error::NoOverlap { closest_m } => json!({ "closest_m": closest_m }),
            Error::FrameCountMismatch { expected, got } => json!({ "expected": expected, "got": got }),
            Error::BadAspect { width, height } => json!({ "width": width, "height": height }),
            Error::PitchOutOfRange { pitch_deg, limit_deg } => json!({ "pitch_deg": pitch_deg, "limit_deg": limit_deg }),
            Error::ConditionTooShort { len, min } => json!({ "len": len, "min": min }),
            Error::SqrtNonConvergence { residual } => json!({ "residual": residual }),
            Error::FileNotFound(p) => json!({ "path": p }),
            _ => Value::Null,
        };
        ApiError { code: e.code().into(), message: e.to_string(), detail }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub alt: f64,
}

pub fn user_path(waypoints: &[Waypoint]) -> Result<UserPath, ApiError> {
    let coords = waypoints
        .iter()
        .map(|w| GeodeticCoord::new(w.lat, w.lon, w.alt))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(UserPath::new(coords)?)
}

pub fn waypoints_of(path: &UserPath) -> Vec<Waypoint> {
    path.waypoints.iter().map(|c| Waypoint { lat: c.lat, lon: c.lon, alt: c.alt }).collect()
}

pub fn encode_png(img: &ImageBuffer) -> Result<String, ApiError> {
    Ok(STANDARD.encode(img.to_png_bytes()?))
}

pub fn decode_png(text: &str) -> Result<ImageBuffer, ApiError> {
    let bytes = STANDARD.decode(text).map_err(|e| ApiError::bad_request(format!("invalid base64 image: {e}")))?;
    Ok(ImageBuffer::from_png_bytes(&bytes)?)
}

/// Lossless base64 of the raw f32 frame dump.
pub fn encode_raw(img: &ImageBuffer) -> String {
    STANDARD.encode(img.to_raw_bytes())
}

pub fn decode_raw(text: &str) -> Result<ImageBuffer, ApiError> {
    let bytes = STANDARD.decode(text).map_err(|e| ApiError::bad_request(format!("invalid base64 frame: {e}")))?;
    Ok(ImageBuffer::from_raw_bytes(&bytes)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Capture {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
    pub heading_deg: f64,
    pub capture_time: f64,
    pub trajectory_id: String,
    pub image_uri: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapturesResponse {
    pub version: String,
    pub captures: Vec<Capture>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanRequest {
    pub waypoints: Vec<Waypoint>,
    #[serde(default)]
    pub params: Option<PlannerParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanResponse {
    pub version: String,
    pub plan: RetrievalPlan,
    pub diagnostics: PlanDiagnostics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub waypoints: Vec<Waypoint>,
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub params: Option<SessionParams>,
    /// Base64 PNG; defaults to the crop at the first plan step.
    #[serde(default)]
    pub first_image: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub manifest: SessionManifest,
    pub remaining_chunks: usize,
    pub unique_frames: usize,
    pub loop_closure_error_m: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionResponse {
    pub version: String,
    pub session: SessionView,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentView {
    pub index: usize,
    pub frame_count: usize,
    /// URLs of the frames this step added to the unique sequence.
    pub frames: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepResponse {
    pub version: String,
    pub session: SessionView,
    pub segment: SegmentView,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRequest {
    pub generated: Vec<String>,
    pub ground_truth: Vec<String>,
    #[serde(default)]
    pub masks: Option<Vec<String>>,
    #[serde(default)]
    pub features_real: Option<FeatureMatrix>,
    #[serde(default)]
    pub features_gen: Option<FeatureMatrix>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub version: String,
    pub report: streetgen_core::eval_metrics::MetricReport,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub version: String,
    pub error: ApiError,
}
