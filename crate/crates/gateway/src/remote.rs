//! Generator backend that forwards condition packages to a model server.
//!
//! One POST per chunk. The body carries the package with frames as base64
//! raw f32 dumps so nothing is lost in transit; the reply is
//! `{"version", "frames": [...]}` or an error body.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use streetgen_core::geodesy::Se3Pose;
use streetgen_core::session_engine::{
    BackendCapabilities, CancelFlag, ConditionPackage, GeneratorBackend, MockGenerator, PackageMetadata, TARGET_FRAMES,
};
use streetgen_core::{Error, ImageBuffer, Result};

use crate::api::{decode_raw, encode_raw, ApiError, ErrorResponse, API_VERSION};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub version: String,
    pub first_image: String,
    /// Row-major 3x4 relative poses.
    pub relative_poses: Vec<[f64; 12]>,
    pub geo_frames: Vec<String>,
    pub metadata: PackageMetadata,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub version: String,
    pub frames: Vec<String>,
}

impl GenerateRequest {
    pub fn from_package(p: &ConditionPackage) -> Self {
        Self {
            version: API_VERSION.into(),
            first_image: encode_raw(&p.first_image),
            relative_poses: p.relative_poses.iter().map(Se3Pose::to_row_major_3x4).collect(),
            geo_frames: p.geo_frames.iter().map(encode_raw).collect(),
            metadata: p.metadata.clone(),
        }
    }

    pub fn to_package(&self) -> std::result::Result<ConditionPackage, ApiError> {
        Ok(ConditionPackage {
            first_image: decode_raw(&self.first_image)?,
            relative_poses: self.relative_poses.iter().map(Se3Pose::from_row_major_3x4).collect(),
            geo_frames: self.geo_frames.iter().map(|f| decode_raw(f)).collect::<std::result::Result<_, _>>()?,
            metadata: self.metadata.clone(),
        })
    }
}

/// Server side of the exchange, for model servers written against this
/// crate and for tests.
pub fn respond_with(backend: &dyn GeneratorBackend, req: &GenerateRequest) -> std::result::Result<GenerateResponse, ApiError> {
    let package = req.to_package()?;
    let frames = backend.generate(&package, &CancelFlag::new())?;
    Ok(GenerateResponse { version: API_VERSION.into(), frames: frames.iter().map(encode_raw).collect() })
}

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    pub url: String,
    pub capabilities: BackendCapabilities,
    pub timeout: Duration,
}

impl RemoteBackend {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            capabilities: BackendCapabilities { max_frames: TARGET_FRAMES, width: 4096, height: 4096 },
            timeout: Duration::from_secs(600),
        }
    }
}

impl GeneratorBackend for RemoteBackend {
    fn id(&self) -> String {
        format!("remote:{}", self.url)
    }

    fn capabilities(&self) -> BackendCapabilities {
        self.capabilities.clone()
    }

    fn generate(&self, package: &ConditionPackage, cancel: &CancelFlag) -> Result<Vec<ImageBuffer>> {
        cancel.check()?;
        let body = serde_json::to_vec(&GenerateRequest::from_package(package))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| Error::BackendFailure(e.to_string()))?;
        let resp = client
            .post(&self.url)
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| Error::BackendFailure(format!("request to {} failed: {e}", self.url)))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| Error::BackendFailure(e.to_string()))?;
        if !status.is_success() {
            let msg = match serde_json::from_slice::<ErrorResponse>(&bytes) {
                Ok(e) => e.error.to_string(),
                Err(_) => format!("HTTP {status}"),
            };
            return Err(Error::BackendFailure(msg));
        }
        let reply: GenerateResponse =
            serde_json::from_slice(&bytes).map_err(|e| Error::BackendFailure(format!("malformed reply: {e}")))?;
        cancel.check()?;
        reply
            .frames
            .iter()
            .map(|f| decode_raw(f).map_err(|e| Error::BackendFailure(e.to_string())))
            .collect()
    }
}

/// `mock-echo`, `mock-pose-stamp` or `remote:<url>`.
pub fn backend_from_spec(spec: &str) -> std::result::Result<Box<dyn GeneratorBackend>, ApiError> {
    match spec {
        "mock-echo" => Ok(Box::new(MockGenerator::echo())),
        "mock-pose-stamp" => Ok(Box::new(MockGenerator::pose_stamp())),
        _ => match spec.strip_prefix("remote:") {
            Some(url) if url.starts_with("http://") || url.starts_with("https://") => Ok(Box::new(RemoteBackend::new(url))),
            _ => Err(ApiError::bad_request(format!(
                "unknown backend {spec:?}; expected mock-echo, mock-pose-stamp or remote:<http url>"
            ))),
        },
    }
}
