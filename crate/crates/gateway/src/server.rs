//! HTTP service.
//!
//! | method | path                          | body / query                 |
//! |--------|-------------------------------|------------------------------|
//! | GET    | /captures?bbox=w,s,e,n        | degrees, lon/lat order       |
//! | POST   | /plan                         | `PlanRequest`                |
//! | GET    | /sessions                     |                              |
//! | POST   | /sessions                     | `CreateSessionRequest`       |
//! | GET    | /sessions/{id}                |                              |
//! | POST   | /sessions/{id}/step           |                              |
//! | GET    | /sessions/{id}/frames/{n}     | `?format=raw` for f32 dumps  |
//! | POST   | /metrics                      | `MetricsRequest`             |
//!
//! Errors are `{"version", "error": ApiError}` with a matching status.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::Serialize;
use streetgen_core::eval_metrics::{evaluate, DynamicMask, FeatureSet, MaskFrame};
use streetgen_core::geodesy::GeodeticCoord;
use streetgen_core::session_engine::{loop_closure_error, step, CancelFlag, GeneratorBackend, SessionParams, SessionState};

use crate::api::*;
use crate::engine::Engine;
use crate::store::{unique_count, SessionStore};

pub struct AppState {
    pub engine: Engine,
    pub store: SessionStore,
    pub backend: Box<dyn GeneratorBackend>,
    pub defaults: SessionParams,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl AppState {
    pub fn new(engine: Engine, store: SessionStore, backend: Box<dyn GeneratorBackend>, defaults: SessionParams) -> Self {
        Self { engine, store, backend, defaults, locks: Mutex::new(HashMap::new()) }
    }

    fn lock_for(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.locks.lock().expect("lock table poisoned").entry(id.to_string()).or_default().clone()
    }
}

type Shared = Arc<AppState>;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(ErrorResponse { version: API_VERSION.into(), error: self })).into_response()
    }
}

type Reply<T> = Result<Json<T>, ApiError>;

fn body<T>(r: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    r.map(|Json(t)| t).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn path<T>(r: Result<Path<T>, PathRejection>) -> Result<T, ApiError> {
    r.map(|Path(t)| t).map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::new("internal", e.to_string()))?
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/captures", get(captures))
        .route("/plan", post(plan))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/step", post(step_session))
        .route("/sessions/{id}/frames/{n}", get(get_frame))
        .route("/metrics", post(metrics))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(Arc::new(state))).await
}

fn parse_bbox(q: &HashMap<String, String>) -> Result<[f64; 4], ApiError> {
    let raw = q.get("bbox").ok_or_else(|| ApiError::bad_request("missing bbox=min_lon,min_lat,max_lon,max_lat"))?;
    let v: Vec<f64> = raw
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| ApiError::bad_request(format!("bbox {raw:?} is not four numbers")))?;
    match v[..] {
        [w, s, e, n] if w <= e && s <= n && v.iter().all(|x| x.is_finite()) => Ok([w, s, e, n]),
        _ => Err(ApiError::bad_request(format!("bbox {raw:?} must be min_lon,min_lat,max_lon,max_lat"))),
    }
}

async fn captures(State(st): State<Shared>, q: Result<Query<HashMap<String, String>>, QueryRejection>) -> Reply<CapturesResponse> {
    let Query(q) = q.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let [w, s, e, n] = parse_bbox(&q)?;
    let limit = match q.get("limit") {
        Some(l) => l.parse::<usize>().map_err(|_| ApiError::bad_request("limit must be a non-negative integer"))?,
        None => usize::MAX,
    };
    let inside = |c: &GeodeticCoord| (s..=n).contains(&c.lat) && (w..=e).contains(&c.lon);
    let captures = st
        .engine
        .index
        .records()
        .iter()
        .filter(|r| inside(&r.geodetic))
        .take(limit)
        .map(|r| Capture {
            id: r.id.clone(),
            lat: r.geodetic.lat,
            lon: r.geodetic.lon,
            alt: r.geodetic.alt,
            heading_deg: r.rig_heading_deg(),
            capture_time: r.capture_time,
            trajectory_id: r.trajectory_id.clone(),
            image_uri: r.image_uri.clone(),
        })
        .collect();
    Ok(Json(CapturesResponse { version: API_VERSION.into(), captures }))
}

async fn plan(State(st): State<Shared>, req: Result<Json<PlanRequest>, JsonRejection>) -> Reply<PlanResponse> {
    let req = body(req)?;
    blocking(move || {
        let params = req.params.unwrap_or_else(|| st.defaults.planner.clone());
        let (plan, diagnostics) = st.engine.plan(&user_path(&req.waypoints)?, &params)?;
        Ok(Json(PlanResponse { version: API_VERSION.into(), plan, diagnostics }))
    })
    .await
}

fn view(state: &SessionState) -> SessionView {
    SessionView {
        manifest: state.manifest.clone(),
        remaining_chunks: state.remaining_chunks().len(),
        unique_frames: unique_count(&state.manifest),
        loop_closure_error_m: loop_closure_error(state).ok(),
    }
}

#[derive(Serialize)]
struct SessionList {
    version: String,
    sessions: Vec<String>,
}

async fn list_sessions(State(st): State<Shared>) -> Reply<SessionList> {
    Ok(Json(SessionList { version: API_VERSION.into(), sessions: st.store.list()? }))
}

async fn create_session(
    State(st): State<Shared>,
    req: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionResponse>), ApiError> {
    let req = body(req)?;
    blocking(move || {
        let mut params = req.params.clone().unwrap_or_else(|| st.defaults.clone());
        if let Some(seed) = req.seed {
            params.seed = seed;
        }
        params.validate()?;
        let path = user_path(&req.waypoints)?;
        let first = req.first_image.as_deref().map(decode_png).transpose()?;
        let id = st.store.claim(req.session_id.as_deref())?;
        let result = st.engine.start(&id, &path, &params, first).and_then(|state| {
            st.store.save(&state, None)?;
            Ok(state)
        });
        match result {
            Ok(state) => Ok((StatusCode::CREATED, Json(SessionResponse { version: API_VERSION.into(), session: view(&state) }))),
            Err(e) => {
                st.store.release(&id);
                Err(e)
            }
        }
    })
    .await
}

async fn get_session(State(st): State<Shared>, id: Result<Path<String>, PathRejection>) -> Reply<SessionResponse> {
    let id = path(id)?;
    let state = st.store.load(&id)?;
    Ok(Json(SessionResponse { version: API_VERSION.into(), session: view(&state) }))
}

async fn step_session(State(st): State<Shared>, id: Result<Path<String>, PathRejection>) -> Reply<StepResponse> {
    let id = path(id)?;
    crate::store::validate_id(&id)?;
    let lock = st.lock_for(&id);
    let _guard = lock
        .try_lock_owned()
        .map_err(|_| ApiError::new("session_busy", format!("session {id} already has a step in flight")))?;
    blocking(move || {
        let state = st.store.load(&id)?;
        let (next, frames) = step(&state, &st.engine.ctx(), st.backend.as_ref(), &CancelFlag::new())?;
        let k = next.manifest.segments.len() - 1;
        st.store.save(&next, Some((k, &frames)))?;
        let before = unique_count(&state.manifest);
        let after = unique_count(&next.manifest);
        let segment = SegmentView {
            index: k,
            frame_count: frames.len(),
            frames: (before..after).map(|n| format!("/sessions/{id}/frames/{n}")).collect(),
        };
        Ok(Json(StepResponse { version: API_VERSION.into(), session: view(&next), segment }))
    })
    .await
}

async fn get_frame(
    State(st): State<Shared>,
    p: Result<Path<(String, usize)>, PathRejection>,
    q: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> Result<Response, ApiError> {
    let (id, n) = path(p)?;
    let Query(q) = q.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let raw = match q.get("format").map(String::as_str) {
        None | Some("png") => false,
        Some("raw") => true,
        Some(f) => return Err(ApiError::bad_request(format!("unknown format {f:?}; expected png or raw"))),
    };
    blocking(move || {
        let frame = st.store.unique_frame(&id, n)?;
        Ok(if raw {
            ([(header::CONTENT_TYPE, "application/octet-stream")], frame.to_raw_bytes()).into_response()
        } else {
            ([(header::CONTENT_TYPE, "image/png")], frame.to_png_bytes()?).into_response()
        })
    })
    .await
}

fn features(m: &FeatureMatrix) -> Result<FeatureSet, ApiError> {
    Ok(FeatureSet::new(m.n, m.d, m.data.clone())?)
}

async fn metrics(req: Result<Json<MetricsRequest>, JsonRejection>) -> Reply<MetricsResponse> {
    let req = body(req)?;
    blocking(move || {
        let gen = req.generated.iter().map(|s| decode_png(s)).collect::<Result<Vec<_>, _>>()?;
        let gt = req.ground_truth.iter().map(|s| decode_png(s)).collect::<Result<Vec<_>, _>>()?;
        let masks = match &req.masks {
            Some(list) => Some(DynamicMask {
                frames: list
                    .iter()
                    .map(|s| {
                        let bytes = STANDARD.decode(s).map_err(|e| ApiError::bad_request(format!("invalid base64 mask: {e}")))?;
                        Ok(MaskFrame::from_png_bytes(&bytes)?)
                    })
                    .collect::<Result<_, ApiError>>()?,
            }),
            None => None,
        };
        let feats = match (&req.features_real, &req.features_gen) {
            (Some(r), Some(g)) => Some((features(r)?, features(g)?)),
            (None, None) => None,
            _ => return Err(ApiError::bad_request("features_real and features_gen go together")),
        };
        let report = evaluate(&gen, &gt, masks.as_ref(), feats.as_ref().map(|(r, g)| (r, g)))?;
        let text = report.to_key_value();
        Ok(Json(MetricsResponse { version: API_VERSION.into(), report, text }))
    })
    .await
}
