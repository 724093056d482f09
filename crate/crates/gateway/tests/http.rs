use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use reqwest::blocking::{Client, Response};
use serde_json::{json, Value};
use streetgen_core::fixtures::{self, FixtureCorpus, GridCityParams, JUNCTION_TURN};
use streetgen_core::session_engine::{
    BackendCapabilities, CancelFlag, ConditionPackage, GeneratorBackend, MockGenerator, SessionParams,
};
use streetgen_core::{ImageBuffer, Result};
use streetgen_gateway::api::*;
use streetgen_gateway::engine::Engine;
use streetgen_gateway::remote::{respond_with, GenerateRequest, RemoteBackend};
use streetgen_gateway::server::{router, AppState};
use streetgen_gateway::store::SessionStore;

fn spawn(app: axum::Router) -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

fn gateway(corpus: &FixtureCorpus, store: &Path, backend: Box<dyn GeneratorBackend>) -> String {
    let engine = Engine::new(corpus.index().unwrap(), None).unwrap();
    let state = AppState::new(engine, SessionStore::open(store).unwrap(), backend, small_params());
    format!("http://{}", spawn(router(std::sync::Arc::new(state))))
}

fn small_params() -> SessionParams {
    let mut p = SessionParams::default();
    p.augmentation = p.augmentation.with_output(48, 28);
    p
}

fn waypoints(corpus: &FixtureCorpus, local: &[(f64, f64)]) -> Value {
    let w: Vec<Waypoint> = corpus
        .path(local)
        .unwrap()
        .waypoints
        .iter()
        .map(|c| Waypoint { lat: c.lat, lon: c.lon, alt: c.alt })
        .collect();
    serde_json::to_value(w).unwrap()
}

fn client() -> Client {
    Client::builder().timeout(Duration::from_secs(120)).build().unwrap()
}

fn json_of(r: Response) -> (u16, Value) {
    let status = r.status().as_u16();
    (status, r.json().unwrap())
}

fn expect_error(r: Response, status: u16, code: &str) -> Value {
    let (s, v) = json_of(r);
    assert_eq!(s, status, "{v}");
    assert_eq!(v["version"], API_VERSION);
    assert_eq!(v["error"]["code"], code, "{v}");
    v["error"].clone()
}

#[test]
fn captures_by_bounding_box() {
    let corpus = fixtures::junction();
    let dir = tempfile::tempdir().unwrap();
    let base = gateway(&corpus, dir.path(), Box::new(MockGenerator::echo()));
    let c = client();

    let (s, v) = json_of(c.get(format!("{base}/captures?bbox=10,10,11,11")).send().unwrap());
    assert_eq!(s, 200);
    assert_eq!(v["version"], API_VERSION);
    assert_eq!(v["captures"].as_array().unwrap().len(), 0);

    let sw = corpus.geodetic(-20.0, -20.0);
    let ne = corpus.geodetic(20.0, 20.0);
    let url = format!("{base}/captures?bbox={},{},{},{}", sw.lon, sw.lat, ne.lon, ne.lat);
    let (_, v) = json_of(c.get(url).send().unwrap());
    let caps = v["captures"].as_array().unwrap();
    // Both roads cross the box: about 40 m of each at 1.4 m spacing.
    assert!(caps.len() > 50, "{}", caps.len());
    for cap in caps {
        let (lat, lon) = (cap["lat"].as_f64().unwrap(), cap["lon"].as_f64().unwrap());
        assert!(lat >= sw.lat && lat <= ne.lat && lon >= sw.lon && lon <= ne.lon);
    }

    expect_error(c.get(format!("{base}/captures?bbox=1,2,3")).send().unwrap(), 400, "bad_request");
    expect_error(c.get(format!("{base}/captures")).send().unwrap(), 400, "bad_request");
    expect_error(c.get(format!("{base}/nowhere")).send().unwrap(), 404, "not_found");
}

#[test]
fn plan_endpoint() {
    let corpus = fixtures::junction();
    let dir = tempfile::tempdir().unwrap();
    let base = gateway(&corpus, dir.path(), Box::new(MockGenerator::echo()));
    let c = client();

    let body = json!({ "waypoints": waypoints(&corpus, &JUNCTION_TURN) });
    let (s, v) = json_of(c.post(format!("{base}/plan")).json(&body).send().unwrap());
    assert_eq!(s, 200, "{v}");
    let resp: PlanResponse = serde_json::from_value(v).unwrap();
    assert_eq!(resp.diagnostics.switches, 1);
    assert_eq!(resp.plan.switch_points.len(), 1);
    assert_eq!(resp.diagnostics.discontinuities.len(), 1);

    // Off the roads entirely.
    let body = json!({ "waypoints": waypoints(&corpus, &[(40.0, 40.0), (120.0, 40.0)]) });
    let err = expect_error(c.post(format!("{base}/plan")).json(&body).send().unwrap(), 422, "no_coverage");
    let gap = &err["detail"]["uncovered"];
    assert!(gap["end_m"].as_f64().unwrap() > gap["start_m"].as_f64().unwrap());

    let r = c.post(format!("{base}/plan")).header("content-type", "application/json").body("{\"waypoints\": 3").send().unwrap();
    expect_error(r, 400, "bad_request");
    let r = c.post(format!("{base}/plan")).json(&json!({ "waypoints": [{ "lat": 95.0, "lon": 0.0 }, { "lat": 0.0, "lon": 0.0 }] })).send().unwrap();
    expect_error(r, 400, "invalid_coordinate");
}

#[test]
fn session_walkthrough_and_restart() {
    let corpus = fixtures::grid_city(&GridCityParams::default());
    let dir = tempfile::tempdir().unwrap();
    let base = gateway(&corpus, dir.path(), Box::new(MockGenerator::echo()));
    let c = client();

    let body = json!({ "waypoints": waypoints(&corpus, &[(5.0, 60.0), (155.0, 60.0)]), "seed": 7 });
    let (s, v) = json_of(c.post(format!("{base}/sessions")).json(&body).send().unwrap());
    assert_eq!(s, 201, "{v}");
    let created: SessionResponse = serde_json::from_value(v).unwrap();
    let id = created.session.manifest.session_id.clone();
    assert_eq!(created.session.remaining_chunks, 2);
    assert_eq!(created.session.manifest.params.seed, 7);

    let mut urls = Vec::new();
    for k in 0..2 {
        let (s, v) = json_of(c.post(format!("{base}/sessions/{id}/step")).send().unwrap());
        assert_eq!(s, 200, "{v}");
        let step: StepResponse = serde_json::from_value(v).unwrap();
        assert_eq!(step.segment.index, k);
        assert_eq!(step.segment.frame_count, 73);
        assert_eq!(step.segment.frames.len(), if k == 0 { 73 } else { 72 });
        urls.extend(step.segment.frames);
    }
    assert_eq!(urls.len(), 145);
    expect_error(c.post(format!("{base}/sessions/{id}/step")).send().unwrap(), 409, "session_not_active");

    let (_, v) = json_of(c.get(format!("{base}/sessions/{id}")).send().unwrap());
    let done: SessionResponse = serde_json::from_value(v).unwrap();
    assert_eq!(done.session.unique_frames, 145);
    let lce = done.session.loop_closure_error_m.unwrap();
    assert!((lce - 150.0).abs() < 2.0, "{lce}");

    let png = c.get(format!("{base}{}", urls[144])).send().unwrap();
    assert_eq!(png.headers()["content-type"], "image/png");
    let img = ImageBuffer::from_png_bytes(&png.bytes().unwrap()).unwrap();
    assert_eq!(img.dims(), (48, 28));
    let raw = |n: usize| ImageBuffer::from_raw_bytes(&c.get(format!("{base}/sessions/{id}/frames/{n}?format=raw")).send().unwrap().bytes().unwrap()).unwrap();
    assert_ne!(raw(72), raw(73));
    expect_error(c.get(format!("{base}/sessions/{id}/frames/145")).send().unwrap(), 404, "not_found");
    expect_error(c.get(format!("{base}/sessions/{id}/frames/x")).send().unwrap(), 400, "bad_request");
    expect_error(c.get(format!("{base}/sessions/nope")).send().unwrap(), 404, "not_found");

    // A fresh service on the same store sees the same session.
    let again = gateway(&corpus, dir.path(), Box::new(MockGenerator::echo()));
    let (_, v) = json_of(c.get(format!("{again}/sessions/{id}")).send().unwrap());
    let resumed: SessionResponse = serde_json::from_value(v).unwrap();
    assert_eq!(resumed.session.manifest, done.session.manifest);
    assert_eq!(raw(100), ImageBuffer::from_raw_bytes(&c.get(format!("{again}/sessions/{id}/frames/100?format=raw")).send().unwrap().bytes().unwrap()).unwrap());

    // Resuming mid-session: create, step once, restart, step again.
    let body = json!({ "waypoints": waypoints(&corpus, &[(5.0, 60.0), (155.0, 60.0)]), "session_id": "half", "seed": 7 });
    assert_eq!(c.post(format!("{base}/sessions")).json(&body).send().unwrap().status(), 201);
    expect_error(c.post(format!("{base}/sessions")).json(&body).send().unwrap(), 409, "session_exists");
    assert_eq!(c.post(format!("{base}/sessions/half/step")).send().unwrap().status(), 200);
    let (s, v) = json_of(c.post(format!("{again}/sessions/half/step")).send().unwrap());
    assert_eq!(s, 200, "{v}");
    let fin: StepResponse = serde_json::from_value(v).unwrap();
    assert_eq!(fin.session.manifest.segments, done.session.manifest.segments);
    let (_, v) = json_of(c.get(format!("{base}/sessions")).send().unwrap());
    assert_eq!(v["sessions"], json!(["half", id]));
}

struct Slow;
impl GeneratorBackend for Slow {
    fn id(&self) -> String {
        "slow".into()
    }
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { max_frames: 73, width: 4096, height: 4096 }
    }
    fn generate(&self, p: &ConditionPackage, c: &CancelFlag) -> Result<Vec<ImageBuffer>> {
        std::thread::sleep(Duration::from_millis(800));
        MockGenerator::echo().generate(p, c)
    }
}

#[test]
fn one_step_in_flight_per_session() {
    let corpus = fixtures::grid_city(&GridCityParams::default());
    let dir = tempfile::tempdir().unwrap();
    let base = gateway(&corpus, dir.path(), Box::new(Slow));
    let body = json!({ "waypoints": waypoints(&corpus, &[(5.0, 60.0), (155.0, 60.0)]), "session_id": "busy" });
    assert_eq!(client().post(format!("{base}/sessions")).json(&body).send().unwrap().status(), 201);
    let url = format!("{base}/sessions/busy/step");
    let first = {
        let url = url.clone();
        std::thread::spawn(move || client().post(url).send().unwrap().status().as_u16())
    };
    std::thread::sleep(Duration::from_millis(200));
    expect_error(client().post(&url).send().unwrap(), 409, "session_busy");
    assert_eq!(first.join().unwrap(), 200);
    let (_, v) = json_of(client().get(format!("{base}/sessions/busy")).send().unwrap());
    assert_eq!(v["session"]["manifest"]["segments"].as_array().unwrap().len(), 1);
}

#[test]
fn remote_backend_matches_in_process() {
    // A stand-in model server speaking the remote protocol.
    let model = axum::Router::new().route(
        "/generate",
        axum::routing::post(|axum::Json(req): axum::Json<GenerateRequest>| async move {
            let out = tokio::task::spawn_blocking(move || respond_with(&MockGenerator::echo(), &req)).await.unwrap();
            axum::Json(out.unwrap())
        }),
    );
    let model_url = format!("http://{}/generate", spawn(model));
    let corpus = fixtures::grid_city(&GridCityParams::default());
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let local = gateway(&corpus, d1.path(), Box::new(MockGenerator::echo()));
    let remote = gateway(&corpus, d2.path(), Box::new(RemoteBackend::new(model_url)));
    let c = client();
    let body = json!({ "waypoints": waypoints(&corpus, &[(5.0, 60.0), (100.0, 60.0)]), "session_id": "r" });
    for base in [&local, &remote] {
        assert_eq!(c.post(format!("{base}/sessions")).json(&body).send().unwrap().status(), 201);
        let (s, v) = json_of(c.post(format!("{base}/sessions/r/step")).send().unwrap());
        assert_eq!(s, 200, "{v}");
    }
    for n in [0, 30, 72] {
        let get = |base: &str| c.get(format!("{base}/sessions/r/frames/{n}?format=raw")).send().unwrap().bytes().unwrap();
        assert_eq!(get(&local), get(&remote));
    }
    let (_, v) = json_of(c.get(format!("{remote}/sessions/r")).send().unwrap());
    assert!(v["session"]["manifest"]["segments"][0]["backend_id"].as_str().unwrap().starts_with("remote:http://"));
}

#[test]
fn metrics_endpoint() {
    let corpus = fixtures::junction();
    let dir = tempfile::tempdir().unwrap();
    let base = gateway(&corpus, dir.path(), Box::new(MockGenerator::echo()));
    let c = client();
    let level = |n: u32| (n % 65536) as f32 / 65535.0;
    let a: Vec<ImageBuffer> = (0..2).map(|k| ImageBuffer::from_fn(16, 16, |x, y| [level(x * 3001 + k), level(y * 2003), 0.5])).collect();
    let b: Vec<ImageBuffer> = (0..2).map(|k| ImageBuffer::from_fn(16, 16, |x, y| [level(x * 3001 + 500 * k), level(y * 1999), 0.5])).collect();
    let enc = |v: &[ImageBuffer]| v.iter().map(|i| encode_png(i).unwrap()).collect::<Vec<_>>();
    let body = json!({
        "generated": enc(&a),
        "ground_truth": enc(&b),
        "features_real": { "n": 4, "d": 1, "data": [0.0, 1.0, 2.0, 3.0] },
        "features_gen": { "n": 4, "d": 1, "data": [1.0, 2.0, 3.0, 4.0] },
    });
    let (s, v) = json_of(c.post(format!("{base}/metrics")).json(&body).send().unwrap());
    assert_eq!(s, 200, "{v}");
    let resp: MetricsResponse = serde_json::from_value(v).unwrap();
    let want = streetgen_core::eval_metrics::video_metrics(&a, &b, None).unwrap();
    assert_eq!(resp.report.psnr, want.psnr);
    assert_eq!(resp.report.ssim, want.ssim);
    assert!((resp.report.fid.unwrap() - 1.0).abs() < 1e-9);
    assert!(resp.text.contains("fid=1.00000000"));

    let body = json!({ "generated": enc(&a), "ground_truth": enc(&b[..1]) });
    expect_error(c.post(format!("{base}/metrics")).json(&body).send().unwrap(), 400, "dim_mismatch");
    let body = json!({ "generated": enc(&a), "ground_truth": enc(&b), "features_real": { "n": 1, "d": 1, "data": [0.0] } });
    expect_error(c.post(format!("{base}/metrics")).json(&body).send().unwrap(), 400, "bad_request");
    let body = json!({ "generated": ["not base64!"], "ground_truth": [] });
    expect_error(c.post(format!("{base}/metrics")).json(&body).send().unwrap(), 400, "bad_request");
}
