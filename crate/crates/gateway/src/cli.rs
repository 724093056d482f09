//! `streetgen` command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use streetgen_core::eval_metrics::{evaluate, load_frames, load_masks, FeatureSet};
use streetgen_core::fixtures::{self, JUNCTION_TURN, LOOP_PATH};
use streetgen_core::geodesy::GeodeticCoord;
use streetgen_core::pair_miner::{mine_pairs, pair_statistics, MiningParams};
use streetgen_core::pano_index::IngestReport;
use streetgen_core::pano_projection::{build_training_example, crop_perspective, AugmentationParams, DropoutPolicy};
use streetgen_core::retrieval_planner::{PlannerParams, UserPath};
use streetgen_core::session_engine::{export_session, step, CancelFlag, SessionParams, SessionStatus};
use streetgen_core::{Error, ImageBuffer};

use crate::api::ApiError;
use crate::engine::Engine;
use crate::remote::backend_from_spec;
use crate::server::{serve, AppState};
use crate::store::SessionStore;

#[derive(Debug, Parser)]
#[command(name = "streetgen", version, about = "Geospatial retrieval engine for grounded street-level video generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a capture manifest and write its rejects sidecar.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write a synthetic fixture corpus as a capture manifest.
    Fixture {
        #[arg(long, default_value = "grid-city")]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine target/condition pairs across capture sessions.
    MinePairs {
        #[command(flatten)]
        source: IndexArgs,
        #[arg(long, default_value_t = 73)]
        n: usize,
        #[arg(long, default_value_t = 5.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 16)]
        stride: usize,
        /// Minimum time separation between sessions, seconds.
        #[arg(long, default_value_t = 3600.0)]
        min_gap: f64,
        /// Pair manifest, one JSON object per line.
        #[arg(long)]
        out: PathBuf,
        /// Also write one training example per pair.
        #[arg(long)]
        examples: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a pinhole crop of an equirectangular panorama.
    Crop {
        #[arg(long)]
        pano: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        yaw: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        pitch: f64,
        #[arg(long, default_value_t = 65.0)]
        fov: f64,
        /// Output size, WIDTHxHEIGHT.
        #[arg(long, default_value = "832x480", value_parser = parse_size)]
        out: (u32, u32),
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Plan the conditioning sequence for a path.
    Plan {
        #[command(flatten)]
        source: IndexArgs,
        /// Waypoints, one `lat,lon[,alt]` per line.
        #[arg(long)]
        path: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        corridor: f64,
        /// Write plan lines here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a whole session with one backend and export it.
    SessionRun {
        #[command(flatten)]
        source: IndexArgs,
        /// Waypoints file; defaults to the fixture's demo path.
        #[arg(long)]
        path: Option<PathBuf>,
        #[arg(long, env = "STREETGEN_BACKEND", default_value = "mock-echo")]
        backend: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "208x120", value_parser = parse_size)]
        size: (u32, u32),
        #[arg(long, default_value = "session")]
        session_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute PSNR/SSIM (optionally masked) and FID.
    Eval {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, requires = "features_gen")]
        features_real: Option<PathBuf>,
        #[arg(long, requires = "features_real")]
        features_gen: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[command(flatten)]
        source: IndexArgs,
        #[arg(long, env = "STREETGEN_BIND", default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, env = "STREETGEN_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "STREETGEN_STORE", default_value = "sessions")]
        store: PathBuf,
        #[arg(long, env = "STREETGEN_BACKEND", default_value = "mock-echo")]
        backend: String,
    },
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Capture manifest (JSON lines).
    #[arg(long, env = "STREETGEN_INDEX", conflicts_with = "fixture")]
    pub index: Option<PathBuf>,
    /// Built-in fixture instead of a manifest: grid-city, grid-city-drives,
    /// junction or loop.
    #[arg(long, env = "STREETGEN_FIXTURE")]
    pub fixture: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub fixture_seed: u64,
}

impl IndexArgs {
    fn load(&self) -> Result<Engine, ApiError> {
        match (&self.index, &self.fixture) {
            (Some(p), _) => Engine::from_manifest(p),
            (None, Some(name)) => Engine::from_fixture(name, self.fixture_seed),
            (None, None) => Err(ApiError::bad_request("pass --index <manifest> or --fixture <name>")),
        }
    }
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("{s:?} is not WIDTHxHEIGHT"))?;
    match (w.parse(), h.parse()) {
        (Ok(w), Ok(h)) if w > 0 && h > 0 => Ok((w, h)),
        _ => Err(format!("{s:?} is not WIDTHxHEIGHT")),
    }
}

/// `lat,lon[,alt]` per line; commas or whitespace separate, `#` starts a
/// comment.
pub fn parse_waypoints(text: &str) -> Result<UserPath, ApiError> {
    let mut coords = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| ApiError::new("parse_error", format!("waypoint line {}: {line:?}", i + 1)))?;
        let c = match v[..] {
            [lat, lon] => GeodeticCoord::new(lat, lon, 0.0)?,
            [lat, lon, alt] => GeodeticCoord::new(lat, lon, alt)?,
            _ => return Err(ApiError::new("parse_error", format!("waypoint line {} needs 2 or 3 numbers", i + 1))),
        };
        coords.push(c);
    }
    Ok(UserPath::new(coords)?)
}

pub fn format_waypoints(path: &UserPath) -> String {
    path.waypoints.iter().map(|c| format!("{:.10},{:.10},{:.3}\n", c.lat, c.lon, c.alt)).collect()
}

/// Demo path for each fixture, in local (east, north) meters.
pub fn fixture_demo_path(name: &str) -> Option<Vec<(f64, f64)>> {
    match name {
        "grid-city" => Some(vec![(5.0, 60.0), (155.0, 60.0)]),
        "junction" => Some(JUNCTION_TURN.to_vec()),
        "loop" => Some(LOOP_PATH.to_vec()),
        _ => None,
    }
}

fn read_path(file: &Path) -> Result<UserPath, ApiError> {
    let text = fs::read_to_string(file).map_err(|_| ApiError::from(Error::FileNotFound(file.to_path_buf())))?;
    parse_waypoints(&text)
}

fn write(path: &Path, text: &str) -> Result<(), ApiError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::Io)?;
    }
    fs::write(path, text).map_err(Error::Io)?;
    Ok(())
}

/// Runs a command; output goes to stdout, diagnostics to stderr.
pub fn run(cli: Cli) -> Result<(), ApiError> {
    match cli.command {
        Command::Ingest { manifest } => {
            let engine = Engine::from_manifest(&manifest)?;
            let report = engine.report.unwrap_or_default();
            let sidecar = report.write_sidecar(&manifest)?;
            println!("accepted={} rejected={}", report.accepted, report.rejected);
            println!("segments={}", engine.segments.len());
            if report.rejected > 0 {
                println!("rejects={}", IngestReport::sidecar_path(&manifest).display());
            }
            log::info!("rejects sidecar at {}", sidecar.display());
        }
        Command::Fixture { name, seed, out } => {
            let corpus = fixtures::by_name(&name, seed).ok_or_else(|| ApiError::bad_request(format!("unknown fixture {name:?}")))?;
            write(&out, &corpus.manifest())?;
            if let Some(local) = fixture_demo_path(&name) {
                let path = corpus.path(&local)?;
                let mut p = out.as_os_str().to_owned();
                p.push(".path");
                write(Path::new(&p), &format_waypoints(&path))?;
            }
            println!("records={}", corpus.records.len());
        }
        Command::MinePairs { source, n, epsilon, stride, min_gap, out, examples, seed } => {
            let engine = source.load()?;
            let params = MiningParams { n, epsilon_m: epsilon, min_time_separation_s: min_gap, window_stride: stride };
            let pairs = mine_pairs(&engine.segments, &params)?;
            write(&out, &pairs.iter().map(|p| p.to_manifest_line() + "\n").collect::<String>())?;
            let stats = pair_statistics(&pairs, epsilon);
            println!("pairs={} mean_distance_m={:.4}", stats.count, stats.mean_distance_m);
            if let Some(path) = examples {
                let aug = AugmentationParams::default();
                let policy = DropoutPolicy::default();
                let mut text = String::new();
                let mut skipped = 0;
                for (i, pair) in pairs.iter().enumerate() {
                    match build_training_example(pair, &engine.index, &aug, &policy, seed.wrapping_add(i as u64)) {
                        Ok(ex) => {
                            let _ = writeln!(text, "{}", ex.to_manifest_line());
                        }
                        Err(Error::ConditionTooShort { .. }) => skipped += 1,
                        Err(e) => return Err(e.into()),
                    }
                }
                write(&path, &text)?;
                println!("examples={} skipped_short={skipped}", pairs.len() - skipped);
            }
        }
        Command::Crop { pano, yaw, pitch, fov, out, output } => {
            let img = ImageBuffer::load(&pano)?;
            let params = AugmentationParams { fov_deg: fov, ..AugmentationParams::default() }.with_output(out.0, out.1);
            crop_perspective(&img, yaw, pitch, &params)?.save_png(&output)?;
        }
        Command::Plan { source, path, corridor, out } => {
            let engine = source.load()?;
            let params = PlannerParams { corridor_m: corridor, ..PlannerParams::default() };
            let (plan, diag) = engine.plan(&read_path(&path)?, &params)?;
            match out {
                Some(f) => write(&f, &plan.to_lines())?,
                None => print!("{}", plan.to_lines()),
            }
            eprintln!(
                "steps={} switches={} max_gap_m={:.3} cost={:.6}",
                diag.steps, diag.switches, diag.max_gap_m, plan.cost
            );
        }
        Command::SessionRun { source, path, backend, seed, size, session_id, out } => {
            let engine = source.load()?;
            let user_path = match (&path, &source.fixture) {
                (Some(p), _) => read_path(p)?,
                (None, Some(name)) => {
                    let corpus = fixtures::by_name(name, source.fixture_seed).ok_or_else(|| ApiError::bad_request(format!("unknown fixture {name:?}")))?;
                    corpus.path(&fixture_demo_path(name).expect("known fixture has a demo path"))?
                }
                (None, None) => return Err(ApiError::bad_request("pass --path <waypoints> (or use a fixture)")),
            };
            let backend = backend_from_spec(&backend)?;
            let mut params = SessionParams { seed, ..SessionParams::default() };
            params.augmentation = params.augmentation.with_output(size.0, size.1);
            let mut state = engine.start(&session_id, &user_path, &params, None)?;
            let mut segments = Vec::new();
            while state.status() == SessionStatus::Active {
                let (next, frames) = step(&state, &engine.ctx(), backend.as_ref(), &CancelFlag::new())?;
                log::info!("chunk {} done: {} frames", next.manifest.next_chunk - 1, frames.len());
                state = next;
                segments.push(frames);
            }
            let manifest = export_session(&state, &segments, &out)?;
            println!("segments={} unique_frames={}", manifest.session.segments.len(), manifest.unique_frames);
            if let Some(e) = manifest.loop_closure_error_m {
                println!("loop_closure_error_m={e:.6}");
            }
            println!("manifest={}", out.join("manifest.json").display());
        }
        Command::Eval { gen, gt, masks, features_real, features_gen, out } => {
            let g = load_frames(&gen)?;
            let t = load_frames(&gt)?;
            let m = masks.as_deref().map(load_masks).transpose()?;
            let feats = match (features_real, features_gen) {
                (Some(r), Some(f)) => Some((FeatureSet::load(&r)?, FeatureSet::load(&f)?)),
                _ => None,
            };
            let report = evaluate(&g, &t, m.as_ref(), feats.as_ref().map(|(r, f)| (r, f)))?;
            let text = report.to_key_value();
            print!("{text}");
            if let Some(f) = out {
                write(&f, &text)?;
            }
        }
        Command::Serve { source, bind, port, store, backend } => {
            let engine = source.load()?;
            let state = AppState::new(engine, SessionStore::open(store)?, backend_from_spec(&backend)?, SessionParams::default());
            let rt = tokio::runtime::Runtime::new().map_err(Error::Io)?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((bind.as_str(), port)).await.map_err(Error::Io)?;
                log::info!("listening on {}", listener.local_addr().map_err(Error::Io)?);
                serve(listener, state).await.map_err(Error::Io)?;
                Ok::<_, ApiError>(())
            })?;
        }
    }
    Ok(())
}
