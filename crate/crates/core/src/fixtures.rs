//! Synthetic capture corpora used by tests, the acceptance suite and the
//! `fixture` CLI command. Streets are laid out in a local east/north plane
//! and every capture gets a `synthetic://` image URI.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geodesy::{ecef_to_geodetic, GeodeticCoord, LocalFrame, Se3Pose};
use crate::pano_index::{PanoIndex, PanoRecord};
use crate::retrieval_planner::UserPath;

pub const FIXTURE_ORIGIN: (f64, f64, f64) = (37.7749, -122.4194, 10.0);
const T0: f64 = 1_600_000_000.0;
const DAY_S: f64 = 86_400.0;

#[derive(Debug, Clone)]
pub struct FixtureCorpus {
    pub name: String,
    pub frame: LocalFrame,
    pub records: Vec<PanoRecord>,
}

impl FixtureCorpus {
    pub fn new(name: &str) -> Self {
        let (lat, lon, alt) = FIXTURE_ORIGIN;
        let origin = GeodeticCoord::new(lat, lon, alt).expect("fixture origin is valid");
        Self { name: name.into(), frame: LocalFrame::at_geodetic(&origin), records: Vec::new() }
    }

    pub fn index(&self) -> Result<PanoIndex> {
        PanoIndex::from_records(self.records.iter().cloned())
    }

    pub fn manifest(&self) -> String {
        self.records.iter().map(|r| r.to_manifest_line() + "\n").collect()
    }

    pub fn geodetic(&self, east: f64, north: f64) -> GeodeticCoord {
        ecef_to_geodetic(&self.frame.from_enu(&Vector3::new(east, north, 0.0))).expect("fixture point is valid")
    }

    pub fn ecef(&self, east: f64, north: f64) -> Vector3<f64> {
        self.frame.from_enu(&Vector3::new(east, north, 0.0))
    }

    /// User path through local (east, north) waypoints.
    pub fn path(&self, waypoints: &[(f64, f64)]) -> Result<UserPath> {
        UserPath::new(waypoints.iter().map(|&(e, n)| self.geodetic(e, n)).collect())
    }

    /// Adds one capture drive along a local polyline. Frames are spaced
    /// evenly at the largest spacing not below `spacing_m` that ends the
    /// drive exactly on its last vertex, one frame per 0.1 s.
    pub fn drive(&mut self, trajectory_id: &str, polyline: &[(f64, f64)], spacing_m: f64, t0: f64) {
        let pts: Vec<Vector3<f64>> = polyline.iter().map(|&(e, n)| Vector3::new(e, n, 0.0)).collect();
        let lengths: Vec<f64> = pts.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
        let total: f64 = lengths.iter().sum();
        let frames = ((total / spacing_m).floor() as usize).max(1);
        let step = total / frames as f64;
        for k in 0..=frames {
            let mut s = k as f64 * step;
            let mut part = 0;
            while part + 1 < lengths.len() && s > lengths[part] {
                s -= lengths[part];
                part += 1;
            }
            let dir = (pts[part + 1] - pts[part]) / lengths[part];
            let p = pts[part] + dir * s.min(lengths[part]);
            let id = format!("{trajectory_id}-{k:05}");
            self.records.push(self.record(&id, trajectory_id, p, dir, t0 + k as f64 * 0.1));
        }
    }

    fn record(&self, id: &str, trajectory_id: &str, enu: Vector3<f64>, dir_enu: Vector3<f64>, t: f64) -> PanoRecord {
        let ecef = self.frame.from_enu(&enu);
        let geodetic = ecef_to_geodetic(&ecef).expect("fixture point is valid");
        // Rig axes: x forward along travel, y left, z up, in the local frame
        // at the capture point itself.
        let local = LocalFrame::at_geodetic(&geodetic);
        let heading = self.frame.heading_of(&(self.frame.rotation * dir_enu));
        let fwd = local.direction_of(heading);
        let left = local.direction_of(heading - 90.0);
        let up = local.rotation.column(2).into_owned();
        PanoRecord {
            id: id.into(),
            pose: Se3Pose { rotation: Matrix3::from_columns(&[fwd, left, up]), translation: ecef },
            geodetic,
            capture_time: t,
            trajectory_id: trajectory_id.into(),
            city: self.name.clone(),
            image_uri: format!("synthetic://{id}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridCityParams {
    /// Blocks per side; streets run along every multiple of `block_m`.
    pub blocks: usize,
    pub block_m: f64,
    pub spacing_m: f64,
    /// Drive every street end to end in both directions.
    pub full_sweeps: bool,
    /// Additional random-walk drives along the street grid.
    pub random_drives: usize,
    /// Street edges per random drive.
    pub drive_edges: usize,
    /// Right-hand lane offset of sweeps and maximum shift of random drives.
    pub lane_offset_m: f64,
    pub seed: u64,
}

impl Default for GridCityParams {
    fn default() -> Self {
        Self {
            blocks: 4,
            block_m: 60.0,
            spacing_m: 1.4,
            full_sweeps: true,
            random_drives: 0,
            drive_edges: 4,
            lane_offset_m: 1.5,
            seed: 0,
        }
    }
}

/// Manhattan grid of streets spanning `[0, blocks * block_m]` on both axes.
pub fn grid_city(p: &GridCityParams) -> FixtureCorpus {
    let mut c = FixtureCorpus::new("grid-city");
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let extent = p.blocks as f64 * p.block_m;
    let lane = p.lane_offset_m;
    if p.full_sweeps {
        for i in 0..=p.blocks {
            let x = i as f64 * p.block_m;
            // Right-hand traffic: eastbound south of the center line.
            c.drive(&format!("ew{i}e"), &[(0.0, x - lane), (extent, x - lane)], p.spacing_m, T0 + i as f64 * DAY_S);
            c.drive(&format!("ew{i}w"), &[(extent, x + lane), (0.0, x + lane)], p.spacing_m, T0 + 3600.0 + i as f64 * DAY_S);
            c.drive(&format!("ns{i}n"), &[(x + lane, 0.0), (x + lane, extent)], p.spacing_m, T0 + 7200.0 + i as f64 * DAY_S);
            c.drive(&format!("ns{i}s"), &[(x - lane, extent), (x - lane, 0.0)], p.spacing_m, T0 + 10800.0 + i as f64 * DAY_S);
        }
    }
    const STEPS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
    for d in 0..p.random_drives {
        let n = p.blocks as i64;
        let mut node = (rng.random_range(0..=n), rng.random_range(0..=n));
        let mut nodes = vec![node];
        let mut prev_dir: Option<usize> = None;
        for _ in 0..p.drive_edges {
            let options: Vec<usize> = (0..4)
                .filter(|&k| prev_dir.is_none_or(|pd| (pd + 2) % 4 != k))
                .filter(|&k| {
                    let (nx, ny) = (node.0 + STEPS[k].0, node.1 + STEPS[k].1);
                    (0..=n).contains(&nx) && (0..=n).contains(&ny)
                })
                .collect();
            if options.is_empty() {
                break;
            }
            let k = options[rng.random_range(0..options.len())];
            node = (node.0 + STEPS[k].0, node.1 + STEPS[k].1);
            nodes.push(node);
            prev_dir = Some(k);
        }
        if nodes.len() < 2 {
            continue;
        }
        let shift = (rng.random_range(-lane..=lane), rng.random_range(-lane..=lane));
        let poly: Vec<(f64, f64)> = nodes
            .iter()
            .map(|&(i, j)| (i as f64 * p.block_m + shift.0, j as f64 * p.block_m + shift.1))
            .collect();
        let t0 = T0 + rng.random_range(0.0..365.0) * DAY_S;
        c.drive(&format!("rd{d:03}"), &poly, p.spacing_m, t0);
    }
    c
}

/// Two perpendicular streets crossing at the local origin, one eastbound
/// and one northbound capture, 150 m either side of the junction.
pub fn junction() -> FixtureCorpus {
    let mut c = FixtureCorpus::new("junction");
    c.drive("east", &[(-150.0, 0.0), (150.0, 0.0)], 1.4, T0);
    c.drive("north", &[(0.0, -150.0), (0.0, 150.0)], 1.4, T0 + 30.0 * DAY_S);
    c
}

/// The user path that turns left at the junction, as in a stitched plan.
pub const JUNCTION_TURN: [(f64, f64); 3] = [(-100.0, 0.0), (0.0, 0.0), (0.0, 100.0)];

/// A single counter-clockwise drive around a rectangular block that ends
/// exactly where it started.
pub fn loop_course() -> FixtureCorpus {
    let mut c = FixtureCorpus::new("loop");
    c.drive("loop", &LOOP_PATH, 1.4, T0);
    c
}

pub const LOOP_PATH: [(f64, f64); 5] = [(0.0, 0.0), (85.0, 0.0), (85.0, 55.5), (0.0, 55.5), (0.0, 0.0)];

/// A random L-shaped, U-shaped or single-block loop path through grid-city
/// intersections, as local (east, north) waypoints.
pub fn random_grid_path<R: Rng + ?Sized>(rng: &mut R, blocks: i64, block_m: f64) -> Vec<(f64, f64)> {
    const DIRS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
    loop {
        let start = (rng.random_range(0..=blocks), rng.random_range(0..=blocks));
        let d0 = rng.random_range(0..4usize);
        let turn = if rng.random_bool(0.5) { 1 } else { 3 };
        let legs = rng.random_range(2..=4usize);
        let mut node = start;
        let mut pts = vec![node];
        let mut inside = true;
        for leg in 0..legs {
            let d = (d0 + leg * turn) % 4;
            node = (node.0 + DIRS[d].0, node.1 + DIRS[d].1);
            inside &= (0..=blocks).contains(&node.0) && (0..=blocks).contains(&node.1);
            pts.push(node);
        }
        if inside {
            return pts.iter().map(|&(i, j)| (i as f64 * block_m, j as f64 * block_m)).collect();
        }
    }
}

/// Looks up a fixture by CLI name.
pub fn by_name(name: &str, seed: u64) -> Option<FixtureCorpus> {
    match name {
        "grid-city" => Some(grid_city(&GridCityParams { seed, ..Default::default() })),
        // Overlapping random drives on different days: material for mining.
        "grid-city-drives" => Some(grid_city(&GridCityParams {
            full_sweeps: false,
            random_drives: 12,
            seed,
            ..Default::default()
        })),
        "junction" => Some(junction()),
        "loop" => Some(loop_course()),
        _ => None,
    }
}
