//! Panorama store: manifest ingestion, trajectory grouping and spatial
//! queries over ECEF camera centers.
//!
//! The store is built once by a single writer ([`IndexBuilder`]) and is
//! immutable afterwards, so a [`PanoIndex`] can be shared across threads
//! behind an `Arc` and swapped wholesale on re-ingestion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::{GeodeticCoord, LocalFrame, Se3Pose};

pub const DEFAULT_CELL_SIZE_M: f64 = 64.0;
/// 50 km/h sampled at 10 frames per second.
pub const DEFAULT_TARGET_SPACING_M: f64 = 1.4;
pub const DEFAULT_MAX_GAP_M: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanoRecord {
    pub id: String,
    /// Body-to-ECEF transform of the panorama rig.
    pub pose: Se3Pose,
    pub geodetic: GeodeticCoord,
    /// Unix seconds, UTC.
    pub capture_time: f64,
    pub trajectory_id: String,
    pub city: String,
    pub image_uri: String,
}

impl PanoRecord {
    pub fn position(&self) -> Vector3<f64> {
        self.pose.translation
    }

    /// Compass heading of the rig's forward (+x body) axis. Panorama column
    /// azimuths are measured clockwise from this direction.
    pub fn rig_heading_deg(&self) -> f64 {
        let frame = LocalFrame::at_geodetic(&self.geodetic);
        frame.heading_of(&self.pose.rotation.column(0).into_owned())
    }

    pub fn to_manifest_line(&self) -> String {
        let q = self.pose.to_quaternion();
        let entry = ManifestEntry {
            id: self.id.clone(),
            lat: self.geodetic.lat,
            lon: self.geodetic.lon,
            alt: self.geodetic.alt,
            qw: q.w,
            qx: q.i,
            qy: q.j,
            qz: q.k,
            t: self.capture_time,
            trajectory_id: self.trajectory_id.clone(),
            city: self.city.clone(),
            image_uri: self.image_uri.clone(),
        };
        serde_json::to_string(&entry).expect("manifest entry serializes")
    }
}

/// One manifest line. Keys are fixed; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub t: f64,
    pub trajectory_id: String,
    pub city: String,
    pub image_uri: String,
}

impl ManifestEntry {
    pub fn into_record(self) -> Result<PanoRecord> {
        if self.id.is_empty() {
            return Err(Error::Parse("empty id".into()));
        }
        if !(self.t > 0.0) || !self.t.is_finite() {
            return Err(Error::Parse(format!("capture time {} must be positive", self.t)));
        }
        let geodetic = GeodeticCoord::new(self.lat, self.lon, self.alt)?;
        let pose = Se3Pose::from_quaternion(self.qw, self.qx, self.qy, self.qz, geodetic.to_ecef())?;
        Ok(PanoRecord {
            id: self.id,
            pose,
            geodetic,
            capture_time: self.t,
            trajectory_id: self.trajectory_id,
            city: self.city,
            image_uri: self.image_uri,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub line: usize,
    pub reason: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: usize,
    pub rejects: Vec<RejectedLine>,
}

impl IngestReport {
    /// Sidecar path used for rejected lines: `<manifest>.rejects`.
    pub fn sidecar_path(manifest: &Path) -> PathBuf {
        let mut name = manifest.as_os_str().to_owned();
        name.push(".rejects");
        PathBuf::from(name)
    }

    /// Echoes rejected lines, one per line, as `line<TAB>reason<TAB>text`.
    pub fn write_sidecar(&self, manifest: &Path) -> Result<PathBuf> {
        let path = Self::sidecar_path(manifest);
        let mut out = String::new();
        for r in &self.rejects {
            let _ = writeln!(out, "{}\t{}\t{}", r.line, r.reason, r.text);
        }
        fs::write(&path, out)?;
        Ok(path)
    }
}

#[derive(Debug, Default)]
pub struct IndexBuilder {
    records: Vec<PanoRecord>,
    ids: HashMap<String, usize>,
}

impl IndexBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts one record; duplicate ids are rejected.
    pub fn insert(&mut self, record: PanoRecord) -> Result<()> {
        if self.ids.contains_key(&record.id) {
            return Err(Error::Parse(format!("duplicate id {}", record.id)));
        }
        record.pose.validate()?;
        self.ids.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn ingest_manifest(&mut self, path: &Path) -> Result<IngestReport> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::FileNotFound(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        Ok(self.ingest_str(&text))
    }

    /// Ingests manifest text. Blank lines are skipped; every other line is
    /// either accepted or reported with its 1-based line number.
    pub fn ingest_str(&mut self, text: &str) -> IngestReport {
        let mut report = IngestReport::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let outcome = serde_json::from_str::<ManifestEntry>(line)
                .map_err(Error::from)
                .and_then(ManifestEntry::into_record)
                .and_then(|rec| self.insert(rec));
            match outcome {
                Ok(()) => report.accepted += 1,
                Err(e) => {
                    report.rejected += 1;
                    report.rejects.push(RejectedLine {
                        line: i + 1,
                        reason: e.to_string(),
                        text: line.to_string(),
                    });
                }
            }
        }
        report
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn build(self) -> PanoIndex {
        self.build_with_cell_size(DEFAULT_CELL_SIZE_M)
    }

    pub fn build_with_cell_size(self, cell_size: f64) -> PanoIndex {
        let grid = SpatialGrid::new(cell_size, self.records.iter().map(|r| r.position()));
        PanoIndex { records: self.records, ids: self.ids, grid }
    }
}

type CellKey = (i64, i64, i64);

/// Uniform hash grid over ECEF positions.
#[derive(Debug, Clone)]
struct SpatialGrid {
    cell: f64,
    cells: HashMap<CellKey, Vec<u32>>,
}

impl SpatialGrid {
    fn new(cell: f64, positions: impl Iterator<Item = Vector3<f64>>) -> Self {
        let mut cells: HashMap<CellKey, Vec<u32>> = HashMap::new();
        for (i, p) in positions.enumerate() {
            cells.entry(Self::key_for(cell, &p)).or_default().push(i as u32);
        }
        Self { cell, cells }
    }

    fn key_for(cell: f64, p: &Vector3<f64>) -> CellKey {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    fn cell_range(&self, lo: &Vector3<f64>, hi: &Vector3<f64>) -> (CellKey, CellKey, u128) {
        let a = Self::key_for(self.cell, lo);
        let b = Self::key_for(self.cell, hi);
        let count = (b.0 - a.0 + 1) as u128 * (b.1 - a.1 + 1) as u128 * (b.2 - a.2 + 1) as u128;
        (a, b, count)
    }

    /// Adds the cells of an axis-aligned box to `keys`. Returns false when
    /// the box spans more cells than are occupied, in which case the caller
    /// should scan every record instead.
    fn collect_box(&self, lo: &Vector3<f64>, hi: &Vector3<f64>, keys: &mut HashSet<CellKey>) -> bool {
        let (a, b, count) = self.cell_range(lo, hi);
        if count > self.cells.len() as u128 {
            return false;
        }
        for x in a.0..=b.0 {
            for y in a.1..=b.1 {
                for z in a.2..=b.2 {
                    if self.cells.contains_key(&(x, y, z)) {
                        keys.insert((x, y, z));
                    }
                }
            }
        }
        true
    }
}

/// Immutable, thread-shareable panorama store.
#[derive(Debug, Clone)]
pub struct PanoIndex {
    records: Vec<PanoRecord>,
    ids: HashMap<String, usize>,
    grid: SpatialGrid,
}

/// A record's projection onto a query polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct CorridorHit<'a> {
    pub record: &'a PanoRecord,
    /// Arc length of the closest polyline point, meters from the first vertex.
    pub s: f64,
    /// Distance from the record to the polyline.
    pub offset: f64,
    /// Polyline part (0-based, between vertex `part` and `part + 1`).
    pub part: usize,
}

/// Precomputed polyline for projection queries.
#[derive(Debug, Clone)]
pub struct Polyline {
    pub vertices: Vec<Vector3<f64>>,
    /// Arc length at each vertex.
    pub cumulative: Vec<f64>,
}

impl Polyline {
    pub fn new(vertices: Vec<Vector3<f64>>) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(Error::DegeneratePath(format!("{} vertices, need at least 2", vertices.len())));
        }
        let mut cumulative = Vec::with_capacity(vertices.len());
        cumulative.push(0.0);
        for w in vertices.windows(2) {
            cumulative.push(cumulative.last().unwrap() + (w[1] - w[0]).norm());
        }
        if !(*cumulative.last().unwrap() > 0.0) {
            return Err(Error::DegeneratePath("polyline has zero length".into()));
        }
        Ok(Self { vertices, cumulative })
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn parts(&self) -> usize {
        self.vertices.len() - 1
    }

    fn part_len(&self, i: usize) -> f64 {
        self.cumulative[i + 1] - self.cumulative[i]
    }

    /// Closest point on part `i`: `(distance, arc length)`. `None` for
    /// zero-length parts.
    pub fn project_on_part(&self, i: usize, p: &Vector3<f64>) -> Option<(f64, f64)> {
        self.project_on_part_t(i, p).map(|(d, s, _)| (d, s))
    }

    fn project_on_part_t(&self, i: usize, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let len = self.part_len(i);
        if len <= 0.0 {
            return None;
        }
        let a = self.vertices[i];
        let ab = self.vertices[i + 1] - a;
        let t = ((p - a).dot(&ab) / (len * len)).clamp(0.0, 1.0);
        let q = a + ab * t;
        Some(((p - q).norm(), self.cumulative[i] + t * len, t))
    }

    /// Closest point over the whole polyline: `(distance, arc length, part)`.
    /// Ties resolve to the smallest arc length.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, usize) {
        let mut best = (f64::INFINITY, 0.0, 0);
        for i in 0..self.parts() {
            if let Some((d, s)) = self.project_on_part(i, p) {
                if d < best.0 {
                    best = (d, s, i);
                }
            }
        }
        best
    }

    /// Point at arc length `s` (clamped to the polyline) and the part it
    /// lies on.
    pub fn point_at(&self, s: f64) -> (Vector3<f64>, usize) {
        let s = s.clamp(0.0, self.length());
        let mut i = match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        i = i.min(self.parts() - 1);
        while i + 1 < self.parts() && self.part_len(i) <= 0.0 {
            i += 1;
        }
        let len = self.part_len(i);
        let t = if len > 0.0 { ((s - self.cumulative[i]) / len).clamp(0.0, 1.0) } else { 0.0 };
        (self.vertices[i] + (self.vertices[i + 1] - self.vertices[i]) * t, i)
    }

    pub fn part_direction(&self, i: usize) -> Vector3<f64> {
        (self.vertices[i + 1] - self.vertices[i]).normalize()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySegment {
    pub segment_id: String,
    pub trajectory_id: String,
    /// Member ids ordered by strictly increasing capture time.
    pub pano_ids: Vec<String>,
    pub positions: Vec<Vector3<f64>>,
    pub times: Vec<f64>,
    pub mean_spacing_m: f64,
}

impl TrajectorySegment {
    pub fn len(&self) -> usize {
        self.pano_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pano_ids.is_empty()
    }

    fn from_members(segment_id: String, trajectory_id: String, members: &[&PanoRecord]) -> Self {
        let positions: Vec<_> = members.iter().map(|r| r.position()).collect();
        let mean_spacing_m = if positions.len() > 1 {
            positions.windows(2).map(|w| (w[1] - w[0]).norm()).sum::<f64>() / (positions.len() - 1) as f64
        } else {
            0.0
        };
        Self {
            segment_id,
            trajectory_id,
            pano_ids: members.iter().map(|r| r.id.clone()).collect(),
            positions,
            times: members.iter().map(|r| r.capture_time).collect(),
            mean_spacing_m,
        }
    }
}

impl PanoIndex {
    pub fn builder() -> IndexBuilder {
        IndexBuilder::new()
    }

    pub fn empty() -> Self {
        IndexBuilder::new().build()
    }

    pub fn from_manifest(path: &Path) -> Result<(Self, IngestReport)> {
        let mut b = IndexBuilder::new();
        let report = b.ingest_manifest(path)?;
        Ok((b.build(), report))
    }

    pub fn from_records(records: impl IntoIterator<Item = PanoRecord>) -> Result<Self> {
        let mut b = IndexBuilder::new();
        for r in records {
            b.insert(r)?;
        }
        Ok(b.build())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PanoRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&PanoRecord> {
        self.ids.get(id).map(|&i| &self.records[i])
    }

    /// All records within `r` meters (inclusive) of `center`, in ingestion
    /// order.
    pub fn query_radius(&self, center: &Vector3<f64>, r: f64) -> Vec<&PanoRecord> {
        if !(r >= 0.0) || self.records.is_empty() {
            return Vec::new();
        }
        let ext = Vector3::repeat(r);
        let mut keys = HashSet::new();
        let candidates: Vec<usize> = if self.grid.collect_box(&(center - ext), &(center + ext), &mut keys) {
            let mut v: Vec<usize> = keys
                .iter()
                .flat_map(|k| self.grid.cells[k].iter().map(|&i| i as usize))
                .collect();
            v.sort_unstable();
            v
        } else {
            (0..self.records.len()).collect()
        };
        candidates
            .into_iter()
            .filter(|&i| (self.records[i].position() - center).norm() <= r)
            .map(|i| &self.records[i])
            .collect()
    }

    fn corridor_candidates(&self, line: &Polyline, width: f64) -> Vec<usize> {
        let ext = Vector3::repeat(width);
        let mut keys = HashSet::new();
        for i in 0..line.parts() {
            let a = line.vertices[i];
            let b = line.vertices[i + 1];
            let pieces = ((b - a).norm() / self.grid.cell).ceil().max(1.0) as usize;
            for k in 0..pieces {
                let p = a + (b - a) * (k as f64 / pieces as f64);
                let q = a + (b - a) * ((k + 1) as f64 / pieces as f64);
                let lo = p.inf(&q) - ext;
                let hi = p.sup(&q) + ext;
                if !self.grid.collect_box(&lo, &hi, &mut keys) {
                    return (0..self.records.len()).collect();
                }
            }
        }
        let mut v: Vec<usize> = keys
            .iter()
            .flat_map(|k| self.grid.cells[k].iter().map(|&i| i as usize))
            .collect();
        v.sort_unstable();
        v
    }

    /// Records within `width` of the polyline, each with its closest-point
    /// arc length and lateral offset, ordered by arc length then id.
    pub fn query_corridor(&self, path: &[Vector3<f64>], width: f64) -> Result<Vec<CorridorHit<'_>>> {
        let line = Polyline::new(path.to_vec())?;
        let mut hits: Vec<CorridorHit<'_>> = self
            .corridor_candidates(&line, width)
            .into_iter()
            .filter_map(|i| {
                let rec = &self.records[i];
                let (d, s, part) = line.project(&rec.position());
                (d <= width).then_some(CorridorHit { record: rec, s, offset: d, part })
            })
            .collect();
        sort_hits(&mut hits);
        Ok(hits)
    }

    /// Like [`PanoIndex::query_corridor`] but reports one hit per *pass*: a
    /// maximal run of consecutive polyline parts that all come within
    /// `width` of the record and whose closest points join up at the shared
    /// vertex. A path that revisits a place (loops, U-turns) therefore sees
    /// the record once per visit, each at its own arc length.
    pub fn query_corridor_passes(&self, path: &[Vector3<f64>], width: f64) -> Result<Vec<CorridorHit<'_>>> {
        let line = Polyline::new(path.to_vec())?;
        let mut hits = Vec::new();
        for i in self.corridor_candidates(&line, width) {
            let rec = &self.records[i];
            let p = rec.position();
            // (best distance, its arc length, its part), t of the last part in the run
            let mut run: Option<((f64, f64, usize), f64)> = None;
            for part in 0..line.parts() {
                let Some((d, s, t)) = line.project_on_part_t(part, &p) else { continue };
                if d > width {
                    if let Some(((d, s, part), _)) = run.take() {
                        hits.push(CorridorHit { record: rec, s, offset: d, part });
                    }
                    continue;
                }
                run = match run {
                    Some((best, last_t)) if last_t >= 1.0 && t <= 0.0 => {
                        Some((if d < best.0 { (d, s, part) } else { best }, t))
                    }
                    Some(((bd, bs, bp), _)) => {
                        hits.push(CorridorHit { record: rec, s: bs, offset: bd, part: bp });
                        Some(((d, s, part), t))
                    }
                    None => Some(((d, s, part), t)),
                };
            }
            if let Some(((d, s, part), _)) = run {
                hits.push(CorridorHit { record: rec, s, offset: d, part });
            }
        }
        sort_hits(&mut hits);
        Ok(hits)
    }

    /// Records whose geodetic position falls inside the box (inclusive).
    pub fn query_bbox(&self, min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Vec<&PanoRecord> {
        self.records
            .iter()
            .filter(|r| {
                let g = &r.geodetic;
                g.lat >= min_lat && g.lat <= max_lat && g.lon >= min_lon && g.lon <= max_lon
            })
            .collect()
    }

    /// Splits every trajectory into time-ordered segments, breaking wherever
    /// consecutive captures are more than `max_gap_m` apart or share a
    /// timestamp. With `target_spacing_m`, each segment is thinned by
    /// dropping frames (never interpolating) to roughly that spacing.
    pub fn group_trajectories(&self, max_gap_m: f64, target_spacing_m: Option<f64>) -> Result<Vec<TrajectorySegment>> {
        if !(max_gap_m > 0.0) {
            return Err(Error::InvalidParams(format!("max_gap_m {max_gap_m} must be positive")));
        }
        if let Some(t) = target_spacing_m {
            if !(t > 0.0 && t <= max_gap_m) {
                return Err(Error::InvalidParams(format!(
                    "target spacing {t} must be in (0, max_gap_m = {max_gap_m}]"
                )));
            }
        }
        let mut by_traj: BTreeMap<&str, Vec<&PanoRecord>> = BTreeMap::new();
        for r in &self.records {
            by_traj.entry(r.trajectory_id.as_str()).or_default().push(r);
        }
        let mut out = Vec::new();
        for (traj, mut members) in by_traj {
            members.sort_by(|a, b| a.capture_time.total_cmp(&b.capture_time).then_with(|| a.id.cmp(&b.id)));
            let mut runs: Vec<Vec<&PanoRecord>> = vec![vec![members[0]]];
            for w in members.windows(2) {
                let gap = (w[1].position() - w[0].position()).norm();
                if gap > max_gap_m || w[1].capture_time <= w[0].capture_time {
                    runs.push(Vec::new());
                }
                runs.last_mut().unwrap().push(w[1]);
            }
            for (n, run) in runs.into_iter().enumerate() {
                let kept = match target_spacing_m {
                    Some(t) => {
                        let pos: Vec<_> = run.iter().map(|r| r.position()).collect();
                        resample_indices(&pos, t, max_gap_m).into_iter().map(|i| run[i]).collect()
                    }
                    None => run,
                };
                out.push(TrajectorySegment::from_members(format!("{traj}#{n}"), traj.to_string(), &kept));
            }
        }
        Ok(out)
    }
}

fn sort_hits(hits: &mut [CorridorHit<'_>]) {
    hits.sort_by(|a, b| a.s.total_cmp(&b.s).then_with(|| a.record.id.cmp(&b.record.id)));
}

/// Greedy thinning: from the last kept frame, walk forward to the first
/// frame at least `target` away and keep whichever of it and its
/// predecessor is closer to `target`, never exceeding `max_gap`.
pub fn resample_indices(positions: &[Vector3<f64>], target: f64, max_gap: f64) -> Vec<usize> {
    if positions.is_empty() {
        return Vec::new();
    }
    let mut kept = vec![0];
    let mut last = 0;
    let mut j = 1;
    while j < positions.len() {
        let d = (positions[j] - positions[last]).norm();
        if d < target {
            j += 1;
            continue;
        }
        let mut pick = j;
        if j - 1 > last {
            let d_prev = (positions[j - 1] - positions[last]).norm();
            if (target - d_prev) < (d - target) || d > max_gap {
                pick = j - 1;
            }
        }
        kept.push(pick);
        last = pick;
        j = pick + 1;
    }
    kept
}
