//! Conditioning-sequence planning along a user path.
//!
//! Candidates are indexed captures inside a corridor around the path whose
//! direction of travel roughly agrees with the path. A dynamic program then
//! picks the cheapest sequence with strictly increasing arc length, where
//! consecutive steps either continue the same capture segment frame by frame
//! or switch to a different segment at a fixed penalty. Switching is how a
//! path that no single capture follows (a turn at a junction) gets covered.

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::{angle_difference, pose_distance, travel_headings, GeodeticCoord, LocalFrame};
use crate::pano_index::{PanoIndex, Polyline, TrajectorySegment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserPath {
    pub waypoints: Vec<GeodeticCoord>,
}

impl UserPath {
    pub fn new(waypoints: Vec<GeodeticCoord>) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(Error::DegeneratePath(format!("{} waypoints, need at least 2", waypoints.len())));
        }
        for (i, w) in waypoints.windows(2).enumerate() {
            if (w[1].to_ecef() - w[0].to_ecef()).norm() < 1e-6 {
                return Err(Error::DegeneratePath(format!("waypoints {i} and {} coincide", i + 1)));
            }
        }
        Ok(Self { waypoints })
    }

    pub fn ecef_vertices(&self) -> Vec<Vector3<f64>> {
        self.waypoints.iter().map(GeodeticCoord::to_ecef).collect()
    }

    pub fn polyline(&self) -> Result<Polyline> {
        Polyline::new(self.ecef_vertices())
    }

    pub fn total_length(&self) -> f64 {
        self.ecef_vertices().windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerParams {
    pub corridor_m: f64,
    pub heading_tol_deg: f64,
    pub min_run: usize,
    pub switch_penalty: f64,
    pub gap_max_m: f64,
    /// Cost per degree of heading mismatch.
    pub heading_weight: f64,
    /// Cost per meter of path left uncovered before the first step and
    /// after the last one. Without it the cheapest plan trims both ends.
    pub end_gap_weight: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self { corridor_m: 10.0, heading_tol_deg: 45.0, min_run: 8, switch_penalty: 25.0, gap_max_m: 8.0, heading_weight: 0.05, end_gap_weight: 10.0 }
    }
}

impl PlannerParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.corridor_m > 0.0
            && self.heading_tol_deg > 0.0
            && self.min_run >= 1
            && self.switch_penalty > 0.0
            && self.gap_max_m > 0.0
            && self.heading_weight > 0.0
            && self.end_gap_weight >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams("planner parameters must all be positive".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub s: f64,
    pub pano_id: String,
    pub segment_id: String,
    /// Position of the capture within its segment.
    pub member_index: usize,
    pub offset: f64,
    pub heading_mismatch: f64,
    /// Compass heading of the user path at this step.
    pub path_heading_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPlan {
    pub steps: Vec<PlanStep>,
    /// Step indices where the source segment changes.
    pub switch_points: Vec<usize>,
    pub total_length: f64,
    pub cost: f64,
}

impl RetrievalPlan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// One JSON object per step, newline-terminated.
    pub fn to_lines(&self) -> String {
        self.steps.iter().map(|s| serde_json::to_string(s).expect("step serializes") + "\n").collect()
    }
}

/// Recomputes the objective of a plan from its steps.
pub fn plan_cost(steps: &[PlanStep], total_length: f64, params: &PlannerParams) -> f64 {
    let (Some(first), Some(last)) = (steps.first(), steps.last()) else { return f64::INFINITY };
    let switches = steps.windows(2).filter(|w| w[0].segment_id != w[1].segment_id).count();
    steps.iter().map(|s| s.offset + params.heading_weight * s.heading_mismatch).sum::<f64>()
        + params.switch_penalty * switches as f64
        + params.end_gap_weight * (first.s.max(0.0) + (total_length - last.s).max(0.0))
}

/// One admissible capture for a stretch of path.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub pano_id: String,
    pub segment: usize,
    pub member: usize,
    pub s: f64,
    pub offset: f64,
    pub heading_mismatch: f64,
    pub path_heading_deg: f64,
}

impl Candidate {
    pub fn cost(&self, params: &PlannerParams) -> f64 {
        self.offset + params.heading_weight * self.heading_mismatch
    }
}

/// Trajectory segments with per-member travel headings, ready for planning.
#[derive(Debug, Clone)]
pub struct SegmentCatalog {
    pub segments: Vec<TrajectorySegment>,
    headings: Vec<Vec<f64>>,
    membership: HashMap<String, (usize, usize)>,
}

impl SegmentCatalog {
    pub fn new(segments: Vec<TrajectorySegment>) -> Result<Self> {
        let mut membership = HashMap::new();
        let mut headings = Vec::with_capacity(segments.len());
        for (si, seg) in segments.iter().enumerate() {
            headings.push(travel_headings(&seg.positions)?);
            for (k, id) in seg.pano_ids.iter().enumerate() {
                membership.insert(id.clone(), (si, k));
            }
        }
        Ok(Self { segments, headings, membership })
    }

    pub fn membership(&self, pano_id: &str) -> Option<(usize, usize)> {
        self.membership.get(pano_id).copied()
    }

    pub fn heading(&self, segment: usize, member: usize) -> f64 {
        self.headings[segment][member]
    }

    /// Corridor candidates whose segment direction is within the heading
    /// tolerance of the path, sorted by arc length.
    pub fn candidates(&self, path: &UserPath, index: &PanoIndex, params: &PlannerParams) -> Result<Vec<Candidate>> {
        let line = path.polyline()?;
        let frames: Vec<LocalFrame> = (0..line.parts())
            .map(|i| LocalFrame::at_geodetic(&path.waypoints[i]))
            .collect();
        let mut out = Vec::new();
        for hit in index.query_corridor_passes(&line.vertices, params.corridor_m)? {
            let Some((segment, member)) = self.membership(&hit.record.id) else { continue };
            let path_heading = frames[hit.part].heading_of(&line.part_direction(hit.part));
            let mismatch = angle_difference(path_heading, self.heading(segment, member)).abs();
            if mismatch <= params.heading_tol_deg {
                out.push(Candidate {
                    pano_id: hit.record.id.clone(),
                    segment,
                    member,
                    s: hit.s,
                    offset: hit.offset,
                    heading_mismatch: mismatch,
                    path_heading_deg: path_heading,
                });
            }
        }
        out.sort_by(|a, b| {
            a.s.total_cmp(&b.s).then_with(|| a.pano_id.cmp(&b.pano_id)).then_with(|| a.segment.cmp(&b.segment))
        });
        Ok(out)
    }
}

/// Optimal selection: indices into `candidates` (which must be sorted by
/// arc length) and the total cost.
///
/// State is (candidate, length of the current run capped at `min_run`). A
/// continuation moves to the next member of the same segment; a switch
/// moves to any candidate of another segment and requires the current run
/// to have reached `min_run`. Every step advances arc length by more than 0
/// and at most `gap_max_m`; the first step lies within `gap_max_m` of the
/// path start and the last within `gap_max_m` of its end. The distance
/// from the path start to the first step and from the last step to the
/// path end is charged at `end_gap_weight` per meter.
pub fn solve_plan(candidates: &[Candidate], total_length: f64, params: &PlannerParams) -> Result<(Vec<usize>, f64)> {
    params.validate()?;
    let n = candidates.len();
    let m = params.min_run;
    let states = m + 1; // run length 1..=m, index 0 unused
    let mut cost = vec![f64::INFINITY; n * states];
    let mut parent = vec![usize::MAX; n * states];

    let mut lo = 0;
    for q in 0..n {
        let cq = &candidates[q];
        let node = cq.cost(params);
        if cq.s <= params.gap_max_m {
            let c = params.end_gap_weight * cq.s.max(0.0) + node;
            if c < cost[q * states + 1] {
                cost[q * states + 1] = c;
            }
        }
        while candidates[lo].s < cq.s - params.gap_max_m {
            lo += 1;
        }
        for p in lo..q {
            let cp = &candidates[p];
            if !(cp.s < cq.s) {
                continue;
            }
            if cp.segment == cq.segment {
                if cq.member != cp.member + 1 {
                    continue;
                }
                for r in 1..=m {
                    let base = cost[p * states + r];
                    if base.is_finite() {
                        let next = (r + 1).min(m);
                        let c = base + node;
                        if c < cost[q * states + next] {
                            cost[q * states + next] = c;
                            parent[q * states + next] = p * states + r;
                        }
                    }
                }
            } else {
                let base = cost[p * states + m];
                if base.is_finite() {
                    let c = base + params.switch_penalty + node;
                    if c < cost[q * states + 1] {
                        cost[q * states + 1] = c;
                        parent[q * states + 1] = p * states + m;
                    }
                }
            }
        }
    }

    let mut best: Option<(usize, f64)> = None;
    for q in 0..n {
        if candidates[q].s < total_length - params.gap_max_m {
            continue;
        }
        let tail = params.end_gap_weight * (total_length - candidates[q].s).max(0.0);
        for r in 1..=m {
            let st = q * states + r;
            let c = cost[st] + tail;
            if c.is_finite() && best.is_none_or(|(_, b)| c < b) {
                best = Some((st, c));
            }
        }
    }
    let Some((end, total_cost)) = best else {
        return Err(uncovered_interval(candidates, &cost, states, total_length, params.gap_max_m));
    };
    let mut chain = vec![end / states];
    let mut st = end;
    while parent[st] != usize::MAX {
        st = parent[st];
        chain.push(st / states);
    }
    chain.reverse();
    Ok((chain, total_cost))
}

fn uncovered_interval(candidates: &[Candidate], cost: &[f64], states: usize, total: f64, gap: f64) -> Error {
    let reach = (0..candidates.len())
        .filter(|&q| (1..states).any(|r| cost[q * states + r].is_finite()))
        .map(|q| candidates[q].s)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
    let start = reach.unwrap_or(0.0);
    let end = candidates
        .iter()
        .map(|c| c.s)
        .find(|&s| s > start && (reach.is_none() || s - start > gap))
        .unwrap_or(total)
        .min(total);
    Error::NoCoverage { start_m: start, end_m: end.max(start) }
}

/// Plans a conditioning sequence for `path`.
pub fn plan_condition_path(
    path: &UserPath,
    index: &PanoIndex,
    catalog: &SegmentCatalog,
    params: &PlannerParams,
) -> Result<RetrievalPlan> {
    params.validate()?;
    let total_length = path.total_length();
    if index.is_empty() {
        return Err(Error::NoCoverage { start_m: 0.0, end_m: total_length });
    }
    let candidates = catalog.candidates(path, index, params)?;
    let (chain, cost) = solve_plan(&candidates, total_length, params)?;
    let steps: Vec<PlanStep> = chain
        .iter()
        .map(|&i| {
            let c = &candidates[i];
            PlanStep {
                s: c.s,
                pano_id: c.pano_id.clone(),
                segment_id: catalog.segments[c.segment].segment_id.clone(),
                member_index: c.member,
                offset: c.offset,
                heading_mismatch: c.heading_mismatch,
                path_heading_deg: c.path_heading_deg,
            }
        })
        .collect();
    let switch_points = (1..steps.len()).filter(|&i| steps[i].segment_id != steps[i - 1].segment_id).collect();
    Ok(RetrievalPlan { steps, switch_points, total_length, cost })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchDiscontinuity {
    pub step: usize,
    pub from_pano: String,
    pub to_pano: String,
    pub distance_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub steps: usize,
    pub switches: usize,
    /// Largest arc-length advance between consecutive steps.
    pub max_gap_m: f64,
    pub discontinuities: Vec<SwitchDiscontinuity>,
    /// Fraction of the path bridged by consecutive steps no more than
    /// `gap_max_m` apart.
    pub coverage_fraction: f64,
}

pub fn validate_plan(plan: &RetrievalPlan, index: &PanoIndex, params: &PlannerParams) -> Result<PlanDiagnostics> {
    let pose_of = |id: &str| {
        index.get(id).map(|r| r.pose).ok_or_else(|| Error::InvalidParams(format!("unknown panorama id {id}")))
    };
    let mut max_gap_m: f64 = 0.0;
    let mut covered = 0.0;
    for w in plan.steps.windows(2) {
        let gap = w[1].s - w[0].s;
        max_gap_m = max_gap_m.max(gap);
        if gap <= params.gap_max_m {
            covered += gap;
        }
    }
    let mut discontinuities = Vec::new();
    for &i in &plan.switch_points {
        let (a, b) = (&plan.steps[i - 1], &plan.steps[i]);
        discontinuities.push(SwitchDiscontinuity {
            step: i,
            from_pano: a.pano_id.clone(),
            to_pano: b.pano_id.clone(),
            distance_m: pose_distance(&pose_of(&a.pano_id)?, &pose_of(&b.pano_id)?),
        });
    }
    let coverage_fraction = if plan.total_length > 0.0 { (covered / plan.total_length).clamp(0.0, 1.0) } else { 0.0 };
    Ok(PlanDiagnostics {
        steps: plan.steps.len(),
        switches: plan.switch_points.len(),
        max_gap_m,
        discontinuities,
        coverage_fraction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanChunk {
    pub index: usize,
    /// Offset of the first step within the plan.
    pub start: usize,
    pub steps: Vec<PlanStep>,
}

/// Splits a plan into windows of `chunk_len` steps where each chunk starts
/// on the last step of the previous one. The final chunk may be shorter.
pub fn chunk_plan(plan: &RetrievalPlan, chunk_len: usize) -> Result<Vec<PlanChunk>> {
    if chunk_len < 2 {
        return Err(Error::InvalidParams(format!("chunk length {chunk_len} must be >= 2")));
    }
    let n = plan.steps.len();
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk_len).min(n);
        chunks.push(PlanChunk { index: chunks.len(), start, steps: plan.steps[start..end].to_vec() });
        if end == n {
            break;
        }
        start = end - 1;
    }
    Ok(chunks)
}

/// Inverse of [`chunk_plan`]: concatenates chunks, dropping each shared
/// boundary step once.
pub fn reassemble_chunks(chunks: &[PlanChunk]) -> Vec<PlanStep> {
    let mut out: Vec<PlanStep> = Vec::new();
    for (i, c) in chunks.iter().enumerate() {
        let skip = usize::from(i > 0);
        out.extend(c.steps.iter().skip(skip).cloned());
    }
    out
}
