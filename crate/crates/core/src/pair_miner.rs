//! Training-pair mining: a fixed-length window from one capture session is
//! matched against every other session of the same street, and kept when
//! the mean camera-center distance of the best monotone alignment stays
//! under a threshold and the two sessions are far enough apart in time.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pano_index::TrajectorySegment;

/// Multiple of epsilon beyond which a segment is considered unrelated.
pub const NO_OVERLAP_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningParams {
    /// Frames per target window.
    pub n: usize,
    pub epsilon_m: f64,
    pub min_time_separation_s: f64,
    pub window_stride: usize,
}

impl Default for MiningParams {
    fn default() -> Self {
        Self { n: 73, epsilon_m: 5.0, min_time_separation_s: 3600.0, window_stride: 16 }
    }
}

impl MiningParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidParams(format!("window length {} must be >= 2", self.n)));
        }
        if !(self.epsilon_m > 0.0) {
            return Err(Error::InvalidParams(format!("epsilon {} must be positive", self.epsilon_m)));
        }
        if self.window_stride < 1 {
            return Err(Error::InvalidParams("window stride must be >= 1".into()));
        }
        if !(self.min_time_separation_s >= 0.0) {
            return Err(Error::InvalidParams("minimum time separation must be >= 0".into()));
        }
        Ok(())
    }
}

/// Best monotone assignment of window frames onto another segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// For each window frame, the index of its matched frame in the other
    /// segment. Non-decreasing.
    pub matches: Vec<usize>,
    pub mean_distance: f64,
    /// First and last matched index, inclusive.
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub target_segment: String,
    pub condition_segment: String,
    pub window_start: usize,
    pub target_window: Vec<String>,
    pub condition_window: Vec<String>,
    pub condition_span: (usize, usize),
    pub mean_alignment_dist: f64,
    /// Seconds between the two capture intervals; 0 if they overlap.
    pub time_gap: f64,
}

impl TrainingPair {
    pub fn to_manifest_line(&self) -> String {
        serde_json::to_string(self).expect("pair serializes")
    }
}

/// Aligns `window` onto the positions of `other`.
pub fn align_window(window: &[Vector3<f64>], other: &TrajectorySegment, epsilon_m: f64) -> Result<Alignment> {
    if other.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "segment {} has {} frames, need at least 2",
            other.segment_id,
            other.len()
        )));
    }
    align_positions(window, &other.positions, epsilon_m)
}

/// Minimum-mean monotone assignment by dynamic programming.
///
/// `cost[i][j]` is the cheapest total distance of matching window frames
/// `0..=i` with frame `i` on `other[j]`; it extends the prefix minimum of
/// row `i - 1` over `j' <= j`. Ties resolve to the smallest index, so the
/// result is deterministic.
pub fn align_positions(window: &[Vector3<f64>], other: &[Vector3<f64>], epsilon_m: f64) -> Result<Alignment> {
    if window.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    if other.is_empty() {
        return Err(Error::DegenerateInput("empty reference segment".into()));
    }
    let (n, m) = (window.len(), other.len());
    let dist = |i: usize, j: usize| (window[i] - other[j]).norm();

    let mut closest = f64::INFINITY;
    let mut cost: Vec<f64> = (0..m).map(|j| dist(0, j)).collect();
    closest = cost.iter().fold(closest, |a, &b| a.min(b));
    let mut back = vec![0usize; n * m];
    let mut next = vec![0.0; m];
    for i in 1..n {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for j in 0..m {
            if cost[j] < best {
                best = cost[j];
                arg = j;
            }
            let d = dist(i, j);
            closest = closest.min(d);
            next[j] = d + best;
            back[i * m + j] = arg;
        }
        std::mem::swap(&mut cost, &mut next);
    }
    if closest > NO_OVERLAP_FACTOR * epsilon_m {
        return Err(Error::NoOverlap { closest_m: closest });
    }

    let mut end = 0;
    for j in 1..m {
        if cost[j] < cost[end] {
            end = j;
        }
    }
    let total = cost[end];
    let mut matches = vec![0; n];
    matches[n - 1] = end;
    for i in (1..n).rev() {
        matches[i - 1] = back[i * m + matches[i]];
    }
    Ok(Alignment { span: (matches[0], matches[n - 1]), matches, mean_distance: total / n as f64 })
}

fn interval_gap(a: &[f64], b: &[f64]) -> f64 {
    let (a0, a1) = min_max(a);
    let (b0, b1) = min_max(b);
    (a0.max(b0) - a1.min(b1)).max(0.0)
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn bbox(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    points.iter().fold(
        (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    )
}

fn boxes_within(a: &(Vector3<f64>, Vector3<f64>), b: &(Vector3<f64>, Vector3<f64>), margin: f64) -> bool {
    (0..3).all(|k| a.0[k] <= b.1[k] + margin && b.0[k] <= a.1[k] + margin)
}

/// Window start offsets for a segment of `len` frames.
pub fn window_starts(len: usize, params: &MiningParams) -> impl Iterator<Item = usize> {
    let last = len.checked_sub(params.n);
    (0..).step_by(params.window_stride).take_while(move |&s| last.is_some_and(|l| s <= l))
}

/// Evaluates one (target window, condition segment) candidate.
pub fn evaluate_window(
    target: &TrajectorySegment,
    start: usize,
    condition: &TrajectorySegment,
    params: &MiningParams,
) -> Option<TrainingPair> {
    let window = &target.positions[start..start + params.n];
    let alignment = align_window(window, condition, params.epsilon_m).ok()?;
    if !(alignment.mean_distance < params.epsilon_m) {
        return None;
    }
    let (c0, c1) = alignment.span;
    let time_gap = interval_gap(&target.times[start..start + params.n], &condition.times[c0..=c1]);
    if time_gap < params.min_time_separation_s {
        return None;
    }
    Some(TrainingPair {
        target_segment: target.segment_id.clone(),
        condition_segment: condition.segment_id.clone(),
        window_start: start,
        target_window: target.pano_ids[start..start + params.n].to_vec(),
        condition_window: condition.pano_ids[c0..=c1].to_vec(),
        condition_span: alignment.span,
        mean_alignment_dist: alignment.mean_distance,
        time_gap,
    })
}

/// Mines pairs in both directions across all ordered segment pairs.
///
/// Work items run in parallel; the output is sorted by (target segment,
/// condition segment, window start) and does not depend on scheduling.
pub fn mine_pairs(segments: &[TrajectorySegment], params: &MiningParams) -> Result<Vec<TrainingPair>> {
    params.validate()?;
    let margin = NO_OVERLAP_FACTOR * params.epsilon_m;
    let boxes: Vec<_> = segments.iter().map(|s| bbox(&s.positions)).collect();

    let mut items = Vec::new();
    for (a, seg_a) in segments.iter().enumerate() {
        for (b, seg_b) in segments.iter().enumerate() {
            if a == b || seg_b.len() < 2 || !boxes_within(&boxes[a], &boxes[b], margin) {
                continue;
            }
            items.extend(window_starts(seg_a.len(), params).map(|s| (a, s, b)));
        }
    }

    let mut pairs: Vec<TrainingPair> = items
        .into_par_iter()
        .filter_map(|(a, start, b)| {
            let seg_a = &segments[a];
            let wbox = bbox(&seg_a.positions[start..start + params.n]);
            if !boxes_within(&wbox, &boxes[b], margin) {
                return None;
            }
            evaluate_window(seg_a, start, &segments[b], params)
        })
        .collect();
    pairs.sort_by(|x, y| {
        x.target_segment
            .cmp(&y.target_segment)
            .then_with(|| x.condition_segment.cmp(&y.condition_segment))
            .then_with(|| x.window_start.cmp(&y.window_start))
    });
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStatistics {
    pub count: usize,
    pub mean_distance_m: f64,
    pub distance_histogram: Vec<HistogramBin>,
    pub time_gap_histogram: Vec<HistogramBin>,
}

const DISTANCE_BINS: usize = 10;
const TIME_GAP_EDGES_S: [f64; 8] = [
    0.0,
    3600.0,
    6.0 * 3600.0,
    86_400.0,
    7.0 * 86_400.0,
    30.0 * 86_400.0,
    365.0 * 86_400.0,
    f64::INFINITY,
];

/// Dataset QA summary. Distances are binned in ten equal bins over
/// `[0, epsilon_m)`, with anything beyond folded into the last bin; time
/// gaps use fixed hour/day/week/month/year edges.
pub fn pair_statistics(pairs: &[TrainingPair], epsilon_m: f64) -> PairStatistics {
    let width = epsilon_m / DISTANCE_BINS as f64;
    let mut distance_histogram: Vec<HistogramBin> = (0..DISTANCE_BINS)
        .map(|k| HistogramBin { lo: k as f64 * width, hi: (k + 1) as f64 * width, count: 0 })
        .collect();
    let mut time_gap_histogram: Vec<HistogramBin> = TIME_GAP_EDGES_S
        .windows(2)
        .map(|w| HistogramBin { lo: w[0], hi: w[1], count: 0 })
        .collect();
    for p in pairs {
        let k = ((p.mean_alignment_dist / width).floor().max(0.0) as usize).min(DISTANCE_BINS - 1);
        distance_histogram[k].count += 1;
        let k = time_gap_histogram.iter().position(|b| p.time_gap < b.hi).unwrap_or(time_gap_histogram.len() - 1);
        time_gap_histogram[k].count += 1;
    }
    let mean_distance_m = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|p| p.mean_alignment_dist).sum::<f64>() / pairs.len() as f64
    };
    PairStatistics { count: pairs.len(), mean_distance_m, distance_histogram, time_gap_histogram }
}
