//! Independent reference implementations used to check the engine. Each
//! one takes a deliberately different route from the code under test.
#![allow(dead_code)]

use nalgebra::{DMatrix, Matrix3, Rotation3, Vector3};
use streetgen_core::eval_metrics::{FeatureSet, MaskFrame};
use streetgen_core::pair_miner::{MiningParams, TrainingPair, NO_OVERLAP_FACTOR};
use streetgen_core::pano_index::TrajectorySegment;
use streetgen_core::pano_projection::AugmentationParams;
use streetgen_core::retrieval_planner::{Candidate, PlannerParams};
use streetgen_core::ImageBuffer;

// ---- alignment and mining ----

/// Monotone alignment by the textbook recurrence without a running prefix
/// minimum: every cell rescans all admissible predecessors. Returns
/// (matches, total distance, closest distance).
pub fn naive_align(window: &[Vector3<f64>], other: &[Vector3<f64>]) -> (Vec<usize>, f64, f64) {
    let (n, m) = (window.len(), other.len());
    let d = |i: usize, j: usize| (window[i] - other[j]).norm();
    let mut cost = vec![vec![0.0; m]; n];
    let mut parent = vec![vec![0usize; m]; n];
    let mut closest = f64::INFINITY;
    for j in 0..m {
        cost[0][j] = d(0, j);
        closest = closest.min(cost[0][j]);
    }
    for i in 1..n {
        for j in 0..m {
            let mut best = 0;
            for k in 1..=j {
                if cost[i - 1][k] < cost[i - 1][best] {
                    best = k;
                }
            }
            let dij = d(i, j);
            closest = closest.min(dij);
            cost[i][j] = dij + cost[i - 1][best];
            parent[i][j] = best;
        }
    }
    let mut end = 0;
    for j in 1..m {
        if cost[n - 1][j] < cost[n - 1][end] {
            end = j;
        }
    }
    let mut matches = vec![end; n];
    for i in (1..n).rev() {
        matches[i - 1] = parent[i][matches[i]];
    }
    (matches, cost[n - 1][end], closest)
}

/// Minimum total distance over every non-decreasing assignment, by
/// enumeration. Only for tiny inputs.
pub fn brute_force_align(window: &[Vector3<f64>], other: &[Vector3<f64>]) -> f64 {
    fn rec(i: usize, lo: usize, acc: f64, w: &[Vector3<f64>], o: &[Vector3<f64>], best: &mut f64) {
        if i == w.len() {
            *best = best.min(acc);
            return;
        }
        for j in lo..o.len() {
            rec(i + 1, j, acc + (w[i] - o[j]).norm(), w, o, best);
        }
    }
    let mut best = f64::INFINITY;
    rec(0, 0, 0.0, window, other, &mut best);
    best
}

/// Every ordered segment pair, every window, no spatial prefiltering.
pub fn mine_pairs_exhaustive(segments: &[TrajectorySegment], p: &MiningParams) -> Vec<TrainingPair> {
    let mut out = Vec::new();
    for a in segments {
        for b in segments {
            if a.segment_id == b.segment_id || b.len() < 2 || a.len() < p.n {
                continue;
            }
            let mut start = 0;
            while start + p.n <= a.len() {
                let window = &a.positions[start..start + p.n];
                let (matches, total, closest) = naive_align(window, &b.positions);
                let mean = total / p.n as f64;
                if closest <= NO_OVERLAP_FACTOR * p.epsilon_m && mean < p.epsilon_m {
                    let (c0, c1) = (matches[0], matches[p.n - 1]);
                    let ta = &a.times[start..start + p.n];
                    let tb = &b.times[c0..=c1];
                    let lo = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let gap = if hi(ta) < lo(tb) {
                        lo(tb) - hi(ta)
                    } else if hi(tb) < lo(ta) {
                        lo(ta) - hi(tb)
                    } else {
                        0.0
                    };
                    if gap >= p.min_time_separation_s {
                        out.push(TrainingPair {
                            target_segment: a.segment_id.clone(),
                            condition_segment: b.segment_id.clone(),
                            window_start: start,
                            target_window: a.pano_ids[start..start + p.n].to_vec(),
                            condition_window: b.pano_ids[c0..=c1].to_vec(),
                            condition_span: (c0, c1),
                            mean_alignment_dist: mean,
                            time_gap: gap,
                        });
                    }
                }
                start += p.window_stride;
            }
        }
    }
    out.sort_by(|x, y| {
        (&x.target_segment, &x.condition_segment, x.window_start).cmp(&(&y.target_segment, &y.condition_segment, y.window_start))
    });
    out
}

// ---- projection ----

/// Pinhole crop by explicit ray rotation: camera ray (x right, y down,
/// z forward) mapped to the panorama frame (x at azimuth 90, y at azimuth
/// 0, z up) by a pitch about x followed by a clockwise yaw about z, then
/// sampled bilinearly in double precision.
pub fn raycast_crop(pano: &ImageBuffer, yaw_deg: f64, pitch_deg: f64, params: &AugmentationParams) -> ImageBuffer {
    let f = (params.out_w as f64 / 2.0) / (params.fov_deg.to_radians() / 2.0).tan();
    let base = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0);
    let r = Rotation3::from_axis_angle(&Vector3::z_axis(), -yaw_deg.to_radians())
        * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch_deg.to_radians());
    let m = r.matrix() * base;
    let (pw, ph) = (pano.width() as i64, pano.height() as i64);
    ImageBuffer::from_fn(params.out_w, params.out_h, |i, j| {
        let cam = Vector3::new(
            (i as f64 + 0.5 - params.out_w as f64 / 2.0) / f,
            (j as f64 + 0.5 - params.out_h as f64 / 2.0) / f,
            1.0,
        );
        let d = m * cam;
        let az = d.x.atan2(d.y).to_degrees().rem_euclid(360.0);
        let el = d.z.atan2(d.x.hypot(d.y)).to_degrees();
        let px = az / 360.0 * pw as f64 - 0.5;
        let py = (90.0 - el) / 180.0 * ph as f64 - 0.5;
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        let at = |x: i64, y: i64| pano.pixel(x.rem_euclid(pw) as u32, y.clamp(0, ph - 1) as u32);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let (a, b, c, e) = (at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1));
        std::array::from_fn(|k| {
            let v = (1.0 - fx) * (1.0 - fy) * a[k] as f64
                + fx * (1.0 - fy) * b[k] as f64
                + (1.0 - fx) * fy * c[k] as f64
                + fx * fy * e[k] as f64;
            v as f32
        })
    })
}

// ---- metrics ----

/// PSNR from per-channel squared-error sums.
pub fn psnr_ref(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&MaskFrame>) -> f64 {
    let mut sums = [0.0f64; 3];
    let mut n = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if mask.is_some_and(|m| m.is_dynamic(x, y)) {
                continue;
            }
            let (pa, pb) = (a.pixel(x, y), b.pixel(x, y));
            for c in 0..3 {
                sums[c] += (pa[c] as f64 - pb[c] as f64).powi(2);
            }
            n += 1.0;
        }
    }
    let mse = (sums[0] + sums[1] + sums[2]) / (3.0 * n);
    if mse == 0.0 {
        99.0
    } else {
        (-10.0 * mse.log10()).min(99.0)
    }
}

/// SSIM with a directly evaluated 2-D Gaussian window at each position.
pub fn ssim_ref(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&MaskFrame>) -> f64 {
    let win = 11usize;
    let half = 5i64;
    let mut w2 = vec![0.0f64; win * win];
    for dy in -half..=half {
        for dx in -half..=half {
            w2[((dy + half) as usize) * win + (dx + half) as usize] = (-((dx * dx + dy * dy) as f64) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let total: f64 = w2.iter().sum();
    w2.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.0001, 0.0009);
    let mut acc = 0.0;
    for c in 0..3 {
        let (mut sum, mut count) = (0.0, 0.0);
        for cy in half..a.height() as i64 - half {
            for cx in half..a.width() as i64 - half {
                if mask.is_some_and(|m| m.is_dynamic(cx as u32, cy as u32)) {
                    continue;
                }
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -half..=half {
                    for dx in -half..=half {
                        let wt = w2[((dy + half) as usize) * win + (dx + half) as usize];
                        let va = a.pixel((cx + dx) as u32, (cy + dy) as u32)[c] as f64;
                        let vb = b.pixel((cx + dx) as u32, (cy + dy) as u32)[c] as f64;
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        acc += sum / count;
    }
    acc / 3.0
}

fn naive_moments(f: &FeatureSet) -> (Vec<f64>, DMatrix<f64>) {
    let mut mean = vec![0.0; f.d];
    for i in 0..f.n {
        for k in 0..f.d {
            mean[k] += f.row(i)[k];
        }
    }
    mean.iter_mut().for_each(|v| *v /= f.n as f64);
    let mut cov = DMatrix::zeros(f.d, f.d);
    for i in 0..f.n {
        for r in 0..f.d {
            for c in 0..f.d {
                cov[(r, c)] += (f.row(i)[r] - mean[r]) * (f.row(i)[c] - mean[c]);
            }
        }
    }
    (mean, cov / (f.n as f64 - 1.0))
}

/// FID with the cross term from the eigenvalues of the non-symmetric
/// product of the two covariances.
pub fn fid_eig(real: &FeatureSet, gen: &FeatureSet) -> f64 {
    let (mr, cr) = naive_moments(real);
    let (mg, cg) = naive_moments(gen);
    let prod = &cr * &cg;
    let eig = prod.complex_eigenvalues();
    let cross: f64 = eig.iter().map(|z| z.re.max(0.0).sqrt()).sum();
    let dm: f64 = mr.iter().zip(&mg).map(|(a, b)| (a - b).powi(2)).sum();
    dm + cr.trace() + cg.trace() - 2.0 * cross
}

// ---- planning ----

/// Cheapest completion from each candidate when runs may be any length.
/// Never exceeds the true completion cost, so it is a valid pruning bound.
fn relaxed_completion(c: &[Candidate], total: f64, p: &PlannerParams) -> Vec<f64> {
    let mut h = vec![f64::INFINITY; c.len()];
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&a, &b| c[b].s.total_cmp(&c[a].s));
    for &q in &order {
        let cq = &c[q];
        let mut best = if cq.s >= total - p.gap_max_m { p.end_gap_weight * (total - cq.s).max(0.0) } else { f64::INFINITY };
        for (r, cr) in c.iter().enumerate() {
            if !(cr.s > cq.s && cr.s - cq.s <= p.gap_max_m) || !h[r].is_finite() {
                continue;
            }
            let node = cr.offset + p.heading_weight * cr.heading_mismatch;
            let step = if cr.segment == cq.segment {
                if cr.member != cq.member + 1 {
                    continue;
                }
                node
            } else {
                p.switch_penalty + node
            };
            best = best.min(step + h[r]);
        }
        h[q] = best;
    }
    h
}

/// Exhaustive depth-first search over every admissible step sequence,
/// pruned with the relaxed completion bound. Returns the minimum objective.
pub fn exhaustive_plan_min(c: &[Candidate], total: f64, p: &PlannerParams) -> Option<f64> {
    struct Search<'a> {
        c: &'a [Candidate],
        total: f64,
        p: &'a PlannerParams,
        bound: Vec<f64>,
        best: f64,
        visits: u64,
    }
    impl Search<'_> {
        fn visit(&mut self, last: usize, run: usize, cost: f64) {
            self.visits += 1;
            assert!(self.visits < 50_000_000, "oracle search exploded");
            // Slack keeps rounding differences from pruning an optimal branch.
            if cost + self.bound[last] > self.best + 1e-9 {
                return;
            }
            let cl = &self.c[last];
            if cl.s >= self.total - self.p.gap_max_m {
                let done = cost + self.p.end_gap_weight * (self.total - cl.s).max(0.0);
                if done < self.best {
                    self.best = done;
                }
            }
            // Continuations first so a good bound is found early.
            let mut order: Vec<usize> = (0..self.c.len())
                .filter(|&q| {
                    let cq = &self.c[q];
                    cq.s > cl.s && cq.s - cl.s <= self.p.gap_max_m
                })
                .collect();
            order.sort_by_key(|&q| self.c[q].segment != cl.segment);
            for q in order {
                let cq = &self.c[q];
                let node = cq.offset + self.p.heading_weight * cq.heading_mismatch;
                if cq.segment == cl.segment {
                    if cq.member == cl.member + 1 {
                        self.visit(q, run + 1, cost + node);
                    }
                } else if run >= self.p.min_run {
                    self.visit(q, 1, cost + self.p.switch_penalty + node);
                }
            }
        }
    }
    let mut search = Search { c, total, p, bound: relaxed_completion(c, total, p), best: f64::INFINITY, visits: 0 };
    for q in 0..c.len() {
        if c[q].s <= p.gap_max_m {
            let cost = p.end_gap_weight * c[q].s.max(0.0) + c[q].offset + p.heading_weight * c[q].heading_mismatch;
            search.visit(q, 1, cost);
        }
    }
    search.best.is_finite().then_some(search.best)
}

