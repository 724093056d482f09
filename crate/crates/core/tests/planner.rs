use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streetgen_core::fixtures::{self, GridCityParams, FixtureCorpus, JUNCTION_TURN, LOOP_PATH};
use streetgen_core::geodesy::pose_distance;
use streetgen_core::pano_index::{DEFAULT_MAX_GAP_M, DEFAULT_TARGET_SPACING_M};
use streetgen_core::retrieval_planner::*;
use streetgen_core::Error;

mod common;
use common::oracles::exhaustive_plan_min;

fn catalog(c: &FixtureCorpus) -> (streetgen_core::pano_index::PanoIndex, SegmentCatalog) {
    let idx = c.index().unwrap();
    let segs = idx.group_trajectories(DEFAULT_MAX_GAP_M, Some(DEFAULT_TARGET_SPACING_M)).unwrap();
    (idx, SegmentCatalog::new(segs).unwrap())
}

fn check_plan_invariants(plan: &RetrievalPlan, p: &PlannerParams) {
    for w in plan.steps.windows(2) {
        assert!(w[1].s > w[0].s);
        assert!(w[1].s - w[0].s <= p.gap_max_m + 1e-9);
    }
    for s in &plan.steps {
        assert!(s.offset <= p.corridor_m);
        assert!(s.heading_mismatch <= p.heading_tol_deg);
    }
    assert!((plan_cost(&plan.steps, plan.total_length, p) - plan.cost).abs() < 1e-6);
}

#[test]
fn straight_path_uses_one_segment() {
    let city = fixtures::grid_city(&GridCityParams::default());
    let (idx, cat) = catalog(&city);
    let p = PlannerParams::default();
    let path = city.path(&[(10.0, 60.0), (230.0, 60.0)]).unwrap();
    let plan = plan_condition_path(&path, &idx, &cat, &p).unwrap();
    assert!(plan.switch_points.is_empty());
    assert!(plan.steps.iter().all(|s| s.segment_id == "ew1e#0"));
    check_plan_invariants(&plan, &p);
    let diag = validate_plan(&plan, &idx, &p).unwrap();
    assert!(diag.discontinuities.is_empty());
    assert!(diag.coverage_fraction > 0.98);
}

#[test]
fn junction_turn_switches_once_near_junction() {
    let j = fixtures::junction();
    let (idx, cat) = catalog(&j);
    let p = PlannerParams::default();
    let plan = plan_condition_path(&j.path(&JUNCTION_TURN).unwrap(), &idx, &cat, &p).unwrap();
    assert_eq!(plan.switch_points.len(), 1);
    let k = plan.switch_points[0];
    let junction = j.ecef(0.0, 0.0);
    for step in [&plan.steps[k - 1], &plan.steps[k]] {
        let pos = idx.get(&step.pano_id).unwrap().position();
        assert!((pos - junction).norm() <= p.corridor_m, "{} is {} m away", step.pano_id, (pos - junction).norm());
    }
    assert_eq!(plan.steps[k - 1].segment_id, "east#0");
    assert_eq!(plan.steps[k].segment_id, "north#0");
    check_plan_invariants(&plan, &p);
    let diag = validate_plan(&plan, &idx, &p).unwrap();
    assert_eq!(diag.discontinuities.len(), 1);
    let d = &diag.discontinuities[0];
    let expected = pose_distance(&idx.get(&d.from_pano).unwrap().pose, &idx.get(&d.to_pano).unwrap().pose);
    assert_eq!(d.distance_m, expected);
}

#[test]
fn loop_plan_covers_the_whole_block() {
    let l = fixtures::loop_course();
    let (idx, cat) = catalog(&l);
    let p = PlannerParams::default();
    let plan = plan_condition_path(&l.path(&LOOP_PATH).unwrap(), &idx, &cat, &p).unwrap();
    assert!(plan.switch_points.is_empty());
    assert_eq!(plan.steps.len(), 201);
    let first = idx.get(&plan.steps[0].pano_id).unwrap();
    let last = idx.get(&plan.steps.last().unwrap().pano_id).unwrap();
    assert!(pose_distance(&first.pose, &last.pose) < 1e-6);
}

#[test]
fn coverage_hole_is_reported() {
    let j = fixtures::junction();
    let (idx, cat) = catalog(&j);
    // Runs 50 m north of the eastbound street: nothing within the corridor.
    let path = j.path(&[(-100.0, 50.0), (100.0, 50.0)]).unwrap();
    match plan_condition_path(&path, &idx, &cat, &PlannerParams::default()) {
        Err(Error::NoCoverage { start_m, end_m }) => assert!(start_m < end_m),
        other => panic!("{other:?}"),
    }
    // Wrong way along the eastbound street: every candidate fails the
    // heading check.
    let path = j.path(&[(100.0, 0.0), (-100.0, 0.0)]).unwrap();
    assert_eq!(plan_condition_path(&path, &idx, &cat, &PlannerParams::default()).unwrap_err().code(), "no_coverage");
}

#[test]
fn empty_index_is_no_coverage() {
    let j = fixtures::junction();
    let idx = streetgen_core::pano_index::PanoIndex::empty();
    let cat = SegmentCatalog::new(vec![]).unwrap();
    let err = plan_condition_path(&j.path(&JUNCTION_TURN).unwrap(), &idx, &cat, &PlannerParams::default()).unwrap_err();
    assert_eq!(err.code(), "no_coverage");
}

#[test]
fn dp_matches_exhaustive_search_on_grid_city() {
    let p = PlannerParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    let mut covered = 0;
    for attempt in 0.. {
        if checked == 12 {
            break;
        }
        assert!(attempt < 200, "too few instances within the candidate limit");
        let city = fixtures::grid_city(&GridCityParams { random_drives: 12, seed: attempt, ..Default::default() });
        let (idx, cat) = catalog(&city);
        let path = city.path(&fixtures::random_grid_path(&mut rng, 4, 60.0)).unwrap();
        let cands = cat.candidates(&path, &idx, &p).unwrap();
        if cands.len() > 300 {
            continue;
        }
        checked += 1;
        let total = path.total_length();
        let oracle = exhaustive_plan_min(&cands, total, &p);
        match solve_plan(&cands, total, &p) {
            Ok((_, cost)) => {
                let o = oracle.expect("oracle finds a plan whenever the DP does");
                assert!((cost - o).abs() < 1e-9, "dp {cost} oracle {o}");
                covered += 1;
            }
            Err(Error::NoCoverage { .. }) => assert!(oracle.is_none()),
            Err(e) => panic!("{e}"),
        }
    }
    assert!(covered >= 10, "only {covered} paths were coverable");
}

fn abstract_instance() -> impl Strategy<Value = (Vec<Candidate>, f64)> {
    // Up to 3 segments of up to 14 steps with jittered spacing; offsets and
    // mismatches random.
    prop::collection::vec((0.0f64..6.0, 3usize..14, prop::collection::vec((0.5f64..2.5, 0.0f64..10.0, 0.0f64..45.0), 14)), 1..4)
        .prop_map(|segs| {
            let mut c = Vec::new();
            let mut total: f64 = 0.0;
            for (si, (start, len, steps)) in segs.into_iter().enumerate() {
                let mut s = start;
                for (k, &(ds, off, mis)) in steps.iter().take(len).enumerate() {
                    c.push(Candidate {
                        pano_id: format!("{si}-{k}"),
                        segment: si,
                        member: k,
                        s,
                        offset: off,
                        heading_mismatch: mis,
                        path_heading_deg: 0.0,
                    });
                    total = total.max(s);
                    s += ds;
                }
            }
            c.sort_by(|a, b| a.s.total_cmp(&b.s).then_with(|| a.pano_id.cmp(&b.pano_id)));
            (c, total + 1.0)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dp_matches_exhaustive_search_on_small_instances((cands, total) in abstract_instance(), min_run in 1usize..5) {
        let p = PlannerParams { min_run, gap_max_m: 3.0, switch_penalty: 4.0, ..PlannerParams::default() };
        let oracle = exhaustive_plan_min(&cands, total, &p);
        match solve_plan(&cands, total, &p) {
            Ok((chain, cost)) => {
                prop_assert!((cost - oracle.unwrap()).abs() < 1e-9);
                prop_assert!(chain.windows(2).all(|w| cands[w[1]].s > cands[w[0]].s));
            }
            Err(e) => {
                prop_assert_eq!(e.code(), "no_coverage");
                prop_assert!(oracle.is_none());
            }
        }
    }

    #[test]
    fn chunk_reassembly_is_identity(len in 0usize..400, chunk in 2usize..100) {
        let plan = RetrievalPlan {
            steps: (0..len).map(|i| PlanStep {
                s: i as f64, pano_id: format!("p{i}"), segment_id: "a#0".into(), member_index: i,
                offset: 0.0, heading_mismatch: 0.0, path_heading_deg: 0.0,
            }).collect(),
            switch_points: vec![],
            total_length: len as f64,
            cost: 0.0,
        };
        let chunks = chunk_plan(&plan, chunk).unwrap();
        for w in chunks.windows(2) {
            prop_assert_eq!(w[0].steps.last(), w[1].steps.first());
        }
        prop_assert!(chunks.iter().all(|c| c.steps.len() <= chunk));
        prop_assert_eq!(reassemble_chunks(&chunks), plan.steps);
    }
}
