use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use phonewatch::frames::{Frame, MemorySource, TimestampPolicy};
use phonewatch::pipeline::{FrameResult, OnFrameError, PipelineMode};
use phonewatch::scenario::{Scenario, Vehicle};
use phonewatch::store::{SnapshotPolicy, Store, ViolationLogger};
use phonewatch::timestamp::Timestamp;
use phonewatch_core::geometry::BBox;
use phonewatch_core::track::TrackerConfig;

const MODES: [PipelineMode; 2] = [PipelineMode::SingleStep, PipelineMode::TwoStep];

fn ts(ms: i64) -> Timestamp {
    Timestamp::from_millis(ms)
}

struct Run {
    results: Vec<FrameResult>,
    logger: ViolationLogger,
}

fn run(scenario: &Scenario, mode: PipelineMode, store: &Store, policy: SnapshotPolicy, frames: Vec<Frame>) -> Run {
    let mut pipeline = scenario.pipeline(mode, Some(TrackerConfig::default()), Duration::ZERO);
    let mut logger = ViolationLogger::new(store.clone(), "cam", mode, policy).unwrap();
    if let Some(last) = logger.resume_point() {
        pipeline.tracker_mut().unwrap().resume_after(last);
    }
    let mut results = Vec::new();
    let mut collect = |r: &FrameResult, _: &Frame| results.push(r.clone());
    let summary = pipeline.run_stream(MemorySource::new(frames), &mut [&mut logger, &mut collect], OnFrameError::Abort);
    assert!(summary.aborted.is_none(), "{:?}", summary.aborted);
    assert!(logger.take_error().is_none());
    Run { results, logger }
}

fn scenario_frames(s: &Scenario) -> Vec<Frame> {
    s.frames(TimestampPolicy::nominal_from_epoch_ms(0, 25.0))
}

#[test]
fn three_vehicles_two_violations_in_both_modes() {
    let s = Scenario::three_vehicles();
    for mode in MODES {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let out = run(&s, mode, &store, SnapshotPolicy::BestScore, scenario_frames(&s));
        let state = store.state();
        assert_eq!(state.len(), 2, "{mode:?}: {:#?}", state.records().collect::<Vec<_>>());
        assert_eq!(state.vehicle_count("cam", ts(0), ts(10_000)).unwrap().count, 3, "{mode:?}");
        assert_eq!(out.logger.stats().violations_created, 2);
        assert_eq!(out.logger.stats().vehicles, 3);
        for r in state.records() {
            assert_eq!(r.windscreen_track_id.is_some(), mode == PipelineMode::TwoStep);
            assert!(dir.path().join(&r.snapshot_ref).is_file());
            assert!(r.first_seen <= r.last_seen);
        }
        // vehicle A's first phone is on frame 20, B's on frame 60
        let firsts: BTreeSet<u64> = state.records().map(|r| r.frame_index_first).collect();
        assert_eq!(firsts, BTreeSet::from([20, 60]), "{mode:?}");
    }
}

#[test]
fn stationary_vehicle_keeps_one_identity() {
    let s = Scenario::three_vehicles();
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let out = run(&s, PipelineMode::TwoStep, &store, SnapshotPolicy::BestScore, scenario_frames(&s));
    // vehicle C (stationary) is the only windscreen on frames 170..200
    let ids: BTreeSet<_> = out.results[80..200]
        .iter()
        .flat_map(|r| r.of_label("windscreen").filter(|d| d.bbox.y_min() >= 199.0).map(|d| d.track_id))
        .collect();
    assert_eq!(ids.len(), 1, "{ids:?}");
}

#[test]
fn two_step_phones_stay_in_the_driver_region() {
    let s = Scenario::three_vehicles();
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let out = run(&s, PipelineMode::TwoStep, &store, SnapshotPolicy::BestScore, scenario_frames(&s));
    let mut phones = 0;
    for r in &out.results {
        for d in r.of_label("phone") {
            let region = d.region.expect("two-step phones carry their crop region");
            assert!(region.contains(&d.bbox, 1e-9));
            let w = &r.detections[d.windscreen.unwrap()];
            assert!(w.bbox.contains(&d.bbox, 1e-9));
            phones += 1;
        }
    }
    assert_eq!(phones, 80);
}

#[test]
fn modes_agree_on_phone_boxes() {
    let s = Scenario::three_vehicles();
    let collect = |mode| {
        let mut p = s.pipeline(mode, None, Duration::ZERO);
        let mut boxes: BTreeMap<u64, Vec<BBox>> = BTreeMap::new();
        for f in scenario_frames(&s) {
            let r = p.process(&f).unwrap();
            boxes.insert(f.index, r.of_label("phone").map(|d| d.bbox).collect());
        }
        boxes
    };
    let single = collect(PipelineMode::SingleStep);
    let two = collect(PipelineMode::TwoStep);
    for (f, a) in &single {
        let b = &two[f];
        assert_eq!(a.len(), b.len(), "frame {f}");
        for (x, y) in a.iter().zip(b) {
            for (p, q) in x.to_array().iter().zip(y.to_array()) {
                assert!((p - q).abs() <= 1e-6, "frame {f}: {x:?} vs {y:?}");
            }
        }
    }
}

fn one_vehicle(phone_frames: Vec<u64>, visible: std::ops::Range<u64>, frames: u64) -> Scenario {
    Scenario {
        size: phonewatch_core::geometry::FrameSize::new(640, 360).unwrap(),
        frames,
        vehicles: vec![Vehicle {
            windscreen: BBox::new(200.0, 100.0, 440.0, 190.0).unwrap(),
            velocity: (0.0, 0.0),
            visible,
            phone_frames,
        }],
    }
}

#[test]
fn snapshot_policies() {
    // scores on frames 10, 11, 12 are 0.6 + 0.35*((7f % 11)/10): 0.845, 0.60, 0.88
    let s = one_vehicle(vec![10, 11, 12, 13], 0..40, 40);
    let frames = scenario_frames(&s);
    let mut refs = Vec::new();
    for policy in [SnapshotPolicy::First, SnapshotPolicy::BestScore] {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let out = run(&s, PipelineMode::TwoStep, &store, policy, frames.clone());
        let state = store.state();
        assert_eq!(state.len(), 1);
        let r = state.records().next().unwrap();
        assert_eq!(r.frame_index_first, 10);
        let best = (10..14)
            .map(|f| (f, 0.6 + 0.35 * (((f * 7) % 11) as f64 / 10.0)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert_eq!(r.max_score, best.1);
        let bytes = std::fs::read(dir.path().join(&r.snapshot_ref)).unwrap();
        let expect_frame = match policy {
            SnapshotPolicy::First => 10,
            SnapshotPolicy::BestScore => best.0,
        };
        let expect = phonewatch::store::draw_overlay(&frames[expect_frame as usize].image, &out.results[expect_frame as usize].detections);
        let got = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(got, expect, "{policy:?}");
        refs.push(bytes);
    }
}

#[test]
fn phone_on_tentative_windscreen_waits_for_confirmation() {
    // phone on the windscreen's first frame, windscreen confirms on frame 2
    let s = one_vehicle(vec![0], 0..10, 10);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let out = run(&s, PipelineMode::TwoStep, &store, SnapshotPolicy::BestScore, scenario_frames(&s));
    let state = store.state();
    assert_eq!(state.len(), 1);
    let r = state.records().next().unwrap();
    assert_eq!(r.frame_index_first, 0);
    assert_eq!(r.first_seen, ts(0));
    assert_eq!(out.logger.stats().dropped, 0);
}

#[test]
fn phone_on_windscreen_that_never_confirms_is_dropped() {
    // the windscreen is seen twice (n_init is 3) then leaves for good
    let s = one_vehicle(vec![0], 0..2, 60);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let out = run(&s, PipelineMode::TwoStep, &store, SnapshotPolicy::BestScore, scenario_frames(&s));
    assert_eq!(store.state().len(), 0);
    assert_eq!(out.logger.stats().dropped, 1);
    assert_eq!(store.state().stream("cam").unwrap().dropped, 1);
    assert_eq!(store.state().vehicle_count("cam", ts(0), ts(100_000)).unwrap().count, 0);
}

#[test]
fn restart_continues_track_ids_without_duplicates() {
    let s = Scenario::three_vehicles();
    let frames = scenario_frames(&s);
    for mode in MODES {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = Store::open(dir.path()).unwrap();
            run(&s, mode, &store, SnapshotPolicy::BestScore, frames[..70].to_vec());
        }
        let store = Store::open(dir.path()).unwrap();
        let before = store.state();
        let max_before = before.stream("cam").unwrap().max_track_id;
        let out = run(&s, mode, &store, SnapshotPolicy::BestScore, frames[70..].to_vec());
        let min_new = out
            .results
            .iter()
            .flat_map(|r| r.detections.iter().filter_map(|d| d.track_id))
            .min()
            .unwrap();
        assert!(min_new.0 > max_before, "{mode:?}");
        // no record of the first session is touched by new tracks
        for r in before.records() {
            assert_eq!(store.state().get(r.violation_id).unwrap(), r);
        }
    }
}
