use std::path::Path;

use visifilter::scenario::{
    example3_scenario, teleop_scenario, wall_inspection_scenario, Mode, ReferenceSpec, Scenario, WallInspectionParams,
    EXAMPLE3_SEED,
};
use visifilter::sim::run;
use visifilter::trace::{read_csv, trace_csv, Metrics};

fn load(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    Scenario::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn files_match_builders() {
    assert_eq!(load("example3.json"), example3_scenario(EXAMPLE3_SEED));
    let baseline = load("example3_baseline.json");
    assert_eq!(baseline.mode, Mode::Baseline);
    assert_eq!(baseline.landmarks, example3_scenario(EXAMPLE3_SEED).landmarks);
    assert_eq!(load("wall_inspection.json"), wall_inspection_scenario(&WallInspectionParams::default()));
    assert_eq!(load("teleop.json"), teleop_scenario());
}

#[test]
fn teleop_file_uses_external_reference() {
    assert!(matches!(load("teleop.json").reference, ReferenceSpec::External { .. }));
}

#[test]
fn json_round_trip() {
    for name in ["example3.json", "example3_baseline.json", "wall_inspection.json", "teleop.json"] {
        let s = load(name);
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s, "{name}");
    }
}

#[test]
fn wall_threshold_follows_m() {
    let s = wall_inspection_scenario(&WallInspectionParams::default());
    assert_eq!(s.filter.w_min, 19.5);
}

#[test]
fn metrics_recomputed_from_csv_are_identical() {
    let mut s = load("example3.json");
    s.duration = 2.0;
    let trace = run(&s).unwrap();
    let direct = Metrics::from_trace(&trace).unwrap();
    let csv = trace_csv(&trace).unwrap();
    let replayed = Metrics::from_rows(&read_csv(csv.as_bytes()).unwrap()).unwrap();
    assert_eq!(direct.to_json(), replayed.to_json());
    assert_eq!(direct.events, 20);
    assert_eq!(direct.breaches, 0);
    assert!(direct.min_w >= 5.0);
}

#[test]
fn resolved_scenario_reproduces_trace() {
    let mut s = load("example3.json");
    s.duration = 1.0;
    let resolved = Scenario::from_json(&s.to_json()).unwrap();
    assert_eq!(trace_csv(&run(&s).unwrap()).unwrap(), trace_csv(&run(&resolved).unwrap()).unwrap());
}

#[test]
fn event_count_matches_camera_rate() {
    let mut s = load("example3.json");
    s.duration = 3.0;
    let trace = run(&s).unwrap();
    let flags = trace.records.iter().filter(|r| r.event).count() as i64;
    let expected = (s.duration * s.filter.camera_rate).floor() as i64;
    assert!((flags - expected).abs() <= 1, "{flags} vs {expected}");
}
