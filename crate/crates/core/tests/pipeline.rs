//! End-to-end runs of small scenarios.

use roadfiber::eval::{emit_plots, run_eval, run_scenario, ScenarioConfig, METRICS};
use roadfiber::sim::TrafficSpec;

fn small(name: &str, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        seed,
        traffic: TrafficSpec { vehicles: 4, ..TrafficSpec::default() },
        ..ScenarioConfig::default()
    }
}

#[test]
fn small_scene_is_recovered() {
    let out = run_scenario(&small("small", 5)).unwrap();
    let metric = |k: &str| out.metrics.iter().find(|m| m.0 == k).unwrap().1;
    assert_eq!(out.metrics.len(), METRICS.len());
    assert_eq!(metric("vehicle_recall"), 1.0);
    assert!(metric("detection_precision") >= 0.95);
    assert!(metric("position_mae_m") < 1.0);
    assert!(metric("speed_mae_kmh") < 3.0);
    assert_eq!(out.characters.len(), out.tracks.len());
}

#[test]
fn failing_scenarios_are_reported_beside_the_rest() {
    let mut broken = small("broken", 1);
    broken.decimation = 0;
    let report = run_eval(&[small("a", 9), broken]);
    assert_eq!(report.rows.len(), METRICS.len());
    assert!(report.rows.iter().all(|r| r.scenario == "a"));
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].0, "broken");
    let dir = tempfile::tempdir().unwrap();
    let files = emit_plots(&report, dir.path()).unwrap();
    assert!(files.iter().any(|f| f.ends_with("metrics.csv")));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + METRICS.len());
    let failures = std::fs::read_to_string(dir.path().join("failures.csv")).unwrap();
    assert!(failures.lines().nth(1).unwrap().starts_with("broken,"));
}
