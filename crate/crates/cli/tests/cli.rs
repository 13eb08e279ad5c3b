use std::path::Path;
use std::process::{Command, Output};

fn roadfiber(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_roadfiber"));
    cmd.args(args).arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("pipeline.toml");
    std::fs::write(&path, text).unwrap();
    path
}

const SMALL: &str = r#"
[scenario]
seed = 4
[scenario.traffic]
vehicles = 3
[tracking.track.model]
sigma_tddot = 0.001
"#;

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    for stage in ["simulate", "calibrate", "detect", "track", "characterize"] {
        let o = roadfiber(&[stage], Some(&cfg), &out);
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let characters = std::fs::read_to_string(out.join("characters.csv")).unwrap();
    assert!(characters.starts_with("track_id,"));
    assert_eq!(characters.lines().count(), 1 + 3);

    // Rerunning a stage from its persisted inputs reproduces its output.
    let first = std::fs::read(out.join("detections.csv")).unwrap();
    assert_eq!(code(&roadfiber(&["detect"], Some(&cfg), &out)), 0);
    assert_eq!(std::fs::read(out.join("detections.csv")).unwrap(), first);
}

#[test]
fn configuration_problems_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    // Inputs missing.
    assert_eq!(code(&roadfiber(&["detect"], None, dir.path())), 2);
    // Unknown section.
    let cfg = write_config(dir.path(), "[detecter]\nr0 = 3.0\n");
    assert_eq!(code(&roadfiber(&["detect"], Some(&cfg), dir.path())), 2);
    // Invalid value.
    let cfg = write_config(dir.path(), "[scenario]\ndecimation = 0\n");
    assert_eq!(code(&roadfiber(&["simulate"], Some(&cfg), dir.path())), 2);
    // Configured input that does not exist.
    let cfg = write_config(dir.path(), "[paths]\nsegments = \"nowhere.csv\"\n");
    std::fs::write(dir.path().join("detections.csv"), "channel,arrival_time_s,prominence,polarity\n").unwrap();
    std::fs::write(dir.path().join("calibration.csv"), "x\n").unwrap();
    assert_eq!(code(&roadfiber(&["track"], Some(&cfg), dir.path())), 2);
    // Usage errors.
    assert_eq!(code(&roadfiber(&["detect", "--seed", "x"], None, dir.path())), 2);
}

#[test]
fn malformed_data_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("detections.csv"), "channel,arrival_time_s,prominence,polarity\n1,2.0,oops,peak\n").unwrap();
    std::fs::write(dir.path().join("calibration.csv"), "garbage\n1,2\n").unwrap();
    let o = roadfiber(&["track"], None, dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_metrics_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}\n[eval]\ndecimations = [0]\n"));
    // A bad matrix is rejected before anything runs.
    assert_eq!(code(&roadfiber(&["eval"], Some(&cfg), &dir.path().join("bad"))), 2);

    let cfg = write_config(dir.path(), SMALL);
    let mut csv = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = roadfiber(&["eval", "--seed", "6"], Some(&cfg), &out);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        csv.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csv[0], csv[1]);
    let text = String::from_utf8(csv.remove(0)).unwrap();
    assert!(text.starts_with("scenario,metric,value\n"));
    assert_eq!(text.lines().count(), 1 + roadfiber::eval::METRICS.len());
}
