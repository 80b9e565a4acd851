//! End-to-end checks of the `trivd` binary: the simulate/track/evaluate
//! flow, prompt handling, exit codes, and gradcheck output.

use std::path::Path;
use std::process::{Command, Output};

fn trivd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trivd"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "seed": 5,
        "frames": 12,
        "categories": ["person", "car"],
        "objects_per_category": 2,
        "image_size": [120.0, 90.0],
        "motion": [0.5, 1.5]
    });
    let path = dir.join("config.json");
    std::fs::write(&path, config.to_string()).unwrap();
    path
}

#[test]
fn simulate_track_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());

    let out = trivd(
        &[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            "scenario.json",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let scenario: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("scenario.json")).unwrap())
            .unwrap();
    assert_eq!(scenario["schema"], "trivd-scenario/1");

    let out = trivd(
        &[
            "track",
            "--scenario",
            "scenario.json",
            "--out",
            "tracks.csv",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("tracks.csv")).unwrap();
    assert!(csv.starts_with("frame,id,x,y,w,h,score,category"));
    let mirror: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("tracks.json")).unwrap())
            .unwrap();
    assert!(mirror.as_array().is_some_and(|rows| !rows.is_empty()));

    let out = trivd(
        &[
            "evaluate",
            "--scenario",
            "scenario.json",
            "--tracks",
            "tracks.csv",
            "--out",
            "report.json",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["mota"], 1.0);
    assert_eq!(report["idf1"], 1.0);
    assert_eq!(report["ids"], 0);
}

#[test]
fn track_with_prompt_restricts_categories() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    trivd(
        &[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            "scenario.json",
        ],
        dir.path(),
    );
    let out = trivd(
        &[
            "track",
            "--scenario",
            "scenario.json",
            "--prompt",
            "car",
            "--out",
            "tracks.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("tracks.csv")).unwrap();
    for line in csv.lines().skip(1) {
        assert!(line.ends_with(",car"), "unexpected row {:?}", line);
    }

    // evaluating the car tracks against the car-projected ground truth
    let out = trivd(
        &[
            "evaluate",
            "--scenario",
            "scenario.json",
            "--tracks",
            "tracks.csv",
            "--prompt",
            "car",
            "--out",
            "report.json",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["mota"], 1.0);
}

#[test]
fn unknown_prompt_category_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    trivd(
        &[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            "scenario.json",
        ],
        dir.path(),
    );
    let out = trivd(
        &[
            "track",
            "--scenario",
            "scenario.json",
            "--prompt",
            "zebra",
            "--out",
            "tracks.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = trivd(
        &["track", "--scenario", "nope.json", "--out", "tracks.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_arguments_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = trivd(&["track"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_every_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = trivd(&["gradcheck", "--seed", "7", "--fixtures", "5"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in [
        "soft_token_loss",
        "contrastive_alignment_loss",
        "box_loss",
        "total_loss",
    ] {
        assert!(stdout.contains(name), "missing {} in:\n{}", name, stdout);
    }
}
