mod common;

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use ddcot_core::cli::{canonicalize_predictions, canonicalize_telemetry, read_predictions, RunManifest};
use ddcot_core::model::{Prediction, Stage};

use common::fixture;

fn ddcot(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddcot")).current_dir(cwd).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn mini() -> std::path::PathBuf {
    fixture("mini")
}

fn run_into(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--dataset", "problems.json", "--split", "test", "--backends", "backends.json", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    ddcot(&mini(), &args)
}

#[test]
fn unknown_problem_id_is_not_found() {
    let o = ddcot(&mini(), &["rationale", "--backends", "backends.json", "--dataset", "problems.json", "--problem-id", "999"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("not_found"));
}

#[test]
fn no_image_means_no_recognition() {
    let o = ddcot(&mini(), &["rationale", "--backends", "backends.json", "--dataset", "problems.json", "--problem-id", "1", "--no-image", "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pred: Prediction = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(pred.transcript.count(Stage::Recognize), 0);
    assert!(pred.transcript.caption.is_none());
    assert!(pred.rationale.supplementary[0].sub_answer.is_uncertain());
}

#[test]
fn inline_question() {
    let o = ddcot(
        &mini(),
        &["rationale", "--backends", "backends.json", "--question", "Which substance is a compound?", "--choice", "oxygen gas", "--choice", "water", "--choice", "iron", "--answer", "B"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("(B) water"), "{text}");
    assert!(text.contains("ground truth (B): correct"));
}

#[test]
fn inline_question_needs_two_choices() {
    let o = ddcot(&mini(), &["rationale", "--backends", "backends.json", "--question", "Why?", "--choice", "only"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_flag_is_usage_error() {
    let o = ddcot(&mini(), &["run", "--dataset", "problems.json", "--split", "test", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ddcot(&mini(), &["run", "--dataset", "problems.json", "--split", "test", "--backends", "absent.json", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_dataset_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ddcot(&mini(), &["run", "--dataset", "nope.json", "--split", "test", "--backends", "backends.json", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn sampling_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for round in ["a", "b"] {
        let out = tmp.path().join(round);
        let o = run_into(&out, &["--sample", "3", "--seed", "7"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let text = std::fs::read_to_string(out.join("predictions.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 3);
        let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.counts.predictions, 3);
        outputs.push((canonicalize_predictions(&text).unwrap(), m.run_id));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn subject_filter_and_no_transcript() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_into(tmp.path(), &["--subject", "social science", "--no-transcript"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let preds = read_predictions(&tmp.path().join("predictions.jsonl")).unwrap();
    let ids: Vec<&str> = preds.iter().map(|p| p.problem_id.as_str()).collect();
    assert_eq!(ids, ["2", "5"]);
    assert!(preds.iter().all(|p| p.transcript.entries.is_empty() && p.transcript.caption.is_none()));
}

fn cached_config(dir: &Path) -> std::path::PathBuf {
    let m = mini();
    let cfg = serde_json::json!({
        "cache_dir": "cache",
        "llm": {"kind": "mock", "model": "mock-llm", "script": m.join("llm.json")},
        "vqa": {"kind": "mock", "model": "mock-vqa", "script": m.join("vision.json")},
        "caption": {"kind": "mock", "model": "mock-captioner", "script": m.join("vision.json")},
    });
    let path = dir.join("backends.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn rerun_is_idempotent_under_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = cached_config(tmp.path());
    let cfg_s = cfg.to_str().unwrap();
    let mut runs = Vec::new();
    for round in ["cold", "warm"] {
        let out = tmp.path().join(round);
        let o = ddcot(&mini(), &["run", "--dataset", "problems.json", "--split", "test", "--backends", cfg_s, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let text = std::fs::read_to_string(out.join("predictions.jsonl")).unwrap();
        let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        runs.push((text, m));
    }
    let (cold, warm) = (&runs[0], &runs[1]);
    assert_eq!(cold.1.counts.cache_hits, 0);
    assert!(cold.1.counts.backend_calls > 0);
    // Failed calls are never cached, so only problem 5's vision calls repeat.
    assert_eq!(warm.1.counts.backend_calls, 2);
    assert_eq!(warm.1.counts.cache_hits, cold.1.counts.backend_calls - 2);
    assert_eq!(canonicalize_telemetry(&cold.0).unwrap(), canonicalize_telemetry(&warm.0).unwrap());
    assert_eq!(cold.1.run_id, warm.1.run_id);

    let stats = ddcot(&mini(), &["cache", "stats", "--backends", cfg_s]);
    assert_eq!(stats.status.code(), Some(0));
    let entries = cold.1.counts.backend_calls - 2;
    assert!(String::from_utf8_lossy(&stats.stdout).contains(&format!("{entries} entries")), "{}", String::from_utf8_lossy(&stats.stdout));
    let clear = ddcot(&mini(), &["cache", "clear", "--backends", cfg_s]);
    assert_eq!(clear.status.code(), Some(0));
    let stats = ddcot(&mini(), &["cache", "stats", "--backends", cfg_s]);
    assert!(String::from_utf8_lossy(&stats.stdout).contains(" 0 entries"));
}

#[test]
fn cache_without_location_is_usage_error() {
    let o = ddcot(&mini(), &["cache", "stats"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_empty_predictions_reports_zero_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = ddcot(&mini(), &["eval", "--predictions", empty.to_str().unwrap(), "--dataset", "problems.json", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for (name, s) in report["categories"].as_object().unwrap() {
        assert_eq!(s["n"], 0, "{name}");
        assert!(s["accuracy"].is_null(), "{name}");
    }
    let md = ddcot(&mini(), &["eval", "--predictions", empty.to_str().unwrap(), "--dataset", "problems.json", "--format", "md"]);
    assert_eq!(String::from_utf8_lossy(&md.stdout).matches('—').count(), 9);
}

#[test]
fn eval_unknown_problem_is_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let preds = std::fs::read_to_string(fixture("scoring/predictions.jsonl")).unwrap();
    let path = tmp.path().join("p.jsonl");
    std::fs::write(&path, preds).unwrap();
    // Problem ids 7..10 do not exist in the six-problem dataset.
    let o = ddcot(&mini(), &["eval", "--predictions", path.to_str().unwrap(), "--dataset", "problems.json"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("unknown problem"));
}

#[test]
fn eval_several_formats_need_out_dir() {
    let o = ddcot(&mini(), &["eval", "--predictions", "golden/predictions.jsonl", "--dataset", "problems.json", "--format", "md,csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_formats_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ddcot(
        &mini(),
        &["eval", "--predictions", "golden/predictions.jsonl", "--dataset", "problems.json", "--format", "json,md,csv", "--out", tmp.path().to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    let csv = std::fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    let md = std::fs::read_to_string(tmp.path().join("report.md")).unwrap();
    let row: Vec<&str> = md.lines().nth(2).unwrap().split('|').map(str::trim).filter(|s| !s.is_empty()).collect();
    for (i, line) in csv.lines().skip(1).enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let cat = &json["categories"][f[1]];
        assert_eq!(cat["n"].to_string(), f[2]);
        assert_eq!(cat["correct"].to_string(), f[3]);
        let acc: f64 = f[4].parse().unwrap();
        assert!((cat["accuracy"].as_f64().unwrap() - acc).abs() < 1e-6);
        assert_eq!(row[i + 1], format!("{:.2}", acc * 100.0));
    }
}

#[test]
fn selftest_quick_passes_fast() {
    let start = Instant::now();
    let o = ddcot(&mini(), &["selftest", "--quick"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn perturbed_gradient_fails_selftest() {
    let o = ddcot(&mini(), &["selftest", "--quick", "--perturb-gradient", "0.01"]);
    assert_eq!(o.status.code(), Some(6));
    assert!(stderr(&o).contains("grad_check"), "{}", stderr(&o));
}

#[test]
fn help_exits_zero() {
    let o = ddcot(&mini(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
}
