mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::s;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uiforge"))
        .args(args)
        .env("UIFORGE_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_and_help_codes() {
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
    assert_eq!(bin(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(bin(&["grid", "--width", "x", "--height", "1"]).status.code(), Some(2));
    let o = bin(&["curate", "/definitely/missing.jsonl", "--out", "/tmp/never.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does not exist"));
}

#[test]
fn grid_prints_plan() {
    let o = bin(&["grid", "--width", "672", "--height", "336"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!((v["n_w"].as_u64(), v["n_h"].as_u64()), (Some(2), Some(1)));
    assert_eq!(v["objective"].as_f64(), Some(0.0));
    assert_eq!(v["tiles"].as_array().unwrap().len(), 2);

    let o = bin(&["grid", "--width", "672", "--height", "336", "--tie-break", "scan"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!((v["n_w"].as_u64(), v["n_h"].as_u64()), (Some(1), Some(2)));
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("uiforge.conf");
    fs::write(&cfg, "# grid defaults\nlimit = 2\nheight = 336\n").unwrap();
    let o = bin(&["--config", s(&cfg), "grid", "--width", "1344"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!((v["n_w"].as_u64(), v["n_h"].as_u64()), (Some(1), Some(1)));

    // Command-line flags win over the file.
    let o = bin(&["--config", s(&cfg), "grid", "--width", "1344", "--limit", "8"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!((v["n_w"].as_u64(), v["n_h"].as_u64()), (Some(4), Some(1)));

    fs::write(&cfg, "limit\n").unwrap();
    assert_eq!(bin(&["--config", s(&cfg), "grid", "--width", "1", "--height", "1"]).status.code(), Some(2));
}

#[test]
fn validate_lists_issues_with_lines() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"kind\":\"header\"\nnot json\n").unwrap();
    let o = bin(&["validate", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains(":line 1"), "{out}");
    assert!(out.contains(":line 2"), "{out}");
}

fn make_corpus(dir: &Path) -> common::PipelineOut {
    common::pipeline(dir, 2, 3, false)
}

#[test]
fn stats_and_validate_on_pipeline_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = make_corpus(dir.path());
    let o = bin(&["validate", s(&out.curated), s(&out.elementary), s(&out.advanced)]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));

    let o = bin(&["stats", s(&out.curated), s(&out.elementary), "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for p in ["iPhone", "iPad", "AppleTV", "Web", "Android"] {
        assert_eq!(v[p]["records"].as_u64(), Some(2), "{p}");
        assert!(v[p]["samples"].as_u64().unwrap() > 0, "{p}");
    }
    let o = bin(&["stats", s(&out.curated)]);
    assert!(stdout(&o).contains("iPhone resolutions"));
}

#[test]
fn wrong_predictions_lower_scores() {
    let dir = tempfile::tempdir().unwrap();
    let out = make_corpus(dir.path());
    let text = fs::read_to_string(&out.predictions).unwrap();
    let mut lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|l| !["comprehensive", "_qa:"].iter().any(|t| l["id"].as_str().unwrap().contains(t)))
        .collect();
    let ocr = lines.iter().position(|l| l["id"].as_str().unwrap().contains(":ocr:")).unwrap();
    lines[ocr]["answer"] = "definitely wrong".into();
    let dropped = lines.iter().position(|l| l["id"].as_str().unwrap().contains(":find_text:")).unwrap();
    lines.remove(dropped);
    lines.push(serde_json::json!({"id": "stray", "answer": "x"}));
    let pred = dir.path().join("edited.jsonl");
    fs::write(&pred, lines.iter().map(|l| l.to_string() + "\n").collect::<String>()).unwrap();

    let report = dir.path().join("edited_report.json");
    let o = bin(&[
        "evaluate",
        "--task",
        "elementary",
        "--gold",
        s(&out.elementary),
        "--pred",
        s(&pred),
        "--out",
        s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Refer "));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert!(v["summary"]["refer"].as_f64().unwrap() < 1.0);
    assert!(v["summary"]["ground"].as_f64().unwrap() < 1.0);
    assert_eq!(v["missing_predictions"], 1);
    assert_eq!(v["unmatched_predictions"], 1);
}

#[test]
fn unmapped_label_fails_curation() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    common::run_ok(&["fixtures", "--out", s(&raw), "--platform", "Web", "--count", "1"]);
    let ann = raw.join("Web").join("web_0000.json");
    let text = fs::read_to_string(&ann).unwrap().replacen("\"tag\": \"p\"", "\"tag\": \"blink\"", 1);
    fs::write(&ann, text).unwrap();
    let manifest = dir.path().join("raw.jsonl");
    common::run_ok(&["ingest", s(&raw.join("Web")), "--out", s(&manifest)]);
    let o = bin(&["curate", s(&manifest), "--out", s(&dir.path().join("c.jsonl"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("(Web, \"blink\")"), "{}", stderr(&o));
}

#[test]
fn guide_scoring_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("guide.jsonl");
    fs::write(
        &gold,
        "{\"id\":\"g1\",\"action\":\"Click the search button\",\"box\":[10,10,50,30]}\n\
         {\"id\":\"g2\",\"action\":\"Type hello\",\"box\":[0,40,100,60]}\n",
    )
    .unwrap();
    let pred = dir.path().join("pred.jsonl");
    common::run_ok(&["self-predict", "--guide", s(&gold), "--out", s(&pred)]);
    let report = dir.path().join("guide.json");
    for sim in ["exact", "token-f1"] {
        common::run_ok(&[
            "evaluate",
            "--task",
            "guide",
            "--gold",
            s(&gold),
            "--pred",
            s(&pred),
            "--similarity",
            sim,
            "--out",
            s(&report),
        ]);
        let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
        assert_eq!(v["summary"]["guide_similarity"].as_f64(), Some(1.0), "{sim}");
        assert_eq!(v["summary"]["guide_iou"].as_f64(), Some(1.0), "{sim}");
    }
}
