#![allow(dead_code)]

use std::path::{Path, PathBuf};

use uiforge::schema::Platform;

pub const QA_RESPONSE: &str = "Q: What is [Box 0]?\nA: It is [Box 0].";
pub const SCORE_RESPONSE: &str = "Score: 100";

pub fn run(args: &[&str]) -> i32 {
    if std::env::var_os("UIFORGE_LOG").is_none() {
        std::env::set_var("UIFORGE_LOG", "warn");
    }
    let mut argv = vec!["uiforge"];
    argv.extend_from_slice(args);
    uiforge::cli::run(argv)
}

pub fn run_ok(args: &[&str]) {
    assert_eq!(run(args), 0, "uiforge {}", args.join(" "));
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Paths written by [`pipeline`].
pub struct PipelineOut {
    pub curated: PathBuf,
    pub elementary: PathBuf,
    pub advanced: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
}

/// fixtures → ingest → curate → both generators → self-predictions → evaluate.
pub fn pipeline(dir: &Path, count: usize, seed: u64, adversarial: bool) -> PipelineOut {
    let raw = dir.join("raw");
    let seed = seed.to_string();
    let count = count.to_string();
    let mut fx = vec!["--seed", &seed, "fixtures", "--out", s(&raw), "--count", &count];
    if adversarial {
        fx.push("--adversarial");
    }
    run_ok(&fx);

    let raw_manifest = dir.join("raw.jsonl");
    let roots: Vec<PathBuf> = Platform::ALL.iter().map(|p| raw.join(p.as_str())).collect();
    let mut ingest = vec!["ingest"];
    ingest.extend(roots.iter().map(|r| s(r)));
    ingest.extend(["--out", s(&raw_manifest)]);
    run_ok(&ingest);

    let curated = dir.join("curated.jsonl");
    run_ok(&["curate", s(&raw_manifest), "--out", s(&curated)]);
    let elementary = dir.join("elementary.jsonl");
    run_ok(&["--seed", &seed, "gen-elementary", s(&curated), "--out", s(&elementary)]);
    let advanced = dir.join("advanced.jsonl");
    run_ok(&[
        "--seed",
        &seed,
        "gen-advanced",
        s(&curated),
        "--out",
        s(&advanced),
        "--backend",
        "mock",
        "--mock-fallback",
        QA_RESPONSE,
    ]);
    let predictions = dir.join("pred.jsonl");
    run_ok(&["self-predict", s(&elementary), s(&advanced), "--out", s(&predictions)]);
    let report = dir.join("report.json");
    run_ok(&[
        "evaluate",
        "--task",
        "all",
        "--gold",
        s(&elementary),
        "--gold",
        s(&advanced),
        "--pred",
        s(&predictions),
        "--records",
        s(&curated),
        "--backend",
        "mock",
        "--mock-fallback",
        SCORE_RESPONSE,
        "--out",
        s(&report),
    ]);
    PipelineOut { curated, elementary, advanced, predictions, report }
}
