use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mock_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/mock_experiment")
}

fn ratingbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ratingbench")).args(args).output().expect("spawn ratingbench")
}

fn ok(args: &[&str]) -> String {
    let out = ratingbench(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(ratingbench(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(ratingbench(&["stats", "--bogus"]).status.code(), Some(2));
    assert_eq!(ratingbench(&["compare", "--a", "x", "--b", "y", "--metric", "mae"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_nonzero() {
    let out = ratingbench(&["evaluate", "/nonexistent/arm"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn mock_run_is_deterministic() {
    let config = mock_dir().join("config.toml");
    let mut files = Vec::new();
    for _ in 0..2 {
        let tmp = tempfile::tempdir().unwrap();
        let stdout = ok(&["run", "--config", s(&config), "--arm", "rs2rs-mock", "--output-dir", s(tmp.path())]);
        assert!(stdout.contains("rs2rs-mock: 60 requests issued"), "{stdout}");
        let arm = tmp.path().join("mock-fixture/rs2rs-mock");
        files.push((
            std::fs::read(arm.join("records.jsonl")).unwrap(),
            std::fs::read(arm.join("metrics.csv")).unwrap(),
        ));
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0].0.iter().filter(|&&b| b == b'\n').count(), 60);
}

#[test]
fn baseline_evaluate_compare_report() {
    let tmp = tempfile::tempdir().unwrap();
    let config = mock_dir().join("config.toml");
    let dataset = mock_dir().join("dataset.jsonl");
    ok(&["run", "--config", s(&config), "--output-dir", s(tmp.path())]);
    let arm = tmp.path().join("mock-fixture/rs2rs-mock");

    let ua = tmp.path().join("user-average");
    let table = ok(&["baseline", "user-average", "--dataset", s(&dataset), "--out", s(&ua)]);
    assert!(table.contains("| user-average | dataset | baseline | user_average |"), "{table}");
    let mf = tmp.path().join("mf");
    ok(&["baseline", "mf", "--dataset", s(&dataset), "--out", s(&mf), "--d", "2", "--iterations", "5"]);
    assert!(std::fs::read_to_string(mf.join("report.md")).unwrap().contains("d=2"));

    let before = std::fs::read(arm.join("records.jsonl")).unwrap();
    let kv = ok(&["evaluate", s(&arm)]);
    assert!(kv.contains("failure_rate"), "{kv}");
    assert_eq!(std::fs::read(arm.join("records.jsonl")).unwrap(), before);

    let cmp = ok(&["compare", "--a", s(&arm), "--b", s(&ua), "--metric", "rmse", "--paired"]);
    assert!(cmp.contains("t = ") && cmp.contains("p = "), "{cmp}");
    assert!(cmp.contains("a: 8 instances"), "{cmp}");

    let csv = tmp.path().join("all.csv");
    ok(&["report", s(&arm), s(&ua), s(&mf), "--layout", "csv", "--out", s(&csv)]);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
    let hist = ok(&["report", s(&ua), "--layout", "histogram"]);
    assert!(hist.starts_with("arm,rating,count\n"));
}

#[test]
fn stats_and_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = tmp.path().join("d.jsonl");
    std::fs::copy(mock_dir().join("dataset.jsonl"), &dataset).unwrap();

    let printed = ok(&["stats", "--dataset", s(&dataset)]);
    let written = std::fs::read_to_string(tmp.path().join("d.stats.json")).unwrap();
    assert_eq!(printed, written);
    let stats: serde_json::Value = serde_json::from_str(&written).unwrap();
    assert_eq!(stats["n_instances"], 10);

    let k3 = tmp.path().join("k3.jsonl");
    ok(&["variant", "reduce-k", "--dataset", s(&dataset), "--out", s(&k3), "--k", "3"]);
    // One line per record: three context reviews and the target per instance.
    assert_eq!(std::fs::read_to_string(&k3).unwrap().lines().count(), 40);

    let shuffled = tmp.path().join("shuffled.jsonl");
    ok(&["variant", "shuffle", "--dataset", s(&dataset), "--out", s(&shuffled), "--seed", "3"]);
    assert_ne!(std::fs::read(&shuffled).unwrap(), std::fs::read(&dataset).unwrap());
    assert!(ratingbench(&["variant", "reduce-k", "--dataset", s(&dataset), "--out", s(&k3), "--k", "9"])
        .status
        .code()
        .is_some_and(|c| c != 0));
}

#[test]
fn build_corpus_and_short_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw.jsonl");
    let mut lines = String::new();
    for u in 0..6 {
        for r in 0..4 {
            let len = if r % 2 == 0 { 250 } else { 50 };
            let line = serde_json::json!({
                "user_id": format!("u{u}"),
                "item_id": format!("i{u}-{r}"),
                "item": {"description": format!("item {r}")},
                "review": "w".repeat(len),
                "rating": 1 + (u + r) % 5,
            });
            lines.push_str(&format!("{line}\n"));
        }
    }
    std::fs::write(&raw, lines).unwrap();

    let long = tmp.path().join("long.jsonl");
    let out = ok(&[
        "build-corpus", "--input", s(&raw), "--out", s(&long), "--k", "1", "--n", "4", "--y-max", "5",
    ]);
    assert!(out.starts_with("4 instances"), "{out}");

    let short = tmp.path().join("short.jsonl");
    ok(&["variant", "short", "--input", s(&raw), "--out", s(&short), "--k", "1", "--n", "6", "--y-max", "5"]);
    for line in std::fs::read_to_string(&short).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["review"].as_str().unwrap().len(), 50);
    }
}

#[test]
fn split_similarity_with_mock_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("script.json"), r#"{"rules": [], "embedding_dim": 16}"#).unwrap();
    std::fs::copy(mock_dir().join("dataset.jsonl"), tmp.path().join("dataset.jsonl")).unwrap();
    let config = tmp.path().join("exp.toml");
    std::fs::write(
        &config,
        r#"
[experiment]
name = "split"

[gateway]
backend = "mock"
mock_script = "script.json"

[datasets.mock]
path = "dataset.jsonl"
domain = "movies"
"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("split");
    let printed = ok(&["split-similarity", "--config", s(&config), "--dataset", "mock", "--out", s(&out_dir)]);
    assert!(printed.starts_with("5 similar, 5 dissimilar"), "{printed}");
    let csv = std::fs::read_to_string(out_dir.join("similarity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
}
