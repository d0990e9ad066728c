//! End-to-end runs of the `dcr` binary over the offline fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fx(rel: &str) -> String {
    fixtures().join(rel).display().to_string()
}

fn scripted() -> String {
    format!("scripted:{}", fx("scripted"))
}

fn dcr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcr")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn search(out: &Path, extra: &[&str]) -> Output {
    let out = out.display().to_string();
    let (cfg, data, tax, prov) = (fx("search.toml"), fx("dataset.jsonl"), fx("taxonomy.tsv"), scripted());
    let mut args = vec!["search", "--config", &cfg, "--dataset", &data, "--taxonomy", &tax, "--provider", &prov, "--out", &out];
    args.extend_from_slice(extra);
    dcr(&args)
}

fn csv_column(text: &str, name: &str) -> Vec<f64> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap_or_else(|| panic!("no column {name} in {header:?}"));
    lines.map(|l| l.split(',').nth(i).unwrap().parse().unwrap()).collect()
}

#[test]
fn search_writes_checkpoint_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = search(dir.path(), &["--seed", "cot", "--iterations", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["archive.jsonl", "state.json", "progress.jsonl", "manifest.json", "report.json", "trajectory.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["stop"], "completed");
    assert_eq!(report["entries"], 7);
    let manifest: Value = serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["templates"].as_object().is_some_and(|t| !t.is_empty()));
}

#[test]
fn missing_dataset_is_a_data_error_before_any_model_call() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let (cfg, tax, prov) = (fx("search.toml"), fx("taxonomy.tsv"), scripted());
    let o = dcr(&["search", "--config", &cfg, "--dataset", "/nonexistent/data.jsonl", "--taxonomy", &tax, "--provider", &prov, "--out", &out, "--seed", "cot"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!dir.path().join("archive.jsonl").exists());
    assert!(!dir.path().join("state.json").exists());
}

#[test]
fn malformed_plan_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("bad.json");
    std::fs::write(&plan, r#"{"name": "bad", "plan": [{"op": "NoSuchOperator"}]}"#).unwrap();
    let (p, note, tax, prov) = (plan.display().to_string(), fx("notes/note_a.txt"), fx("taxonomy.tsv"), scripted());
    let o = dcr(&["run", "--plan", &p, "--note", &note, "--taxonomy", &tax, "--provider", &prov]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_on_one_note_prints_the_ranked_codes() {
    let (note, tax, prov) = (fx("notes/note_a.txt"), fx("taxonomy.tsv"), scripted());
    let o = dcr(&["run", "--seed", "evidence_aware", "--note", &note, "--taxonomy", &tax, "--provider", &prov]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["ranked"]["entries"][0]["code"], "I21.4");
}

#[test]
fn run_on_a_dataset_prints_aggregates() {
    let (data, tax, prov) = (fx("dataset.jsonl"), fx("taxonomy.tsv"), scripted());
    let o = dcr(&["run", "--seed", "evidence_vote_aware", "--dataset", &data, "--taxonomy", &tax, "--provider", &prov]);
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["metrics"]["f1"], 1.0);
    assert_eq!(v["notes"].as_array().unwrap().len(), 3);
    assert!(v["objective"].as_f64().is_some());
}

#[test]
fn report_views_over_a_finished_search() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(search(dir.path(), &["--seed", "cot", "--iterations", "4"]).status.code(), Some(0));
    let archive = dir.path().join("archive.jsonl").display().to_string();

    let o = dcr(&["report", "--archive", &archive]);
    assert_eq!(o.status.code(), Some(0));
    let best = csv_column(&stdout(&o), "best_f1");
    assert_eq!(best.len(), 5);
    assert!(best.windows(2).all(|w| w[1] >= w[0]), "{best:?}");

    let o = dcr(&["report", "--archive", &archive, "--show", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("ProposeFromNote"));

    let o = dcr(&["report", "--archive", &archive, "--export-costs"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(
        text.lines().next().unwrap(),
        "search_tokens,exec_tokens,total_tokens,search_cost_usd,exec_cost_usd,cost_usd"
    );
    let row: Vec<u64> = text.lines().nth(1).unwrap().split(',').take(3).map(|x| x.parse().unwrap()).collect();
    assert_eq!(row[0] + row[1], row[2]);
    assert!(row[0] > 0 && row[1] > 0);
}

#[test]
fn corrupt_archive_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("archive.jsonl");
    std::fs::write(&path, "this is not an archive\n").unwrap();
    let o = dcr(&["report", "--archive", &path.display().to_string()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn exhausted_token_budget_exits_with_budget_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = search(dir.path(), &["--seed", "cot", "--token-cap", "20000"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(dir.path().join("archive.jsonl").exists());
}

#[test]
fn halted_search_resumes_to_the_same_archive() {
    let straight = tempfile::tempdir().unwrap();
    assert_eq!(search(straight.path(), &["--seed", "cot", "--iterations", "4"]).status.code(), Some(0));
    let split = tempfile::tempdir().unwrap();
    assert_eq!(search(split.path(), &["--seed", "cot", "--iterations", "4", "--halt-after", "2"]).status.code(), Some(0));
    assert_eq!(search(split.path(), &["--resume", "--iterations", "4"]).status.code(), Some(0));
    let strip = |p: &Path| -> Vec<Value> {
        std::fs::read_to_string(p.join("archive.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("created_at");
                v
            })
            .collect()
    };
    assert_eq!(strip(straight.path()), strip(split.path()));
}

#[test]
fn seeds_lists_the_catalog() {
    let o = dcr(&["seeds"]);
    assert_eq!(o.status.code(), Some(0));
    let catalog: Value = serde_json::from_str(&stdout(&o)).unwrap();
    for name in ["cot", "evidence_aware", "evidence_vote_aware"] {
        assert!(catalog[name]["about"].is_string(), "{name} not listed");
    }
}
