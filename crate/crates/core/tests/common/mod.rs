//! Shared access to the bundled offline fixtures.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dcr_core::archive::Archive;
use dcr_core::eval::Dataset;
use dcr_core::llm::{Gateway, ScriptedProvider};
use dcr_core::ops::{execute, Note, OpEnv, RankedResult};
use dcr_core::search::{run_search, SearchConfig, SearchEnv, SearchOutcome};
use dcr_core::seeds;
use dcr_core::taxonomy::{load_taxonomy, Taxonomy};
use dcr_core::workflow::{compile_plan, ComponentLibrary, Plan};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn taxonomy() -> Taxonomy {
    load_taxonomy(fixtures().join("taxonomy.tsv")).expect("fixture taxonomy loads")
}

pub fn dataset() -> Dataset {
    Dataset::load(fixtures().join("dataset.jsonl")).expect("fixture dataset loads")
}

pub fn note(id: &str) -> Note {
    let text = std::fs::read_to_string(fixtures().join("notes").join(format!("{id}.txt"))).expect("fixture note");
    Note::new(id, text)
}

pub fn provider() -> ScriptedProvider {
    ScriptedProvider::load(fixtures().join("scripted")).expect("fixture scripts load")
}

/// A fresh gateway over the scripted fixtures.
pub fn gateway() -> Gateway {
    Gateway::new(Arc::new(provider()))
}

pub fn scenario_config() -> SearchConfig {
    SearchConfig::load(fixtures().join("search.toml")).expect("fixture config loads")
}

pub fn seed_plan(name: &str) -> Plan {
    seeds::build_seed(name, &BTreeMap::new()).expect("shipped seed")
}

/// Execute a plan on every fixture note with a fresh gateway.
pub fn run_plan_on_fixtures(plan: &Plan) -> BTreeMap<String, RankedResult> {
    let lib = ComponentLibrary::standard();
    let graph = compile_plan(plan, &lib).expect("plan compiles");
    let (tax, data, gw) = (taxonomy(), dataset(), gateway());
    let env = OpEnv { gateway: &gw, taxonomy: &tax, max_repairs: 2 };
    data.notes
        .iter()
        .map(|n| (n.note_id.clone(), execute(&graph, &n.note(), &env).expect("fixture run").ranked))
        .collect()
}

/// The staged offline search scenario, seeded with unscored `seeds`.
pub fn run_scenario(cfg: SearchConfig, seed_names: &[&str]) -> (SearchOutcome, Archive) {
    let (tax, data, gw, lib) = (taxonomy(), dataset(), gateway(), ComponentLibrary::standard());
    let env = SearchEnv { gateway: &gw, taxonomy: &tax, lib: &lib, dataset: &data };
    let mut archive = Archive::new();
    archive
        .init_with_seeds(seed_names.iter().map(|s| (seed_plan(s), None)).collect(), &lib)
        .expect("seeds validate");
    run_search(cfg, env, archive).expect("scenario runs")
}

/// Archive lines without their wall-clock timestamps.
pub fn archive_without_timestamps(jsonl: &str) -> Vec<serde_json::Value> {
    jsonl
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).expect("archive line");
            if let Some(o) = v.as_object_mut() {
                o.remove("created_at");
            }
            v
        })
        .collect()
}

pub fn approx(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}
