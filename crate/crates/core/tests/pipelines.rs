//! Reference pipelines against their blessed outputs.
//!
//! Set `DCR_BLESS=1` to rewrite the golden files.

mod common;

use common::*;
use dcr_core::seeds;

fn check_golden(seed: &str) {
    let path = fixtures().join("golden").join(format!("{seed}.json"));
    let rendered = serde_json::to_string_pretty(&run_plan_on_fixtures(&seed_plan(seed))).unwrap() + "\n";
    if std::env::var_os("DCR_BLESS").is_some() {
        std::fs::write(&path, &rendered).unwrap();
    }
    let golden = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(rendered == golden, "{seed} output differs from {}", path.display());
}

#[test]
fn evidence_aware_matches_golden() {
    check_golden("evidence_aware");
}

#[test]
fn evidence_vote_aware_matches_golden() {
    check_golden("evidence_vote_aware");
}

#[test]
fn every_seed_runs_on_every_fixture_note() {
    for name in seeds::seed_names() {
        let out = run_plan_on_fixtures(&seed_plan(name));
        assert_eq!(out.len(), 3, "{name}");
    }
}

#[test]
fn evidence_vote_aware_recovers_all_gold_codes() {
    let out = run_plan_on_fixtures(&seed_plan("evidence_vote_aware"));
    for n in dataset().notes {
        let ranked = &out[&n.note_id];
        let kept = ranked.codes()[..ranked.fallback_start].to_vec();
        for g in &n.gold_codes {
            assert!(kept.contains(g), "{}: {g} missing from {kept:?}", n.note_id);
        }
    }
}
