use std::collections::{BTreeMap, BTreeSet};

use super::{CandidatePool, OpError, OpLog};
use crate::taxonomy::{canonicalize, Taxonomy};
use crate::text;

fn normalize(code: &str) -> String {
    canonicalize(code).unwrap_or_else(|_| code.trim().to_uppercase())
}

/// Union with deduplication. Source tags and per-sample sets are kept; a
/// code active in any input is active in the result.
pub fn merge_pools(pools: Vec<CandidatePool>) -> CandidatePool {
    let mut out = CandidatePool::default();
    let mut dropped = Vec::new();
    for p in pools {
        for (_, mut c) in p.active {
            c.code = normalize(&c.code);
            out.insert(c);
        }
        dropped.extend(p.dropped.into_values());
        out.samples.extend(p.samples);
        out.removed.extend(p.removed);
        out.evidence_cap = out.evidence_cap.max(p.evidence_cap);
    }
    for mut c in dropped {
        c.code = normalize(&c.code);
        if !out.active.contains_key(&c.code) {
            out.dropped.entry(c.code.clone()).or_insert(c);
        }
    }
    for s in &mut out.samples {
        s.codes = s.codes.iter().map(|c| normalize(c)).collect();
    }
    out
}

/// Normalize code spelling, folding together records that become equal.
pub fn canonicalize_pool(pool: CandidatePool) -> CandidatePool {
    merge_pools(vec![pool])
}

/// Remove codes that are not assignable codes of the taxonomy. Valid codes
/// are re-keyed to the taxonomy's own spelling.
pub fn validate_candidates(pool: CandidatePool, taxonomy: &Taxonomy, log: &mut OpLog) -> CandidatePool {
    let resolve = |code: &str| {
        taxonomy
            .resolve(code, false)
            .ok()
            .filter(|n| n.kind.is_assignable())
            .map(|n| n.code.as_str().to_string())
    };
    let mut out = CandidatePool {
        samples: pool.samples,
        removed: pool.removed,
        evidence_cap: pool.evidence_cap,
        ..CandidatePool::default()
    };
    let mut removed_now = Vec::new();
    for (code, mut c) in pool.active {
        match resolve(&code) {
            Some(k) => {
                c.code = k;
                out.insert(c);
            }
            None => {
                removed_now.push(code.clone());
                out.removed.insert(code);
            }
        }
    }
    for (code, mut c) in pool.dropped {
        match resolve(&code) {
            Some(k) if !out.active.contains_key(&k) => {
                c.code = k.clone();
                out.dropped.insert(k, c);
            }
            Some(_) => {}
            None => {
                out.removed.insert(code);
            }
        }
    }
    for s in &mut out.samples {
        s.codes = s.codes.iter().map(|c| resolve(c).unwrap_or_else(|| c.clone())).collect();
    }
    if !removed_now.is_empty() {
        log.warn(format!("removed invalid codes: {}", removed_now.join(", ")));
    }
    out
}

/// Tabular description of every active code.
pub fn fetch_descriptions(pool: &CandidatePool, taxonomy: &Taxonomy) -> BTreeMap<String, String> {
    pool.codes()
        .filter_map(|c| taxonomy.code_to_text(c).ok().map(|d| (c.to_string(), d.to_string())))
        .collect()
}

/// m_desc(c): share of the description's content tokens present in the note.
pub fn desc_match(pool: &mut CandidatePool, descriptions: &BTreeMap<String, String>, note: &str, log: &mut OpLog) {
    let note_tokens = text::content_tokens(note);
    for (code, c) in pool.active.iter_mut() {
        let score = match descriptions.get(code) {
            Some(d) => text::coverage(&text::content_tokens(d), &note_tokens),
            None => {
                log.warn(format!("no description for {code}; m_desc set to 0"));
                0.0
            }
        };
        c.m_desc = Some(score);
    }
}

/// votes(c) = number of proposal samples containing c; vote_ratio =
/// votes / number of samples.
pub fn vote_stats(pool: &mut CandidatePool) {
    let n = pool.samples.len();
    let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
    for s in &pool.samples {
        for c in &s.codes {
            *counts.entry(c.as_str()).or_default() += 1;
        }
    }
    let counts: BTreeMap<String, u32> = counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    for c in pool.active.values_mut().chain(pool.dropped.values_mut()) {
        let v = counts.get(&c.code).copied().unwrap_or(0);
        c.votes = Some(v);
        c.vote_ratio = Some(if n == 0 { 0.0 } else { v as f64 / n as f64 });
    }
}

/// Drop codes whose vote_ratio is below `min_ratio`.
pub fn vote_filter(pool: &mut CandidatePool, min_ratio: f64) -> Result<(), OpError> {
    let mut low = Vec::new();
    for (code, c) in &pool.active {
        let r = c.vote_ratio.ok_or_else(|| OpError::MissingField { field: "vote_ratio", code: code.clone() })?;
        if r < min_ratio {
            low.push(code.clone());
        }
    }
    for c in low {
        pool.drop_code(&c);
    }
    Ok(())
}

/// Codes per sample, for brute-force checks.
pub fn sample_codes(pool: &CandidatePool) -> Vec<BTreeSet<String>> {
    pool.samples.iter().map(|s| s.codes.clone()).collect()
}
