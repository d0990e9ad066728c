use std::cmp::Ordering;

use super::evidence::evidence_strength;
use super::{CandidateCode, CandidatePool, OpError, RankedResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RerankScheme {
    /// w·(vote_ratio, m_desc, judge_conf, evidence_overlap).
    Weighted([f64; 4]),
    /// mean(judge_conf, m_desc, evidence strength).
    EvidenceMean,
}

impl RerankScheme {
    pub const DEFAULT_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];
}

fn need(c: &CandidateCode, field: &'static str, v: Option<f64>) -> Result<f64, OpError> {
    v.ok_or_else(|| OpError::MissingField { field, code: c.code.clone() })
}

pub fn rerank(pool: &mut CandidatePool, scheme: RerankScheme) -> Result<(), OpError> {
    let cap = pool.evidence_cap;
    for c in pool.active.values_mut() {
        let s = match scheme {
            RerankScheme::Weighted(w) => {
                let fields = [
                    ("vote_ratio", c.vote_ratio),
                    ("m_desc", c.m_desc),
                    ("judge_conf", c.judge_conf),
                    ("evidence_overlap", c.evidence_overlap),
                ];
                let mut s = 0.0;
                for (wi, (name, v)) in w.iter().zip(fields) {
                    if *wi != 0.0 {
                        s += wi * need(c, name, v)?;
                    }
                }
                s
            }
            RerankScheme::EvidenceMean => {
                let j = need(c, "judge_conf", c.judge_conf)?;
                let m = need(c, "m_desc", c.m_desc)?;
                let e = need(c, "evidence", evidence_strength(c, cap))?;
                (j + m + e) / 3.0
            }
        };
        c.rank_score = Some((s - c.demotion).max(0.0));
        c.demotion = 0.0;
    }
    Ok(())
}

/// Ranking order: rank_score desc, then vote_ratio desc, then code.
pub fn rank_order(a: &CandidateCode, b: &CandidateCode) -> Ordering {
    let r = |c: &CandidateCode| c.rank_score.unwrap_or(0.0);
    let v = |c: &CandidateCode| c.vote_ratio.unwrap_or(0.0);
    r(b).total_cmp(&r(a)).then_with(|| v(b).total_cmp(&v(a))).then_with(|| a.code.cmp(&b.code))
}

fn fallback_order(a: &CandidateCode, b: &CandidateCode) -> Ordering {
    let j = |c: &CandidateCode| c.judge_conf.unwrap_or(0.0);
    j(b).total_cmp(&j(a)).then_with(|| a.code.cmp(&b.code))
}

/// Keep the `k` best active codes; the rest move to the dropped pool.
pub fn top_k(pool: &mut CandidatePool, k: usize) {
    let mut ranked: Vec<&CandidateCode> = pool.active.values().collect();
    ranked.sort_by(|a, b| rank_order(a, b));
    let cut: Vec<String> = ranked.iter().skip(k).map(|c| c.code.clone()).collect();
    for c in cut {
        pool.drop_code(&c);
    }
}

/// Sort the active codes. When fewer than `k` remain and `fallback` is on,
/// append the best dropped codes by judge confidence up to `k` in total.
/// Never truncates.
pub fn finalize_ranking(pool: &CandidatePool, k: usize, fallback: bool) -> RankedResult {
    let mut entries: Vec<CandidateCode> = pool.active.values().cloned().collect();
    entries.sort_by(rank_order);
    let fallback_start = entries.len();
    if fallback && entries.len() < k {
        let mut extra: Vec<CandidateCode> =
            pool.dropped.values().filter(|c| !pool.active.contains_key(&c.code)).cloned().collect();
        extra.sort_by(fallback_order);
        extra.truncate(k - entries.len());
        entries.extend(extra);
    }
    RankedResult { entries, fallback_start }
}
