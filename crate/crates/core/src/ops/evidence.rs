use std::collections::{BTreeMap, BTreeSet};

use serde_json::Value;

use super::{CandidateCode, CandidatePool, EvidenceSnippet, OpEnv, OpError, OpLog};
use crate::llm::LlmError;
use crate::taxonomy::canonicalize;
use crate::text;
use crate::workflow::LlmOpDecl;

fn key(code: &str) -> String {
    canonicalize(code).unwrap_or_else(|_| code.trim().to_uppercase())
}

fn description<'a>(env: &OpEnv<'a>, descriptions: &'a BTreeMap<String, String>, code: &str) -> &'a str {
    descriptions
        .get(code)
        .map(String::as_str)
        .or_else(|| env.taxonomy.code_to_text(code).ok())
        .unwrap_or("")
}

fn char_offset(s: &str, byte: usize) -> usize {
    s[..byte].chars().count()
}

/// Ask the model for supporting passages per code. Each passage is clipped
/// to `window` tokens and kept only if it occurs verbatim in the note; at
/// most `max_snips` survive per code.
#[allow(clippy::too_many_arguments)]
pub fn evidence_link(
    env: &OpEnv<'_>,
    note: &str,
    pool: &mut CandidatePool,
    descriptions: &BTreeMap<String, String>,
    max_snips: usize,
    window: usize,
    max_tokens: u32,
    temperature: f64,
    log: &mut OpLog,
) -> Result<(), OpError> {
    pool.evidence_cap = Some(max_snips);
    if pool.active.is_empty() {
        return Ok(());
    }
    let listing = pool
        .codes()
        .map(|c| format!("- {c}: {}", description(env, descriptions, c)))
        .collect::<Vec<_>>()
        .join("\n");
    let (ms, w) = (max_snips.to_string(), window.to_string());
    let req = env.request(
        "evidence_v1",
        &[("CODES", &listing), ("NOTE", note), ("MAX_SNIPS", &ms), ("WINDOW", &w)],
        temperature,
        max_tokens,
        log,
    )?;
    let proposed: BTreeMap<String, Vec<String>> = match env.gateway.complete_json(&req, "evidence", env.max_repairs) {
        Ok(v) => v["evidence"]
            .as_object()
            .into_iter()
            .flatten()
            .map(|(k, snips)| {
                let s = snips.as_array().into_iter().flatten().filter_map(Value::as_str).map(str::to_string);
                (key(k), s.collect())
            })
            .collect(),
        Err(e @ LlmError::JsonIrrecoverable { .. }) => {
            log.warn(format!("evidence linking failed: {e}"));
            BTreeMap::new()
        }
        Err(e) => return Err(e.into()),
    };

    let codes: Vec<String> = pool.codes().map(str::to_string).collect();
    for code in codes {
        let desc_tokens = text::content_tokens(description(env, descriptions, &code));
        let mut kept: Vec<EvidenceSnippet> = Vec::new();
        let mut spans = BTreeSet::new();
        for raw in proposed.get(&code).into_iter().flatten() {
            if kept.len() == max_snips {
                break;
            }
            let clipped = text::clip_to_tokens(raw.trim(), window);
            if clipped.is_empty() {
                continue;
            }
            let Some(at) = note.match_indices(clipped).map(|(i, _)| i).find(|i| !spans.contains(i)) else {
                log.warn(format!("{code}: snippet not found verbatim in note; dropped"));
                continue;
            };
            spans.insert(at);
            kept.push(EvidenceSnippet {
                text: clipped.to_string(),
                span: (char_offset(note, at), char_offset(note, at + clipped.len())),
                window,
                overlap: text::coverage(&desc_tokens, &text::content_tokens(clipped)),
            });
        }
        let joined = kept.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ");
        let c = pool.active.get_mut(&code).expect("code is active");
        c.evidence_overlap = Some(text::coverage(&desc_tokens, &text::content_tokens(&joined)));
        c.evidence = Some(kept);
    }
    Ok(())
}

/// min(1, |snippets| / cap) times the mean per-snippet overlap. `None` when
/// no evidence step has run for the code.
pub fn evidence_strength(c: &CandidateCode, cap: Option<usize>) -> Option<f64> {
    let ev = c.evidence.as_ref()?;
    if ev.is_empty() {
        return Some(0.0);
    }
    let cap = cap.unwrap_or(ev.len()).max(1);
    let saturation = (ev.len() as f64 / cap as f64).min(1.0);
    let mean = ev.iter().map(|s| s.overlap).sum::<f64>() / ev.len() as f64;
    Some(saturation * mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgeStrategy {
    /// Keep iff confidence reaches the threshold.
    EvidenceKeepDrop,
    /// Keep iff the judge says keep or confidence reaches the threshold.
    EvidenceTabularDesc,
}

impl JudgeStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "evidence_keep_drop" => Some(Self::EvidenceKeepDrop),
            "evidence_tabular_desc" => Some(Self::EvidenceTabularDesc),
            _ => None,
        }
    }

    fn template(self) -> &'static str {
        match self {
            Self::EvidenceKeepDrop => "judge_keep_drop_v1",
            Self::EvidenceTabularDesc => "judge_tabular_desc_v1",
        }
    }
}

/// Code → (score, keep) from a judge reply in any accepted shape.
fn parse_scores(v: &Value) -> BTreeMap<String, (f64, Option<bool>)> {
    let map = match v.get("scores") {
        Some(Value::Object(m)) => m,
        _ => v.as_object().expect("schema guarantees an object"),
    };
    map.iter()
        .filter_map(|(k, s)| {
            let parsed = match s {
                Value::Number(n) => Some((n.as_f64()?, None)),
                Value::Object(o) => Some((o.get("score")?.as_f64()?, o.get("keep").and_then(Value::as_bool))),
                _ => None,
            };
            parsed.map(|p| (key(k), p))
        })
        .collect()
}

fn render_candidate(env: &OpEnv<'_>, descriptions: &BTreeMap<String, String>, c: &CandidateCode) -> String {
    let ev = match &c.evidence {
        None => "not collected".to_string(),
        Some(v) if v.is_empty() => "none".to_string(),
        Some(v) => v.iter().map(|s| format!("\"{}\"", s.text)).collect::<Vec<_>>().join("; "),
    };
    format!("- {} | {} | {}", c.code, description(env, descriptions, &c.code), ev)
}

/// Score every active code with the judge, then drop codes the strategy
/// does not keep. A batch whose reply cannot be parsed scores 0.
#[allow(clippy::too_many_arguments)]
pub fn judge_candidates(
    env: &OpEnv<'_>,
    note: &str,
    pool: &mut CandidatePool,
    descriptions: &BTreeMap<String, String>,
    strategy: JudgeStrategy,
    tau_keep: f64,
    batch_size: usize,
    temperature: f64,
    log: &mut OpLog,
) -> Result<(), OpError> {
    let codes: Vec<String> = pool.codes().map(str::to_string).collect();
    for batch in codes.chunks(batch_size.max(1)) {
        let listing = batch
            .iter()
            .map(|c| render_candidate(env, descriptions, &pool.active[c]))
            .collect::<Vec<_>>()
            .join("\n");
        let req = env.request(strategy.template(), &[("CODES", &listing), ("NOTE", note)], temperature, 1024, log)?;
        let scores = match env.gateway.complete_json(&req, "judge_scores", env.max_repairs) {
            Ok(v) => parse_scores(&v),
            Err(e @ LlmError::JsonIrrecoverable { .. }) => {
                log.warn(format!("judge batch failed, {} code(s) scored 0: {e}", batch.len()));
                BTreeMap::new()
            }
            Err(e) => return Err(e.into()),
        };
        for code in batch {
            let (raw, keep) = scores.get(code).copied().unwrap_or_else(|| {
                log.warn(format!("judge returned no score for {code}; scored 0"));
                (0.0, Some(false))
            });
            let conf = raw.clamp(0.0, 1.0);
            if conf != raw {
                log.warn(format!("judge score {raw} for {code} clamped to {conf}"));
            }
            let c = pool.active.get_mut(code).expect("code is active");
            c.judge_conf = Some(conf);
            c.judge_keep = Some(match strategy {
                JudgeStrategy::EvidenceKeepDrop => conf >= tau_keep,
                JudgeStrategy::EvidenceTabularDesc => keep.unwrap_or(conf >= tau_keep),
            });
        }
    }
    let rejected: Vec<String> = pool
        .active
        .values()
        .filter(|c| {
            let conf = c.judge_conf.unwrap_or(0.0);
            match strategy {
                JudgeStrategy::EvidenceKeepDrop => conf < tau_keep,
                JudgeStrategy::EvidenceTabularDesc => !(c.judge_keep == Some(true) || conf >= tau_keep),
            }
        })
        .map(|c| c.code.clone())
        .collect();
    for c in rejected {
        pool.drop_code(&c);
    }
    Ok(())
}

/// An operator registered during plan repair: the model scores each code
/// against the declared instruction and codes below `threshold` are dropped.
/// If the reply cannot be parsed the pool is left unchanged.
pub fn llm_filter(
    env: &OpEnv<'_>,
    decl: &LlmOpDecl,
    note: &str,
    pool: &mut CandidatePool,
    threshold: f64,
    temperature: f64,
    log: &mut OpLog,
) -> Result<(), OpError> {
    if pool.active.is_empty() {
        return Ok(());
    }
    let listing = pool
        .codes()
        .map(|c| format!("- {c} | {}", env.taxonomy.code_to_text(c).unwrap_or("")))
        .collect::<Vec<_>>()
        .join("\n");
    let req = env.request(
        "llm_filter_v1",
        &[("INSTRUCTION", &decl.instruction), ("CODES", &listing), ("NOTE", note)],
        temperature,
        1024,
        log,
    )?;
    let scores = match env.gateway.complete_json(&req, "judge_scores", env.max_repairs) {
        Ok(v) => parse_scores(&v),
        Err(e @ LlmError::JsonIrrecoverable { .. }) => {
            log.warn(format!("{} failed, candidates left unchanged: {e}", decl.name));
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };
    let codes: Vec<String> = pool.codes().map(str::to_string).collect();
    for code in codes {
        let s = scores.get(&code).map_or(0.0, |(s, _)| s.clamp(0.0, 1.0));
        pool.active.get_mut(&code).expect("active").scores.insert(decl.name.clone(), s);
        if s < threshold {
            pool.drop_code(&code);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Gateway, ScriptedProvider};
    use crate::taxonomy::Taxonomy;
    use serde_json::json;
    use std::sync::Arc;

    fn tax() -> Taxonomy {
        Taxonomy::from_tsv(
            "9\t\tchapter\tCirculatory\nI20-I25\t9\tblock\tIschemic heart diseases\nI21\tI20-I25\tcategory\tAcute myocardial infarction\nI21.3\tI21\tsubcategory\tST elevation myocardial infarction of unspecified site\nI21.4\tI21\tsubcategory\tNon-ST elevation myocardial infarction\n",
        )
        .unwrap()
    }

    fn gw(reply: Value) -> Gateway {
        let line = json!({"role": "pipeline_op", "text": reply.to_string(), "fallback": true});
        Gateway::new(Arc::new(ScriptedProvider::from_jsonl(&line.to_string()).unwrap()))
    }

    fn pool(codes: &[&str]) -> CandidatePool {
        let mut p = CandidatePool::default();
        for c in codes {
            p.insert(CandidateCode::new(*c, "s"));
        }
        p
    }

    const NOTE: &str = "Diagnosis: acute ST elevation myocardial infarction. Troponin elevated.";

    #[test]
    fn verbatim_snippets_only_and_capped() {
        let t = tax();
        let g = gw(json!({"evidence": {
            "I21.3": ["ST elevation myocardial infarction", "Troponin elevated", "acute ST"],
            "I21.4": ["not in the note"]
        }}));
        let env = OpEnv { gateway: &g, taxonomy: &t, max_repairs: 0 };
        let mut p = pool(&["I21.3", "I21.4"]);
        let mut log = OpLog::default();
        evidence_link(&env, NOTE, &mut p, &BTreeMap::new(), 2, 24, 256, 0.0, &mut log).unwrap();
        let ev = p.active["I21.3"].evidence.as_ref().unwrap();
        assert_eq!(ev.len(), 2);
        for s in ev {
            let slice: String = NOTE.chars().skip(s.span.0).take(s.span.1 - s.span.0).collect();
            assert_eq!(slice, s.text);
        }
        assert_eq!(p.active["I21.4"].evidence.as_ref().unwrap().len(), 0);
        assert_eq!(p.active["I21.4"].evidence_overlap, Some(0.0));
        assert_eq!(log.warnings.len(), 1);
    }

    #[test]
    fn snippets_are_clipped_to_window() {
        let t = tax();
        let g = gw(json!({"evidence": {"I21.3": ["acute ST elevation myocardial infarction. Troponin"]}}));
        let env = OpEnv { gateway: &g, taxonomy: &t, max_repairs: 0 };
        let mut p = pool(&["I21.3"]);
        evidence_link(&env, NOTE, &mut p, &BTreeMap::new(), 2, 3, 256, 0.0, &mut OpLog::default()).unwrap();
        assert_eq!(p.active["I21.3"].evidence.as_ref().unwrap()[0].text, "acute ST elevation");
    }

    #[test]
    fn judge_threshold_and_clamp() {
        let t = tax();
        let g = gw(json!({"scores": {"I21.3": 1.7, "I21.4": 0.49, "I21": 0.5}}));
        let env = OpEnv { gateway: &g, taxonomy: &t, max_repairs: 0 };
        let mut p = pool(&["I21", "I21.3", "I21.4"]);
        let mut log = OpLog::default();
        judge_candidates(&env, NOTE, &mut p, &BTreeMap::new(), JudgeStrategy::EvidenceKeepDrop, 0.5, 50, 0.0, &mut log)
            .unwrap();
        assert_eq!(p.codes().collect::<Vec<_>>(), vec!["I21", "I21.3"]);
        assert_eq!(p.active["I21.3"].judge_conf, Some(1.0));
        assert_eq!(p.dropped["I21.4"].judge_conf, Some(0.49));
        assert!(log.warnings.iter().any(|w| w.contains("clamped")));
    }

    #[test]
    fn tabular_keep_flag_overrides_low_score() {
        let t = tax();
        let g = gw(json!({"scores": {"I21.3": {"score": 0.2, "keep": true}, "I21.4": {"score": 0.9, "keep": false}}}));
        let env = OpEnv { gateway: &g, taxonomy: &t, max_repairs: 0 };
        let mut p = pool(&["I21.3", "I21.4"]);
        judge_candidates(&env, NOTE, &mut p, &BTreeMap::new(), JudgeStrategy::EvidenceTabularDesc, 0.5, 50, 0.0, &mut OpLog::default())
            .unwrap();
        assert_eq!(p.codes().collect::<Vec<_>>(), vec!["I21.3", "I21.4"]);
    }

    #[test]
    fn broken_judge_batch_scores_zero() {
        let t = tax();
        let line = json!({"role": "pipeline_op", "text": "nope", "fallback": true});
        let g = Gateway::new(Arc::new(ScriptedProvider::from_jsonl(&line.to_string()).unwrap()));
        let env = OpEnv { gateway: &g, taxonomy: &t, max_repairs: 1 };
        let mut p = pool(&["I21.3"]);
        judge_candidates(&env, NOTE, &mut p, &BTreeMap::new(), JudgeStrategy::EvidenceKeepDrop, 0.5, 50, 0.0, &mut OpLog::default())
            .unwrap();
        assert!(p.active.is_empty());
        assert_eq!(p.dropped["I21.3"].judge_conf, Some(0.0));
        assert_eq!(p.dropped["I21.3"].judge_keep, Some(false));
    }

    #[test]
    fn strength_saturates() {
        let mut c = CandidateCode::new("X", "s");
        assert_eq!(evidence_strength(&c, Some(2)), None);
        let snip = |o| EvidenceSnippet { text: "t".into(), span: (0, 1), window: 24, overlap: o };
        c.evidence = Some(vec![snip(1.0)]);
        assert_eq!(evidence_strength(&c, Some(2)), Some(0.5));
        c.evidence = Some(vec![snip(1.0), snip(0.5)]);
        assert_eq!(evidence_strength(&c, Some(2)), Some(0.75));
    }
}
