use std::collections::BTreeSet;

use serde_json::Value;

use super::sections::{section_range, section_text, Section};
use super::{CandidateCode, CandidatePool, Cue, EntityMention, OpEnv, OpError, OpLog, SampleSet};
use crate::llm::LlmError;
use crate::taxonomy::{canonicalize, Taxonomy};
use crate::text;

/// Phrases that, earlier in the same clause as a mention, override an
/// "affirmed" label. Checked in this order.
const GUARDS: &[(Cue, &[&str])] = &[
    (
        Cue::FamilyHistory,
        &["family history", "fhx", "mother", "father", "brother", "sister", "sibling", "grandmother", "grandfather", "maternal", "paternal"],
    ),
    (Cue::RuledOut, &["rule out", "ruled out", "r o", "excluded"]),
    (Cue::Negated, &["no", "denies", "denied", "negative for", "without", "not", "free of", "absence of"]),
    (Cue::Hypothetical, &["risk of", "risk for", "if", "possible", "concern for", "may develop", "in case of"]),
];

/// Words after a mention that rule it out: "MI was ruled out".
const TRAILING_RULED_OUT: &[&str] = &["ruled out", "was excluded", "unlikely"];

fn contains_phrase(tokens: &[String], phrase: &str) -> bool {
    let p: Vec<&str> = phrase.split(' ').collect();
    tokens.windows(p.len()).any(|w| w.iter().zip(&p).all(|(a, b)| a == b))
}

/// Byte range of the clause around `[start, end)`.
fn clause_bounds(note: &str, start: usize, end: usize) -> (usize, usize) {
    let lower = note.to_ascii_lowercase();
    let before = &lower[..start];
    let mut from = before.rfind(['.', ';', '\n']).map_or(0, |i| i + 1);
    for sep in [" but ", " however "] {
        if let Some(i) = before.rfind(sep) {
            from = from.max(i + sep.len());
        }
    }
    let after = &lower[end..];
    let to = end + after.find(['.', ';', '\n']).unwrap_or(after.len());
    (from, to)
}

fn lexical_cue(note: &str, start: usize, end: usize) -> Option<Cue> {
    let (from, to) = clause_bounds(note, start, end);
    let before = text::tokens(&note[from..start]);
    for (cue, phrases) in GUARDS {
        if phrases.iter().any(|p| contains_phrase(&before, p)) {
            return Some(*cue);
        }
    }
    let after = text::tokens(&note[end..to]);
    TRAILING_RULED_OUT.iter().any(|p| contains_phrase(&after, p)).then_some(Cue::RuledOut)
}

fn char_offset(s: &str, byte: usize) -> usize {
    s[..byte].chars().count()
}

/// Locate `surface` in the note (case-insensitive), preferring matches at or
/// after `prefer_from` and skipping spans already taken.
fn locate(note: &str, surface: &str, prefer_from: usize, taken: &BTreeSet<(usize, usize)>) -> Option<(usize, usize)> {
    let hay = note.to_ascii_lowercase();
    let needle = surface.trim().to_ascii_lowercase();
    if needle.is_empty() {
        return None;
    }
    let hits: Vec<usize> = hay.match_indices(&needle).map(|(i, _)| i).collect();
    hits.iter()
        .filter(|&&i| i >= prefer_from)
        .chain(hits.iter())
        .map(|&i| (i, i + needle.len()))
        .find(|r| !taken.contains(r))
}

/// LLM term extraction with assertion cues. Spans are char offsets into
/// `note`; non-affirmed mentions are kept but flagged.
pub fn extract_terms(
    env: &OpEnv<'_>,
    note: &str,
    section: Section,
    template_id: &str,
    temperature: f64,
    log: &mut OpLog,
) -> Result<Vec<EntityMention>, OpError> {
    if note.trim().is_empty() {
        log.warn("empty note: no terms extracted");
        return Ok(Vec::new());
    }
    let (sec_start, _) = section_range(note, section);
    let req = env.request(template_id, &[("NOTE", section_text(note, section))], temperature, 1024, log)?;
    let reply = match env.gateway.complete_json(&req, "terms", env.max_repairs) {
        Ok(v) => v,
        Err(e @ LlmError::JsonIrrecoverable { .. }) => {
            log.warn(format!("term extraction failed: {e}"));
            return Ok(Vec::new());
        }
        Err(e) => return Err(e.into()),
    };
    let mut taken = BTreeSet::new();
    let mut out = Vec::new();
    for item in reply["terms"].as_array().into_iter().flatten() {
        let (surface, cue_label) = match item {
            Value::String(s) => (s.as_str(), None),
            obj => (obj["text"].as_str().unwrap_or_default(), obj["cue"].as_str()),
        };
        let model_cue = match cue_label {
            None => Cue::Affirmed,
            Some(l) => Cue::parse(l).unwrap_or_else(|| {
                log.warn(format!("unknown cue {l:?} for {surface:?}; treated as affirmed"));
                Cue::Affirmed
            }),
        };
        let Some((s, e)) = locate(note, surface, sec_start, &taken) else {
            log.warn(format!("term {surface:?} not found in note; dropped"));
            continue;
        };
        taken.insert((s, e));
        let cue = match model_cue {
            Cue::Affirmed => lexical_cue(note, s, e).unwrap_or(Cue::Affirmed),
            other => other,
        };
        out.push(EntityMention {
            surface: note[s..e].to_string(),
            span: (char_offset(note, s), char_offset(note, e)),
            cue,
        });
    }
    out.sort_by_key(|m| m.span);
    Ok(out)
}

pub(crate) fn affirmed_surfaces(mentions: &[EntityMention]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    mentions
        .iter()
        .filter(|m| m.is_affirmed())
        .map(|m| m.surface.clone())
        .filter(|s| seen.insert(s.to_lowercase()))
        .collect()
}

/// Search strings for the index: affirmed surfaces plus LLM synonyms.
pub fn synonym_expand(
    env: &OpEnv<'_>,
    mentions: &[EntityMention],
    temperature: f64,
    log: &mut OpLog,
) -> Result<Vec<String>, OpError> {
    let mut out = affirmed_surfaces(mentions);
    if out.is_empty() {
        return Ok(out);
    }
    let listing = out.iter().map(|s| format!("- {s}")).collect::<Vec<_>>().join("\n");
    let req = env.request("synonyms_v1", &[("TERMS", &listing)], temperature, 512, log)?;
    match env.gateway.complete_json(&req, "synonyms", env.max_repairs) {
        Ok(v) => {
            let mut seen: BTreeSet<String> = out.iter().map(|s| s.to_lowercase()).collect();
            for alts in v["synonyms"].as_object().into_iter().flat_map(|m| m.values()) {
                for a in alts.as_array().into_iter().flatten().filter_map(Value::as_str) {
                    if seen.insert(a.to_lowercase()) {
                        out.push(a.to_string());
                    }
                }
            }
        }
        Err(e @ LlmError::JsonIrrecoverable { .. }) => log.warn(format!("synonym expansion failed: {e}")),
        Err(e) => return Err(e.into()),
    }
    Ok(out)
}

/// Union of description-index hits for every search string.
pub fn search_alpha_index(
    taxonomy: &Taxonomy,
    surfaces: &[String],
    limit: usize,
    min_score: f64,
    source: &str,
) -> CandidatePool {
    let mut pool = CandidatePool::default();
    for s in surfaces {
        let Ok(hits) = taxonomy.text_to_codes(s, limit) else { continue };
        for (code, score) in hits {
            if score >= min_score {
                pool.insert(CandidateCode::new(code.as_str(), source));
            }
        }
    }
    pool
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposeMode {
    Plain,
    Cot,
}

impl ProposeMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "plain" => Some(Self::Plain),
            "cot" => Some(Self::Cot),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ProposeInput<'a> {
    /// Extracted terms; the note text serves as context.
    Terms { mentions: &'a [EntityMention], context: &'a str },
    Note(&'a str),
}

fn normalize_code(raw: &str) -> String {
    canonicalize(raw).unwrap_or_else(|_| raw.trim().to_uppercase())
}

/// `samples` LLM generations, each parsed into one code set. A sample that
/// does not parse contributes an empty set.
pub fn propose_candidates(
    env: &OpEnv<'_>,
    input: ProposeInput<'_>,
    mode: ProposeMode,
    samples: u32,
    temperature: f64,
    source: &str,
    log: &mut OpLog,
) -> Result<CandidatePool, OpError> {
    if samples == 0 {
        return Err(OpError::BadParam("samples must be at least 1".into()));
    }
    let (template, vars) = match (input, mode) {
        (ProposeInput::Terms { mentions, context }, m) => {
            let terms = affirmed_surfaces(mentions);
            if terms.is_empty() {
                log.warn("no affirmed terms: nothing to propose from");
                return Ok(empty_samples(samples, source));
            }
            let listing = terms.iter().map(|s| format!("- {s}")).collect::<Vec<_>>().join("\n");
            let t = if m == ProposeMode::Cot { "propose_terms_cot_v1" } else { "propose_terms_plain_v1" };
            (t, vec![("TERMS", listing), ("NOTE", context.to_string())])
        }
        (ProposeInput::Note(text), m) => {
            let t = if m == ProposeMode::Cot { "propose_note_cot_v1" } else { "propose_note_plain_v1" };
            (t, vec![("NOTE", text.to_string())])
        }
    };
    let vars: Vec<(&str, &str)> = vars.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let req = env.request(template, &vars, temperature, 1024, log)?.samples(samples);
    let replies = env.gateway.complete_json_many(&req, "codes", env.max_repairs)?;

    let mut pool = CandidatePool::default();
    for (i, r) in replies.into_iter().enumerate() {
        let codes: BTreeSet<String> = match r {
            Ok(v) => v["codes"]
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(Value::as_str)
                .filter(|s| !s.trim().is_empty())
                .map(normalize_code)
                .collect(),
            Err(e) => {
                log.warn(format!("sample {i}: {e}; counted as an empty set"));
                BTreeSet::new()
            }
        };
        for c in &codes {
            pool.insert(CandidateCode::new(c.clone(), source));
        }
        pool.samples.push(SampleSet { source: source.to_string(), index: i as u32, codes });
    }
    Ok(pool)
}

fn empty_samples(samples: u32, source: &str) -> CandidatePool {
    CandidatePool {
        samples: (0..samples)
            .map(|i| SampleSet { source: source.to_string(), index: i, codes: BTreeSet::new() })
            .collect(),
        ..CandidatePool::default()
    }
}
