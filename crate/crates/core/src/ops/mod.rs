//! The coding operators workflows are assembled from, and the executor that
//! runs a compiled [`WorkflowGraph`](crate::workflow::WorkflowGraph) on one
//! note.
//!
//! Codes travel between operators as a [`CandidatePool`]: the active
//! candidates with their annotations, the pool of codes dropped along the
//! way (the fallback source), and the per-sample proposal sets used for
//! voting.

mod evidence;
mod exec;
mod extract;
mod pool;
mod prune;
mod rank;
mod sections;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::llm::{Gateway, LlmRequest, RoleTag};
use crate::prompts;
use crate::taxonomy::Taxonomy;

pub use evidence::{evidence_link, evidence_strength, judge_candidates, llm_filter, JudgeStrategy};
pub use exec::{execute, ExecError, ExecOptions, Execution, TraceRecord};
pub use extract::{extract_terms, propose_candidates, search_alpha_index, synonym_expand, ProposeInput, ProposeMode};
pub use pool::{canonicalize_pool, desc_match, fetch_descriptions, merge_pools, sample_codes, validate_candidates, vote_filter, vote_stats};
pub use prune::{contrastive_screen, hier_prune, HierRule};
pub use rank::{finalize_ranking, rank_order, rerank, top_k, RerankScheme};
pub use sections::{section_range, section_text, Section};

/// A clinical note to code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub id: String,
    pub text: String,
}

impl Note {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cue {
    Affirmed,
    Negated,
    FamilyHistory,
    Hypothetical,
    RuledOut,
}

impl Cue {
    pub fn parse(s: &str) -> Option<Cue> {
        Some(match s.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
            "affirmed" | "present" | "positive" => Cue::Affirmed,
            "negated" | "negative" | "absent" => Cue::Negated,
            "family_history" | "family" => Cue::FamilyHistory,
            "hypothetical" | "possible" => Cue::Hypothetical,
            "ruled_out" => Cue::RuledOut,
            _ => return None,
        })
    }
}

/// A term found in the note. `span` is a char range; `surface` equals the
/// note slice at that range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub surface: String,
    pub span: (usize, usize),
    pub cue: Cue,
}

impl EntityMention {
    pub fn is_affirmed(&self) -> bool {
        self.cue == Cue::Affirmed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSnippet {
    pub text: String,
    /// Char range in the note.
    pub span: (usize, usize),
    pub window: usize,
    /// Share of the code description's content tokens found in this snippet.
    pub overlap: f64,
}

/// A candidate code with everything the pipeline has learned about it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidateCode {
    pub code: String,
    /// Node ids of the operators that proposed the code.
    pub sources: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_desc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_keep: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_conf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Vec<EvidenceSnippet>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_overlap: Option<f64>,
    /// Pending rank penalty from contrastive screening.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub demotion: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_score: Option<f64>,
    /// Scores from registered LLM filters, keyed by operator name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scores: BTreeMap<String, f64>,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

impl CandidateCode {
    pub fn new(code: impl Into<String>, source: impl Into<String>) -> Self {
        Self { code: code.into(), sources: BTreeSet::from([source.into()]), ..Self::default() }
    }

    /// Fold another record for the same code into this one.
    fn absorb(&mut self, other: &CandidateCode) {
        self.sources.extend(other.sources.iter().cloned());
        macro_rules! fill {
            ($($f:ident),*) => { $( if self.$f.is_none() { self.$f = other.$f.clone(); } )* };
        }
        fill!(votes, vote_ratio, m_desc, judge_keep, judge_conf, evidence, evidence_overlap, rank_score);
        self.demotion = self.demotion.max(other.demotion);
        for (k, v) in &other.scores {
            self.scores.entry(k.clone()).or_insert(*v);
        }
    }
}

/// One proposal sample: the codes a single LLM generation returned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSet {
    pub source: String,
    pub index: u32,
    pub codes: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidatePool {
    pub active: BTreeMap<String, CandidateCode>,
    /// Codes removed by filters. Fallback draws from here.
    pub dropped: BTreeMap<String, CandidateCode>,
    pub samples: Vec<SampleSet>,
    /// Codes removed as invalid. Never re-added.
    pub removed: BTreeSet<String>,
    /// Snippet cap of the evidence step, used by evidence strength.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_cap: Option<usize>,
}

impl CandidatePool {
    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.active.keys().map(String::as_str)
    }

    pub fn insert(&mut self, cand: CandidateCode) {
        self.dropped.remove(&cand.code);
        match self.active.get_mut(&cand.code) {
            Some(c) => c.absorb(&cand),
            None => {
                self.active.insert(cand.code.clone(), cand);
            }
        }
    }

    /// Move an active code to the dropped pool.
    pub fn drop_code(&mut self, code: &str) -> bool {
        match self.active.remove(code) {
            Some(c) => {
                self.dropped.insert(code.to_string(), c);
                true
            }
            None => false,
        }
    }
}

/// Final ranked output. Entries from `fallback_start` on were appended from
/// the dropped pool.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankedResult {
    pub entries: Vec<CandidateCode>,
    pub fallback_start: usize,
}

impl RankedResult {
    pub fn codes(&self) -> Vec<String> {
        self.entries.iter().map(|c| c.code.clone()).collect()
    }

    /// The codes ranked on merit, without fallback fill.
    pub fn kept(&self) -> &[CandidateCode] {
        &self.entries[..self.fallback_start]
    }
}

/// A value on a workflow edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum PortValue {
    Entities(Vec<EntityMention>),
    Codes(CandidatePool),
    Descriptions(BTreeMap<String, String>),
    Ranked(RankedResult),
}

#[derive(Debug, thiserror::Error)]
pub enum OpError {
    #[error(transparent)]
    Llm(#[from] crate::llm::LlmError),
    #[error("{field} is missing for code {code}; add the step that computes it earlier in the workflow")]
    MissingField { field: &'static str, code: String },
    #[error("unknown prompt template {0:?}")]
    UnknownTemplate(String),
    #[error("bad parameter: {0}")]
    BadParam(String),
}

/// What operators need from the outside world.
#[derive(Debug, Clone, Copy)]
pub struct OpEnv<'a> {
    pub gateway: &'a Gateway,
    pub taxonomy: &'a Taxonomy,
    pub max_repairs: u32,
}

impl OpEnv<'_> {
    fn request(
        &self,
        template_id: &str,
        vars: &[(&str, &str)],
        temperature: f64,
        max_tokens: u32,
        log: &mut OpLog,
    ) -> Result<LlmRequest, OpError> {
        let t = prompts::template(template_id).ok_or_else(|| OpError::UnknownTemplate(template_id.to_string()))?;
        let (system, user) = t.render(vars);
        log.templates.insert(t.id.to_string());
        Ok(LlmRequest::new(RoleTag::PipelineOp, system, user)
            .temperature(temperature)
            .max_tokens(max_tokens)
            .template(t.id))
    }
}

/// Side output of one operator run: warnings and the prompt templates used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpLog {
    pub warnings: Vec<String>,
    pub templates: BTreeSet<String>,
}

impl OpLog {
    pub fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }
}
