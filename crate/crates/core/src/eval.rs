//! Scoring: pooled micro precision/recall/F1, the guideline compliance
//! oracle V, resource cost C and the composite objective
//! G = F1 - lambda_viol * mean(1 - V) - lambda_cost * C.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::llm::{Gateway, UsageLedger};
use crate::ops::{execute, CandidateCode, ExecError, Note, OpEnv, RankedResult, TraceRecord};
use crate::taxonomy::{canonicalize, Taxonomy};
use crate::workflow::WorkflowGraph;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{preds} prediction sets for {golds} gold sets")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("failed to read dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {reason}")]
    Data { line: usize, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledNote {
    pub note_id: String,
    pub text: String,
    pub gold_codes: BTreeSet<String>,
}

impl LabeledNote {
    pub fn note(&self) -> Note {
        Note { id: self.note_id.clone(), text: self.text.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub notes: Vec<LabeledNote>,
}

impl Dataset {
    /// One `{"note_id", "text", "gold_codes"}` object per line. Blank lines
    /// are skipped; ids must be unique; gold codes are canonicalized.
    pub fn from_jsonl(src: &str) -> Result<Self, EvalError> {
        let mut notes = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in src.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| EvalError::Data { line: line_no, reason };
            let mut n: LabeledNote = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            if !seen.insert(n.note_id.clone()) {
                return Err(bad(format!("duplicate note_id {:?}", n.note_id)));
            }
            n.gold_codes = n
                .gold_codes
                .iter()
                .map(|c| canonicalize(c).map_err(|e| bad(e.to_string())))
                .collect::<Result<_, _>>()?;
            notes.push(n);
        }
        Ok(Self { notes })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// A reproducible subset of `n` notes, kept in dataset order.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.notes.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.notes.len(), n).into_vec();
        idx.sort_unstable();
        Dataset { notes: idx.into_iter().map(|i| self.notes[i].clone()).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean, 0 when both are 0.
pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

impl Metrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        // No predictions: P = 0. No gold codes anywhere: R = 1.
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        Self { tp, fp, fn_, precision, recall, f1: f1_score(precision, recall) }
    }
}

/// TP/FP/FN pooled over all notes.
pub fn micro_metrics(preds: &[BTreeSet<String>], golds: &[BTreeSet<String>]) -> Result<Metrics, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let hit = p.intersection(g).count() as u64;
        tp += hit;
        fp += p.len() as u64 - hit;
        fn_ += g.len() as u64 - hit;
    }
    Ok(Metrics::from_counts(tp, fp, fn_))
}

/// Machine-checkable guideline rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplianceRule {
    AllCodesValid,
    NoAncestorDescendant,
    NoDuplicates,
    LeafPreference,
    /// Only checked when the workflow links evidence.
    EvidencePresent,
}

impl ComplianceRule {
    pub const ALL: [ComplianceRule; 5] = [
        ComplianceRule::AllCodesValid,
        ComplianceRule::NoAncestorDescendant,
        ComplianceRule::NoDuplicates,
        ComplianceRule::LeafPreference,
        ComplianceRule::EvidencePresent,
    ];

    pub fn describe(self) -> &'static str {
        match self {
            ComplianceRule::AllCodesValid => "Every output code must be a valid, assignable code of the code set.",
            ComplianceRule::NoAncestorDescendant => {
                "Never output a code together with one of its ancestors; keep only the more specific code."
            }
            ComplianceRule::NoDuplicates => "Never output the same code twice.",
            ComplianceRule::LeafPreference => "Prefer leaf codes; a code that has more specific children is flagged.",
            ComplianceRule::EvidencePresent => {
                "When the workflow links evidence, every output code must carry at least one verbatim snippet from the note."
            }
        }
    }
}

/// The guideline excerpt shown to the designer: the rule list as prose.
pub fn guideline_text(rules: &[ComplianceRule]) -> String {
    rules.iter().enumerate().map(|(i, r)| format!("{}. {}", i + 1, r.describe())).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoteCompliance {
    pub passed: u32,
    pub total: u32,
    pub failed: Vec<String>,
}

impl NoteCompliance {
    /// Fraction of checks passed; 1 when nothing was checked.
    pub fn v(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.passed as f64 / self.total as f64
        }
    }
}

/// Check the codes a note's workflow emits as predictions. Each applicable
/// rule is one check.
pub fn note_compliance(
    emitted: &[CandidateCode],
    taxonomy: &Taxonomy,
    rules: &[ComplianceRule],
    evidence_produced: bool,
) -> NoteCompliance {
    let codes: Vec<&str> = emitted.iter().map(|c| c.code.as_str()).collect();
    let mut out = NoteCompliance::default();
    for rule in ComplianceRule::ALL.into_iter().filter(|r| rules.contains(r)) {
        let ok = match rule {
            ComplianceRule::AllCodesValid => {
                codes.iter().all(|c| taxonomy.resolve(c, false).is_ok_and(|n| n.kind.is_assignable()))
            }
            ComplianceRule::NoAncestorDescendant => !codes.iter().any(|a| {
                codes.iter().any(|b| a != b && taxonomy.is_ancestor(a, b).unwrap_or(false))
            }),
            ComplianceRule::NoDuplicates => {
                let mut seen = HashSet::new();
                codes.iter().all(|c| seen.insert(canonicalize(c).unwrap_or_else(|_| c.to_string())))
            }
            ComplianceRule::LeafPreference => codes.iter().all(|c| taxonomy.is_leaf(c).unwrap_or(true)),
            ComplianceRule::EvidencePresent => {
                if !evidence_produced {
                    continue;
                }
                emitted.iter().all(|c| c.evidence.as_ref().is_some_and(|e| !e.is_empty()))
            }
        };
        out.total += 1;
        if ok {
            out.passed += 1;
        } else {
            out.failed.push(serde_json::to_value(rule).unwrap().as_str().unwrap().to_string());
        }
    }
    out
}

/// V pooled over notes: passed checks / total checks.
pub fn compliance(per_note: &[NoteCompliance]) -> f64 {
    let (p, t) = per_note.iter().fold((0u64, 0u64), |(p, t), n| (p + n.passed as u64, t + n.total as u64));
    if t == 0 {
        1.0
    } else {
        p as f64 / t as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub per_token: f64,
    pub per_call: f64,
    pub per_second: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { per_token: 1e-6, per_call: 0.0, per_second: 0.0 }
    }
}

/// C = w_tok * tokens + w_call * calls + w_lat * wall seconds.
pub fn cost(usage: &UsageLedger, w: &CostWeights) -> f64 {
    w.per_token * usage.total_tokens() as f64 + w.per_call * usage.total_calls() as f64 + w.per_second * usage.wall_secs()
}

/// G = mean over notes of [f1 - lambda_viol * (1 - V_note)] - lambda_cost * C,
/// with f1 the pooled micro-F1.
pub fn objective(f1: f64, v_notes: &[f64], c: f64, lambda_viol: f64, lambda_cost: f64) -> f64 {
    let penalty = if v_notes.is_empty() {
        0.0
    } else {
        v_notes.iter().map(|v| lambda_viol * (1.0 - v)).sum::<f64>() / v_notes.len() as f64
    };
    f1 - penalty - lambda_cost * c
}

/// How a ranked list becomes the evaluated code set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictionPolicy {
    pub include_fallback: bool,
    pub min_rank_score: Option<f64>,
}

impl PredictionPolicy {
    /// The ranked entries this policy reports, in rank order.
    pub fn emitted(&self, ranked: &RankedResult) -> Vec<CandidateCode> {
        let entries = if self.include_fallback { &ranked.entries[..] } else { ranked.kept() };
        entries
            .iter()
            .filter(|c| self.min_rank_score.is_none_or(|t| c.rank_score.unwrap_or(0.0) >= t))
            .cloned()
            .collect()
    }

    pub fn predict(&self, ranked: &RankedResult) -> BTreeSet<String> {
        self.emitted(ranked).into_iter().map(|c| c.code).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub policy: PredictionPolicy,
    pub rules: Vec<ComplianceRule>,
    pub cost_weights: CostWeights,
    pub lambda_viol: f64,
    pub lambda_cost: f64,
    pub max_repairs: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            policy: PredictionPolicy::default(),
            rules: ComplianceRule::ALL.to_vec(),
            cost_weights: CostWeights::default(),
            lambda_viol: 0.1,
            lambda_cost: 0.0,
            max_repairs: crate::llm::DEFAULT_MAX_REPAIRS,
        }
    }
}

/// The composite score of one workflow on a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub compliance: f64,
    pub cost: f64,
    pub objective: f64,
}

impl Score {
    /// Score of a workflow that could not be built or run.
    pub fn failed() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteResult {
    pub note_id: String,
    pub predicted: BTreeSet<String>,
    pub gold: BTreeSet<String>,
    pub ranked: RankedResult,
    pub compliance: NoteCompliance,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub notes: Vec<NoteResult>,
    pub metrics: Metrics,
    pub compliance: f64,
    pub cost: f64,
    pub objective: f64,
    pub lambda_viol: f64,
    pub lambda_cost: f64,
    pub usage: UsageLedger,
}

impl RunReport {
    /// Assemble a report from per-note results, recomputing every aggregate.
    pub fn assemble(notes: Vec<NoteResult>, usage: UsageLedger, cfg: &EvalConfig) -> RunReport {
        let preds: Vec<_> = notes.iter().map(|n| n.predicted.clone()).collect();
        let golds: Vec<_> = notes.iter().map(|n| n.gold.clone()).collect();
        let metrics = micro_metrics(&preds, &golds).expect("equal lengths");
        let per_note: Vec<NoteCompliance> = notes.iter().map(|n| n.compliance.clone()).collect();
        let v_notes: Vec<f64> = per_note.iter().map(NoteCompliance::v).collect();
        let c = cost(&usage, &cfg.cost_weights);
        RunReport {
            objective: objective(metrics.f1, &v_notes, c, cfg.lambda_viol, cfg.lambda_cost),
            compliance: compliance(&per_note),
            cost: c,
            metrics,
            lambda_viol: cfg.lambda_viol,
            lambda_cost: cfg.lambda_cost,
            notes,
            usage,
        }
    }

    pub fn score(&self) -> Score {
        Score {
            precision: self.metrics.precision,
            recall: self.metrics.recall,
            f1: self.metrics.f1,
            compliance: self.compliance,
            cost: self.cost,
            objective: self.objective,
        }
    }
}

/// A report plus the operator traces of every note, in dataset order.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: RunReport,
    pub traces: Vec<Vec<TraceRecord>>,
}

/// Run a workflow over every note, in order, and score it. Token usage of
/// this evaluation alone is measured through a tracking ledger.
pub fn evaluate_workflow(
    graph: &WorkflowGraph,
    dataset: &Dataset,
    gateway: &Gateway,
    taxonomy: &Taxonomy,
    cfg: &EvalConfig,
) -> Result<Evaluation, ExecError> {
    let usage = Arc::new(Mutex::new(UsageLedger::default()));
    let gateway = gateway.tracked(usage.clone());
    let env = OpEnv { gateway: &gateway, taxonomy, max_repairs: cfg.max_repairs };
    let evidence_produced = graph.nodes.iter().any(|n| n.component == "EvidenceLink");
    let mut notes = Vec::with_capacity(dataset.len());
    let mut traces = Vec::with_capacity(dataset.len());
    for n in &dataset.notes {
        let exec = execute(graph, &n.note(), &env)?;
        notes.push(NoteResult {
            note_id: n.note_id.clone(),
            predicted: cfg.policy.predict(&exec.ranked),
            gold: n.gold_codes.clone(),
            compliance: note_compliance(&cfg.policy.emitted(&exec.ranked), taxonomy, &cfg.rules, evidence_produced),
            ranked: exec.ranked,
            tokens: exec.tokens,
        });
        traces.push(exec.traces);
    }
    let usage = usage.lock().unwrap().clone();
    Ok(Evaluation { report: RunReport::assemble(notes, usage, cfg), traces })
}
