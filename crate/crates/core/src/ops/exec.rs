use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::evidence::{evidence_link, judge_candidates, llm_filter, JudgeStrategy};
use super::extract::{affirmed_surfaces, extract_terms, propose_candidates, search_alpha_index, synonym_expand};
use super::extract::{ProposeInput, ProposeMode};
use super::pool::{canonicalize_pool, desc_match, fetch_descriptions, merge_pools, validate_candidates, vote_filter, vote_stats};
use super::prune::{contrastive_screen, hier_prune, HierRule};
use super::rank::{finalize_ranking, rerank, top_k, RerankScheme};
use super::sections::{section_range, section_text, Section};
use super::{CandidatePool, Note, OpEnv, OpError, OpLog, PortValue, RankedResult};
use crate::llm::{UsageLedger, DEFAULT_MAX_REPAIRS};
use crate::workflow::{GraphError, WorkflowGraph, WorkflowNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecOptions {
    /// JSON repair attempts per LLM call inside operators.
    pub max_repairs: u32,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self { max_repairs: DEFAULT_MAX_REPAIRS }
    }
}

/// One operator execution, as shown to the reflector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub node_id: String,
    pub op: String,
    pub params: BTreeMap<String, Value>,
    pub input_digest: String,
    pub output_digest: String,
    pub tokens: u64,
    pub duration_ms: u64,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub templates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codes_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codes_out: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub note_id: String,
    pub ranked: RankedResult,
    pub traces: Vec<TraceRecord>,
    pub tokens: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node {node} ({op}): {source}")]
    Op {
        node: String,
        op: String,
        #[source]
        source: OpError,
    },
    #[error("node {node}: input {port} is missing or has the wrong type")]
    BadInput { node: String, port: String },
    #[error("node {node}: unknown component {op}")]
    UnknownComponent { node: String, op: String },
    #[error("sink {0} did not produce a ranked list")]
    NoResult(String),
}

impl ExecError {
    /// The underlying provider error, if this failure came from one.
    pub fn llm_error(&self) -> Option<&crate::llm::LlmError> {
        match self {
            ExecError::Op { source: OpError::Llm(e), .. } => Some(e),
            _ => None,
        }
    }
}

pub(crate) fn digest<T: Serialize + ?Sized>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("serializable");
    hex::encode(Sha256::digest(&bytes))
}

fn count_codes(v: &PortValue) -> Option<usize> {
    match v {
        PortValue::Codes(p) => Some(p.active.len()),
        PortValue::Ranked(r) => Some(r.entries.len()),
        _ => None,
    }
}

struct Params<'a>(&'a WorkflowNode);

impl Params<'_> {
    fn bad(&self, name: &str) -> OpError {
        OpError::BadParam(format!("{name}={:?}", self.0.param(name)))
    }
    fn f64(&self, name: &str) -> Result<f64, OpError> {
        self.0.param(name).and_then(Value::as_f64).ok_or_else(|| self.bad(name))
    }
    fn usize(&self, name: &str) -> Result<usize, OpError> {
        self.0
            .param(name)
            .and_then(|v| v.as_u64().or_else(|| v.as_f64().filter(|f| f.fract() == 0.0 && *f >= 0.0).map(|f| f as u64)))
            .map(|n| n as usize)
            .ok_or_else(|| self.bad(name))
    }
    fn str(&self, name: &str) -> Result<&str, OpError> {
        self.0.param(name).and_then(Value::as_str).ok_or_else(|| self.bad(name))
    }
    fn bool(&self, name: &str) -> Result<bool, OpError> {
        self.0.param(name).and_then(Value::as_bool).ok_or_else(|| self.bad(name))
    }
    fn section(&self) -> Result<Section, OpError> {
        Section::parse(self.str("section")?).ok_or_else(|| self.bad("section"))
    }
    fn mode(&self) -> Result<ProposeMode, OpError> {
        ProposeMode::parse(self.str("mode")?).ok_or_else(|| self.bad("mode"))
    }
}

/// Context for reference-section proposals: reason for visit plus
/// assessment, or the whole note when neither header is present.
fn reference_sections(note: &str) -> String {
    let whole = (0, note.len());
    let parts: Vec<&str> = [Section::ReasonForVisit, Section::Assessment]
        .into_iter()
        .filter(|s| section_range(note, *s) != whole)
        .map(|s| section_text(note, s))
        .collect();
    if parts.is_empty() {
        note.to_string()
    } else {
        parts.join("\n")
    }
}

/// Run a compiled workflow on one note, in topological order.
pub fn execute(graph: &WorkflowGraph, note: &Note, env: &OpEnv<'_>) -> Result<Execution, ExecError> {
    let order = graph.topo_order()?;
    let mut values: BTreeMap<String, PortValue> = BTreeMap::new();
    let mut traces = Vec::with_capacity(order.len());
    let mut total_tokens = 0;

    for id in &order {
        let node = graph.node(id).ok_or_else(|| GraphError::Malformed(format!("unknown node {id}")))?;
        let mut inputs: BTreeMap<&str, Vec<&PortValue>> = BTreeMap::new();
        for e in graph.inputs_of(id) {
            let v = values.get(&e.from).ok_or_else(|| ExecError::BadInput { node: id.clone(), port: e.port.clone() })?;
            inputs.entry(e.port.as_str()).or_default().push(v);
        }
        let input_digest = digest(&(&note.text, &inputs));
        let node_ledger = Arc::new(Mutex::new(UsageLedger::default()));
        let gateway = env.gateway.tracked(node_ledger.clone());
        let node_env = OpEnv { gateway: &gateway, ..*env };
        let mut log = OpLog::default();
        let started = Instant::now();

        let out = run_node(node, &inputs, note, &node_env, &mut log).map_err(|e| match e {
            NodeError::Op(source) => ExecError::Op { node: id.clone(), op: node.component.clone(), source },
            NodeError::Input(port) => ExecError::BadInput { node: id.clone(), port: port.to_string() },
            NodeError::Unknown => ExecError::UnknownComponent { node: id.clone(), op: node.component.clone() },
        })?;

        let tokens = node_ledger.lock().unwrap().total_tokens();
        total_tokens += tokens;
        let codes_in = inputs.get("codes").or_else(|| inputs.get("inputs")).map(|vs| {
            vs.iter().filter_map(|v| count_codes(v)).sum()
        });
        traces.push(TraceRecord {
            node_id: id.clone(),
            op: node.component.clone(),
            params: node.params.clone(),
            input_digest,
            output_digest: digest(&out),
            tokens,
            duration_ms: started.elapsed().as_millis() as u64,
            warnings: log.warnings,
            templates: log.templates.into_iter().collect(),
            codes_in,
            codes_out: count_codes(&out),
        });
        values.insert(id.clone(), out);
    }

    match values.remove(&graph.sink) {
        Some(PortValue::Ranked(ranked)) => Ok(Execution { note_id: note.id.clone(), ranked, traces, tokens: total_tokens }),
        _ => Err(ExecError::NoResult(graph.sink.clone())),
    }
}

enum NodeError {
    Op(OpError),
    Input(&'static str),
    Unknown,
}

impl From<OpError> for NodeError {
    fn from(e: OpError) -> Self {
        NodeError::Op(e)
    }
}

fn codes_in(inputs: &BTreeMap<&str, Vec<&PortValue>>, port: &'static str) -> Result<CandidatePool, NodeError> {
    match inputs.get(port).and_then(|v| v.first()) {
        Some(PortValue::Codes(p)) => Ok(p.clone()),
        _ => Err(NodeError::Input(port)),
    }
}

fn run_node(
    node: &WorkflowNode,
    inputs: &BTreeMap<&str, Vec<&PortValue>>,
    note: &Note,
    env: &OpEnv<'_>,
    log: &mut OpLog,
) -> Result<PortValue, NodeError> {
    let p = Params(node);
    let text = note.text.as_str();
    let entities = || match inputs.get("entities").and_then(|v| v.first()) {
        Some(PortValue::Entities(e)) => Ok(e.as_slice()),
        _ => Err(NodeError::Input("entities")),
    };
    let descriptions = || match inputs.get("descriptions").and_then(|v| v.first()) {
        Some(PortValue::Descriptions(d)) => Ok(d),
        _ => Err(NodeError::Input("descriptions")),
    };

    if let Some(decl) = &node.llm_op {
        let mut pool = codes_in(inputs, "codes")?;
        llm_filter(env, decl, text, &mut pool, p.f64("threshold")?, p.f64("temperature")?, log)?;
        return Ok(PortValue::Codes(pool));
    }

    let out = match node.component.as_str() {
        "Terms" => PortValue::Entities(extract_terms(
            env,
            text,
            p.section()?,
            p.str("template")?,
            p.f64("temperature")?,
            log,
        )?),
        "SearchAlphaIndex" => {
            let mentions = entities()?;
            let surfaces = if p.bool("expand_synonyms")? {
                synonym_expand(env, mentions, p.f64("temperature")?, log)?
            } else {
                affirmed_surfaces(mentions)
            };
            PortValue::Codes(search_alpha_index(env.taxonomy, &surfaces, p.usize("limit")?, p.f64("min_score")?, &node.id))
        }
        "ProposeFromTerms" => {
            let context = if p.str("ref")? == "sec" { reference_sections(text) } else { text.to_string() };
            let input = ProposeInput::Terms { mentions: entities()?, context: &context };
            PortValue::Codes(propose_candidates(
                env,
                input,
                p.mode()?,
                p.usize("samples")? as u32,
                p.f64("temperature")?,
                &node.id,
                log,
            )?)
        }
        "ProposeFromNote" => PortValue::Codes(propose_candidates(
            env,
            ProposeInput::Note(section_text(text, p.section()?)),
            p.mode()?,
            p.usize("samples")? as u32,
            p.f64("temperature")?,
            &node.id,
            log,
        )?),
        "Merge" => {
            let pools = inputs
                .get("inputs")
                .into_iter()
                .flatten()
                .map(|v| match v {
                    PortValue::Codes(p) => Ok(p.clone()),
                    _ => Err(NodeError::Input("inputs")),
                })
                .collect::<Result<Vec<_>, _>>()?;
            PortValue::Codes(merge_pools(pools))
        }
        "Canonicalize" => PortValue::Codes(canonicalize_pool(codes_in(inputs, "codes")?)),
        "Validate" => PortValue::Codes(validate_candidates(codes_in(inputs, "codes")?, env.taxonomy, log)),
        "VoteStats" => {
            let mut pool = codes_in(inputs, "codes")?;
            vote_stats(&mut pool);
            PortValue::Codes(pool)
        }
        "VoteFilter" => {
            let mut pool = codes_in(inputs, "codes")?;
            vote_filter(&mut pool, p.f64("min_ratio")?)?;
            PortValue::Codes(pool)
        }
        "FetchDesc" => PortValue::Descriptions(fetch_descriptions(&codes_in(inputs, "codes")?, env.taxonomy)),
        "DescMatch" => {
            let mut pool = codes_in(inputs, "codes")?;
            desc_match(&mut pool, descriptions()?, text, log);
            PortValue::Codes(pool)
        }
        "EvidenceLink" => {
            let mut pool = codes_in(inputs, "codes")?;
            evidence_link(
                env,
                text,
                &mut pool,
                descriptions()?,
                p.usize("max_snips")?,
                p.usize("window")?,
                p.usize("max_tokens")? as u32,
                p.f64("temperature")?,
                log,
            )?;
            PortValue::Codes(pool)
        }
        "Judge" => {
            let mut pool = codes_in(inputs, "codes")?;
            let strategy = JudgeStrategy::parse(p.str("strategy")?).ok_or_else(|| p.bad("strategy"))?;
            judge_candidates(
                env,
                text,
                &mut pool,
                descriptions()?,
                strategy,
                p.f64("tau_keep")?,
                p.usize("batch_size")?,
                p.f64("temperature")?,
                log,
            )?;
            PortValue::Codes(pool)
        }
        "ContrastiveScreen" => {
            let mut pool = codes_in(inputs, "codes")?;
            contrastive_screen(&mut pool, env.taxonomy, p.f64("margin")?, p.f64("overlap_threshold")?, log);
            PortValue::Codes(pool)
        }
        "HierPrune" => {
            let mut pool = codes_in(inputs, "codes")?;
            let rules = node
                .param("rules")
                .and_then(Value::as_array)
                .ok_or_else(|| p.bad("rules"))?
                .iter()
                .map(|r| r.as_str().and_then(HierRule::parse).ok_or_else(|| p.bad("rules")))
                .collect::<Result<Vec<_>, _>>()?;
            hier_prune(&mut pool, env.taxonomy, &rules, log);
            PortValue::Codes(pool)
        }
        "Rerank" => {
            let mut pool = codes_in(inputs, "codes")?;
            let scheme = match p.str("scheme")? {
                "weighted" => {
                    let w: Vec<f64> = node
                        .param("weights")
                        .and_then(Value::as_array)
                        .map(|a| a.iter().filter_map(Value::as_f64).collect())
                        .unwrap_or_default();
                    let w: [f64; 4] = w.try_into().map_err(|_| p.bad("weights"))?;
                    RerankScheme::Weighted(w)
                }
                "evidence_mean" => RerankScheme::EvidenceMean,
                _ => return Err(p.bad("scheme").into()),
            };
            rerank(&mut pool, scheme)?;
            PortValue::Codes(pool)
        }
        "TopK" => {
            let mut pool = codes_in(inputs, "codes")?;
            top_k(&mut pool, p.usize("k")?);
            PortValue::Codes(pool)
        }
        "Finalize" => PortValue::Ranked(finalize_ranking(&codes_in(inputs, "codes")?, p.usize("k")?, p.bool("fallback")?)),
        _ => return Err(NodeError::Unknown),
    };
    Ok(out)
}
