//! The three meta-agents. The designer proposes plans from archive context,
//! the coder compiles them with a bounded repair loop, and the reflector
//! attaches locally computed scores and textual feedback to an evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archive::ArchiveEntry;
use crate::eval::{Evaluation, Score};
use crate::llm::{Gateway, LlmError, LlmRequest, RoleTag};
use crate::prompts;
use crate::workflow::{compile_plan, validate_plan, ComponentLibrary, LlmOpDecl, Plan, PortType, WorkflowGraph};

pub const DESIGNER_TEMPLATE: &str = "designer_v1";
pub const CODER_TEMPLATE: &str = "coder_v1";
pub const REFLECTOR_TEMPLATE: &str = "reflector_v1";

/// Template versions recorded with every archive entry.
pub fn template_version() -> String {
    format!("{DESIGNER_TEMPLATE}+{CODER_TEMPLATE}+{REFLECTOR_TEMPLATE}")
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("all {0} proposed plans were malformed")]
    AllProposalsMalformed(usize),
    #[error("plan could not be built after {} attempts", attempts.len())]
    BuildExhausted { attempts: Vec<BuildAttempt> },
}

/// Which parts of the archive context the designer sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignerToggles {
    pub score_feedback: bool,
    pub text_feedback: bool,
    pub guidelines: bool,
    pub exemplars: bool,
}

impl Default for DesignerToggles {
    fn default() -> Self {
        Self { score_feedback: true, text_feedback: true, guidelines: true, exemplars: true }
    }
}

#[derive(Debug, Clone)]
pub struct DesignerContext {
    pub elites: Vec<ArchiveEntry>,
    pub recents: Vec<ArchiveEntry>,
    pub signatures: String,
    pub guidelines: String,
    /// Plans requested per generation.
    pub generation_size: u32,
    pub toggles: DesignerToggles,
}

fn exemplar(label: &str, i: usize, e: &ArchiveEntry, t: &DesignerToggles) -> String {
    let mut out = format!("{label}_{}: {}", i + 1, e.plan.name);
    if t.score_feedback {
        let s = e.score.unwrap_or_default();
        let _ = write!(out, " (f1={:.3}, P={:.3}, R={:.3}, G={:.3})", s.f1, s.precision, s.recall, s.objective);
    }
    let _ = write!(out, "\nPlan: {}", serde_json::to_string(&e.plan.steps).expect("plan serializes"));
    if t.text_feedback && !e.reflection.is_empty() {
        let _ = write!(out, "\nFeedback: {}", e.reflection);
    }
    out
}

fn exemplar_block(label: &str, entries: &[ArchiveEntry], t: &DesignerToggles) -> String {
    if !t.exemplars {
        return format!("{label}: (not provided)");
    }
    if entries.is_empty() {
        return format!("{label}: (none yet)");
    }
    entries.iter().enumerate().map(|(i, e)| exemplar(label, i, e, t)).collect::<Vec<_>>().join("\n\n")
}

/// The designer prompt for `ctx`, as (system, user).
pub fn render_designer_prompt(ctx: &DesignerContext) -> (String, String) {
    let t = &ctx.toggles;
    let guidelines = if t.guidelines { ctx.guidelines.clone() } else { "(not provided)".to_string() };
    let top = exemplar_block("TOP", &ctx.elites, t);
    let recent = exemplar_block("RECENT", &ctx.recents, t);
    prompts::template(DESIGNER_TEMPLATE).expect("shipped template").render(&[
        ("GUIDELINES", &guidelines),
        ("TOOL_SIGNATURES", &ctx.signatures),
        ("TOP_EXEMPLARS", &top),
        ("RECENT_EXEMPLARS", &recent),
    ])
}

#[derive(Debug, Clone, Default)]
pub struct Proposals {
    pub plans: Vec<Plan>,
    /// One line per malformed proposal that was dropped.
    pub dropped: Vec<String>,
}

/// Ask for `generation_size` plans. Malformed proposals are dropped; if
/// none survive the generation fails with `AllProposalsMalformed`.
pub fn designer_propose(
    gateway: &Gateway,
    ctx: &DesignerContext,
    temperature: f64,
    max_repairs: u32,
) -> Result<Proposals, AgentError> {
    let (system, user) = render_designer_prompt(ctx);
    let m = ctx.generation_size.max(1);
    let req = LlmRequest::new(RoleTag::Designer, system, user)
        .samples(m)
        .temperature(temperature)
        .template(DESIGNER_TEMPLATE);
    let mut out = Proposals::default();
    for (i, r) in gateway.complete_json_many(&req, "plan", max_repairs)?.into_iter().enumerate() {
        match r.map_err(|e| e.to_string()).and_then(|v| serde_json::from_value::<Plan>(v).map_err(|e| e.to_string())) {
            Ok(p) => out.plans.push(p),
            Err(e) => out.dropped.push(format!("proposal {}: {e}", i + 1)),
        }
    }
    if out.plans.is_empty() {
        return Err(AgentError::AllProposalsMalformed(out.dropped.len()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildAttempt {
    pub plan: Plan,
    pub errors: String,
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub graph: WorkflowGraph,
    /// The plan that compiled, after any repairs.
    pub plan: Plan,
    /// Compile attempts made, including the successful one.
    pub attempts: u32,
    pub registered: Vec<LlmOpDecl>,
    pub failed: Vec<BuildAttempt>,
}

#[derive(Debug, Deserialize)]
struct Repair {
    #[serde(flatten)]
    plan: Plan,
    #[serde(default)]
    register_ops: Vec<RegisterOp>,
}

#[derive(Debug, Deserialize)]
struct RegisterOp {
    name: String,
    instruction: String,
}

/// Validate and compile `plan`. Each rejection goes back to the model as a
/// repair request; at most `max_retries + 1` compile attempts are made.
/// Operators declared by a repair are registered as LLM-backed filters on a
/// private copy of the library.
pub fn coder_build(
    gateway: &Gateway,
    plan: &Plan,
    lib: &ComponentLibrary,
    max_retries: u32,
    max_repairs: u32,
) -> Result<BuildOutcome, AgentError> {
    let mut lib = lib.clone();
    let mut plan = plan.clone();
    let mut registered = Vec::new();
    let mut failed: Vec<BuildAttempt> = Vec::new();
    let mut pending_errors: Vec<String> = Vec::new();
    for attempt in 0..=max_retries {
        let report = validate_plan(&plan, &lib);
        let mut errors = std::mem::take(&mut pending_errors);
        if report.ok {
            match compile_plan(&plan, &lib) {
                Ok(graph) if errors.is_empty() => {
                    return Ok(BuildOutcome { graph, plan, attempts: attempt + 1, registered, failed });
                }
                Ok(_) => {}
                Err(e) => errors.push(e.to_string()),
            }
        } else {
            errors.push(report.render());
        }
        let errors = errors.join("\n");
        failed.push(BuildAttempt { plan: plan.clone(), errors: errors.clone() });
        if attempt == max_retries {
            break;
        }
        let plan_json = serde_json::to_string_pretty(&plan).expect("plan serializes");
        let signatures = lib.render_signatures();
        let (system, user) = prompts::template(CODER_TEMPLATE).expect("shipped template").render(&[
            ("PLAN_JSON", &plan_json),
            ("ERRORS", &errors),
            ("TOOL_SIGNATURES", &signatures),
        ]);
        let req = LlmRequest::new(RoleTag::Coder, system, user).template(CODER_TEMPLATE);
        let repair = match gateway.complete_json(&req, "coder_repair", max_repairs) {
            Ok(v) => serde_json::from_value::<Repair>(v).map_err(|e| e.to_string()),
            Err(e @ LlmError::JsonIrrecoverable { .. }) => Err(e.to_string()),
            Err(e) => return Err(e.into()),
        };
        match repair {
            Ok(r) => {
                plan = r.plan;
                for op in r.register_ops {
                    if lib.get(&op.name).is_some() {
                        continue;
                    }
                    let decl = LlmOpDecl {
                        name: op.name,
                        instruction: op.instruction,
                        input: PortType::CodeSet,
                        output: PortType::CodeSet,
                    };
                    match lib.register_llm_op(decl.clone()) {
                        Ok(()) => registered.push(decl),
                        Err(e) => pending_errors.push(e.to_string()),
                    }
                }
            }
            Err(e) => pending_errors.push(format!("repair reply unusable: {e}")),
        }
    }
    Err(AgentError::BuildExhausted { attempts: failed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionRecord {
    /// Always computed locally from the run report.
    pub score: Score,
    pub feedback: String,
    pub diagnostics: Vec<String>,
    /// True when the feedback came from the deterministic template.
    pub fallback: bool,
}

/// Per-node summary over every note of the run.
fn trace_summary(eval: &Evaluation) -> Vec<String> {
    #[derive(Default)]
    struct Agg {
        op: String,
        runs: u64,
        tokens: u64,
        codes_in: u64,
        codes_out: u64,
        warnings: Vec<String>,
        warn_count: usize,
    }
    let mut by_node: BTreeMap<&str, Agg> = BTreeMap::new();
    for note in &eval.traces {
        for t in note {
            let a = by_node.entry(&t.node_id).or_default();
            a.op.clone_from(&t.op);
            a.runs += 1;
            a.tokens += t.tokens;
            a.codes_in += t.codes_in.unwrap_or(0) as u64;
            a.codes_out += t.codes_out.unwrap_or(0) as u64;
            a.warn_count += t.warnings.len();
            for w in &t.warnings {
                if a.warnings.len() < 3 && !a.warnings.contains(w) {
                    a.warnings.push(w.clone());
                }
            }
        }
    }
    by_node
        .into_iter()
        .map(|(id, a)| {
            let mut line = format!(
                "{id} {}: runs={} tokens={} codes_in={} codes_out={} warnings={}",
                a.op, a.runs, a.tokens, a.codes_in, a.codes_out, a.warn_count
            );
            if !a.warnings.is_empty() {
                let _ = write!(line, " (e.g. {})", a.warnings.join("; "));
            }
            line
        })
        .collect()
}

fn examples(eval: &Evaluation, limit: usize) -> String {
    let list = |s: &mut dyn Iterator<Item = &String>| s.cloned().collect::<Vec<_>>().join(", ");
    eval.report
        .notes
        .iter()
        .take(limit)
        .map(|n| {
            format!(
                "{}: predicted [{}]; gold [{}]; missed [{}]; spurious [{}]",
                n.note_id,
                list(&mut n.predicted.iter()),
                list(&mut n.gold.iter()),
                list(&mut n.gold.difference(&n.predicted)),
                list(&mut n.predicted.difference(&n.gold)),
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Deterministic feedback naming the main error categories.
pub fn auto_reflection(eval: &Evaluation) -> String {
    let r = &eval.report;
    let m = &r.metrics;
    let mut failed: BTreeMap<&str, usize> = BTreeMap::new();
    for n in &r.notes {
        for f in &n.compliance.failed {
            *failed.entry(f.as_str()).or_default() += 1;
        }
    }
    let mut cats = [(m.fn_ as usize, "missed gold codes (FN)"), (m.fp as usize, "spurious codes (FP)")];
    cats.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
    let mut out = format!(
        "AUTO-REFLECTION: P={:.3} R={:.3} F1={:.3} V={:.3} G={:.3}. Top error categories: {}.",
        m.precision,
        m.recall,
        m.f1,
        r.compliance,
        r.objective,
        cats.iter().map(|(n, what)| format!("{what} x{n}")).collect::<Vec<_>>().join(", ")
    );
    if !failed.is_empty() {
        let f: Vec<String> = failed.iter().map(|(k, v)| format!("{k} x{v}")).collect();
        let _ = write!(out, " Failed guideline checks: {}.", f.join(", "));
    }
    let hint = if m.fn_ > m.fp {
        "Recall is the bottleneck: add proposal sources or samples, or loosen filters."
    } else if m.fp > 0 {
        "Precision is the bottleneck: add validation, judging or voting filters."
    } else {
        "No errors on the validation set."
    };
    let _ = write!(out, " {hint}");
    out
}

/// Feedback for a workflow that never produced a run report.
pub fn failure_reflection(stage: &str, detail: &str) -> String {
    format!("AUTO-REFLECTION: {stage} failed; score set to 0. {detail}")
}

/// Score a run and ask the model for feedback. Numbers always come from the
/// local report; if the model's F1 disagrees, a discrepancy is noted. When
/// the model cannot be used, the deterministic template is returned.
pub fn reflector_evaluate(gateway: &Gateway, plan: &Plan, eval: &Evaluation, max_repairs: u32) -> ReflectionRecord {
    let score = eval.report.score();
    let mut diagnostics = trace_summary(eval);
    let scores = serde_json::to_string(&score).expect("score serializes");
    let traces = diagnostics.join("\n");
    let plan_json = serde_json::to_string_pretty(plan).expect("plan serializes");
    let ex = examples(eval, 3);
    let (system, user) = prompts::template(REFLECTOR_TEMPLATE).expect("shipped template").render(&[
        ("PLAN_JSON", &plan_json),
        ("SCORES", &scores),
        ("TRACES", &traces),
        ("EXAMPLES", &ex),
    ]);
    let req = LlmRequest::new(RoleTag::Reflector, system, user).template(REFLECTOR_TEMPLATE);
    match gateway.complete_json(&req, "reflection", max_repairs) {
        Ok(v) => {
            let reported = v.pointer("/score/f1").or_else(|| v.get("f1")).and_then(Value::as_f64);
            if let Some(f1) = reported {
                if (f1 - score.f1).abs() > 1e-3 {
                    diagnostics.push(format!(
                        "discrepancy: reflector reported f1={f1:.4}, local f1={:.4}; local value kept",
                        score.f1
                    ));
                }
            }
            let feedback = v.get("feedback").and_then(Value::as_str).unwrap_or_default().to_string();
            ReflectionRecord { score, feedback, diagnostics, fallback: false }
        }
        Err(e) => {
            diagnostics.push(format!("reflector unavailable: {e}"));
            ReflectionRecord { score, feedback: auto_reflection(eval), diagnostics, fallback: true }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::llm::ScriptedProvider;
    use crate::workflow::PlanStep;

    fn gw(script: &str) -> Gateway {
        Gateway::new(Arc::new(ScriptedProvider::from_jsonl(script).unwrap()))
    }

    fn good_plan() -> Plan {
        Plan::new("p", "t", vec![PlanStep::new("ProposeFromNote"), PlanStep::new("Validate"), PlanStep::new("Finalize")])
    }

    #[test]
    fn valid_plan_compiles_without_calls() {
        let g = gw("");
        let out = coder_build(&g, &good_plan(), &ComponentLibrary::standard(), 3, 0).unwrap();
        assert_eq!(out.attempts, 1);
        assert_eq!(g.ledger().total_calls(), 0);
    }

    #[test]
    fn zero_retries_exhausts() {
        let mut bad = good_plan();
        bad.steps[0] = PlanStep::new("ProposeFromNote").with("samples", 99);
        match coder_build(&gw(""), &bad, &ComponentLibrary::standard(), 0, 0) {
            Err(AgentError::BuildExhausted { attempts }) => assert_eq!(attempts.len(), 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn repair_fixes_param_and_registers_op() {
        let mut bad = good_plan();
        bad.steps.insert(2, PlanStep::new("NegationCheck"));
        let fixed = serde_json::json!({
            "name": "p", "thought": "t",
            "plan": [{"op": "ProposeFromNote"}, {"op": "Validate"}, {"op": "NegationCheck"}, {"op": "Finalize"}],
            "register_ops": [{"name": "NegationCheck", "instruction": "keep codes whose condition is affirmed"}]
        });
        let script = format!("{}\n", serde_json::json!({"role": "coder", "text": fixed.to_string()}));
        let out = coder_build(&gw(&script), &bad, &ComponentLibrary::standard(), 2, 0).unwrap();
        assert_eq!((out.attempts, out.registered.len()), (2, 1));
        assert!(out.graph.nodes.iter().any(|n| n.llm_op.is_some()));
    }

    #[test]
    fn designer_prompt_lists_exemplars() {
        let mut e = ArchiveEntry::new(good_plan(), crate::archive::Origin::Seed, 0, "v");
        e.plan.name = "EliteOne".into();
        e.score = Some(Score { f1: 0.4321, ..Score::default() });
        let ctx = DesignerContext {
            elites: vec![e.clone()],
            recents: vec![],
            signatures: "SIGS".into(),
            guidelines: "RULES".into(),
            generation_size: 1,
            toggles: DesignerToggles::default(),
        };
        let (_, user) = render_designer_prompt(&ctx);
        assert!(user.contains("TOP_1: EliteOne (f1=0.432"));
        assert!(user.contains("RECENT: (none yet)") && user.contains("SIGS") && user.contains("RULES"));
        let off = DesignerContext { toggles: DesignerToggles { score_feedback: false, ..Default::default() }, ..ctx };
        assert!(!render_designer_prompt(&off).1.contains("f1=0.432"));
    }

    #[test]
    fn designer_drops_malformed() {
        let plan = good_plan().to_canonical_json();
        let script = format!("{}\n", serde_json::json!({"role": "designer", "texts": ["prose before ".to_string() + &plan, "not json"]}));
        let g = gw(&script);
        let ctx = DesignerContext {
            elites: vec![],
            recents: vec![],
            signatures: String::new(),
            guidelines: String::new(),
            generation_size: 2,
            toggles: DesignerToggles::default(),
        };
        let p = designer_propose(&g, &ctx, 0.0, 0).unwrap();
        assert_eq!((p.plans.len(), p.dropped.len()), (1, 1));
    }
}
