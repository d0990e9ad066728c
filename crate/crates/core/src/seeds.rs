//! The seed catalog: baseline agentic workflows and the two reference
//! evidence pipelines, shipped as plan assets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::workflow::{validate_plan, ComponentLibrary, Plan, PlanStep, ViolationKind};

#[derive(Debug, thiserror::Error)]
pub enum SeedError {
    #[error("unknown seed {0:?}")]
    UnknownSeed(String),
    #[error("seed {seed}: override {key}: {reason}")]
    ParamOutOfRange { seed: String, key: String, reason: String },
    #[error("failed to read seed file: {0}")]
    Io(#[from] std::io::Error),
    #[error("seed file is not a plan: {0}")]
    Parse(#[from] serde_json::Error),
}

/// How closely a seed follows a published pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rendering {
    /// A full pipeline specification exists; the plan follows it step by step.
    Reference,
    /// Only the idea is published; the plan is one reasonable rendering.
    BestEffort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDescriptor {
    pub about: String,
    pub rendering: Rendering,
    #[serde(flatten)]
    pub plan: Plan,
}

impl SeedDescriptor {
    pub fn name(&self) -> &str {
        &self.plan.name
    }

    /// Parameters a plan sets explicitly, keyed `op.param` (or `id.param`).
    pub fn default_params(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        for s in &self.plan.steps {
            let owner = s.id.as_deref().unwrap_or(&s.op);
            for (k, v) in &s.params {
                out.insert(format!("{owner}.{k}"), v.clone());
            }
        }
        out
    }
}

macro_rules! seed_assets {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../assets/seeds/", $name, ".json")))),*]
    };
}

const ASSETS: &[(&str, &str)] = seed_assets!(
    "cot",
    "cot_sc",
    "multi_debate",
    "self_refine",
    "judge",
    "ner",
    "evidence_aware",
    "evidence_vote_aware",
);

pub fn seed_names() -> Vec<&'static str> {
    ASSETS.iter().map(|(n, _)| *n).collect()
}

/// All shipped seeds, in catalog order.
pub fn list_seeds() -> Vec<SeedDescriptor> {
    ASSETS
        .iter()
        .map(|(_, src)| serde_json::from_str(src).expect("shipped seed assets parse"))
        .collect()
}

pub fn seed(name: &str) -> Result<SeedDescriptor, SeedError> {
    ASSETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, src)| serde_json::from_str(src).expect("shipped seed assets parse"))
        .ok_or_else(|| SeedError::UnknownSeed(name.to_string()))
}

/// A seed plan by catalog name, or from a plan JSON file when `spec` is a
/// path to one.
pub fn load_seed(spec: &str) -> Result<Plan, SeedError> {
    if Path::new(spec).is_file() {
        return Ok(serde_json::from_str(&std::fs::read_to_string(spec)?)?);
    }
    Ok(seed(spec)?.plan)
}

fn steps_for<'a>(plan: &'a mut Plan, target: Option<&str>, key: &str) -> Vec<&'a mut PlanStep> {
    let lib = ComponentLibrary::standard();
    plan.steps
        .iter_mut()
        .filter(|s| match target {
            Some(t) => s.id.as_deref() == Some(t) || s.op == t,
            None => lib.get(&s.op).is_some_and(|sig| sig.param(key).is_some()),
        })
        .collect()
}

/// The named seed plan with `overrides` applied. A key `param` sets that
/// parameter on every step that accepts it; `step.param` targets the step
/// with that id (or op name). The result must still validate.
pub fn build_seed(name: &str, overrides: &BTreeMap<String, Value>) -> Result<Plan, SeedError> {
    let mut plan = seed(name)?.plan;
    let lib = ComponentLibrary::standard();
    for (key, value) in overrides {
        let (target, param) = match key.split_once('.') {
            Some((t, p)) => (Some(t), p),
            None => (None, key.as_str()),
        };
        let steps = steps_for(&mut plan, target, param);
        if steps.is_empty() {
            return Err(SeedError::ParamOutOfRange {
                seed: name.into(),
                key: key.clone(),
                reason: "no step of this seed takes that parameter".into(),
            });
        }
        for s in steps {
            s.params.insert(param.to_string(), value.clone());
        }
    }
    let report = validate_plan(&plan, &lib);
    if !report.ok {
        let kinds = [ViolationKind::ParamOutOfRange, ViolationKind::ParamType, ViolationKind::UnknownParam];
        let reason = report
            .violations
            .iter()
            .filter(|v| kinds.contains(&v.kind))
            .map(|v| v.message.clone())
            .collect::<Vec<_>>()
            .join("; ");
        return Err(SeedError::ParamOutOfRange {
            seed: name.into(),
            key: overrides.keys().cloned().collect::<Vec<_>>().join(","),
            reason: if reason.is_empty() { report.render() } else { reason },
        });
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    fn param<'a>(p: &'a Plan, op: &str, key: &str) -> &'a Value {
        p.steps.iter().find(|s| s.op == op).and_then(|s| s.params.get(key)).unwrap()
    }

    #[test]
    fn catalog_validates() {
        let lib = ComponentLibrary::standard();
        let seeds = list_seeds();
        assert_eq!(seeds.len(), 8);
        for s in &seeds {
            let r = validate_plan(&s.plan, &lib);
            assert!(r.ok, "{}: {}", s.name(), r.render());
            crate::workflow::compile_plan(&s.plan, &lib).unwrap();
        }
    }

    #[test]
    fn reference_pipeline_defaults() {
        let p = build_seed("evidence_aware", &BTreeMap::new()).unwrap();
        assert_eq!(param(&p, "Judge", "tau_keep"), &json!(0.5));
        assert_eq!(param(&p, "ContrastiveScreen", "margin"), &json!(0.15));
        assert_eq!(param(&p, "EvidenceLink", "max_snips"), &json!(2));
        assert_eq!(param(&p, "EvidenceLink", "window"), &json!(24));
        assert_eq!(param(&p, "Finalize", "k"), &json!(20));
        let p = build_seed("evidence_vote_aware", &BTreeMap::new()).unwrap();
        assert_eq!(param(&p, "Rerank", "weights"), &json!([0.4, 0.3, 0.2, 0.1]));
        assert_eq!(param(&p, "ProposeFromTerms", "samples"), &json!(3));
        assert_eq!(param(&p, "ProposeFromNote", "samples"), &json!(4));
        assert_eq!(param(&p, "EvidenceLink", "max_tokens"), &json!(256));
    }

    #[test]
    fn overrides() {
        let p = build_seed("cot_sc", &BTreeMap::from([("samples".to_string(), json!(4))])).unwrap();
        assert_eq!(param(&p, "ProposeFromNote", "samples"), &json!(4));
        let p = build_seed("evidence_vote_aware", &BTreeMap::from([("note.samples".to_string(), json!(6))])).unwrap();
        assert_eq!(param(&p, "ProposeFromNote", "samples"), &json!(6));
        assert_eq!(param(&p, "ProposeFromTerms", "samples"), &json!(3));
        let bad = build_seed("cot_sc", &BTreeMap::from([("samples".to_string(), json!(99))]));
        assert!(matches!(bad, Err(SeedError::ParamOutOfRange { .. })));
        assert!(matches!(build_seed("tree_of_thought", &BTreeMap::new()), Err(SeedError::UnknownSeed(_))));
    }
}
