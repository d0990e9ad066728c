use std::collections::BTreeMap;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use super::library::{ComponentLibrary, ParamProblem, PortType};

/// Step keys that are wiring directives rather than operator parameters.
const RESERVED_KEYS: &[&str] = &["op", "id", "from"];

/// One operation in a plan: `{"op": "Judge", "tau_keep": 0.5, ...}`.
///
/// `id` names the step so later steps can reference it in `from`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    pub op: String,
    pub id: Option<String>,
    pub from: Vec<String>,
    pub params: BTreeMap<String, Value>,
}

impl PlanStep {
    pub fn new(op: impl Into<String>) -> Self {
        Self { op: op.into(), id: None, from: Vec::new(), params: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn to_value(&self) -> Value {
        let mut m = Map::new();
        m.insert("op".into(), Value::String(self.op.clone()));
        if let Some(id) = &self.id {
            m.insert("id".into(), Value::String(id.clone()));
        }
        if !self.from.is_empty() {
            m.insert("from".into(), Value::from(self.from.clone()));
        }
        for (k, v) in &self.params {
            m.insert(k.clone(), v.clone());
        }
        Value::Object(m)
    }

    pub fn from_value(v: &Value) -> Result<Self, String> {
        let obj = v.as_object().ok_or("plan step must be an object")?;
        let op = obj
            .get("op")
            .and_then(Value::as_str)
            .ok_or("plan step needs a string \"op\"")?
            .to_string();
        let id = match obj.get("id") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err("step \"id\" must be a string".into()),
        };
        let from = match obj.get("from") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(a)) => a
                .iter()
                .map(|x| x.as_str().map(str::to_string).ok_or("\"from\" entries must be strings"))
                .collect::<Result<_, _>>()?,
            Some(_) => return Err("step \"from\" must be a list of step ids".into()),
        };
        let params = obj
            .iter()
            .filter(|(k, _)| !RESERVED_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Self { op, id, from, params })
    }
}

impl Serialize for PlanStep {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(s)
    }
}

impl<'de> Deserialize<'de> for PlanStep {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        PlanStep::from_value(&v).map_err(D::Error::custom)
    }
}

/// The designer's deliverable: `{"name", "thought", "plan": [steps]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub name: String,
    #[serde(default)]
    pub thought: String,
    #[serde(rename = "plan")]
    pub steps: Vec<PlanStep>,
}

impl Plan {
    pub fn new(name: impl Into<String>, thought: impl Into<String>, steps: Vec<PlanStep>) -> Self {
        Self { name: name.into(), thought: thought.into(), steps }
    }

    /// Compact JSON with sorted keys.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }

    pub fn from_json(src: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(src)
    }

    /// Shape check used for model output: name, thought and a non-empty
    /// list of steps that each carry an op.
    pub fn check_shape(v: &Value) -> Result<(), String> {
        let obj = v.as_object().ok_or("expected a JSON object")?;
        match obj.get("name") {
            Some(Value::String(s)) if !s.trim().is_empty() => {}
            _ => return Err("missing or empty string field \"name\"".into()),
        }
        if !matches!(obj.get("thought"), Some(Value::String(_)) | None) {
            return Err("field \"thought\" must be a string".into());
        }
        let steps = obj
            .get("plan")
            .and_then(Value::as_array)
            .ok_or("missing array field \"plan\"")?;
        if steps.is_empty() {
            return Err("\"plan\" must contain at least one step".into());
        }
        for (i, s) in steps.iter().enumerate() {
            PlanStep::from_value(s).map_err(|e| format!("plan[{i}]: {e}"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    EmptyPlan,
    EmptyName,
    UnknownOperation,
    MissingParam,
    UnknownParam,
    ParamType,
    ParamOutOfRange,
    TypeMismatch,
    UnknownReference,
    DuplicateId,
    MissingSink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Offending step, or `None` for plan-level problems.
    pub step: Option<usize>,
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self { ok: violations.is_empty(), violations }
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    /// Human-readable list, one violation per line.
    pub fn render(&self) -> String {
        self.violations
            .iter()
            .map(|v| match v.step {
                Some(i) => format!("step {i}: {:?}: {}", v.kind, v.message),
                None => format!("plan: {:?}: {}", v.kind, v.message),
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Check a plan against the library without building anything.
///
/// Reports unknown ops, missing/extra/ill-typed/out-of-range parameters,
/// inputs no earlier step can supply, bad `from` references, and a final
/// step that does not produce the ranked list.
pub fn validate_plan(plan: &Plan, lib: &ComponentLibrary) -> ValidationReport {
    let mut out = Vec::new();
    let mut push = |step: Option<usize>, kind, message: String| out.push(Violation { step, kind, message });

    if plan.name.trim().is_empty() {
        push(None, ViolationKind::EmptyName, "plan name is empty".into());
    }
    if plan.steps.is_empty() {
        push(None, ViolationKind::EmptyPlan, "plan has no steps".into());
    }

    // Output type of each step known so far (None for unknown ops).
    let mut produced: Vec<Option<PortType>> = Vec::with_capacity(plan.steps.len());
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();

    for (i, step) in plan.steps.iter().enumerate() {
        if let Some(id) = &step.id {
            if ids.insert(id.as_str(), i).is_some() {
                push(Some(i), ViolationKind::DuplicateId, format!("step id {id:?} used twice"));
            }
        }
        let Some(sig) = lib.get(&step.op) else {
            push(Some(i), ViolationKind::UnknownOperation, format!("unknown operation {:?}", step.op));
            produced.push(None);
            continue;
        };

        for (k, v) in &step.params {
            match sig.param(k) {
                None => push(
                    Some(i),
                    ViolationKind::UnknownParam,
                    format!("{} has no parameter {k:?}", sig.name),
                ),
                Some(spec) => match spec.check(v) {
                    Ok(()) => {}
                    Err(ParamProblem::WrongType(m)) => push(Some(i), ViolationKind::ParamType, m),
                    Err(ParamProblem::OutOfRange(m)) => push(Some(i), ViolationKind::ParamOutOfRange, m),
                },
            }
        }
        for spec in &sig.params {
            if spec.default.is_none() && !step.params.contains_key(&spec.name) {
                push(
                    Some(i),
                    ViolationKind::MissingParam,
                    format!("{} requires parameter {:?}", sig.name, spec.name),
                );
            }
        }

        let mut named: Vec<usize> = Vec::new();
        for r in &step.from {
            match ids.get(r.as_str()) {
                Some(&j) if j < i => named.push(j),
                _ => push(
                    Some(i),
                    ViolationKind::UnknownReference,
                    format!("\"from\" names {r:?}, which is not an earlier step id"),
                ),
            }
        }

        for p in sig.inputs.iter().filter(|p| p.ty != PortType::Note) {
            let available = if named.is_empty() {
                produced.contains(&Some(p.ty))
            } else {
                named.iter().any(|&j| produced[j] == Some(p.ty))
            };
            // Unknown upstream ops are already reported; do not cascade.
            let upstream_unknown = named.is_empty() && produced.iter().any(Option::is_none);
            if !available && !upstream_unknown {
                push(
                    Some(i),
                    ViolationKind::TypeMismatch,
                    format!("{} needs input {:?} ({}) but no earlier step produces it", sig.name, p.name, p.ty.label()),
                );
            }
        }
        produced.push(Some(sig.output));
    }

    if let Some(&Some(last)) = produced.last() {
        if last != PortType::Ranked {
            push(
                Some(produced.len() - 1),
                ViolationKind::MissingSink,
                "the last step must produce the ranked code list (e.g. Finalize)".into(),
            );
        }
    }
    let ranked: Vec<usize> = produced
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == Some(PortType::Ranked))
        .map(|(i, _)| i)
        .collect();
    if ranked.len() > 1 {
        for &i in &ranked[..ranked.len() - 1] {
            push(Some(i), ViolationKind::MissingSink, "only the last step may produce the ranked list".into());
        }
    }

    ValidationReport::from_violations(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn simple_plan() -> Plan {
        Plan::new(
            "simple",
            "",
            vec![
                PlanStep::new("ProposeFromNote"),
                PlanStep::new("Merge"),
                PlanStep::new("Validate"),
                PlanStep::new("VoteStats"),
                PlanStep::new("Rerank").with("weights", json!([1.0, 0.0, 0.0, 0.0])),
                PlanStep::new("Finalize"),
            ],
        )
    }

    #[test]
    fn defaults_only_plan_is_ok() {
        let r = validate_plan(&simple_plan(), &ComponentLibrary::standard());
        assert!(r.ok, "{}", r.render());
    }

    #[test]
    fn unknown_op_named() {
        let mut p = simple_plan();
        p.steps.insert(1, PlanStep::new("FooBar"));
        let r = validate_plan(&p, &ComponentLibrary::standard());
        assert!(!r.ok);
        let v = r.violations.iter().find(|v| v.kind == ViolationKind::UnknownOperation).unwrap();
        assert!(v.message.contains("FooBar"));
        assert_eq!(v.step, Some(1));
    }

    #[test]
    fn judge_tau_out_of_range() {
        let p = Plan::new(
            "j",
            "",
            vec![
                PlanStep::new("ProposeFromNote"),
                PlanStep::new("Merge"),
                PlanStep::new("FetchDesc"),
                PlanStep::new("Judge").with("tau_keep", 1.5),
                PlanStep::new("Rerank"),
                PlanStep::new("Finalize"),
            ],
        );
        let r = validate_plan(&p, &ComponentLibrary::standard());
        assert!(r.has(ViolationKind::ParamOutOfRange), "{}", r.render());
    }

    #[test]
    fn extra_and_ill_typed_params() {
        let mut p = simple_plan();
        p.steps[0].params.insert("samples".into(), json!("four"));
        p.steps[0].params.insert("colour".into(), json!("red"));
        let r = validate_plan(&p, &ComponentLibrary::standard());
        assert!(r.has(ViolationKind::ParamType));
        assert!(r.has(ViolationKind::UnknownParam));
    }

    #[test]
    fn consumer_without_producer_is_type_mismatch() {
        let p = Plan::new("bad", "", vec![PlanStep::new("Validate"), PlanStep::new("Finalize")]);
        let r = validate_plan(&p, &ComponentLibrary::standard());
        assert!(r.has(ViolationKind::TypeMismatch));
    }

    #[test]
    fn plan_must_end_in_ranked_list() {
        let mut p = simple_plan();
        p.steps.pop();
        let r = validate_plan(&p, &ComponentLibrary::standard());
        assert!(r.has(ViolationKind::MissingSink));
    }

    #[test]
    fn step_json_shape() {
        let v = json!({"op": "Judge", "id": "j", "from": ["a"], "tau_keep": 0.5});
        let s = PlanStep::from_value(&v).unwrap();
        assert_eq!(s.op, "Judge");
        assert_eq!(s.id.as_deref(), Some("j"));
        assert_eq!(s.from, vec!["a"]);
        assert_eq!(s.params.len(), 1);
        assert_eq!(s.to_value(), v);
    }

    #[test]
    fn shape_check_catches_missing_plan() {
        assert!(Plan::check_shape(&json!({"name": "x", "thought": "t"})).is_err());
        assert!(Plan::check_shape(&json!({"name": "x", "thought": "t", "plan": [{"op": "Terms"}]})).is_ok());
        assert!(Plan::check_shape(&json!({"name": "", "plan": [{"op": "Terms"}]})).is_err());
    }
}
