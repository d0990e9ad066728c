use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::Value;

use crate::workflow::Plan;

pub type SchemaValidator = Arc<dyn Fn(&Value) -> Result<(), String> + Send + Sync>;

/// Named shape checks for model replies.
#[derive(Clone, Default)]
pub struct SchemaRegistry {
    schemas: BTreeMap<String, SchemaValidator>,
}

impl SchemaRegistry {
    pub fn standard() -> Self {
        let mut r = Self::default();
        r.register("plan", Plan::check_shape);
        r.register("coder_repair", check_coder_repair);
        r.register("judge_scores", check_scores);
        r.register("reflection", check_reflection);
        r.register("terms", check_terms);
        r.register("codes", check_codes);
        r.register("evidence", check_evidence);
        r.register("synonyms", check_synonyms);
        r
    }

    pub fn register(&mut self, id: &str, f: impl Fn(&Value) -> Result<(), String> + Send + Sync + 'static) {
        self.schemas.insert(id.to_string(), Arc::new(f));
    }

    pub fn get(&self, id: &str) -> Option<SchemaValidator> {
        self.schemas.get(id).cloned()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.schemas.keys().map(String::as_str)
    }
}

fn object(v: &Value) -> Result<&serde_json::Map<String, Value>, String> {
    v.as_object().ok_or_else(|| "expected a JSON object".to_string())
}

fn string_list(v: &Value, what: &str) -> Result<(), String> {
    let a = v.as_array().ok_or_else(|| format!("\"{what}\" must be an array of strings"))?;
    if a.iter().all(Value::is_string) {
        Ok(())
    } else {
        Err(format!("\"{what}\" must contain only strings"))
    }
}

fn check_coder_repair(v: &Value) -> Result<(), String> {
    Plan::check_shape(v)?;
    match object(v)?.get("register_ops") {
        None | Some(Value::Null) => Ok(()),
        Some(Value::Array(ops)) => {
            for (i, op) in ops.iter().enumerate() {
                let o = op.as_object().ok_or(format!("register_ops[{i}] must be an object"))?;
                for key in ["name", "instruction"] {
                    if !o.get(key).is_some_and(Value::is_string) {
                        return Err(format!("register_ops[{i}] needs a string \"{key}\""));
                    }
                }
            }
            Ok(())
        }
        Some(_) => Err("\"register_ops\" must be an array".into()),
    }
}

/// `{"scores": {code: number | {"score": number, "keep": bool}}}`, or the
/// same map without the wrapper.
fn check_scores(v: &Value) -> Result<(), String> {
    let obj = object(v)?;
    let map = match obj.get("scores") {
        Some(Value::Object(m)) => m,
        Some(_) => return Err("\"scores\" must be an object mapping codes to scores".into()),
        None => obj,
    };
    for (code, s) in map {
        let ok = match s {
            Value::Number(_) => true,
            Value::Object(o) => {
                o.get("score").is_some_and(Value::is_number)
                    && o.get("keep").is_none_or(|k| k.is_boolean() || k.is_null())
            }
            _ => false,
        };
        if !ok {
            return Err(format!("score for {code} must be a number or {{\"score\": number, \"keep\": bool}}"));
        }
    }
    Ok(())
}

fn check_reflection(v: &Value) -> Result<(), String> {
    let obj = object(v)?;
    if !obj.get("feedback").is_some_and(Value::is_string) {
        return Err("missing string field \"feedback\"".into());
    }
    if let Some(f1) = obj.get("f1") {
        if !(f1.is_number() || f1.is_null()) {
            return Err("\"f1\" must be a number".into());
        }
    }
    if let Some(score) = obj.get("score") {
        let ok = score.is_null()
            || score.as_object().is_some_and(|m| m.values().all(|v| v.is_number() || v.is_null()));
        if !ok {
            return Err("\"score\" must be an object of numbers".into());
        }
    }
    if let Some(s) = obj.get("suggestions") {
        string_list(s, "suggestions")?;
    }
    Ok(())
}

fn check_terms(v: &Value) -> Result<(), String> {
    let terms = object(v)?
        .get("terms")
        .and_then(Value::as_array)
        .ok_or("missing array field \"terms\"")?;
    for (i, t) in terms.iter().enumerate() {
        let ok = match t {
            Value::String(_) => true,
            Value::Object(o) => {
                o.get("text").is_some_and(Value::is_string)
                    && o.get("cue").is_none_or(|c| c.is_string() || c.is_null())
            }
            _ => false,
        };
        if !ok {
            return Err(format!("terms[{i}] must be a string or {{\"text\": string, \"cue\": string}}"));
        }
    }
    Ok(())
}

fn check_codes(v: &Value) -> Result<(), String> {
    let codes = object(v)?.get("codes").ok_or("missing array field \"codes\"")?;
    string_list(codes, "codes")
}

fn check_evidence(v: &Value) -> Result<(), String> {
    let ev = object(v)?
        .get("evidence")
        .and_then(Value::as_object)
        .ok_or("missing object field \"evidence\"")?;
    for (code, snips) in ev {
        string_list(snips, code)?;
    }
    Ok(())
}

fn check_synonyms(v: &Value) -> Result<(), String> {
    let syn = object(v)?
        .get("synonyms")
        .and_then(Value::as_object)
        .ok_or("missing object field \"synonyms\"")?;
    for (term, alts) in syn {
        string_list(alts, term)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn score_shapes() {
        let r = SchemaRegistry::standard();
        let f = r.get("judge_scores").unwrap();
        assert!(f(&json!({"scores": {"I21.4": 0.9}})).is_ok());
        assert!(f(&json!({"I21.4": {"score": 0.9, "keep": true}})).is_ok());
        assert!(f(&json!({"I21.4": "high"})).is_err());
    }

    #[test]
    fn plan_and_repair() {
        let r = SchemaRegistry::standard();
        let p = json!({"name": "n", "thought": "", "plan": [{"op": "Terms"}]});
        assert!(r.get("plan").unwrap()(&p).is_ok());
        assert!(r.get("plan").unwrap()(&json!({"name": "n"})).is_err());
        let mut q = p.clone();
        q["register_ops"] = json!([{"name": "X"}]);
        assert!(r.get("coder_repair").unwrap()(&q).is_err());
    }

    #[test]
    fn others() {
        let r = SchemaRegistry::standard();
        assert!(r.get("terms").unwrap()(&json!({"terms": [{"text": "chest pain", "cue": "affirmed"}]})).is_ok());
        assert!(r.get("codes").unwrap()(&json!({"codes": ["I21.4", 3]})).is_err());
        assert!(r.get("reflection").unwrap()(&json!({"feedback": "x", "f1": 0.4})).is_ok());
        assert!(r.get("evidence").unwrap()(&json!({"evidence": {"I21.4": ["a"]}})).is_ok());
        assert!(r.get("synonyms").unwrap()(&json!({"synonyms": {"mi": "heart attack"}})).is_err());
    }
}
