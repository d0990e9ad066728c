use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{estimate_tokens, LlmError, LlmRequest, LlmResponse, Provider, RoleTag};

/// Stable 64-bit FNV-1a hash of a user prompt, as 16 hex digits.
pub fn prompt_hash(user_prompt: &str) -> String {
    let mut h = fnv::FnvHasher::default();
    h.write(user_prompt.as_bytes());
    format!("{:016x}", h.finish())
}

/// One line of a script file.
///
/// Entries are tried in this order: exact `hash` of the user prompt, then
/// `match` rules (every substring must occur in the user prompt), then the
/// per-role queue of plain entries, then the role's `fallback`. Hash and
/// match entries are reusable unless `once` is set; queue entries are
/// consumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub role: RoleTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash: Option<String>,
    #[serde(default, rename = "match", skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub texts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
    #[serde(default)]
    pub fallback: bool,
    #[serde(default)]
    pub once: bool,
    /// Simulates an outage: the call fails with `ProviderUnavailable`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ScriptEntry {
    fn outputs(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.texts.iter().map(String::as_str).collect();
        if let Some(t) = &self.text {
            v.push(t);
        }
        v
    }

    fn is_queue(&self) -> bool {
        self.hash.is_none() && self.contains.is_empty() && !self.fallback
    }
}

#[derive(Debug, Default)]
struct State {
    queue_pos: BTreeMap<RoleTag, usize>,
    used: Vec<bool>,
}

/// Deterministic provider that replays responses from JSONL scripts.
#[derive(Debug)]
pub struct ScriptedProvider {
    entries: Vec<ScriptEntry>,
    queues: BTreeMap<RoleTag, Vec<usize>>,
    model: String,
    state: Mutex<State>,
}

impl ScriptedProvider {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, LlmError> {
        for (i, e) in entries.iter().enumerate() {
            if e.outputs().is_empty() && e.error.is_none() {
                return Err(LlmError::Script(format!("entry {i} has neither text nor texts")));
            }
        }
        let mut queues: BTreeMap<RoleTag, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate().filter(|(_, e)| e.is_queue()) {
            queues.entry(e.role).or_default().push(i);
        }
        let used = vec![false; entries.len()];
        Ok(Self {
            entries,
            queues,
            model: "scripted".into(),
            state: Mutex::new(State { queue_pos: BTreeMap::new(), used }),
        })
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn from_jsonl(src: &str) -> Result<Self, LlmError> {
        Self::new(parse_lines(src, "<inline>")?)
    }

    /// A `.jsonl` file, or a directory whose `*.jsonl` files are read in
    /// name order.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let io = |e: std::io::Error| LlmError::Script(format!("{}: {e}", path.display()));
        let mut files = Vec::new();
        if path.is_dir() {
            for entry in std::fs::read_dir(path).map_err(io)? {
                let p = entry.map_err(io)?.path();
                if p.extension().is_some_and(|x| x == "jsonl") {
                    files.push(p);
                }
            }
            files.sort();
        } else {
            files.push(path.to_path_buf());
        }
        let mut entries = Vec::new();
        for f in files {
            let src = std::fs::read_to_string(&f).map_err(io)?;
            entries.extend(parse_lines(&src, &f.display().to_string())?);
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    fn pick(&self, req: &LlmRequest) -> Result<usize, LlmError> {
        let mut st = self.state.lock().unwrap();
        let available = |i: usize, st: &State| !(self.entries[i].once && st.used[i]);
        let hash = prompt_hash(&req.user_prompt);
        let keyed = self.entries.iter().enumerate().find(|&(i, e)| {
            e.role == req.role && e.hash.as_deref() == Some(hash.as_str()) && available(i, &st)
        });
        let ruled = || {
            self.entries.iter().enumerate().find(|&(i, e)| {
                e.role == req.role
                    && e.hash.is_none()
                    && !e.contains.is_empty()
                    && e.contains.iter().all(|s| req.user_prompt.contains(s.as_str()))
                    && available(i, &st)
            })
        };
        if let Some((i, _)) = keyed.or_else(ruled) {
            st.used[i] = true;
            return Ok(i);
        }
        if let Some(q) = self.queues.get(&req.role) {
            let pos = st.queue_pos.entry(req.role).or_default();
            if let Some(&i) = q.get(*pos) {
                *pos += 1;
                st.used[i] = true;
                return Ok(i);
            }
        }
        self.entries
            .iter()
            .position(|e| e.role == req.role && e.fallback && e.hash.is_none() && e.contains.is_empty())
            .ok_or(LlmError::ScriptExhausted { role: req.role })
    }
}

fn parse_lines(src: &str, origin: &str) -> Result<Vec<ScriptEntry>, LlmError> {
    src.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| LlmError::Script(format!("{origin}:{}: {e}", n + 1)))
        })
        .collect()
}

impl Provider for ScriptedProvider {
    fn generate(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let e = &self.entries[self.pick(req)?];
        if let Some(msg) = &e.error {
            return Err(LlmError::ProviderUnavailable(msg.clone()));
        }
        let outs = e.outputs();
        let texts: Vec<String> = (0..req.samples as usize).map(|i| outs[i % outs.len()].to_string()).collect();
        let prompt_tokens = e
            .prompt_tokens
            .unwrap_or_else(|| estimate_tokens(&req.system_prompt) + estimate_tokens(&req.user_prompt));
        let completion_tokens = e
            .completion_tokens
            .unwrap_or_else(|| texts.iter().map(|t| estimate_tokens(t)).sum());
        Ok(LlmResponse { texts, prompt_tokens, completion_tokens, latency: Duration::ZERO })
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn snapshot(&self) -> Value {
        let st = self.state.lock().unwrap();
        let used: Vec<usize> = st.used.iter().enumerate().filter(|(_, u)| **u).map(|(i, _)| i).collect();
        json!({ "queue_pos": st.queue_pos, "used": used })
    }

    fn restore(&self, state: &Value) -> Result<(), LlmError> {
        if state.is_null() {
            return Ok(());
        }
        let bad = |what: &str| LlmError::Script(format!("cannot restore scripted provider state: {what}"));
        let queue_pos: BTreeMap<RoleTag, usize> =
            serde_json::from_value(state.get("queue_pos").cloned().unwrap_or(json!({}))).map_err(|_| bad("queue_pos"))?;
        let used_idx: Vec<usize> =
            serde_json::from_value(state.get("used").cloned().unwrap_or(json!([]))).map_err(|_| bad("used"))?;
        let mut used = vec![false; self.entries.len()];
        for i in used_idx {
            *used.get_mut(i).ok_or_else(|| bad("entry index out of range"))? = true;
        }
        *self.state.lock().unwrap() = State { queue_pos, used };
        Ok(())
    }
}
