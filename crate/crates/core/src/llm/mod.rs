//! Model access: one [`Provider`] trait, a scripted backend for tests and an
//! HTTP chat-completions backend, wrapped by a [`Gateway`] that enforces the
//! token budget, keeps the [`UsageLedger`] and repairs malformed JSON.

mod json;
mod ledger;
mod remote;
mod schemas;
mod scripted;

use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use json::{extract_json_object, JsonAttempt};
pub use ledger::{Price, PriceTable, RoleUsage, UsageLedger, UsageReport};
pub use remote::{RemoteConfig, RemoteProvider};
pub use schemas::{SchemaRegistry, SchemaValidator};
pub use scripted::{prompt_hash, ScriptEntry, ScriptedProvider};

pub const DEFAULT_MAX_REPAIRS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Designer,
    Coder,
    Reflector,
    PipelineOp,
}

impl RoleTag {
    pub const ALL: [RoleTag; 4] = [RoleTag::Designer, RoleTag::Coder, RoleTag::Reflector, RoleTag::PipelineOp];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::Designer => "designer",
            RoleTag::Coder => "coder",
            RoleTag::Reflector => "reflector",
            RoleTag::PipelineOp => "pipeline_op",
        }
    }

    /// Search roles shape workflows; everything else executes them.
    pub fn is_search(self) -> bool {
        !matches!(self, RoleTag::PipelineOp)
    }

    pub fn default_temperature(self) -> f64 {
        if self.is_search() {
            0.0
        } else {
            0.7
        }
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub role: RoleTag,
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub samples: u32,
    pub max_tokens: u32,
    /// Prompt template identifier, recorded in traces.
    #[serde(default)]
    pub template_id: String,
}

impl LlmRequest {
    pub fn new(role: RoleTag, system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Self {
            role,
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: role.default_temperature(),
            samples: 1,
            max_tokens: 1024,
            template_id: String::new(),
        }
    }

    pub fn samples(mut self, n: u32) -> Self {
        self.samples = n;
        self
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn template(mut self, id: impl Into<String>) -> Self {
        self.template_id = id.into();
        self
    }

    fn check(&self) -> Result<(), LlmError> {
        if self.samples == 0 {
            return Err(LlmError::InvalidRequest("samples must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest(format!("temperature {} is negative", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub texts: Vec<String>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(with = "duration_ms")]
    pub latency: Duration,
}

impl LlmResponse {
    pub fn tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("token budget exceeded: {used} used of {cap}")]
    BudgetExceeded { used: u64, cap: u64 },
    #[error("scripted provider has no entry left for role {role}")]
    ScriptExhausted { role: RoleTag },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unknown JSON schema '{0}'")]
    UnknownSchema(String),
    #[error("no valid '{schema}' object after {} attempt(s): {}", attempts.len(), attempts.last().map(|a| a.error.as_str()).unwrap_or(""))]
    JsonIrrecoverable { schema: String, attempts: Vec<JsonAttempt> },
    #[error("script error: {0}")]
    Script(String),
}

/// A model backend. Implementations must be safe to call concurrently.
pub trait Provider: Send + Sync {
    fn generate(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError>;

    /// Model name used for pricing.
    fn model(&self) -> &str;

    /// Whether one call can return several samples.
    fn supports_n_sampling(&self) -> bool {
        true
    }

    /// Opaque state needed to continue deterministically after a restart.
    fn snapshot(&self) -> Value {
        Value::Null
    }

    fn restore(&self, _state: &Value) -> Result<(), LlmError> {
        Ok(())
    }
}

/// Rough token estimate used when a backend does not report counts.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

struct Shared {
    provider: Arc<dyn Provider>,
    ledger: Mutex<UsageLedger>,
    token_cap: Mutex<Option<u64>>,
    prices: PriceTable,
    schemas: SchemaRegistry,
}

/// Cheap-to-clone handle over a provider and the global ledger.
///
/// Clones made with [`Gateway::tracked`] also record into an extra ledger,
/// which is how per-workflow cost slices are measured.
#[derive(Clone)]
pub struct Gateway {
    shared: Arc<Shared>,
    trackers: Vec<Arc<Mutex<UsageLedger>>>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").field("model", &self.shared.provider.model()).finish()
    }
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Self::with_options(provider, None, PriceTable::default())
    }

    pub fn with_options(provider: Arc<dyn Provider>, token_cap: Option<u64>, prices: PriceTable) -> Self {
        Self {
            shared: Arc::new(Shared {
                provider,
                ledger: Mutex::new(UsageLedger::default()),
                token_cap: Mutex::new(token_cap),
                prices,
                schemas: SchemaRegistry::standard(),
            }),
            trackers: Vec::new(),
        }
    }

    pub fn provider(&self) -> &Arc<dyn Provider> {
        &self.shared.provider
    }

    pub fn model(&self) -> &str {
        self.shared.provider.model()
    }

    pub fn set_token_cap(&self, cap: Option<u64>) {
        *self.shared.token_cap.lock().unwrap() = cap;
    }

    pub fn token_cap(&self) -> Option<u64> {
        *self.shared.token_cap.lock().unwrap()
    }

    /// A handle that additionally records usage into `tracker`.
    pub fn tracked(&self, tracker: Arc<Mutex<UsageLedger>>) -> Gateway {
        let mut g = self.clone();
        g.trackers.push(tracker);
        g
    }

    pub fn ledger(&self) -> UsageLedger {
        self.shared.ledger.lock().unwrap().clone()
    }

    /// Replace the ledger, e.g. when resuming from a checkpoint.
    pub fn restore_ledger(&self, ledger: UsageLedger) {
        *self.shared.ledger.lock().unwrap() = ledger;
    }

    pub fn usage_report(&self) -> UsageReport {
        UsageReport::new(&self.ledger(), &self.shared.prices, self.model())
    }

    pub fn schemas(&self) -> &SchemaRegistry {
        &self.shared.schemas
    }

    pub fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        req.check()?;
        let cap = self.token_cap();
        if let Some(cap) = cap {
            let used = self.shared.ledger.lock().unwrap().total_tokens();
            if used >= cap {
                return Err(LlmError::BudgetExceeded { used, cap });
            }
        }
        let resp = self.shared.provider.generate(req)?;
        if resp.texts.len() != req.samples as usize {
            return Err(LlmError::ProviderUnavailable(format!(
                "asked for {} sample(s), provider returned {}",
                req.samples,
                resp.texts.len()
            )));
        }
        let wall_ms = resp.latency.as_millis() as u64;
        {
            let mut ledger = self.shared.ledger.lock().unwrap();
            let used = ledger.total_tokens();
            if let Some(cap) = cap {
                if used + resp.tokens() > cap {
                    return Err(LlmError::BudgetExceeded { used: used + resp.tokens(), cap });
                }
            }
            ledger.record(req.role, resp.prompt_tokens, resp.completion_tokens, wall_ms);
        }
        for t in &self.trackers {
            t.lock().unwrap().record(req.role, resp.prompt_tokens, resp.completion_tokens, wall_ms);
        }
        tracing::debug!(role = %req.role, template = %req.template_id, tokens = resp.tokens(), "llm call");
        Ok(resp)
    }

    /// One schema-valid JSON object, re-prompting with the validation error
    /// up to `max_repairs` times.
    pub fn complete_json(&self, req: &LlmRequest, schema_id: &str, max_repairs: u32) -> Result<Value, LlmError> {
        let validator = self.schema(schema_id)?;
        let first = LlmRequest { samples: 1, ..req.clone() };
        let resp = self.complete(&first)?;
        self.settle(req, schema_id, &validator, resp.texts.into_iter().next().unwrap_or_default(), max_repairs)
    }

    /// `req.samples` independent JSON objects. Uses a single multi-sample call
    /// when the provider supports it; each sample is repaired on its own and
    /// only JSON failures are reported per sample.
    pub fn complete_json_many(
        &self,
        req: &LlmRequest,
        schema_id: &str,
        max_repairs: u32,
    ) -> Result<Vec<Result<Value, LlmError>>, LlmError> {
        let validator = self.schema(schema_id)?;
        let texts = if self.shared.provider.supports_n_sampling() || req.samples == 1 {
            self.complete(req)?.texts
        } else {
            let one = LlmRequest { samples: 1, ..req.clone() };
            let mut out = Vec::with_capacity(req.samples as usize);
            for _ in 0..req.samples {
                out.extend(self.complete(&one)?.texts);
            }
            out
        };
        let mut out = Vec::with_capacity(texts.len());
        for text in texts {
            match self.settle(req, schema_id, &validator, text, max_repairs) {
                r @ (Ok(_) | Err(LlmError::JsonIrrecoverable { .. })) => out.push(r),
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn schema(&self, schema_id: &str) -> Result<SchemaValidator, LlmError> {
        self.shared.schemas.get(schema_id).ok_or_else(|| LlmError::UnknownSchema(schema_id.to_string()))
    }

    fn settle(
        &self,
        req: &LlmRequest,
        schema_id: &str,
        validator: &SchemaValidator,
        mut text: String,
        max_repairs: u32,
    ) -> Result<Value, LlmError> {
        let mut attempts = Vec::new();
        loop {
            let outcome = extract_json_object(&text)
                .ok_or_else(|| "no JSON object found in the reply".to_string())
                .and_then(|v| validator(&v).map(|_| v));
            match outcome {
                Ok(v) => return Ok(v),
                Err(error) => {
                    attempts.push(JsonAttempt { text: text.clone(), error: error.clone() });
                    if attempts.len() > max_repairs as usize {
                        return Err(LlmError::JsonIrrecoverable { schema: schema_id.to_string(), attempts });
                    }
                    let retry = LlmRequest {
                        samples: 1,
                        user_prompt: repair_prompt(&req.user_prompt, &error),
                        ..req.clone()
                    };
                    text = self.complete(&retry)?.texts.into_iter().next().unwrap_or_default();
                }
            }
        }
    }
}

/// The retry prompt: the original request with the rejection reason appended.
pub fn repair_prompt(original: &str, error: &str) -> String {
    format!(
        "{original}\n\nYour previous reply was rejected: {error}\nReturn STRICTLY ONE JSON OBJECT that fixes this, with no other text."
    )
}
