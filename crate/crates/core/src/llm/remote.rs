use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{estimate_tokens, LlmError, LlmRequest, LlmResponse, Provider};

pub const API_KEY_ENV: &str = "DCR_API_KEY";
pub const API_BASE_ENV: &str = "DCR_API_BASE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub model: String,
    /// Base URL; `/chat/completions` is appended unless already present.
    pub base_url: String,
    #[serde(skip_serializing)]
    pub api_key: String,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o".into(),
            base_url: "https://api.openai.com/v1".into(),
            api_key: String::new(),
            max_in_flight: 4,
            max_retries: 3,
            backoff_ms: 500,
            timeout_secs: 120,
        }
    }
}

impl RemoteConfig {
    /// Reads the key from `DCR_API_KEY` and, if set, the endpoint from
    /// `DCR_API_BASE`.
    pub fn from_env(model: impl Into<String>) -> Result<Self, LlmError> {
        let api_key = std::env::var(API_KEY_ENV)
            .map_err(|_| LlmError::ProviderUnavailable(format!("{API_KEY_ENV} is not set")))?;
        let mut cfg = Self { model: model.into(), api_key, ..Self::default() };
        if let Ok(base) = std::env::var(API_BASE_ENV) {
            cfg.base_url = base;
        }
        Ok(cfg)
    }

    fn endpoint(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut n = self.free.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Chat-completions backend over HTTP.
pub struct RemoteProvider {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    slots: Slots,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider").field("model", &self.cfg.model).field("endpoint", &self.cfg.endpoint()).finish()
    }
}

enum Failure {
    Retry(String),
    Fatal(String),
}

impl RemoteProvider {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        let slots = Slots { free: Mutex::new(cfg.max_in_flight.max(1)), cv: Condvar::new() };
        Self { cfg, agent, slots }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn body(&self, req: &LlmRequest, n: u32) -> Value {
        json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "n": n,
            "max_tokens": req.max_tokens,
        })
    }

    fn post_once(&self, body: &Value) -> Result<Value, Failure> {
        let _slot = self.slots.acquire();
        let mut resp = self
            .agent
            .post(&self.cfg.endpoint())
            .header("Authorization", &format!("Bearer {}", self.cfg.api_key))
            .send_json(body)
            .map_err(|e| Failure::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => resp.body_mut().read_json::<Value>().map_err(|e| Failure::Retry(format!("bad response body: {e}"))),
            429 | 500..=599 => Err(Failure::Retry(format!("HTTP {status}"))),
            _ => {
                let detail = resp.body_mut().read_to_string().unwrap_or_default();
                Err(Failure::Fatal(format!("HTTP {status}: {}", detail.chars().take(300).collect::<String>())))
            }
        }
    }

    fn post(&self, body: &Value) -> Result<Value, LlmError> {
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.post_once(body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(m)) => return Err(LlmError::ProviderUnavailable(m)),
                Err(Failure::Retry(m)) => {
                    tracing::warn!(attempt, error = %m, "chat request failed");
                    last = m;
                }
            }
        }
        Err(LlmError::ProviderUnavailable(format!("gave up after {} attempt(s): {last}", self.cfg.max_retries + 1)))
    }
}

impl Provider for RemoteProvider {
    fn generate(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let start = Instant::now();
        let mut texts = Vec::with_capacity(req.samples as usize);
        let (mut prompt_tokens, mut completion_tokens) = (0, 0);
        // Some endpoints ignore `n`; keep asking for the remainder.
        while texts.len() < req.samples as usize {
            let want = req.samples - texts.len() as u32;
            let v = self.post(&self.body(req, want))?;
            let choices = v["choices"].as_array().cloned().unwrap_or_default();
            let got: Vec<String> = choices
                .iter()
                .filter_map(|c| c["message"]["content"].as_str().map(str::to_string))
                .take(want as usize)
                .collect();
            if got.is_empty() {
                return Err(LlmError::ProviderUnavailable("response carried no choices".into()));
            }
            match (v["usage"]["prompt_tokens"].as_u64(), v["usage"]["completion_tokens"].as_u64()) {
                (Some(p), Some(c)) => {
                    prompt_tokens += p;
                    completion_tokens += c;
                }
                _ => {
                    prompt_tokens += estimate_tokens(&req.system_prompt) + estimate_tokens(&req.user_prompt);
                    completion_tokens += got.iter().map(|t| estimate_tokens(t)).sum::<u64>();
                }
            }
            texts.extend(got);
        }
        Ok(LlmResponse { texts, prompt_tokens, completion_tokens, latency: start.elapsed() })
    }

    fn model(&self) -> &str {
        &self.cfg.model
    }
}
