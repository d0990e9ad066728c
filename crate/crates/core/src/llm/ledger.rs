use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RoleTag;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub calls: u64,
    /// Provider-reported latency, summed.
    pub wall_ms: u64,
}

impl RoleUsage {
    pub fn tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    fn add(&mut self, o: &RoleUsage) {
        self.prompt_tokens += o.prompt_tokens;
        self.completion_tokens += o.completion_tokens;
        self.calls += o.calls;
        self.wall_ms += o.wall_ms;
    }

    fn saturating_sub(&self, o: &RoleUsage) -> RoleUsage {
        RoleUsage {
            prompt_tokens: self.prompt_tokens.saturating_sub(o.prompt_tokens),
            completion_tokens: self.completion_tokens.saturating_sub(o.completion_tokens),
            calls: self.calls.saturating_sub(o.calls),
            wall_ms: self.wall_ms.saturating_sub(o.wall_ms),
        }
    }
}

/// Cumulative token usage per role. Every field only grows.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLedger {
    pub roles: BTreeMap<RoleTag, RoleUsage>,
}

impl UsageLedger {
    pub fn record(&mut self, role: RoleTag, prompt_tokens: u64, completion_tokens: u64, wall_ms: u64) {
        let e = self.roles.entry(role).or_default();
        e.prompt_tokens += prompt_tokens;
        e.completion_tokens += completion_tokens;
        e.calls += 1;
        e.wall_ms += wall_ms;
    }

    pub fn role(&self, role: RoleTag) -> RoleUsage {
        self.roles.get(&role).copied().unwrap_or_default()
    }

    pub fn total_tokens(&self) -> u64 {
        self.roles.values().map(RoleUsage::tokens).sum()
    }

    pub fn total_calls(&self) -> u64 {
        self.roles.values().map(|u| u.calls).sum()
    }

    pub fn wall_secs(&self) -> f64 {
        self.roles.values().map(|u| u.wall_ms).sum::<u64>() as f64 / 1000.0
    }

    /// Designer, coder and reflector tokens.
    pub fn search_tokens(&self) -> u64 {
        self.roles.iter().filter(|(r, _)| r.is_search()).map(|(_, u)| u.tokens()).sum()
    }

    /// Tokens spent executing workflows.
    pub fn exec_tokens(&self) -> u64 {
        self.role(RoleTag::PipelineOp).tokens()
    }

    pub fn merge(&mut self, other: &UsageLedger) {
        for (r, u) in &other.roles {
            self.roles.entry(*r).or_default().add(u);
        }
    }

    /// Usage accrued since `earlier`.
    pub fn since(&self, earlier: &UsageLedger) -> UsageLedger {
        let roles = self
            .roles
            .iter()
            .map(|(r, u)| (*r, u.saturating_sub(&earlier.role(*r))))
            .filter(|(_, u)| *u != RoleUsage::default())
            .collect();
        UsageLedger { roles }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Price {
    pub in_per_1k: f64,
    pub out_per_1k: f64,
}

/// USD prices per 1,000 tokens, keyed by model name. A `"default"` entry
/// applies to models not listed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable(pub BTreeMap<String, Price>);

impl PriceTable {
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let src = std::fs::read_to_string(path)?;
        serde_json::from_str(&src).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn price(&self, model: &str) -> Option<Price> {
        self.0.get(model).or_else(|| self.0.get("default")).copied()
    }

    pub fn cost(&self, model: &str, usage: &RoleUsage) -> f64 {
        self.price(model).map_or(0.0, |p| {
            usage.prompt_tokens as f64 / 1000.0 * p.in_per_1k
                + usage.completion_tokens as f64 / 1000.0 * p.out_per_1k
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub ledger: UsageLedger,
    pub search_tokens: u64,
    pub exec_tokens: u64,
    pub total_tokens: u64,
    pub search_cost_usd: f64,
    pub exec_cost_usd: f64,
    pub cost_usd: f64,
}

impl UsageReport {
    pub fn new(ledger: &UsageLedger, prices: &PriceTable, model: &str) -> Self {
        let mut search_cost = 0.0;
        let mut exec_cost = 0.0;
        for (role, u) in &ledger.roles {
            let c = prices.cost(model, u);
            if role.is_search() {
                search_cost += c;
            } else {
                exec_cost += c;
            }
        }
        Self {
            ledger: ledger.clone(),
            search_tokens: ledger.search_tokens(),
            exec_tokens: ledger.exec_tokens(),
            total_tokens: ledger.total_tokens(),
            search_cost_usd: search_cost,
            exec_cost_usd: exec_cost,
            cost_usd: search_cost + exec_cost,
        }
    }
}
