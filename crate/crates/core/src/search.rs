//! The design-execute-reflect loop over the archive, with budgets, early
//! stopping and checkpoint/resume.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::{
    coder_build, designer_propose, failure_reflection, reflector_evaluate, template_version, AgentError,
    DesignerContext, DesignerToggles,
};
use crate::archive::{Archive, ArchiveEntry, ArchiveError, EliteKey, EntryStatus, Origin};
use crate::eval::{evaluate_workflow, guideline_text, ComplianceRule, CostWeights, Dataset, EvalConfig, PredictionPolicy, Score};
use crate::llm::{Gateway, LlmError, UsageLedger};
use crate::taxonomy::Taxonomy;
use crate::workflow::{ComponentLibrary, Plan, WorkflowGraph};

pub const STATE_VERSION: u32 = 1;
pub const ARCHIVE_FILE: &str = "archive.jsonl";
pub const STATE_FILE: &str = "state.json";
pub const PROGRESS_FILE: &str = "progress.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("provider failed: {0}")]
    Provider(LlmError),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint I/O failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Iterations T.
    pub iterations: u32,
    /// Plans per generation M.
    pub generation_size: u32,
    /// Elite exemplars k (0 disables elite selection).
    pub elites: usize,
    /// Recent exemplars n (0 disables recents).
    pub recents: usize,
    /// Coder repair rounds.
    pub max_retries: u32,
    /// JSON repair attempts per model call.
    pub max_repairs: u32,
    pub lambda_viol: f64,
    pub lambda_cost: f64,
    pub cost_weights: CostWeights,
    pub token_cap: Option<u64>,
    pub wall_time_secs: Option<f64>,
    /// Iterations without improvement before stopping (0 disables).
    pub patience: u32,
    pub rng_seed: u64,
    /// Score each workflow on a fixed random subset of this many notes.
    pub sample_notes: Option<usize>,
    pub elite_key: EliteKey,
    pub designer_temperature: f64,
    pub toggles: DesignerToggles,
    /// Guideline excerpt shown to the designer; defaults to the rule list.
    pub guidelines_file: Option<PathBuf>,
    pub policy: PredictionPolicy,
    pub rules: Vec<ComplianceRule>,
    /// Build, run and reflect the plans of a generation on parallel threads.
    pub parallel: bool,
    /// Stop (resumably) after this iteration.
    pub halt_after: Option<u32>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let eval = EvalConfig::default();
        Self {
            iterations: 100,
            generation_size: 1,
            elites: 5,
            recents: 3,
            max_retries: 3,
            max_repairs: eval.max_repairs,
            lambda_viol: eval.lambda_viol,
            lambda_cost: eval.lambda_cost,
            cost_weights: eval.cost_weights,
            token_cap: None,
            wall_time_secs: None,
            patience: 0,
            rng_seed: 0,
            sample_notes: None,
            elite_key: EliteKey::Objective,
            designer_temperature: 0.7,
            toggles: DesignerToggles::default(),
            guidelines_file: None,
            policy: eval.policy,
            rules: eval.rules,
            parallel: false,
            halt_after: None,
        }
    }
}

impl SearchConfig {
    pub fn from_toml(src: &str) -> Result<Self, SearchError> {
        let cfg: SearchConfig = toml::from_str(src).map_err(|e| SearchError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SearchError> {
        let src = std::fs::read_to_string(path.as_ref())
            .map_err(|e| SearchError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&src)
    }

    pub fn check(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.into()));
        if self.generation_size < 1 {
            return bad("generation_size must be at least 1");
        }
        if !(self.lambda_viol >= 0.0 && self.lambda_cost >= 0.0) {
            return bad("lambda_viol and lambda_cost must be non-negative");
        }
        if self.sample_notes == Some(0) {
            return bad("sample_notes must be positive");
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            policy: self.policy,
            rules: self.rules.clone(),
            cost_weights: self.cost_weights,
            lambda_viol: self.lambda_viol,
            lambda_cost: self.lambda_cost,
            max_repairs: self.max_repairs,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// What the loop runs against.
#[derive(Clone, Copy)]
pub struct SearchEnv<'a> {
    pub gateway: &'a Gateway,
    pub taxonomy: &'a Taxonomy,
    pub lib: &'a ComponentLibrary,
    pub dataset: &'a Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    Patience,
    BudgetExceeded,
    WallTime,
    Halted,
}

impl StopReason {
    /// Whether a resume should continue the loop.
    pub fn resumable(self) -> bool {
        self == StopReason::Halted
    }
}

/// Loop state written next to the archive after every iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub version: u32,
    /// Last fully completed iteration (0 = seeds evaluated).
    pub iteration: u32,
    pub stale_iterations: u32,
    pub best_objective: Option<f64>,
    pub wall_secs: f64,
    pub ledger: UsageLedger,
    pub provider: Value,
    pub rng_seed: u64,
    pub stop: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub t: u32,
    pub best_g: f64,
    pub best_f1: f64,
    pub tokens_used: u64,
    pub entries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: ArchiveEntry,
    pub stop: StopReason,
    pub iterations_completed: u32,
    pub progress: Vec<ProgressRecord>,
}

pub struct Search<'a> {
    cfg: SearchConfig,
    env: SearchEnv<'a>,
    archive: Archive,
    state: Option<LoopState>,
    dir: Option<PathBuf>,
    dataset: Dataset,
    guidelines: String,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(tmp, path)
}

impl<'a> Search<'a> {
    fn build(cfg: SearchConfig, env: SearchEnv<'a>, archive: Archive, dir: Option<PathBuf>) -> Result<Self, SearchError> {
        cfg.check()?;
        if env.dataset.is_empty() {
            return Err(SearchError::EmptyDataset);
        }
        let dataset = match cfg.sample_notes {
            Some(n) => env.dataset.sample(n, cfg.rng_seed),
            None => env.dataset.clone(),
        };
        let guidelines = match &cfg.guidelines_file {
            Some(p) => std::fs::read_to_string(p).map_err(|e| SearchError::Config(format!("{}: {e}", p.display())))?,
            None => guideline_text(&cfg.rules),
        };
        env.gateway.set_token_cap(cfg.token_cap);
        let mut archive = archive;
        archive.elite_key = cfg.elite_key;
        Ok(Self { cfg, env, archive, state: None, dir, dataset, guidelines })
    }

    /// A loop over an in-memory archive, without checkpoints.
    pub fn in_memory(cfg: SearchConfig, env: SearchEnv<'a>, archive: Archive) -> Result<Self, SearchError> {
        Self::build(cfg, env, archive, None)
    }

    /// A fresh checkpointed run in `dir`, seeded with `seeds`.
    pub fn create(
        cfg: SearchConfig,
        env: SearchEnv<'a>,
        dir: &Path,
        seeds: Vec<(Plan, Option<Score>)>,
    ) -> Result<Self, SearchError> {
        std::fs::create_dir_all(dir)?;
        let _ = std::fs::remove_file(dir.join(STATE_FILE));
        let _ = std::fs::remove_file(dir.join(PROGRESS_FILE));
        let mut archive = Archive::create(dir.join(ARCHIVE_FILE))?;
        archive.init_with_seeds(seeds, env.lib)?;
        Self::build(cfg, env, archive, Some(dir.to_path_buf()))
    }

    /// Continue the checkpointed run in `dir`.
    pub fn resume(cfg: SearchConfig, env: SearchEnv<'a>, dir: &Path) -> Result<Self, SearchError> {
        let corrupt = |m: String| SearchError::CorruptCheckpoint(m);
        let raw = std::fs::read_to_string(dir.join(STATE_FILE)).map_err(|e| corrupt(format!("{STATE_FILE}: {e}")))?;
        let state: LoopState = serde_json::from_str(&raw).map_err(|e| corrupt(format!("{STATE_FILE}: {e}")))?;
        if state.version != STATE_VERSION {
            return Err(corrupt(format!("state version {} (expected {STATE_VERSION})", state.version)));
        }
        let archive = Archive::load(dir.join(ARCHIVE_FILE)).map_err(|e| corrupt(format!("{ARCHIVE_FILE}: {e}")))?;
        env.gateway.provider().restore(&state.provider).map_err(|e| corrupt(format!("provider state: {e}")))?;
        env.gateway.restore_ledger(state.ledger.clone());
        let mut s = Self::build(cfg, env, archive, Some(dir.to_path_buf()))?;
        s.state = Some(state);
        Ok(s)
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn into_archive(self) -> Archive {
        self.archive
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    fn save(&self, state: &LoopState, progress: Option<&ProgressRecord>) -> Result<(), SearchError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        write_atomic(&dir.join(STATE_FILE), serde_json::to_string_pretty(state).expect("state serializes").as_bytes())?;
        if let Some(p) = progress {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join(PROGRESS_FILE))?;
            writeln!(f, "{}", serde_json::to_string(p).expect("progress serializes"))?;
        }
        Ok(())
    }

    fn progress(&self, t: u32, note: Option<String>) -> ProgressRecord {
        let (best_g, best_f1) = self.archive.best().map_or((0.0, 0.0), |b| (b.objective(), b.f1()));
        ProgressRecord { t, best_g, best_f1, tokens_used: self.env.gateway.ledger().total_tokens(), entries: self.archive.len(), note }
    }

    fn outcome(&self, stop: StopReason, iteration: u32, progress: Vec<ProgressRecord>) -> Result<SearchOutcome, SearchError> {
        Ok(SearchOutcome { best: self.archive.best()?.clone(), stop, iterations_completed: iteration, progress })
    }

    /// Build, run and reflect one plan; never fails except on an exhausted
    /// token budget.
    fn evaluate_plan(&self, plan: &Plan, origin: Origin, iteration: u32, prebuilt: Option<&WorkflowGraph>) -> Result<ArchiveEntry, LlmError> {
        let usage = Arc::new(Mutex::new(UsageLedger::default()));
        let gateway = self.env.gateway.tracked(usage.clone());
        let mut e = ArchiveEntry::new(plan.clone(), origin, iteration, template_version());
        if self.cfg.sample_notes.is_some() {
            e.sampled_notes = Some(self.dataset.len());
        }
        let finish = |mut e: ArchiveEntry| {
            e.cost = usage.lock().unwrap().clone();
            e
        };

        let graph = match prebuilt {
            Some(g) => g.clone(),
            None => match coder_build(&gateway, plan, self.env.lib, self.cfg.max_retries, self.cfg.max_repairs) {
                Ok(out) => {
                    e.build_attempts = out.attempts;
                    e.plan = out.plan;
                    e.diagnostics.extend(out.registered.iter().map(|d| format!("registered llm op {}", d.name)));
                    out.graph
                }
                Err(AgentError::Llm(err @ LlmError::BudgetExceeded { .. })) => return Err(err),
                Err(AgentError::BuildExhausted { attempts }) => {
                    e.build_attempts = attempts.len() as u32;
                    e.status = EntryStatus::BuildFailed;
                    e.score = Some(Score::failed());
                    let last = attempts.last().map(|a| a.errors.clone()).unwrap_or_default();
                    e.reflection = failure_reflection(&format!("build ({} attempts)", attempts.len()), &last);
                    return Ok(finish(e));
                }
                Err(err) => {
                    e.status = EntryStatus::BuildFailed;
                    e.score = Some(Score::failed());
                    e.reflection = failure_reflection("build", &err.to_string());
                    return Ok(finish(e));
                }
            },
        };
        e.workflow = Some(graph.clone());

        match evaluate_workflow(&graph, &self.dataset, &gateway, self.env.taxonomy, &self.cfg.eval_config()) {
            Ok(ev) => {
                let r = reflector_evaluate(&gateway, &e.plan, &ev, self.cfg.max_repairs);
                if let Some(err) = gateway_budget_error(&gateway) {
                    return Err(err);
                }
                e.status = EntryStatus::Evaluated;
                e.score = Some(r.score);
                e.reflection = r.feedback;
                e.diagnostics.extend(r.diagnostics);
            }
            Err(err) => {
                if let Some(&LlmError::BudgetExceeded { used, cap }) = err.llm_error() {
                    return Err(LlmError::BudgetExceeded { used, cap });
                }
                e.status = EntryStatus::ExecFailed;
                e.score = Some(Score::failed());
                e.reflection = failure_reflection("execution", &err.to_string());
            }
        }
        Ok(finish(e))
    }

    fn evaluate_pending(&mut self) -> Result<Option<StopReason>, SearchError> {
        let pending: Vec<ArchiveEntry> = self.archive.pending().cloned().collect();
        for p in pending {
            match self.evaluate_plan(&p.plan, Origin::Seed, 0, p.workflow.as_ref()) {
                Ok(done) => self.archive.complete_pending(p.id, |e| {
                    let id = e.id;
                    let created = e.created_at;
                    *e = done;
                    e.id = id;
                    e.created_at = created;
                    e.template_version = "seed".into();
                })?,
                Err(LlmError::BudgetExceeded { .. }) => return Ok(Some(StopReason::BudgetExceeded)),
                Err(err) => return Err(SearchError::Provider(err)),
            }
        }
        Ok(None)
    }

    /// Run (or continue) the loop until the iteration budget, a resource
    /// budget, patience, or `halt_after` stops it.
    pub fn run(&mut self) -> Result<SearchOutcome, SearchError> {
        let started = Instant::now();
        let mut progress = Vec::new();
        let mut state = match self.state.take() {
            Some(s) => s,
            None => {
                let seeded = self.evaluate_pending()?;
                let mut s = LoopState {
                    version: STATE_VERSION,
                    iteration: 0,
                    stale_iterations: 0,
                    best_objective: self.archive.best().ok().map(|b| b.objective()),
                    wall_secs: 0.0,
                    ledger: self.env.gateway.ledger(),
                    provider: self.env.gateway.provider().snapshot(),
                    rng_seed: self.cfg.rng_seed,
                    stop: seeded,
                };
                let p = self.progress(0, Some("seeds evaluated".into()));
                tracing::info!(t = 0, best_g = p.best_g, "seeds evaluated");
                self.save(&s, Some(&p))?;
                progress.push(p);
                if let Some(stop) = seeded {
                    s.stop = Some(stop);
                    return self.finish(s, stop, progress);
                }
                s
            }
        };
        if let Some(stop) = state.stop.filter(|s| !s.resumable()) {
            return self.outcome(stop, state.iteration, progress);
        }
        state.stop = None;
        let base_wall = state.wall_secs;

        let mut t = state.iteration;
        while t < self.cfg.iterations {
            t += 1;
            let wall = base_wall + started.elapsed().as_secs_f64();
            if self.cfg.wall_time_secs.is_some_and(|cap| wall >= cap) {
                return self.finish(state, StopReason::WallTime, progress);
            }
            let (elites, recents) = self.archive.select_context(self.cfg.elites, self.cfg.recents);
            let ctx = DesignerContext {
                elites,
                recents,
                signatures: self.env.lib.render_signatures(),
                guidelines: self.guidelines.clone(),
                generation_size: self.cfg.generation_size,
                toggles: self.cfg.toggles,
            };
            let mut note = None;
            let plans = match designer_propose(self.env.gateway, &ctx, self.cfg.designer_temperature, self.cfg.max_repairs) {
                Ok(p) => p.plans,
                Err(AgentError::AllProposalsMalformed(n)) => {
                    note = Some(format!("skipped: all {n} proposals malformed"));
                    Vec::new()
                }
                Err(AgentError::Llm(LlmError::BudgetExceeded { .. })) => {
                    return self.finish(state, StopReason::BudgetExceeded, progress);
                }
                Err(AgentError::Llm(e)) => return Err(SearchError::Provider(e)),
                Err(e @ AgentError::BuildExhausted { .. }) => unreachable!("designer does not build: {e}"),
            };

            let results: Vec<Result<ArchiveEntry, LlmError>> = if self.cfg.parallel && plans.len() > 1 {
                std::thread::scope(|s| {
                    let handles: Vec<_> = plans
                        .iter()
                        .map(|p| s.spawn(|| self.evaluate_plan(p, Origin::Designer, t, None)))
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
                })
            } else {
                plans.iter().map(|p| self.evaluate_plan(p, Origin::Designer, t, None)).collect()
            };
            let mut budget_hit = false;
            for r in results {
                match r {
                    Ok(e) => {
                        self.archive.insert(e)?;
                    }
                    Err(_) => budget_hit = true,
                }
            }
            if budget_hit {
                return self.finish(state, StopReason::BudgetExceeded, progress);
            }

            let best = self.archive.best().ok().map(|b| b.objective());
            if best.is_some_and(|b| state.best_objective.is_none_or(|prev| b > prev)) {
                state.stale_iterations = 0;
            } else {
                state.stale_iterations += 1;
            }
            state.best_objective = best;
            state.iteration = t;
            state.wall_secs = base_wall + started.elapsed().as_secs_f64();
            state.ledger = self.env.gateway.ledger();
            state.provider = self.env.gateway.provider().snapshot();
            let p = self.progress(t, note);
            tracing::info!(t, best_g = p.best_g, best_f1 = p.best_f1, tokens = p.tokens_used, "iteration complete");
            self.save(&state, Some(&p))?;
            progress.push(p);

            if self.cfg.patience > 0 && state.stale_iterations >= self.cfg.patience {
                return self.finish(state, StopReason::Patience, progress);
            }
            if self.cfg.halt_after == Some(t) && t < self.cfg.iterations {
                return self.finish(state, StopReason::Halted, progress);
            }
        }
        self.finish(state, StopReason::Completed, progress)
    }

    fn finish(&mut self, mut state: LoopState, stop: StopReason, progress: Vec<ProgressRecord>) -> Result<SearchOutcome, SearchError> {
        state.stop = Some(stop);
        state.ledger = self.env.gateway.ledger();
        state.provider = self.env.gateway.provider().snapshot();
        self.save(&state, None)?;
        let iteration = state.iteration;
        self.state = Some(state);
        self.outcome(stop, iteration, progress)
    }
}

fn gateway_budget_error(gateway: &Gateway) -> Option<LlmError> {
    let cap = gateway.token_cap()?;
    let used = gateway.ledger().total_tokens();
    (used >= cap).then_some(LlmError::BudgetExceeded { used, cap })
}

/// Run a search over an in-memory archive and return the best workflow.
pub fn run_search(cfg: SearchConfig, env: SearchEnv<'_>, archive: Archive) -> Result<(SearchOutcome, Archive), SearchError> {
    let mut s = Search::in_memory(cfg, env, archive)?;
    let out = s.run()?;
    Ok((out, s.into_archive()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_checks() {
        let cfg = SearchConfig { iterations: 10, generation_size: 2, ..SearchConfig::default() };
        assert_eq!(SearchConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(matches!(SearchConfig::from_toml("generation_size = 0"), Err(SearchError::Config(_))));
        assert!(matches!(SearchConfig::from_toml("bogus = 1"), Err(SearchError::Config(_))));
        let c = SearchConfig::from_toml("iterations = 5\n[toggles]\nexemplars = false\n").unwrap();
        assert!(!c.toggles.exemplars && c.toggles.guidelines);
    }
}
