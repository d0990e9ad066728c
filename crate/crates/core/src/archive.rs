//! The memory archive: an append-only store of (plan, workflow, score,
//! reflection) records, persisted as JSONL, with elite and recent selection.

use std::cmp::Ordering;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::eval::Score;
use crate::llm::UsageLedger;
use crate::workflow::{compile_plan, validate_plan, ComponentLibrary, Plan, WorkflowGraph};

pub const ARCHIVE_SCHEMA: &str = "dcr-archive";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("failed to persist archive: {0}")]
    Persist(#[from] std::io::Error),
    #[error("archive line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("seed {name}: {violation}")]
    InvalidSeed { name: String, violation: String },
    #[error("archive has no scored entries")]
    EmptyArchive,
    #[error("entry {0} is not awaiting a score")]
    NotPending(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Seed,
    Designer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    /// Seed awaiting its first evaluation.
    Pending,
    Evaluated,
    BuildFailed,
    ExecFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub id: u64,
    pub iteration: u32,
    pub origin: Origin,
    pub status: EntryStatus,
    pub plan: Plan,
    /// Compiled workflow manifest; absent when the build failed.
    pub workflow: Option<WorkflowGraph>,
    /// Absent only while a seed is pending.
    pub score: Option<Score>,
    pub reflection: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
    /// Usage attributable to this entry (build, execution, reflection).
    pub cost: UsageLedger,
    pub created_at: DateTime<Utc>,
    pub template_version: String,
    /// Compile attempts used by the coder.
    #[serde(default)]
    pub build_attempts: u32,
    /// Number of notes scored when evaluation ran on a sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampled_notes: Option<usize>,
}

impl ArchiveEntry {
    /// A new record; `id` is assigned on insert.
    pub fn new(plan: Plan, origin: Origin, iteration: u32, template_version: impl Into<String>) -> Self {
        Self {
            id: 0,
            iteration,
            origin,
            status: EntryStatus::Pending,
            plan,
            workflow: None,
            score: None,
            reflection: String::new(),
            diagnostics: Vec::new(),
            cost: UsageLedger::default(),
            created_at: Utc::now(),
            template_version: template_version.into(),
            build_attempts: 0,
            sampled_notes: None,
        }
    }

    pub fn objective(&self) -> f64 {
        self.score.map_or(0.0, |s| s.objective)
    }

    pub fn f1(&self) -> f64 {
        self.score.map_or(0.0, |s| s.f1)
    }
}

/// Which score elites are ranked by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EliteKey {
    #[default]
    Objective,
    F1,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    entries: Vec<ArchiveEntry>,
    path: Option<PathBuf>,
    pub elite_key: EliteKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub iteration: u32,
    pub best_id: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub compliance: f64,
    pub cost: f64,
    pub objective: f64,
    /// Running maximum of F1 over all entries so far.
    pub best_f1: f64,
}

impl Archive {
    /// In-memory archive.
    pub fn new() -> Self {
        Self::default()
    }

    /// Create (or truncate) a persisted archive at `path`.
    pub fn create(path: impl AsRef<Path>) -> Result<Self, ArchiveError> {
        let path = path.as_ref().to_path_buf();
        write_file(&path, &[])?;
        Ok(Self { entries: Vec::new(), path: Some(path), elite_key: EliteKey::default() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArchiveError> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path)?;
        let mut archive = Self::parse(&src)?;
        archive.path = Some(path.to_path_buf());
        Ok(archive)
    }

    pub fn parse(src: &str) -> Result<Self, ArchiveError> {
        let mut lines = src.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let corrupt = |line: usize, reason: String| ArchiveError::Corrupt { line: line + 1, reason };
        let (i, first) = lines.next().ok_or_else(|| corrupt(0, "missing header".into()))?;
        let header: Header = serde_json::from_str(first).map_err(|e| corrupt(i, format!("bad header: {e}")))?;
        if header.schema != ARCHIVE_SCHEMA || header.version != ARCHIVE_VERSION {
            return Err(corrupt(i, format!("unsupported schema {} v{}", header.schema, header.version)));
        }
        let mut entries: Vec<ArchiveEntry> = Vec::new();
        for (i, line) in lines {
            let e: ArchiveEntry = serde_json::from_str(line).map_err(|err| corrupt(i, err.to_string()))?;
            if entries.last().is_some_and(|last| last.id >= e.id) {
                return Err(corrupt(i, format!("id {} is not increasing", e.id)));
            }
            entries.push(e);
        }
        Ok(Self { entries, path: None, elite_key: EliteKey::default() })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Seed the archive with expert workflows. Seeds without a score are
    /// left pending for the first evaluation pass.
    pub fn init_with_seeds(&mut self, seeds: Vec<(Plan, Option<Score>)>, lib: &ComponentLibrary) -> Result<(), ArchiveError> {
        let mut staged = Vec::with_capacity(seeds.len());
        for (plan, score) in seeds {
            let report = validate_plan(&plan, lib);
            if !report.ok {
                return Err(ArchiveError::InvalidSeed { name: plan.name.clone(), violation: report.render() });
            }
            let graph = compile_plan(&plan, lib)
                .map_err(|e| ArchiveError::InvalidSeed { name: plan.name.clone(), violation: e.to_string() })?;
            let mut e = ArchiveEntry::new(plan, Origin::Seed, 0, "seed");
            e.workflow = Some(graph);
            if let Some(s) = score {
                e.score = Some(s);
                e.status = EntryStatus::Evaluated;
                e.reflection = "pre-evaluated seed".into();
            }
            staged.push(e);
        }
        for e in staged {
            self.insert(e)?;
        }
        Ok(())
    }

    /// Append an entry, assigning the next id. The entry is on disk before
    /// this returns; on failure the archive is unchanged.
    pub fn insert(&mut self, mut e: ArchiveEntry) -> Result<u64, ArchiveError> {
        e.id = self.entries.last().map_or(1, |l| l.id + 1);
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&e).expect("serializable");
            let mut f = OpenOptions::new().append(true).open(path)?;
            f.write_all(format!("{line}\n").as_bytes())?;
            f.sync_data()?;
        }
        let id = e.id;
        self.entries.push(e);
        Ok(id)
    }

    /// Fill in the score of a pending seed. This is the only edit ever made
    /// to an existing entry; the file is rewritten atomically.
    pub fn complete_pending(&mut self, id: u64, update: impl FnOnce(&mut ArchiveEntry)) -> Result<(), ArchiveError> {
        let idx = self.entries.iter().position(|e| e.id == id && e.status == EntryStatus::Pending).ok_or(ArchiveError::NotPending(id))?;
        let mut e = self.entries[idx].clone();
        update(&mut e);
        e.id = id;
        if e.score.is_none() {
            e.score = Some(Score::failed());
        }
        if e.status == EntryStatus::Pending {
            e.status = EntryStatus::Evaluated;
        }
        let mut next = self.entries.clone();
        next[idx] = e;
        if let Some(path) = &self.path {
            write_file(path, &next)?;
        }
        self.entries = next;
        Ok(())
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn pending(&self) -> impl Iterator<Item = &ArchiveEntry> {
        self.entries.iter().filter(|e| e.status == EntryStatus::Pending)
    }

    fn scored(&self) -> impl DoubleEndedIterator<Item = &ArchiveEntry> {
        self.entries.iter().filter(|e| e.score.is_some())
    }

    fn key(&self, e: &ArchiveEntry) -> f64 {
        match self.elite_key {
            EliteKey::Objective => e.objective(),
            EliteKey::F1 => e.f1(),
        }
    }

    /// Top-`k` scored entries (ties: higher F1, then newer) and the last `n`
    /// scored entries by id, newest first.
    pub fn select_context(&self, k: usize, n: usize) -> (Vec<ArchiveEntry>, Vec<ArchiveEntry>) {
        let mut elites: Vec<&ArchiveEntry> = self.scored().collect();
        elites.sort_by(|a, b| {
            self.key(b).total_cmp(&self.key(a)).then_with(|| b.f1().total_cmp(&a.f1())).then_with(|| b.id.cmp(&a.id))
        });
        let elites = elites.into_iter().take(k).cloned().collect();
        let recents = self.scored().rev().take(n).cloned().collect();
        (elites, recents)
    }

    /// The highest-objective entry; ties go to the earliest.
    pub fn best(&self) -> Result<&ArchiveEntry, ArchiveError> {
        self.scored()
            .reduce(|best, e| if e.objective().total_cmp(&best.objective()) == Ordering::Greater { e } else { best })
            .ok_or(ArchiveError::EmptyArchive)
    }

    /// Best-so-far after each iteration.
    pub fn trajectory(&self) -> Vec<TrajectoryRow> {
        let Some(last) = self.scored().map(|e| e.iteration).max() else { return Vec::new() };
        let mut rows = Vec::new();
        let mut best: Option<&ArchiveEntry> = None;
        let mut best_f1 = 0.0f64;
        for t in 0..=last {
            for e in self.scored().filter(|e| e.iteration == t) {
                best_f1 = best_f1.max(e.f1());
                if best.is_none_or(|b| e.objective() > b.objective() || (e.objective() == b.objective() && e.id < b.id)) {
                    best = Some(e);
                }
            }
            if let Some(b) = best {
                let s = b.score.unwrap_or_default();
                rows.push(TrajectoryRow {
                    iteration: t,
                    best_id: b.id,
                    precision: s.precision,
                    recall: s.recall,
                    f1: s.f1,
                    compliance: s.compliance,
                    cost: s.cost,
                    objective: s.objective,
                    best_f1,
                });
            }
        }
        rows
    }

    /// Per-entry scores as CSV: id, iteration, P, R, F1, V, cost, G.
    pub fn export_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "iteration", "origin", "status", "precision", "recall", "f1", "compliance", "cost", "objective"])
            .expect("in-memory");
        for e in &self.entries {
            let s = e.score.unwrap_or_default();
            let origin = if e.origin == Origin::Seed { "seed" } else { "designer" };
            let status = serde_json::to_value(e.status).unwrap().as_str().unwrap().to_string();
            w.write_record([
                e.id.to_string(),
                e.iteration.to_string(),
                origin.to_string(),
                status,
                fmt(s.precision),
                fmt(s.recall),
                fmt(s.f1),
                fmt(s.compliance),
                fmt(s.cost),
                fmt(s.objective),
            ])
            .expect("in-memory");
        }
        String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8")
    }

    /// Byte image of the archive file.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Header { schema: ARCHIVE_SCHEMA.into(), version: ARCHIVE_VERSION }).unwrap();
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

pub(crate) fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

fn write_file(path: &Path, entries: &[ArchiveEntry]) -> Result<(), ArchiveError> {
    let image = Archive { entries: entries.to_vec(), path: None, elite_key: EliteKey::default() }.to_jsonl();
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(image.as_bytes())?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
