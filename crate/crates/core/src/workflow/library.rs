use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Semantic type carried on a workflow edge.
///
/// Per-code scores, descriptions matches and evidence travel as annotations
/// on the [`PortType::CodeSet`] value, so the wiring rule only has to
/// distinguish these five.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortType {
    /// The clinical note. Always supplied by the workflow input.
    Note,
    Entities,
    CodeSet,
    Descriptions,
    Ranked,
}

impl PortType {
    pub fn label(self) -> &'static str {
        match self {
            Self::Note => "note",
            Self::Entities => "entities",
            Self::CodeSet => "codes",
            Self::Descriptions => "descriptions",
            Self::Ranked => "ranked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentCategory {
    Tool,
    Strategy,
    LlmModule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ParamKind {
    Int { min: i64, max: i64 },
    Real { min: f64, max: f64 },
    Bool,
    Choice { options: Vec<String> },
    Text,
    /// Fixed-length list of reals, each within range, summing to at most `max_sum`.
    Weights { len: usize, min: f64, max: f64, max_sum: f64 },
    /// Subset of the allowed options.
    Subset { options: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    /// `None` marks a required parameter.
    pub default: Option<Value>,
}

/// Why a parameter value was rejected.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamProblem {
    WrongType(String),
    OutOfRange(String),
}

impl ParamSpec {
    pub fn check(&self, v: &Value) -> Result<(), ParamProblem> {
        use ParamProblem::*;
        let name = &self.name;
        match &self.kind {
            ParamKind::Int { min, max } => {
                let n = v
                    .as_i64()
                    .or_else(|| v.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64))
                    .ok_or_else(|| WrongType(format!("{name} must be an integer, got {v}")))?;
                if n < *min || n > *max {
                    return Err(OutOfRange(format!("{name}={n} outside [{min}, {max}]")));
                }
            }
            ParamKind::Real { min, max } => {
                let x = v
                    .as_f64()
                    .ok_or_else(|| WrongType(format!("{name} must be a number, got {v}")))?;
                if !(x >= *min && x <= *max) {
                    return Err(OutOfRange(format!("{name}={x} outside [{min}, {max}]")));
                }
            }
            ParamKind::Bool => {
                v.as_bool()
                    .ok_or_else(|| WrongType(format!("{name} must be a boolean, got {v}")))?;
            }
            ParamKind::Choice { options } => {
                let s = v
                    .as_str()
                    .ok_or_else(|| WrongType(format!("{name} must be a string, got {v}")))?;
                if !options.iter().any(|o| o == s) {
                    return Err(OutOfRange(format!("{name}={s:?} not one of {options:?}")));
                }
            }
            ParamKind::Text => {
                v.as_str()
                    .ok_or_else(|| WrongType(format!("{name} must be a string, got {v}")))?;
            }
            ParamKind::Weights { len, min, max, max_sum } => {
                let arr = v
                    .as_array()
                    .ok_or_else(|| WrongType(format!("{name} must be a list of {len} numbers")))?;
                if arr.len() != *len {
                    return Err(WrongType(format!("{name} must have {len} entries, got {}", arr.len())));
                }
                let mut sum = 0.0;
                for x in arr {
                    let x = x
                        .as_f64()
                        .ok_or_else(|| WrongType(format!("{name} entries must be numbers")))?;
                    if !(x >= *min && x <= *max) {
                        return Err(OutOfRange(format!("{name} entry {x} outside [{min}, {max}]")));
                    }
                    sum += x;
                }
                if sum > max_sum + 1e-9 {
                    return Err(OutOfRange(format!("{name} sums to {sum}, above {max_sum}")));
                }
            }
            ParamKind::Subset { options } => {
                let arr = v
                    .as_array()
                    .ok_or_else(|| WrongType(format!("{name} must be a list of strings")))?;
                for x in arr {
                    let s = x
                        .as_str()
                        .ok_or_else(|| WrongType(format!("{name} entries must be strings")))?;
                    if !options.iter().any(|o| o == s) {
                        return Err(OutOfRange(format!("{name} entry {s:?} not one of {options:?}")));
                    }
                }
            }
        }
        Ok(())
    }

    fn render(&self) -> String {
        let range = match &self.kind {
            ParamKind::Int { min, max } => format!("int in [{min},{max}]"),
            ParamKind::Real { min, max } => format!("number in [{min},{max}]"),
            ParamKind::Bool => "bool".into(),
            ParamKind::Choice { options } => options.join("|"),
            ParamKind::Text => "text".into(),
            ParamKind::Weights { len, .. } => format!("{len} weights"),
            ParamKind::Subset { options } => format!("subset of [{}]", options.join(", ")),
        };
        match &self.default {
            Some(d) => format!("{}: {range} = {d}", self.name),
            None => format!("{}: {range} (required)", self.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortSpec {
    pub name: String,
    pub ty: PortType,
}

/// Declaration of an LLM-backed operator added at build time.
///
/// Such operators take the candidate set (and the note) and return the
/// subset the model keeps, scoring each code against `instruction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmOpDecl {
    pub name: String,
    pub instruction: String,
    #[serde(default = "default_input")]
    pub input: PortType,
    #[serde(default = "default_input")]
    pub output: PortType,
}

fn default_input() -> PortType {
    PortType::CodeSet
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSignature {
    pub name: String,
    pub category: ComponentCategory,
    pub summary: String,
    pub inputs: Vec<PortSpec>,
    pub output: PortType,
    pub params: Vec<ParamSpec>,
    /// Accepts any number of `codes` producers (the merge step).
    pub fan_in: bool,
}

impl ComponentSignature {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn defaults_ok(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.default.as_ref().is_none_or(|d| p.check(d).is_ok()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error("component {0} already exists")]
    Duplicate(String),
    #[error("component {0} has a default outside its own range")]
    BadDefault(String),
    #[error("LLM operator {name}: {reason}")]
    BadDecl { name: String, reason: String },
}

/// Tools, strategy primitives and LLM modules workflows are built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentLibrary {
    components: BTreeMap<String, ComponentSignature>,
    aliases: BTreeMap<String, String>,
    custom: BTreeMap<String, LlmOpDecl>,
}

fn int(name: &str, min: i64, max: i64, default: i64) -> ParamSpec {
    ParamSpec { name: name.into(), kind: ParamKind::Int { min, max }, default: Some(json!(default)) }
}

fn real(name: &str, min: f64, max: f64, default: f64) -> ParamSpec {
    ParamSpec { name: name.into(), kind: ParamKind::Real { min, max }, default: Some(json!(default)) }
}

fn boolean(name: &str, default: bool) -> ParamSpec {
    ParamSpec { name: name.into(), kind: ParamKind::Bool, default: Some(json!(default)) }
}

fn choice(name: &str, options: &[&str], default: &str) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        kind: ParamKind::Choice { options: options.iter().map(|s| s.to_string()).collect() },
        default: Some(json!(default)),
    }
}

fn text(name: &str, default: &str) -> ParamSpec {
    ParamSpec { name: name.into(), kind: ParamKind::Text, default: Some(json!(default)) }
}

fn port(name: &str, ty: PortType) -> PortSpec {
    PortSpec { name: name.into(), ty }
}

pub const SECTIONS: &[&str] = &["all", "reason_for_visit", "assessment"];
pub const HIER_RULES: &[&str] = &[
    "prefer_specific_over_unspecified",
    "drop_duplicate_laterality",
    "drop_mutually_exclusive_with_lower_conf",
];

/// Names the pipeline operators are known by in the tool list shown to the
/// designer, mapped onto the catalog.
const ALIASES: &[(&str, &str)] = &[
    ("MedicalTermExtraction", "Terms"),
    ("TabularIndexSearch", "FetchDesc"),
    ("GuidelineValidator", "Validate"),
    ("Reconciler", "Merge"),
    ("EvidenceLinker", "EvidenceLink"),
    ("EvidenceExtract", "EvidenceLink"),
];

impl ComponentLibrary {
    pub fn empty() -> Self {
        Self { components: BTreeMap::new(), aliases: BTreeMap::new(), custom: BTreeMap::new() }
    }

    /// The shipped operator catalog.
    pub fn standard() -> Self {
        use ComponentCategory::*;
        use PortType::*;
        let mut lib = Self::empty();
        let mut add = |name: &str, category, summary: &str, inputs, output, params, fan_in| {
            lib.add(ComponentSignature {
                name: name.into(),
                category,
                summary: summary.into(),
                inputs,
                output,
                params,
                fan_in,
            })
            .expect("standard catalog is consistent");
        };
        let mode = || choice("mode", &["plain", "cot"], "plain");
        let section = || choice("section", SECTIONS, "all");

        add(
            "Terms",
            LlmModule,
            "Extract medical terms with assertion cues (negated, family history, hypothetical, ruled out mentions are excluded downstream)",
            vec![port("note", Note)],
            Entities,
            vec![section(), text("template", "terms_v1"), real("temperature", 0.0, 2.0, 0.0)],
            false,
        );
        add(
            "SearchAlphaIndex",
            Tool,
            "Look up extracted terms (optionally synonym-expanded) in the code description index",
            vec![port("entities", Entities)],
            CodeSet,
            vec![
                boolean("expand_synonyms", true),
                int("limit", 1, 50, 5),
                real("min_score", 0.0, 1.0, 0.5),
                real("temperature", 0.0, 2.0, 0.0),
            ],
            false,
        );
        add(
            "ProposeFromTerms",
            LlmModule,
            "Propose ICD-10 codes from the extracted terms, one code set per sample",
            vec![port("entities", Entities), port("note", Note)],
            CodeSet,
            vec![
                mode(),
                int("samples", 1, 16, 1),
                real("temperature", 0.0, 2.0, 0.7),
                choice("ref", &["none", "sec"], "none"),
            ],
            false,
        );
        add(
            "ProposeFromNote",
            LlmModule,
            "Propose ICD-10 codes directly from (a section of) the note, one code set per sample",
            vec![port("note", Note)],
            CodeSet,
            vec![mode(), int("samples", 1, 16, 1), real("temperature", 0.0, 2.0, 0.7), section()],
            false,
        );
        add(
            "Merge",
            Strategy,
            "Union candidate sets with deduplication, keeping per-sample membership",
            vec![port("inputs", CodeSet)],
            CodeSet,
            vec![],
            true,
        );
        add("Canonicalize", Tool, "Normalize code spelling", vec![port("codes", CodeSet)], CodeSet, vec![], false);
        add(
            "Validate",
            Tool,
            "Remove codes that do not exist in the taxonomy or are not assignable",
            vec![port("codes", CodeSet)],
            CodeSet,
            vec![text("ruleset", "icd10")],
            false,
        );
        add(
            "VoteStats",
            Strategy,
            "Annotate votes and vote_ratio = votes / number of samples",
            vec![port("codes", CodeSet)],
            CodeSet,
            vec![],
            false,
        );
        add(
            "VoteFilter",
            Strategy,
            "Keep codes whose vote_ratio reaches min_ratio (majority vote at 0.5)",
            vec![port("codes", CodeSet)],
            CodeSet,
            vec![real("min_ratio", 0.0, 1.0, 0.5)],
            false,
        );
        add(
            "FetchDesc",
            Tool,
            "Retrieve code descriptions from the tabular index",
            vec![port("codes", CodeSet)],
            Descriptions,
            vec![],
            false,
        );
        add(
            "DescMatch",
            Tool,
            "Score each code by the share of its description tokens found in the note",
            vec![port("codes", CodeSet), port("descriptions", Descriptions), port("note", Note)],
            CodeSet,
            vec![],
            false,
        );
        add(
            "EvidenceLink",
            LlmModule,
            "Extract up to max_snips verbatim note snippets (window tokens each) per code",
            vec![port("note", Note), port("codes", CodeSet), port("descriptions", Descriptions)],
            CodeSet,
            vec![
                int("max_snips", 1, 10, 2),
                int("window", 1, 512, 24),
                int("max_tokens", 1, 8192, 256),
                choice("strategy", &["snippet_from_note"], "snippet_from_note"),
                real("temperature", 0.0, 2.0, 0.0),
            ],
            false,
        );
        add(
            "Judge",
            LlmModule,
            "Assign per-code confidence in [0,1] (and keep/drop); drop codes below tau_keep",
            vec![port("codes", CodeSet), port("descriptions", Descriptions), port("note", Note)],
            CodeSet,
            vec![
                choice("strategy", &["evidence_keep_drop", "evidence_tabular_desc"], "evidence_keep_drop"),
                real("tau_keep", 0.0, 1.0, 0.5),
                choice("output", &["json_scores"], "json_scores"),
                int("batch_size", 1, 500, 50),
                real("temperature", 0.0, 2.0, 0.0),
            ],
            false,
        );
        add(
            "ContrastiveScreen",
            Strategy,
            "Drop or demote near-duplicate siblings whose description match differs by less than margin",
            vec![port("codes", CodeSet)],
            CodeSet,
            vec![
                choice("by", &["sibling_desc"], "sibling_desc"),
                real("margin", 0.0, 1.0, 0.15),
                choice("action", &["drop_or_demote"], "drop_or_demote"),
                real("overlap_threshold", 0.0, 1.0, 0.8),
            ],
            false,
        );
        add(
            "HierPrune",
            Strategy,
            "Hierarchy rules: prefer specific over unspecified, dedupe laterality, drop ancestors of kept codes",
            vec![port("codes", CodeSet)],
            CodeSet,
            vec![ParamSpec {
                name: "rules".into(),
                kind: ParamKind::Subset { options: HIER_RULES.iter().map(|s| s.to_string()).collect() },
                default: Some(json!(HIER_RULES)),
            }],
            false,
        );
        add(
            "Rerank",
            Strategy,
            "Compute rank_score: weighted (vote_ratio, m_desc, judge_conf, evidence_overlap) or evidence_mean",
            vec![port("codes", CodeSet)],
            CodeSet,
            vec![
                choice("scheme", &["weighted", "evidence_mean"], "weighted"),
                ParamSpec {
                    name: "weights".into(),
                    kind: ParamKind::Weights { len: 4, min: 0.0, max: 1.0, max_sum: 1.0 },
                    default: Some(json!([0.4, 0.3, 0.2, 0.1])),
                },
            ],
            false,
        );
        add(
            "TopK",
            Strategy,
            "Keep only the k best codes by rank_score",
            vec![port("codes", CodeSet)],
            CodeSet,
            vec![int("k", 1, 1000, 20)],
            false,
        );
        add(
            "Finalize",
            Strategy,
            "Sort by rank_score; when fewer than k remain, append fallback codes from the dropped pool",
            vec![port("codes", CodeSet)],
            Ranked,
            vec![int("k", 1, 1000, 20), boolean("fallback", true)],
            false,
        );

        for (alias, target) in ALIASES {
            lib.aliases.insert(alias.to_string(), target.to_string());
        }
        lib
    }

    pub fn add(&mut self, sig: ComponentSignature) -> Result<(), LibraryError> {
        if self.components.contains_key(&sig.name) || self.aliases.contains_key(&sig.name) {
            return Err(LibraryError::Duplicate(sig.name));
        }
        if !sig.defaults_ok() {
            return Err(LibraryError::BadDefault(sig.name));
        }
        self.components.insert(sig.name.clone(), sig);
        Ok(())
    }

    /// Register an LLM-backed candidate filter declared during plan repair.
    pub fn register_llm_op(&mut self, decl: LlmOpDecl) -> Result<(), LibraryError> {
        let bad = |reason: &str| LibraryError::BadDecl { name: decl.name.clone(), reason: reason.into() };
        if decl.name.trim().is_empty() || !decl.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(bad("name must be a non-empty identifier"));
        }
        if decl.instruction.trim().is_empty() {
            return Err(bad("instruction is empty"));
        }
        if decl.input != PortType::CodeSet || decl.output != PortType::CodeSet {
            return Err(bad("only codes -> codes operators can be registered"));
        }
        self.add(ComponentSignature {
            name: decl.name.clone(),
            category: ComponentCategory::LlmModule,
            summary: decl.instruction.clone(),
            inputs: vec![port("codes", PortType::CodeSet), port("note", PortType::Note)],
            output: PortType::CodeSet,
            params: vec![real("threshold", 0.0, 1.0, 0.5), real("temperature", 0.0, 2.0, 0.0)],
            fan_in: false,
        })?;
        self.custom.insert(decl.name.clone(), decl);
        Ok(())
    }

    pub fn custom_op(&self, name: &str) -> Option<&LlmOpDecl> {
        self.custom.get(name)
    }

    /// Canonical component name for an op name or alias.
    pub fn resolve_name<'a>(&'a self, op: &'a str) -> Option<&'a str> {
        if self.components.contains_key(op) {
            Some(op)
        } else {
            self.aliases.get(op).map(|s| s.as_str())
        }
    }

    pub fn get(&self, op: &str) -> Option<&ComponentSignature> {
        self.resolve_name(op).and_then(|n| self.components.get(n))
    }

    pub fn components(&self) -> impl Iterator<Item = &ComponentSignature> {
        self.components.values()
    }

    fn by_category(&self, c: ComponentCategory) -> BTreeMap<&str, &ComponentSignature> {
        self.components
            .iter()
            .filter(|(_, s)| s.category == c)
            .map(|(k, v)| (k.as_str(), v))
            .collect()
    }

    pub fn tools(&self) -> BTreeMap<&str, &ComponentSignature> {
        self.by_category(ComponentCategory::Tool)
    }

    pub fn strategies(&self) -> BTreeMap<&str, &ComponentSignature> {
        self.by_category(ComponentCategory::Strategy)
    }

    pub fn llm_modules(&self) -> BTreeMap<&str, &ComponentSignature> {
        self.by_category(ComponentCategory::LlmModule)
    }

    /// One line per component, as shown to the designer.
    pub fn render_signatures(&self) -> String {
        let mut out = String::new();
        for sig in self.components.values() {
            let inputs: Vec<String> = sig
                .inputs
                .iter()
                .map(|p| if sig.fan_in { format!("{}...", p.name) } else { p.name.clone() })
                .collect();
            let params: Vec<String> = sig.params.iter().map(|p| p.render()).collect();
            let _ = write!(
                out,
                "{}({}) -> {} - {}",
                sig.name,
                inputs.join(", "),
                sig.output.label(),
                sig.summary
            );
            if !params.is_empty() {
                let _ = write!(out, " [params: {}]", params.join("; "));
            }
            out.push('\n');
        }
        if !self.aliases.is_empty() {
            let aliases: Vec<String> = self.aliases.iter().map(|(a, t)| format!("{a}={t}")).collect();
            let _ = writeln!(out, "Aliases: {}", aliases.join(", "));
        }
        out
    }
}

impl Default for ComponentLibrary {
    fn default() -> Self {
        Self::standard()
    }
}
