//! ICD-10-CM/PCS code hierarchy: loading, validation, canonicalization and
//! hierarchy queries.
//!
//! The taxonomy source is a UTF-8 TSV file with one node per line:
//!
//! ```text
//! CODE <TAB> PARENT <TAB> KIND <TAB> DESCRIPTION
//! ```
//!
//! `PARENT` is empty for chapters. `KIND` is one of `chapter`, `block`,
//! `category`, `subcategory`. Lines starting with `#` and blank lines are
//! ignored. Chapters are 1-2 digit numbers, blocks are ranges such as
//! `E08-E13`, CM codes carry a dot after the third character and PCS codes
//! are 7 undotted characters.
//!
//! PCS rows are loaded as a flat table: they must have an empty parent, are
//! always leaves and take no part in the CM forest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::text;

/// PCS section characters that are letters. A 7-character undotted code that
/// starts with one of these and has a digit second is ambiguous between CM
/// and PCS; canonicalization prefers CM and [`Taxonomy`] lookups fall back to
/// the PCS reading.
const PCS_LETTER_SECTIONS: &[char] = &['B', 'C', 'D', 'F', 'G', 'H', 'X'];

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("failed to read taxonomy: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("cycle in hierarchy at code {0}")]
    Cycle(String),
    #[error("line {line}: duplicate code {code}")]
    DuplicateCode { line: usize, code: String },
    #[error("unknown code {0}")]
    UnknownCode(String),
    #[error("empty query")]
    EmptyQuery,
    #[error("malformed code {0:?}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, TaxonomyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeSystem {
    Cm,
    Pcs,
}

/// A canonical ICD-10 code string.
///
/// Serialized as the bare code text; deserialization canonicalizes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IcdCode {
    text: String,
    system: CodeSystem,
}

impl IcdCode {
    pub fn parse(raw: &str) -> Result<Self> {
        let text = canonicalize(raw)?;
        let system = system_of_canonical(&text);
        Ok(Self { text, system })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn system(&self) -> CodeSystem {
        self.system
    }

    fn from_canonical(text: &str) -> Self {
        Self {
            text: text.to_string(),
            system: system_of_canonical(text),
        }
    }
}

impl fmt::Display for IcdCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Serialize for IcdCode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for IcdCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        IcdCode::parse(&raw).map_err(serde::de::Error::custom)
    }
}

fn system_of_canonical(text: &str) -> CodeSystem {
    if text.len() == 7 && !text.contains('.') && !text.contains('-') {
        CodeSystem::Pcs
    } else {
        CodeSystem::Cm
    }
}

/// Normalize a code string: strip whitespace, uppercase, place the CM dot
/// after the third character, drop PCS dots.
///
/// Chapters (`"07"` becomes `"7"`) and block ranges (`"e08 - e13"` becomes
/// `"E08-E13"`) are accepted as well. Idempotent on every input it accepts.
pub fn canonicalize(raw: &str) -> Result<String> {
    let malformed = || TaxonomyError::Malformed(raw.to_string());
    let s: String = raw
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect::<String>()
        .to_uppercase();
    if s.is_empty() {
        return Err(malformed());
    }

    if let Some((lo, hi)) = s.split_once('-') {
        let lo = lo.replace('.', "");
        let hi = hi.replace('.', "");
        if is_cm_category(&lo) && is_cm_category(&hi) {
            return Ok(format!("{lo}-{hi}"));
        }
        return Err(malformed());
    }

    if s.chars().all(|c| c.is_ascii_digit()) && s.len() <= 2 {
        let n: u32 = s.parse().map_err(|_| malformed())?;
        if n == 0 {
            return Err(malformed());
        }
        return Ok(n.to_string());
    }

    let had_dot = s.contains('.');
    let core: String = s.chars().filter(|&c| c != '.').collect();
    if !core.chars().all(|c| c.is_ascii_alphanumeric()) {
        return Err(malformed());
    }
    let chars: Vec<char> = core.chars().collect();
    let first = chars[0];
    let second_is_digit = chars.get(1).is_some_and(|c| c.is_ascii_digit());

    if first.is_ascii_digit() || (first.is_ascii_alphabetic() && !second_is_digit) {
        // PCS: 7 positional characters, no dot.
        if chars.len() == 7 && !(had_dot && first.is_ascii_alphabetic() && second_is_digit) {
            return Ok(core);
        }
        return Err(malformed());
    }

    // CM: letter, digit, then 1..=5 more alphanumerics.
    if (3..=7).contains(&chars.len()) {
        if chars.len() == 3 {
            return Ok(core);
        }
        return Ok(format!("{}.{}", &core[..3], &core[3..]));
    }
    Err(malformed())
}

fn is_cm_category(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 3
        && b[0].is_ascii_uppercase()
        && b[1].is_ascii_digit()
        && b[2].is_ascii_alphanumeric()
}

fn is_chapter_code(s: &str) -> bool {
    !s.is_empty() && s.len() <= 2 && s.chars().all(|c| c.is_ascii_digit())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Chapter,
    Block,
    Category,
    Subcategory,
}

impl NodeKind {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "chapter" => Some(Self::Chapter),
            "block" => Some(Self::Block),
            "category" => Some(Self::Category),
            "subcategory" => Some(Self::Subcategory),
            _ => None,
        }
    }

    /// Categories and subcategories are the codes that may be assigned to a
    /// note; chapters and blocks only group them.
    pub fn is_assignable(self) -> bool {
        matches!(self, Self::Category | Self::Subcategory)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyNode {
    pub code: IcdCode,
    pub description: String,
    pub kind: NodeKind,
    pub parent: Option<IcdCode>,
    pub children: Vec<IcdCode>,
}

/// Immutable, indexed code forest.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    nodes: HashMap<String, TaxonomyNode>,
    order: Vec<String>,
    roots: Vec<IcdCode>,
    /// Degenerate single-category blocks (`B99-B99`) are also reachable by
    /// the category name (`B99`).
    block_aliases: HashMap<String, String>,
    desc_index: HashMap<String, BTreeSet<String>>,
    desc_tokens: HashMap<String, BTreeSet<String>>,
}

pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<Taxonomy> {
    let src = std::fs::read_to_string(path)?;
    Taxonomy::from_tsv(&src)
}

struct Row {
    line: usize,
    code: String,
    parent: Option<String>,
    kind: NodeKind,
    description: String,
}

impl Taxonomy {
    /// Parse and validate the TSV taxonomy format.
    pub fn from_tsv(src: &str) -> Result<Self> {
        let mut rows: Vec<Row> = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();

        for (idx, raw_line) in src.lines().enumerate() {
            let line = idx + 1;
            let l = raw_line.trim_end_matches('\r');
            if l.trim().is_empty() || l.starts_with('#') {
                continue;
            }
            let parse_err = |reason: String| TaxonomyError::Parse { line, reason };
            let fields: Vec<&str> = l.split('\t').collect();
            if fields.len() != 4 {
                return Err(parse_err(format!("expected 4 tab-separated fields, found {}", fields.len())));
            }
            let code = canonicalize(fields[0])
                .map_err(|_| parse_err(format!("malformed code {:?}", fields[0])))?;
            let kind = NodeKind::parse(fields[2])
                .ok_or_else(|| parse_err(format!("unknown kind {:?} for {code}", fields[2])))?;
            let parent = match fields[1].trim() {
                "" => None,
                p => Some(canonicalize(p).map_err(|_| parse_err(format!("malformed parent {p:?} for {code}")))?),
            };
            // An undotted seven-character row without a parent is a PCS code
            // even when its spelling would also parse as CM.
            let undotted = code.replace('.', "");
            let code = if parent.is_none()
                && !fields[0].contains('.')
                && undotted.len() == 7
                && undotted.starts_with(|c| PCS_LETTER_SECTIONS.contains(&c))
            {
                undotted
            } else {
                code
            };
            let description = fields[3].trim().to_string();
            if description.is_empty() {
                return Err(parse_err(format!("empty description for {code}")));
            }

            let system = system_of_canonical(&code);
            let grammar_ok = match kind {
                NodeKind::Chapter => is_chapter_code(&code),
                NodeKind::Block => code.contains('-'),
                NodeKind::Category => system == CodeSystem::Pcs || is_cm_category(&code),
                NodeKind::Subcategory => {
                    system == CodeSystem::Pcs || (code.contains('.') && !code.contains('-'))
                }
            };
            if !grammar_ok {
                return Err(parse_err(format!("code {code} does not match kind {kind:?}")));
            }
            match (kind, &parent, system) {
                (NodeKind::Chapter, Some(_), _) => {
                    return Err(parse_err(format!("chapter {code} must not have a parent")))
                }
                (_, Some(_), CodeSystem::Pcs) => {
                    return Err(parse_err(format!("PCS code {code} must have an empty parent")))
                }
                (NodeKind::Block | NodeKind::Category | NodeKind::Subcategory, None, CodeSystem::Cm) => {
                    return Err(parse_err(format!("{code} has no parent")))
                }
                _ => {}
            }

            if seen.contains_key(&code) {
                return Err(TaxonomyError::DuplicateCode { line, code });
            }
            seen.insert(code.clone(), rows.len());
            rows.push(Row { line, code, parent, kind, description });
        }

        // Parent links and kind compatibility.
        for row in &rows {
            if let Some(p) = &row.parent {
                let Some(&pi) = seen.get(p) else {
                    return Err(TaxonomyError::Parse {
                        line: row.line,
                        reason: format!("code {} lists unknown parent {p}", row.code),
                    });
                };
                let pk = rows[pi].kind;
                let ok = match row.kind {
                    NodeKind::Block => matches!(pk, NodeKind::Chapter | NodeKind::Block),
                    NodeKind::Category => pk == NodeKind::Block,
                    NodeKind::Subcategory => matches!(pk, NodeKind::Category | NodeKind::Subcategory),
                    NodeKind::Chapter => false,
                };
                if !ok {
                    return Err(TaxonomyError::Parse {
                        line: row.line,
                        reason: format!("{} ({:?}) cannot have parent {p} ({pk:?})", row.code, row.kind),
                    });
                }
            }
        }

        // Unique parents hold by construction; walk up from every node to
        // rule out cycles.
        let parent_of: HashMap<&str, &str> = rows
            .iter()
            .filter_map(|r| r.parent.as_deref().map(|p| (r.code.as_str(), p)))
            .collect();
        for row in &rows {
            let mut cur = row.code.as_str();
            let mut steps = 0;
            while let Some(&p) = parent_of.get(cur) {
                steps += 1;
                if p == row.code || steps > rows.len() {
                    return Err(TaxonomyError::Cycle(row.code.clone()));
                }
                cur = p;
            }
        }

        let mut nodes: HashMap<String, TaxonomyNode> = HashMap::with_capacity(rows.len());
        let mut order = Vec::with_capacity(rows.len());
        let mut roots = Vec::new();
        for row in &rows {
            if row.kind == NodeKind::Chapter {
                roots.push(IcdCode::from_canonical(&row.code));
            }
            order.push(row.code.clone());
            nodes.insert(
                row.code.clone(),
                TaxonomyNode {
                    code: IcdCode::from_canonical(&row.code),
                    description: row.description.clone(),
                    kind: row.kind,
                    parent: row.parent.as_deref().map(IcdCode::from_canonical),
                    children: Vec::new(),
                },
            );
        }
        for row in &rows {
            if let Some(p) = &row.parent {
                let child = IcdCode::from_canonical(&row.code);
                nodes.get_mut(p).expect("parent checked above").children.push(child);
            }
        }

        let mut block_aliases = HashMap::new();
        for row in rows.iter().filter(|r| r.kind == NodeKind::Block) {
            if let Some((lo, hi)) = row.code.split_once('-') {
                if lo == hi {
                    block_aliases.insert(lo.to_string(), row.code.clone());
                }
            }
        }

        let mut desc_index: HashMap<String, BTreeSet<String>> = HashMap::new();
        let mut desc_tokens = HashMap::new();
        for row in &rows {
            let toks = text::content_tokens(&row.description);
            for t in &toks {
                desc_index.entry(t.clone()).or_default().insert(row.code.clone());
            }
            desc_tokens.insert(row.code.clone(), toks);
        }

        Ok(Self { nodes, order, roots, block_aliases, desc_index, desc_tokens })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn roots(&self) -> &[IcdCode] {
        &self.roots
    }

    /// All nodes in file order.
    pub fn nodes(&self) -> impl Iterator<Item = &TaxonomyNode> {
        self.order.iter().map(|c| &self.nodes[c])
    }

    pub fn node(&self, code: &str) -> Option<&TaxonomyNode> {
        self.resolve(code, false).ok()
    }

    /// Resolve a possibly non-canonical code to its node. When the name
    /// denotes both a single-category block and a category,
    /// `prioritize_blocks` selects the block.
    pub fn resolve(&self, code: &str, prioritize_blocks: bool) -> Result<&TaxonomyNode> {
        let unknown = || TaxonomyError::UnknownCode(code.to_string());
        let canon = canonicalize(code).map_err(|_| unknown())?;
        let direct = self.nodes.get(&canon).or_else(|| {
            // Ambiguous CM/PCS spelling: retry as PCS.
            let undotted = canon.replace('.', "");
            let first = undotted.chars().next()?;
            (undotted.len() == 7 && !canon.contains('-') && PCS_LETTER_SECTIONS.contains(&first))
                .then(|| self.nodes.get(&undotted))
                .flatten()
        });
        let block = self.block_aliases.get(&canon).and_then(|b| self.nodes.get(b));
        match (direct, block) {
            (Some(_), Some(b)) if prioritize_blocks => Ok(b),
            (Some(d), _) => Ok(d),
            (None, Some(b)) => Ok(b),
            (None, None) => Err(unknown()),
        }
    }

    pub fn is_valid_code(&self, code: &str) -> bool {
        self.resolve(code, false).is_ok()
    }

    /// Valid and of an assignable kind (category, subcategory or PCS code).
    pub fn is_assignable(&self, code: &str) -> bool {
        self.resolve(code, false).is_ok_and(|n| n.kind.is_assignable())
    }

    pub fn get_parent(&self, code: &str, prioritize_blocks: bool) -> Result<Option<IcdCode>> {
        Ok(self.resolve(code, prioritize_blocks)?.parent.clone())
    }

    pub fn get_children(&self, code: &str, prioritize_blocks: bool) -> Result<Vec<IcdCode>> {
        Ok(self.resolve(code, prioritize_blocks)?.children.clone())
    }

    /// Ancestors nearest-first, ending at the chapter. Excludes `code`.
    pub fn get_ancestors(&self, code: &str) -> Result<Vec<IcdCode>> {
        let mut out = Vec::new();
        let mut cur = self.resolve(code, false)?;
        while let Some(p) = &cur.parent {
            out.push(p.clone());
            cur = &self.nodes[p.as_str()];
        }
        Ok(out)
    }

    /// Descendants in depth-first document order. Excludes `code`.
    pub fn get_descendants(&self, code: &str) -> Result<Vec<IcdCode>> {
        let node = self.resolve(code, false)?;
        let mut out = Vec::new();
        let mut stack: Vec<&IcdCode> = node.children.iter().rev().collect();
        while let Some(c) = stack.pop() {
            out.push(c.clone());
            stack.extend(self.nodes[c.as_str()].children.iter().rev());
        }
        Ok(out)
    }

    /// Strict ancestry: a code is never its own ancestor.
    pub fn is_ancestor(&self, a: &str, b: &str) -> Result<bool> {
        let a = self.resolve(a, false)?.code.clone();
        Ok(self.get_ancestors(b)?.contains(&a))
    }

    pub fn is_descendant(&self, a: &str, b: &str) -> Result<bool> {
        self.is_ancestor(b, a)
    }

    /// Deepest code that is an ancestor-or-self of both arguments.
    pub fn get_nearest_common_ancestor(&self, a: &str, b: &str) -> Result<Option<IcdCode>> {
        let na = self.resolve(a, false)?.code.clone();
        let nb = self.resolve(b, false)?.code.clone();
        let mut chain_a = vec![na];
        chain_a.extend(self.get_ancestors(a)?);
        let mut chain_b: BTreeSet<IcdCode> = self.get_ancestors(b)?.into_iter().collect();
        chain_b.insert(nb);
        Ok(chain_a.into_iter().find(|c| chain_b.contains(c)))
    }

    pub fn is_leaf(&self, code: &str) -> Result<bool> {
        Ok(self.resolve(code, false)?.children.is_empty())
    }

    pub fn code_to_text(&self, code: &str) -> Result<&str> {
        Ok(&self.resolve(code, false)?.description)
    }

    /// Content tokens of a code's description.
    pub fn description_tokens(&self, code: &str) -> Option<&BTreeSet<String>> {
        let node = self.resolve(code, false).ok()?;
        self.desc_tokens.get(node.code.as_str())
    }

    /// Rank assignable codes by the share of query tokens found in their
    /// description. Equal scores prefer the description most covered by the
    /// query, then the lexicographically smaller code.
    pub fn text_to_codes(&self, query: &str, limit: usize) -> Result<Vec<(IcdCode, f64)>> {
        let q = text::content_tokens(query);
        if q.is_empty() {
            return Err(TaxonomyError::EmptyQuery);
        }
        let mut shared: BTreeMap<&str, usize> = BTreeMap::new();
        for t in &q {
            if let Some(codes) = self.desc_index.get(t) {
                for c in codes {
                    *shared.entry(c.as_str()).or_default() += 1;
                }
            }
        }
        let mut scored: Vec<(&str, f64, f64)> = shared
            .into_iter()
            .filter(|(c, _)| self.nodes[*c].kind.is_assignable())
            .map(|(c, n)| {
                let dlen = self.desc_tokens[c].len().max(1);
                (c, n as f64 / q.len() as f64, n as f64 / dlen as f64)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then(b.2.total_cmp(&a.2))
                .then_with(|| a.0.cmp(b.0))
        });
        Ok(scored
            .into_iter()
            .take(limit)
            .map(|(c, s, _)| (IcdCode::from_canonical(c), s))
            .collect())
    }
}
