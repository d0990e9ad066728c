//! Versioned prompt templates with `{{NAME}}` placeholders.
//!
//! Each asset holds the system prompt, a line containing only `===`, and
//! the user prompt.

macro_rules! assets {
    ($($id:literal),* $(,)?) => {
        &[$(($id, include_str!(concat!("../assets/prompts/", $id, ".txt")))),*]
    };
}

const TEMPLATES: &[(&str, &str)] = assets![
    "terms_v1",
    "synonyms_v1",
    "propose_terms_plain_v1",
    "propose_terms_cot_v1",
    "propose_note_plain_v1",
    "propose_note_cot_v1",
    "evidence_v1",
    "judge_keep_drop_v1",
    "judge_tabular_desc_v1",
    "llm_filter_v1",
    "designer_v1",
    "coder_v1",
    "reflector_v1",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: &'static str,
    pub system: &'static str,
    pub user: &'static str,
}

impl PromptTemplate {
    /// Substitute placeholders. Unknown placeholders are left in place.
    pub fn render(&self, vars: &[(&str, &str)]) -> (String, String) {
        let fill = |s: &str| {
            let mut out = s.to_string();
            for (k, v) in vars {
                out = out.replace(&format!("{{{{{k}}}}}"), v);
            }
            out
        };
        (fill(self.system), fill(self.user))
    }
}

pub fn template(id: &str) -> Option<PromptTemplate> {
    TEMPLATES.iter().find(|(k, _)| *k == id).map(|(id, src)| {
        let (system, user) = src.split_once("\n===\n").unwrap_or(("", src));
        PromptTemplate { id, system: system.trim(), user: user.trim() }
    })
}

pub fn template_ids() -> impl Iterator<Item = &'static str> {
    TEMPLATES.iter().map(|(k, _)| *k)
}
