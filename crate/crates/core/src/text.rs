//! Tokenization and overlap scoring shared by the taxonomy index and the
//! scoring operators.

use std::collections::BTreeSet;

/// Function words ignored when comparing descriptions against note text.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "and", "as", "at", "by", "for", "from", "in", "is", "of", "on", "or", "the", "to",
    "with",
];

/// Lowercased alphanumeric runs, in order of appearance.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Distinct lowercased tokens with stopwords removed.
pub fn content_tokens(text: &str) -> BTreeSet<String> {
    tokens(text)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Fraction of `reference` content tokens that also occur in `other`.
///
/// Returns 0 when `reference` has no content tokens.
pub fn coverage(reference: &BTreeSet<String>, other: &BTreeSet<String>) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    let shared = reference.intersection(other).count();
    shared as f64 / reference.len() as f64
}

/// Symmetric overlap: shared tokens over the larger of the two sets, i.e. the
/// smaller of the two directional coverages.
pub fn mutual_overlap(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / denom as f64
}

/// Prefix of `text` holding its first `max_tokens` whitespace-separated
/// tokens. The result is always a verbatim slice of the input.
pub fn clip_to_tokens(text: &str, max_tokens: usize) -> &str {
    if max_tokens == 0 {
        return "";
    }
    let mut count = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_token {
                count += 1;
                if count == max_tokens {
                    return &text[..i];
                }
            }
            in_token = false;
        } else {
            in_token = true;
        }
    }
    text
}

/// Number of whitespace-separated tokens.
pub fn whitespace_len(text: &str) -> usize {
    text.split_whitespace().count()
}
