use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    All,
    ReasonForVisit,
    Assessment,
}

impl Section {
    pub fn parse(s: &str) -> Option<Section> {
        match s {
            "all" => Some(Section::All),
            "reason_for_visit" => Some(Section::ReasonForVisit),
            "assessment" => Some(Section::Assessment),
            _ => None,
        }
    }

    fn headers(self) -> &'static [&'static str] {
        match self {
            Section::All => &[],
            Section::ReasonForVisit => &["reason for visit", "chief complaint", "reason for admission", "presenting complaint"],
            Section::Assessment => &["assessment and plan", "assessment", "impression", "diagnoses", "diagnosis"],
        }
    }
}

/// Header text of a line such as `ASSESSMENT:` or `Chief complaint: chest pain`.
fn header_of(line: &str) -> Option<String> {
    let (head, _) = line.split_once(':')?;
    let head = head.trim();
    let ok = !head.is_empty()
        && head.len() <= 40
        && head.chars().all(|c| c.is_ascii_alphabetic() || c == ' ' || c == '/' || c == '&');
    ok.then(|| head.to_ascii_lowercase())
}

/// The requested section of a note, or the whole note when the section's
/// header cannot be found. Returns a byte range into `note`.
pub fn section_range(note: &str, section: Section) -> (usize, usize) {
    let wanted = section.headers();
    if wanted.is_empty() {
        return (0, note.len());
    }
    let mut start = None;
    let mut offset = 0;
    for line in note.split_inclusive('\n') {
        if let Some(h) = header_of(line) {
            if let Some(s) = start {
                return (s, offset);
            }
            if wanted.contains(&h.as_str()) {
                start = Some(offset + line.find(':').map_or(0, |i| i + 1));
            }
        }
        offset += line.len();
    }
    match start {
        Some(s) => (s, note.len()),
        None => (0, note.len()),
    }
}

pub fn section_text(note: &str, section: Section) -> &str {
    if section == Section::All {
        return note;
    }
    let (s, e) = section_range(note, section);
    let t = note[s..e].trim();
    if t.is_empty() {
        note
    } else {
        t
    }
}
