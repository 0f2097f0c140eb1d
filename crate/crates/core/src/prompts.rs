//! Prompt templates and history serialization.
//!
//! Templates are plain UTF-8 files, one per [`TemplateId`], using `{name}`
//! placeholders. `{{` and `}}` render as literal braces, so the JSON skeletons
//! inside the templates survive substitution.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conversation::VisibleTurn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Student,
    Deciding,
    UsePython,
    ReceivedPython,
    NoPython,
    EnrichSolution,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        Self::Student,
        Self::Deciding,
        Self::UsePython,
        Self::ReceivedPython,
        Self::NoPython,
        Self::EnrichSolution,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Student => "student",
            Self::Deciding => "deciding",
            Self::UsePython => "use_python",
            Self::ReceivedPython => "received_python",
            Self::NoPython => "no_python",
            Self::EnrichSolution => "enrich_solution",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.name())
    }

    /// Placeholders the template cannot render without.
    pub fn required_bindings(self) -> &'static [&'static str] {
        match self {
            Self::Student => &["question", "history"],
            Self::Deciding | Self::NoPython => &["question", "solution", "history"],
            Self::UsePython => &["description"],
            Self::ReceivedPython => &["question", "solution", "history", "description", "python_output"],
            Self::EnrichSolution => &["question", "solution"],
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("missing binding for placeholder {{{0}}}")]
    MissingBinding(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("failed to read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Placeholder values for one rendering.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings(BTreeMap<String, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.0.insert(name.into(), value.into());
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.0.insert(name.into(), value.into());
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }
}

const BUILTIN: [(TemplateId, &str); 6] = [
    (TemplateId::Student, include_str!("../assets/prompts/student.txt")),
    (TemplateId::Deciding, include_str!("../assets/prompts/deciding.txt")),
    (TemplateId::UsePython, include_str!("../assets/prompts/use_python.txt")),
    (TemplateId::ReceivedPython, include_str!("../assets/prompts/received_python.txt")),
    (TemplateId::NoPython, include_str!("../assets/prompts/no_python.txt")),
    (TemplateId::EnrichSolution, include_str!("../assets/prompts/enrich_solution.txt")),
];

/// The loaded template set. Read-only after construction.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: HashMap<TemplateId, String>,
}

impl TemplateSet {
    /// Templates shipped in `assets/prompts`, compiled into the binary.
    pub fn builtin() -> Self {
        Self {
            templates: BUILTIN.iter().map(|(id, t)| (*id, t.to_string())).collect(),
        }
    }

    /// Loads `<dir>/<template>.txt` for every template. Missing files fall
    /// back to the built-in text so a directory may override a subset.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for id in TemplateId::ALL {
            let path = dir.as_ref().join(id.file_name());
            match std::fs::read_to_string(&path) {
                Ok(text) => {
                    set.templates.insert(id, text);
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(source) => {
                    return Err(PromptError::Io {
                        path: path.display().to_string(),
                        source,
                    })
                }
            }
        }
        Ok(set)
    }

    /// A set holding only the given templates; rendering any other id fails
    /// with [`PromptError::UnknownTemplate`].
    pub fn from_texts(texts: impl IntoIterator<Item = (TemplateId, String)>) -> Self {
        Self {
            templates: texts.into_iter().collect(),
        }
    }

    pub fn text(&self, id: TemplateId) -> Option<&str> {
        self.templates.get(&id).map(String::as_str)
    }

    /// Hex SHA-256 of the raw template text.
    pub fn checksum(&self, id: TemplateId) -> Option<String> {
        self.text(id).map(sha256_hex)
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        TemplateId::ALL
            .into_iter()
            .filter_map(|id| Some((id.name().to_string(), self.checksum(id)?)))
            .collect()
    }

    pub fn render(&self, id: TemplateId, bindings: &Bindings) -> Result<String, PromptError> {
        let template = self
            .text(id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.name().to_string()))?;
        render_text(template, bindings)
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Substitutes `{name}` placeholders. A brace that does not start a
/// placeholder or an escape is copied through unchanged.
pub fn render_text(template: &str, bindings: &Bindings) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            out.push('{');
            rest = after;
        } else if let Some(after) = tail.strip_prefix("}}") {
            out.push('}');
            rest = after;
        } else if let Some(name) = placeholder_at(tail) {
            let value = bindings
                .get(name)
                .ok_or_else(|| PromptError::MissingBinding(name.to_string()))?;
            out.push_str(value);
            rest = &tail[name.len() + 2..];
        } else {
            out.push_str(&tail[..1]);
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn placeholder_at(tail: &str) -> Option<&str> {
    let inner = tail.strip_prefix('{')?;
    let end = inner.find('}')?;
    let name = &inner[..end];
    let valid = !name.is_empty()
        && name.starts_with(|c: char| c.is_ascii_lowercase() || c == '_')
        && name.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
    valid.then_some(name)
}

/// Names of the `{name}` placeholders in `template`, in order of appearance.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut found = Vec::new();
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            rest = &tail[2..];
        } else if let Some(name) = placeholder_at(tail) {
            if !found.iter().any(|f| f == name) {
                found.push(name.to_string());
            }
            rest = &tail[name.len() + 2..];
        } else {
            rest = &tail[1..];
        }
    }
    found
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Audience {
    Student,
    Tutorbot,
}

/// Renders visible turns as `Student: ...` / `Tutorbot: ...` lines.
///
/// Both audiences get the same text: soliloquy content never enters the
/// history; the tutorbot receives it through the state prompt bindings.
pub fn serialize_history(turns: &[VisibleTurn], audience: Audience) -> String {
    let _ = audience;
    turns
        .iter()
        .map(|t| format!("{}: {}", t.speaker.label(), t.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conversation::Speaker;

    #[test]
    fn builtin_placeholder_sets_match_requirements() {
        let set = TemplateSet::builtin();
        for id in TemplateId::ALL {
            let mut found = placeholders(set.text(id).unwrap());
            found.sort();
            let mut required: Vec<String> =
                id.required_bindings().iter().map(|s| s.to_string()).collect();
            required.sort();
            assert_eq!(found, required, "{id}");
        }
    }

    #[test]
    fn render_use_python() {
        let set = TemplateSet::builtin();
        let out = set
            .render(TemplateId::UsePython, &Bindings::new().with("description", "d"))
            .unwrap();
        assert!(out.contains("The description of the desired calculation is the following:\n\"d\""));
        // escaped braces collapse to single braces
        assert!(out.contains("{\n\"Python\":\n{\n\"Python Code\""));
        assert!(!out.contains("{{"));
    }

    #[test]
    fn render_missing_binding_reports_first_absent_placeholder() {
        let set = TemplateSet::builtin();
        let err = set
            .render(TemplateId::Deciding, &Bindings::new().with("history", ""))
            .unwrap_err();
        assert!(matches!(err, PromptError::MissingBinding(n) if n == "question"));
    }

    #[test]
    fn render_student() {
        let set = TemplateSet::builtin();
        let out = set
            .render(
                TemplateId::Student,
                &Bindings::new().with("question", "Q-text").with("history", "H-text"),
            )
            .unwrap();
        assert!(out.contains("\"Q-text\""));
        assert!(out.contains("\"H-text\""));
        assert!(placeholders(&out).is_empty());
    }

    #[test]
    fn unknown_template() {
        assert!(matches!(
            "tutor".parse::<TemplateId>(),
            Err(PromptError::UnknownTemplate(_))
        ));
        let partial = TemplateSet::from_texts([(TemplateId::Student, "{question}".to_string())]);
        assert!(matches!(
            partial.render(TemplateId::Deciding, &Bindings::new()),
            Err(PromptError::UnknownTemplate(_))
        ));
    }

    #[test]
    fn stray_braces_pass_through() {
        let out = render_text("a { b } {Q} {x}", &Bindings::new().with("x", "1")).unwrap();
        assert_eq!(out, "a { b } {Q} 1");
    }

    #[test]
    fn load_dir_overrides_subset() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("student.txt"), "Q={question} H={history}").unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        assert_eq!(set.text(TemplateId::Student), Some("Q={question} H={history}"));
        assert_eq!(
            set.text(TemplateId::Deciding),
            TemplateSet::builtin().text(TemplateId::Deciding)
        );
    }

    #[test]
    fn history_lines() {
        assert_eq!(serialize_history(&[], Audience::Student), "");
        let turns = vec![
            VisibleTurn {
                speaker: Speaker::Student,
                text: "What is g?".into(),
            },
            VisibleTurn {
                speaker: Speaker::Tutorbot,
                text: "About 9.8 m/s^2.".into(),
            },
        ];
        // hand-written reference
        let expected = ["Student: What is g?", "Tutorbot: About 9.8 m/s^2."].join("\n");
        assert_eq!(serialize_history(&turns, Audience::Student), expected);
        assert_eq!(serialize_history(&turns, Audience::Tutorbot), expected);
    }
}
