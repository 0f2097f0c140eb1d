//! Wire schemas emitted by the tutorbot and auxiliary prompts.
//!
//! Every parser here is pure. Model replies are located leniently (the first
//! balanced JSON object carrying the expected keys wins, prose and code fences
//! around it are ignored) but the records they produce are strictly
//! validated: a parser either returns a record satisfying every invariant of
//! its type or a [`ProtocolError`].

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const KEY_USE_PYTHON: &str = "Use Python";
pub const KEY_DESCRIPTION: &str = "Description";
pub const KEY_PYTHON: &str = "Python";
pub const KEY_PYTHON_CODE: &str = "Python Code";
pub const KEY_RESULT_VARIABLE: &str = "Result Variable";
pub const KEY_THOUGHTS: &str = "Thoughts of Tutorbot";
pub const KEY_EVALUATION: &str = "Evaluation of Student Response";
pub const KEY_ACTION: &str = "Action Based on Evaluation";
pub const KEY_STEP_NUMBER: &str = "Step Number";
pub const KEY_STEP_STATE: &str = "Step State";
pub const KEY_RESPONSE: &str = "Tutorbot Response";
pub const KEY_DETAILED_SOLUTION: &str = "Detailed Solution";
pub const KEY_SOLUTION_OUTLINE: &str = "Solution Outline";

/// Token both enriched-solution fields must carry.
pub const STEP_ONE_TOKEN: &str = "Step 1)";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed output: {0}")]
    MalformedOutput(String),
    #[error("\"Use Python\" is \"y\" but no description was given")]
    MissingDescription,
    #[error("code uses forbidden construct `{0}(`")]
    ForbiddenConstruct(String),
    #[error("\"Result Variable\" names no variables")]
    EmptyResultVariables,
    #[error("action {action} is not permitted for evaluation {evaluation}")]
    InconsistentAction {
        evaluation: EvaluationCode,
        action: ActionCode,
    },
    #[error("\"{0}\" lacks the \"Step 1)\" numbering")]
    MissingStepNumbering(&'static str),
}

fn malformed(reason: impl Into<String>) -> ProtocolError {
    ProtocolError::MalformedOutput(reason.into())
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Outcome of the Deciding state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub use_python: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl Decision {
    pub fn no_python() -> Self {
        Self {
            use_python: false,
            description: None,
        }
    }

    /// The description is stored trimmed.
    pub fn use_python(description: impl Into<String>) -> Result<Self, ProtocolError> {
        let description = description.into();
        let description = description.trim();
        if description.is_empty() {
            return Err(ProtocolError::MissingDescription);
        }
        Ok(Self {
            use_python: true,
            description: Some(description.to_string()),
        })
    }

    pub fn to_wire(&self) -> String {
        match &self.description {
            Some(d) if self.use_python => format!(
                "{{\n\"{KEY_USE_PYTHON}\": \"y\",\n\"{KEY_DESCRIPTION}\": {}\n}}",
                json_str(d)
            ),
            _ => format!("{{\n\"{KEY_USE_PYTHON}\": \"n\"\n}}"),
        }
    }
}

/// Calculation code produced in the Use Python state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeArtifact {
    pub code: String,
    pub result_variables: Vec<String>,
}

impl CodeArtifact {
    pub fn new(code: impl Into<String>, result_variables: Vec<String>) -> Result<Self, ProtocolError> {
        let code = code.into();
        if result_variables.is_empty() {
            return Err(ProtocolError::EmptyResultVariables);
        }
        if let Some(bad) = result_variables.iter().find(|v| !is_identifier(v)) {
            return Err(malformed(format!("\"{bad}\" is not a valid variable name")));
        }
        if let Some(name) = find_forbidden_call(&code) {
            return Err(ProtocolError::ForbiddenConstruct(name.to_string()));
        }
        Ok(Self {
            code,
            result_variables,
        })
    }

    pub fn to_wire(&self) -> String {
        let fenced = format!("```python\n{}\n```", self.code);
        format!(
            "{{\n\"{KEY_PYTHON}\":\n{{\n\"{KEY_PYTHON_CODE}\": {},\n\"{KEY_RESULT_VARIABLE}\": {}\n}}\n}}",
            json_str(&fenced),
            json_str(&self.result_variables.join(", "))
        )
    }
}

/// The tutorbot's classification of the student's last message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvaluationCode {
    #[serde(rename = "a")]
    Incorrect,
    #[serde(rename = "b")]
    Correct,
    #[serde(rename = "c")]
    PartiallyCorrect,
    #[serde(rename = "d")]
    Ambiguous,
    #[serde(rename = "e")]
    OffTopic,
    #[serde(rename = "f")]
    Inquiry,
    #[serde(rename = "g")]
    NotApplicable,
}

impl EvaluationCode {
    pub const ALL: [EvaluationCode; 7] = [
        Self::Incorrect,
        Self::Correct,
        Self::PartiallyCorrect,
        Self::Ambiguous,
        Self::OffTopic,
        Self::Inquiry,
        Self::NotApplicable,
    ];

    pub fn letter(self) -> char {
        match self {
            Self::Incorrect => 'a',
            Self::Correct => 'b',
            Self::PartiallyCorrect => 'c',
            Self::Ambiguous => 'd',
            Self::OffTopic => 'e',
            Self::Inquiry => 'f',
            Self::NotApplicable => 'g',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.letter() == c.to_ascii_lowercase())
    }

    /// Actions the tutorbot may take after this evaluation.
    pub fn permitted_actions(self) -> &'static [u8] {
        match self {
            Self::Incorrect => &[1, 2],
            Self::Correct => &[3],
            Self::PartiallyCorrect => &[4, 5],
            Self::Ambiguous => &[6],
            Self::OffTopic => &[7],
            Self::Inquiry => &[8, 9, 10, 11],
            Self::NotApplicable => &[12],
        }
    }
}

impl fmt::Display for EvaluationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Action code 1..=12.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ActionCode(u8);

impl ActionCode {
    pub const MIN: u8 = 1;
    pub const MAX: u8 = 12;

    pub fn new(value: u8) -> Option<Self> {
        (Self::MIN..=Self::MAX).contains(&value).then_some(Self(value))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = ActionCode> {
        (Self::MIN..=Self::MAX).map(ActionCode)
    }
}

impl TryFrom<u8> for ActionCode {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Self::new(value).ok_or_else(|| format!("action code {value} outside 1..=12"))
    }
}

impl From<ActionCode> for u8 {
    fn from(a: ActionCode) -> u8 {
        a.0
    }
}

impl fmt::Display for ActionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// True iff `action` is one of the actions permitted for `evaluation`.
pub fn validate_action(evaluation: EvaluationCode, action: ActionCode) -> bool {
    evaluation.permitted_actions().contains(&action.get())
}

/// Progress marker reported with every tutorbot turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepState {
    /// Not applicable.
    #[serde(rename = "p")]
    NotApplicable,
    /// A step is being worked on.
    #[serde(rename = "q")]
    InProgress,
    /// Step finished, moving on.
    #[serde(rename = "r")]
    StepFinished,
    /// No next step; the problem is finished.
    #[serde(rename = "t")]
    ProblemFinished,
}

impl StepState {
    pub fn letter(self) -> char {
        match self {
            Self::NotApplicable => 'p',
            Self::InProgress => 'q',
            Self::StepFinished => 'r',
            Self::ProblemFinished => 't',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_lowercase() {
            'p' => Some(Self::NotApplicable),
            'q' => Some(Self::InProgress),
            'r' => Some(Self::StepFinished),
            't' => Some(Self::ProblemFinished),
            _ => None,
        }
    }
}

impl fmt::Display for StepState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// One parsed tutorbot reply from the Received Python or No Python state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TutorTurn {
    pub thoughts: String,
    pub evaluation: EvaluationCode,
    pub action: ActionCode,
    pub step_number: String,
    pub step_state: StepState,
    /// The only field the student ever sees.
    pub response: String,
}

impl TutorTurn {
    pub fn to_wire(&self) -> String {
        format!(
            "{{\n\"{KEY_THOUGHTS}\": {},\n\"{KEY_EVALUATION}\": \"{}\",\n\"{KEY_ACTION}\": \"{}\",\n\"{KEY_STEP_NUMBER}\": {},\n\"{KEY_STEP_STATE}\": \"{}\",\n\"{KEY_RESPONSE}\": {}\n}}",
            json_str(&self.thoughts),
            self.evaluation,
            self.action,
            json_str(&self.step_number),
            self.step_state,
            json_str(&self.response),
        )
    }
}

/// A textbook solution rewritten as a numbered teaching narrative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichedSolution {
    pub detailed: String,
    pub outline: String,
}

impl EnrichedSolution {
    pub fn new(detailed: impl Into<String>, outline: impl Into<String>) -> Result<Self, ProtocolError> {
        let (detailed, outline) = (detailed.into(), outline.into());
        if !detailed.contains(STEP_ONE_TOKEN) {
            return Err(ProtocolError::MissingStepNumbering(KEY_DETAILED_SOLUTION));
        }
        if !outline.contains(STEP_ONE_TOKEN) {
            return Err(ProtocolError::MissingStepNumbering(KEY_SOLUTION_OUTLINE));
        }
        Ok(Self { detailed, outline })
    }

    pub fn to_wire(&self) -> String {
        format!(
            "{{\n\"{KEY_DETAILED_SOLUTION}\": {},\n\"{KEY_SOLUTION_OUTLINE}\": {}\n}}",
            json_str(&self.detailed),
            json_str(&self.outline)
        )
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

// ---------------------------------------------------------------------------
// Parsers
// ---------------------------------------------------------------------------

pub fn parse_decision(raw: &str) -> Result<Decision, ProtocolError> {
    let obj = find_object_with(raw, &[KEY_USE_PYTHON])
        .ok_or_else(|| malformed("no JSON object with a \"Use Python\" key"))?;
    let flag = as_text(&obj[KEY_USE_PYTHON])
        .ok_or_else(|| malformed("\"Use Python\" is not a string"))?;
    match flag.trim().to_ascii_lowercase().as_str() {
        "y" | "yes" => {
            let description = obj
                .get(KEY_DESCRIPTION)
                .and_then(as_text)
                .unwrap_or_default();
            Decision::use_python(description)
        }
        "n" | "no" => Ok(Decision::no_python()),
        other => Err(malformed(format!("\"Use Python\" must be \"y\" or \"n\", got \"{other}\""))),
    }
}

pub fn parse_codegen(raw: &str) -> Result<CodeArtifact, ProtocolError> {
    let obj = find_object_with(raw, &[KEY_PYTHON])
        .and_then(|o| match o.get(KEY_PYTHON) {
            Some(Value::Object(inner)) => Some(inner.clone()),
            _ => None,
        })
        .or_else(|| find_object_with(raw, &[KEY_PYTHON_CODE]))
        .ok_or_else(|| malformed("no JSON object with a \"Python Code\" key"))?;

    let code = obj
        .get(KEY_PYTHON_CODE)
        .and_then(as_text)
        .ok_or_else(|| malformed("\"Python Code\" missing or not a string"))?;
    let code = extract_fenced(&code);
    if code.trim().is_empty() {
        return Err(malformed("\"Python Code\" is empty"));
    }

    let vars = obj
        .get(KEY_RESULT_VARIABLE)
        .or_else(|| obj.get("Result Variables"))
        .ok_or_else(|| malformed("\"Result Variable\" missing"))?;
    let names: Vec<String> = match vars {
        Value::String(s) => split_names(s),
        Value::Array(items) => items
            .iter()
            .filter_map(|v| v.as_str())
            .flat_map(split_names)
            .collect(),
        _ => return Err(malformed("\"Result Variable\" must be a string")),
    };
    CodeArtifact::new(code, names)
}

fn split_names(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|n| !n.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn parse_tutor_turn(raw: &str) -> Result<TutorTurn, ProtocolError> {
    let obj = find_object_with(raw, &[KEY_EVALUATION, KEY_RESPONSE])
        .ok_or_else(|| malformed("no JSON object with the tutorbot response keys"))?;
    let field = |key: &str| -> Result<String, ProtocolError> {
        obj.get(key)
            .and_then(as_text)
            .ok_or_else(|| malformed(format!("\"{key}\" missing or not a string")))
    };

    let thoughts = field(KEY_THOUGHTS)?;
    let evaluation_raw = field(KEY_EVALUATION)?;
    let evaluation = leading_letter(&evaluation_raw)
        .and_then(EvaluationCode::from_letter)
        .ok_or_else(|| malformed(format!("evaluation \"{evaluation_raw}\" is not one of a..g")))?;
    let action_raw = field(KEY_ACTION)?;
    let action = leading_number(&action_raw)
        .and_then(ActionCode::new)
        .ok_or_else(|| malformed(format!("action \"{action_raw}\" is not one of 1..12")))?;
    let step_number = field(KEY_STEP_NUMBER)?;
    let step_raw = field(KEY_STEP_STATE)?;
    let step_state = leading_letter(&step_raw)
        .and_then(StepState::from_letter)
        .ok_or_else(|| malformed(format!("step state \"{step_raw}\" is not one of p/q/r/t")))?;
    let response = field(KEY_RESPONSE)?;
    if response.trim().is_empty() {
        return Err(malformed("\"Tutorbot Response\" is empty"));
    }
    if !validate_action(evaluation, action) {
        return Err(ProtocolError::InconsistentAction { evaluation, action });
    }
    Ok(TutorTurn {
        thoughts,
        evaluation,
        action,
        step_number,
        step_state,
        response,
    })
}

pub fn parse_enriched_solution(raw: &str) -> Result<EnrichedSolution, ProtocolError> {
    let obj = find_object_with(raw, &[KEY_DETAILED_SOLUTION, KEY_SOLUTION_OUTLINE])
        .ok_or_else(|| malformed("no JSON object with both solution fields"))?;
    let detailed = obj
        .get(KEY_DETAILED_SOLUTION)
        .and_then(as_text)
        .ok_or_else(|| malformed("\"Detailed Solution\" is not a string"))?;
    let outline = obj
        .get(KEY_SOLUTION_OUTLINE)
        .and_then(as_text)
        .ok_or_else(|| malformed("\"Solution Outline\" is not a string"))?;
    EnrichedSolution::new(detailed, outline)
}

/// Scalar fields sometimes arrive as bare numbers.
fn as_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn leading_letter(s: &str) -> Option<char> {
    let t = s.trim();
    let mut chars = t.chars();
    let c = chars.next()?;
    // "b", "b)" and "b) Evaluating Correct Response" are all accepted
    match chars.next() {
        None | Some(')') | Some(' ') | Some('.') => Some(c),
        _ => None,
    }
}

fn leading_number(s: &str) -> Option<u8> {
    let digits: String = s.trim().chars().take_while(char::is_ascii_digit).collect();
    let rest = &s.trim()[digits.len()..];
    if !(rest.is_empty() || rest.starts_with(')') || rest.starts_with(' ')) {
        return None;
    }
    digits.parse().ok()
}

// ---------------------------------------------------------------------------
// JSON location
// ---------------------------------------------------------------------------

/// Every balanced `{...}` region of `raw` that parses as a JSON object, in
/// order of their opening brace.
pub fn json_objects(raw: &str) -> impl Iterator<Item = Map<String, Value>> + '_ {
    let bytes = raw.as_bytes();
    (0..bytes.len())
        .filter(move |&i| bytes[i] == b'{')
        .filter_map(move |start| {
            let end = balanced_end(bytes, start)?;
            parse_object(&raw[start..=end])
        })
}

fn find_object_with(raw: &str, keys: &[&str]) -> Option<Map<String, Value>> {
    json_objects(raw).find(|o| keys.iter().all(|k| o.contains_key(*k)))
}

fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_object(text: &str) -> Option<Map<String, Value>> {
    let parsed = serde_json::from_str::<Value>(text)
        .ok()
        .or_else(|| serde_json::from_str::<Value>(&escape_raw_controls(text)).ok())?;
    match parsed {
        Value::Object(m) => Some(m),
        _ => None,
    }
}

/// Models often put literal newlines inside JSON strings (multi-line code).
/// Escape raw control characters that occur inside string literals.
fn escape_raw_controls(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 16);
    let mut in_string = false;
    let mut escaped = false;
    for c in text.chars() {
        if in_string {
            if escaped {
                escaped = false;
                out.push(c);
                continue;
            }
            match c {
                '\\' => {
                    escaped = true;
                    out.push(c);
                }
                '"' => {
                    in_string = false;
                    out.push(c);
                }
                '\n' => out.push_str("\\n"),
                '\r' => out.push_str("\\r"),
                '\t' => out.push_str("\\t"),
                c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
                c => out.push(c),
            }
        } else {
            if c == '"' {
                in_string = true;
            }
            out.push(c);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Code fences and identifiers
// ---------------------------------------------------------------------------

const FENCE: &str = "```";
const FENCE_LANGUAGES: &[&str] = &["python3", "python", "Python", "py"];

/// Strips a surrounding ```` ```python ... ``` ```` fence. Text without a
/// leading fence is returned trimmed.
pub fn extract_fenced(text: &str) -> String {
    let trimmed = text.trim_start();
    let Some(after_open) = trimmed.strip_prefix(FENCE) else {
        return text.trim().to_string();
    };
    let mut body = after_open.trim_start_matches([' ', '\t']);
    if let Some(lang) = FENCE_LANGUAGES.iter().find(|l| {
        body.strip_prefix(**l)
            .is_some_and(|rest| rest.is_empty() || rest.starts_with([' ', '\t', '\n', '\r']))
    }) {
        body = &body[lang.len()..];
    }
    body = body.trim_start_matches([' ', '\t']);
    body = body
        .strip_prefix("\r\n")
        .or_else(|| body.strip_prefix('\n'))
        .unwrap_or(body);
    let interior = match body.find(FENCE) {
        Some(end) => &body[..end],
        None => body,
    };
    interior
        .strip_suffix("\r\n")
        .or_else(|| interior.strip_suffix('\n'))
        .unwrap_or(interior)
        .to_string()
}

const PYTHON_KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class", "continue",
    "def", "del", "elif", "else", "except", "finally", "for", "from", "global", "if", "import", "in",
    "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return", "try", "while", "with",
    "yield",
];

/// ASCII Python identifier that is not a keyword.
pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    let Some(first) = chars.next() else {
        return false;
    };
    (first == '_' || first.is_ascii_alphabetic())
        && chars.all(|c| c == '_' || c.is_ascii_alphanumeric())
        && !PYTHON_KEYWORDS.contains(&name)
}

const FORBIDDEN_CALLS: &[&str] = &["input", "print"];

/// Finds a call to `input(` or `print(` outside string literals and comments.
pub fn find_forbidden_call(code: &str) -> Option<&'static str> {
    let chars: Vec<char> = code.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '"' | '\'' => {
                i = skip_string(&chars, i);
                continue;
            }
            c if c == '_' || c.is_alphabetic() => {
                let start = i;
                while i < chars.len() && (chars[i] == '_' || chars[i].is_alphanumeric()) {
                    i += 1;
                }
                // string prefixes such as f"..", rb'..'
                if i < chars.len() && (chars[i] == '"' || chars[i] == '\'') && i - start <= 2 {
                    i = skip_string(&chars, i);
                    continue;
                }
                let word: String = chars[start..i].iter().collect();
                let attribute = start > 0 && chars[start - 1] == '.';
                if !attribute {
                    if let Some(name) = FORBIDDEN_CALLS.iter().find(|f| **f == word) {
                        let mut j = i;
                        while j < chars.len() && (chars[j] == ' ' || chars[j] == '\t') {
                            j += 1;
                        }
                        if j < chars.len() && chars[j] == '(' {
                            return Some(name);
                        }
                    }
                }
                continue;
            }
            _ => {}
        }
        i += 1;
    }
    None
}

/// Returns the index just past the string literal opening at `start`.
fn skip_string(chars: &[char], start: usize) -> usize {
    let quote = chars[start];
    let triple = chars.len() >= start + 3 && chars[start + 1] == quote && chars[start + 2] == quote;
    let mut i = if triple { start + 3 } else { start + 1 };
    while i < chars.len() {
        match chars[i] {
            '\\' => i += 2,
            c if c == quote => {
                if !triple {
                    return i + 1;
                }
                if i + 2 < chars.len() && chars[i + 1] == quote && chars[i + 2] == quote {
                    return i + 3;
                }
                i += 1;
            }
            '\n' if !triple => return i + 1,
            _ => i += 1,
        }
    }
    chars.len()
}
