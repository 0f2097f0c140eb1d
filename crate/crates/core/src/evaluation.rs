//! Paired correct/incorrect test cases and the four binary metrics.
//!
//! Code compilation is judged automatically, per code-generation event.
//! Python usage and non-usage get automatic proposals from the traces.
//! Calculation verification comes only from SME labels. Labels live in an
//! append-only journal; the last entry for a (case, metric) pair wins.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::ChatBackend;
use crate::conversation::{Conversation, ConversationStatus, Speaker};
use crate::orchestrator::{Session, StepError, TutorEngine};
use crate::protocol::EnrichedSolution;
use crate::sandbox::CodeExecutor;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("question `{id}` has no {kind} answer")]
    MissingAnswer { id: String, kind: AnswerKind },
    #[error("session record for case `{0}` is incomplete: {1}")]
    IncompleteRecord(String, String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Correct,
    Incorrect,
}

impl fmt::Display for AnswerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Correct => "correct",
            Self::Incorrect => "incorrect",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub question_id: String,
    pub answer: String,
    pub kind: AnswerKind,
    /// Student messages sent in order.
    pub student_turns: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerPair {
    #[serde(default)]
    pub correct: Option<String>,
    #[serde(default)]
    pub incorrect: Option<String>,
}

pub fn case_id(question_id: &str, kind: AnswerKind) -> String {
    format!("{question_id}:{kind}")
}

/// Two cases per question: one answered correctly, one incorrectly.
pub fn build_cases(
    question_ids: &[&str],
    answers: &HashMap<String, AnswerPair>,
) -> Result<Vec<TestCase>, EvalError> {
    let mut cases = Vec::with_capacity(question_ids.len() * 2);
    for &qid in question_ids {
        let pair = answers.get(qid);
        for kind in [AnswerKind::Correct, AnswerKind::Incorrect] {
            let answer = pair
                .and_then(|p| match kind {
                    AnswerKind::Correct => p.correct.clone(),
                    AnswerKind::Incorrect => p.incorrect.clone(),
                })
                .filter(|a| !a.trim().is_empty())
                .ok_or_else(|| EvalError::MissingAnswer {
                    id: qid.to_string(),
                    kind,
                })?;
            cases.push(TestCase {
                id: case_id(qid, kind),
                question_id: qid.to_string(),
                student_turns: vec![answer.clone()],
                answer,
                kind,
            });
        }
    }
    Ok(cases)
}

pub fn load_cases(path: impl AsRef<Path>) -> Result<Vec<TestCase>, EvalError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| EvalError::Parse { line: i + 1, message };
        let case: TestCase = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if case.student_turns.is_empty() {
            return Err(parse_err(format!("case {} has no student turns", case.id)));
        }
        if !seen.insert(case.id.clone()) {
            return Err(parse_err(format!("duplicate case id {}", case.id)));
        }
        out.push(case);
    }
    Ok(out)
}

pub fn save_cases(path: impl AsRef<Path>, cases: &[TestCase]) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for case in cases {
        let line = serde_json::to_string(case).expect("case serializes");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Sends the case's scripted student turns to a fresh session.
pub async fn run_case(
    engine: &TutorEngine,
    backend: &dyn ChatBackend,
    case: &TestCase,
    question: &str,
    solution: &EnrichedSolution,
) -> Result<Conversation, StepError> {
    let mut session = Session::new(
        Conversation::new(case.id.as_str(), case.question_id.as_str()),
        question,
        solution.clone(),
    );
    session.conversation.provenance.template_checksums = engine.templates().checksums();
    session.conversation.provenance.max_repairs = engine.config().max_repairs;
    session.conversation.provenance.tutor_params = Some(engine.config().tutor_params.clone());
    for turn in &case.student_turns {
        if session.finished {
            break;
        }
        engine.step(&mut session, turn, backend).await?;
    }
    let mut conversation = session.conversation;
    conversation.status = if session.finished {
        ConversationStatus::Complete
    } else {
        ConversationStatus::Truncated
    };
    Ok(conversation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PythonUsageAccuracy,
    NonUsageOfPython,
    CodeCompilation,
    CalculationVerification,
}

impl Metric {
    /// Report column order.
    pub const ALL: [Metric; 4] = [
        Self::PythonUsageAccuracy,
        Self::NonUsageOfPython,
        Self::CodeCompilation,
        Self::CalculationVerification,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Self::PythonUsageAccuracy => "Python Usage Accuracy",
            Self::NonUsageOfPython => "Non-Usage of Python",
            Self::CodeCompilation => "Code Compilation",
            Self::CalculationVerification => "Calculation Verification",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Auto,
    Sme,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub value: u8,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompilationTally {
    pub events: u32,
    pub compiled: u32,
}

/// Judgment of one case. A metric missing from `entries` is n/a for the
/// case and stays out of that metric's denominator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseJudgment {
    pub case_id: String,
    pub entries: BTreeMap<Metric, MetricEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compilation: Option<CompilationTally>,
}

impl CaseJudgment {
    pub fn new(case_id: impl Into<String>) -> Self {
        Self {
            case_id: case_id.into(),
            entries: BTreeMap::new(),
            compilation: None,
        }
    }

    pub fn value(&self, metric: Metric) -> Option<u8> {
        self.entries.get(&metric).map(|e| e.value)
    }

    fn set(&mut self, metric: Metric, value: bool, source: Source, note: Option<String>) {
        self.entries.insert(
            metric,
            MetricEntry {
                value: value as u8,
                source,
                note,
            },
        );
    }
}

/// Does the message carry a number (an answer to check)?
pub fn contains_numeric_answer(text: &str) -> bool {
    text.chars().any(|c| c.is_ascii_digit())
}

/// Automatic judgment from a session record.
pub async fn judge_case(
    case_id: &str,
    record: &Conversation,
    executor: &dyn CodeExecutor,
) -> Result<CaseJudgment, EvalError> {
    let incomplete = |why: String| EvalError::IncompleteRecord(case_id.to_string(), why);
    record.check_well_formed().map_err(incomplete)?;
    if record.traces.is_empty() {
        return Err(incomplete("no tutorbot turns".into()));
    }

    let mut judgment = CaseJudgment::new(case_id);
    let mut tally = CompilationTally {
        events: 0,
        compiled: 0,
    };
    let (mut numeric, mut numeric_used) = (0, 0);
    let (mut plain, mut plain_skipped) = (0, 0);
    for (&idx, trace) in &record.traces {
        if let Some(artifact) = &trace.artifact {
            tally.events += 1;
            if executor.check_compiles(&artifact.code).await {
                tally.compiled += 1;
            }
        }
        let student = &record.turns[idx - 1];
        debug_assert_eq!(student.speaker, Speaker::Student);
        if contains_numeric_answer(&student.text) {
            numeric += 1;
            numeric_used += trace.decision.use_python as u32;
        } else {
            plain += 1;
            plain_skipped += (!trace.decision.use_python) as u32;
        }
    }

    if tally.events > 0 {
        judgment.set(
            Metric::CodeCompilation,
            tally.compiled == tally.events,
            Source::Auto,
            Some(format!("{}/{} artifacts compile", tally.compiled, tally.events)),
        );
        judgment.compilation = Some(tally);
    }
    if numeric > 0 {
        judgment.set(
            Metric::PythonUsageAccuracy,
            numeric_used == numeric,
            Source::Auto,
            Some(format!("{numeric_used}/{numeric} numeric turns used Python")),
        );
    }
    if plain > 0 {
        judgment.set(
            Metric::NonUsageOfPython,
            plain_skipped == plain,
            Source::Auto,
            Some(format!("{plain_skipped}/{plain} non-numeric turns skipped Python")),
        );
    }
    Ok(judgment)
}

/// One SME label. `value: null` marks the metric n/a for the case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    #[serde(default)]
    pub case_id: String,
    pub metric: Metric,
    pub value: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Explicit compilation counts (code_compilation only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compiled: Option<u32>,
}

impl LabelRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.case_id.is_empty() {
            return Err("case_id is empty".into());
        }
        if let Some(v) = self.value {
            if v > 1 {
                return Err(format!("metric value {v} is not 0 or 1"));
            }
        }
        match (self.events, self.compiled) {
            (Some(_), Some(_)) | (None, None) => {}
            _ => return Err("events and compiled must be given together".into()),
        }
        if let (Some(e), Some(c)) = (self.events, self.compiled) {
            if self.metric != Metric::CodeCompilation {
                return Err("counts are only meaningful for code_compilation".into());
            }
            if c > e || e == 0 {
                return Err(format!("invalid compilation counts {c}/{e}"));
            }
        }
        Ok(())
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>, EvalError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| EvalError::Parse { line: i + 1, message };
        let record: LabelRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        record.validate().map_err(parse_err)?;
        out.push(record);
    }
    Ok(out)
}

/// Append-only label journal; a single writer per file.
pub struct LabelJournal {
    path: std::path::PathBuf,
    lock: std::sync::Mutex<()>,
}

impl LabelJournal {
    pub fn new(path: impl Into<std::path::PathBuf>) -> Self {
        Self {
            path: path.into(),
            lock: std::sync::Mutex::new(()),
        }
    }

    pub fn append(&self, record: &LabelRecord) -> Result<(), EvalError> {
        record
            .validate()
            .map_err(|message| EvalError::Parse { line: 0, message })?;
        let line = serde_json::to_string(record).expect("label serializes");
        let _guard = self.lock.lock().unwrap();
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(file, "{line}")?;
        Ok(())
    }

    pub fn load(&self) -> Result<Vec<LabelRecord>, EvalError> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        load_labels(&self.path)
    }
}

/// Applies labels for this case in journal order (last write wins).
pub fn apply_labels(judgment: &mut CaseJudgment, labels: &[LabelRecord]) {
    let case_id = judgment.case_id.clone();
    for label in labels.iter().filter(|l| l.case_id == case_id) {
        let Some(value) = label.value else {
            judgment.entries.remove(&label.metric);
            if label.metric == Metric::CodeCompilation {
                judgment.compilation = None;
            }
            continue;
        };
        let value = value == 1;
        if label.metric == Metric::CodeCompilation {
            let tally = match (label.events, label.compiled) {
                (Some(events), Some(compiled)) => CompilationTally { events, compiled },
                _ => {
                    // move the tally only as far as needed to agree with the label
                    let current = judgment.compilation.unwrap_or(CompilationTally {
                        events: 1,
                        compiled: value as u32,
                    });
                    let agrees = (current.compiled == current.events) == value;
                    match (agrees, value) {
                        (true, _) => current,
                        (false, true) => CompilationTally {
                            compiled: current.events,
                            ..current
                        },
                        (false, false) => CompilationTally {
                            compiled: current.events - 1,
                            ..current
                        },
                    }
                }
            };
            judgment.compilation = Some(tally);
            judgment.set(
                Metric::CodeCompilation,
                tally.compiled == tally.events,
                Source::Sme,
                label.note.clone(),
            );
        } else {
            judgment.set(label.metric, value, Source::Sme, label.note.clone());
        }
    }
}

/// Judgments built from labels alone, one per case.
pub fn judgments_from_labels(case_ids: &[&str], labels: &[LabelRecord]) -> Vec<CaseJudgment> {
    case_ids
        .iter()
        .map(|id| {
            let mut j = CaseJudgment::new(*id);
            apply_labels(&mut j, labels);
            j
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub numerator: u64,
    pub denominator: u64,
    /// `numerator / denominator`; absent when nothing was applicable.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: usize,
    pub metrics: BTreeMap<Metric, MetricSummary>,
}

pub fn aggregate(judgments: &[CaseJudgment]) -> MetricsReport {
    let mut counts: BTreeMap<Metric, (u64, u64)> = Metric::ALL.iter().map(|m| (*m, (0, 0))).collect();
    for j in judgments {
        for (metric, entry) in &j.entries {
            let slot = counts.get_mut(metric).expect("all metrics present");
            match (metric, j.compilation) {
                (Metric::CodeCompilation, Some(t)) => {
                    slot.0 += t.compiled as u64;
                    slot.1 += t.events as u64;
                }
                _ => {
                    slot.0 += entry.value as u64;
                    slot.1 += 1;
                }
            }
        }
    }
    MetricsReport {
        cases: judgments.len(),
        metrics: counts
            .into_iter()
            .map(|(m, (num, den))| {
                let mean = (den > 0).then(|| num as f64 / den as f64);
                (
                    m,
                    MetricSummary {
                        numerator: num,
                        denominator: den,
                        mean,
                    },
                )
            })
            .collect(),
    }
}

/// Two decimals, trailing zeros dropped but one decimal kept: 1.0, 0.97.
pub fn format_score(mean: Option<f64>) -> String {
    let Some(m) = mean else {
        return "n/a".to_string();
    };
    let s = format!("{m:.2}");
    let trimmed = s.trim_end_matches('0');
    if trimmed.ends_with('.') {
        format!("{trimmed}0")
    } else {
        trimmed.to_string()
    }
}

impl MetricsReport {
    pub fn score(&self, metric: Metric) -> String {
        format_score(self.metrics.get(&metric).and_then(|s| s.mean))
    }

    /// Fixed-width table: titles, scores, then exact fractions.
    pub fn to_table(&self) -> String {
        let widths: Vec<usize> = Metric::ALL.iter().map(|m| m.title().len()).collect();
        let row = |cells: Vec<String>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:^w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        let titles = row(Metric::ALL.iter().map(|m| m.title().to_string()).collect());
        let rule = "-".repeat(titles.len());
        let scores = row(Metric::ALL.iter().map(|m| self.score(*m)).collect());
        let fractions = row(
            Metric::ALL
                .iter()
                .map(|m| {
                    let s = self.metrics[m];
                    format!("{}/{}", s.numerator, s.denominator)
                })
                .collect(),
        );
        format!("{titles}\n{rule}\n{scores}\n{fractions}\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(ids: &[&str]) -> HashMap<String, AnswerPair> {
        ids.iter()
            .map(|id| {
                (
                    id.to_string(),
                    AnswerPair {
                        correct: Some(format!("{id} right")),
                        incorrect: Some(format!("{id} wrong")),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn cases_come_in_pairs() {
        let ids: Vec<String> = (0..25).map(|i| format!("q{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        assert_eq!(build_cases(&refs, &pairs(&refs)).unwrap().len(), 50);

        let one = build_cases(&["q"], &pairs(&["q"])).unwrap();
        assert_eq!(
            one.iter().map(|c| c.kind).collect::<Vec<_>>(),
            vec![AnswerKind::Correct, AnswerKind::Incorrect]
        );
    }

    #[test]
    fn missing_incorrect_answer() {
        let mut answers = pairs(&["q"]);
        answers.get_mut("q").unwrap().incorrect = None;
        assert!(matches!(
            build_cases(&["q"], &answers),
            Err(EvalError::MissingAnswer { kind: AnswerKind::Incorrect, .. })
        ));
    }

    fn judgment(id: &str, value: u8) -> CaseJudgment {
        let mut j = CaseJudgment::new(id);
        for m in [Metric::PythonUsageAccuracy, Metric::NonUsageOfPython, Metric::CalculationVerification] {
            j.set(m, value == 1, Source::Sme, None);
        }
        j.set(Metric::CodeCompilation, value == 1, Source::Auto, None);
        j.compilation = Some(CompilationTally {
            events: 1,
            compiled: value as u32,
        });
        j
    }

    #[test]
    fn aggregate_extremes() {
        let zeros: Vec<_> = (0..10).map(|i| judgment(&i.to_string(), 0)).collect();
        let r = aggregate(&zeros);
        assert!(Metric::ALL.iter().all(|m| r.score(*m) == "0.0"));

        let r = aggregate(&[judgment("a", 1)]);
        assert!(Metric::ALL.iter().all(|m| r.score(*m) == "1.0"));

        let r = aggregate(&[]);
        assert_eq!(r.cases, 0);
        assert!(r.metrics.values().all(|s| s.denominator == 0 && s.mean.is_none()));
    }

    #[test]
    fn score_formatting() {
        assert_eq!(format_score(Some(1.0)), "1.0");
        assert_eq!(format_score(Some(0.97)), "0.97");
        assert_eq!(format_score(Some(0.5)), "0.5");
        assert_eq!(format_score(Some(2.0 / 3.0)), "0.67");
        assert_eq!(format_score(None), "n/a");
    }

    #[test]
    fn labels_override_last_write_wins() {
        let mut j = CaseJudgment::new("q:correct");
        j.set(Metric::PythonUsageAccuracy, false, Source::Auto, None);
        let label = |metric, value| LabelRecord {
            case_id: "q:correct".into(),
            metric,
            value,
            note: None,
            events: None,
            compiled: None,
        };
        apply_labels(
            &mut j,
            &[
                label(Metric::PythonUsageAccuracy, Some(0)),
                label(Metric::PythonUsageAccuracy, Some(1)),
                label(Metric::CalculationVerification, Some(1)),
                label(Metric::CalculationVerification, None),
            ],
        );
        let e = &j.entries[&Metric::PythonUsageAccuracy];
        assert_eq!((e.value, e.source), (1, Source::Sme));
        assert!(!j.entries.contains_key(&Metric::CalculationVerification));
    }

    #[test]
    fn compilation_override_without_counts() {
        let mut j = CaseJudgment::new("c");
        j.set(Metric::CodeCompilation, true, Source::Auto, None);
        j.compilation = Some(CompilationTally { events: 3, compiled: 3 });
        apply_labels(
            &mut j,
            &[LabelRecord {
                case_id: "c".into(),
                metric: Metric::CodeCompilation,
                value: Some(0),
                note: None,
                events: None,
                compiled: None,
            }],
        );
        assert_eq!(j.compilation, Some(CompilationTally { events: 3, compiled: 2 }));
        assert_eq!(j.value(Metric::CodeCompilation), Some(0));
    }

    #[test]
    fn label_validation() {
        let mut l = LabelRecord {
            case_id: "c".into(),
            metric: Metric::CalculationVerification,
            value: Some(2),
            note: None,
            events: None,
            compiled: None,
        };
        assert!(l.validate().is_err());
        l.value = Some(1);
        l.events = Some(2);
        l.compiled = Some(1);
        assert!(l.validate().is_err());
    }
}
