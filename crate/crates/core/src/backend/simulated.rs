//! A rule-based stand-in for the chat model.
//!
//! Replies are a pure function of the request, so runs against it are
//! reproducible and can be recorded into replay fixtures. It recognises the
//! built-in templates by their wording and answers each in the expected
//! schema: the student alternates between asking for help and offering a
//! numeric answer, and the tutorbot verifies every numeric answer with code.

use async_trait::async_trait;

use super::{check_messages, BackendError, ChatBackend, ChatMessage, CompletionParams, Role};
use crate::orchestrator::ERROR_DIRECTIVE_PREFIX;
use crate::protocol::{
    CodeArtifact, Decision, EnrichedSolution, EvaluationCode, StepState, TutorTurn,
};
use crate::protocol::ActionCode;

#[derive(Debug, Clone, Copy, Default)]
pub struct SimulatedBackend;

const APPROVAL: &str = "Correct!";

#[async_trait]
impl ChatBackend for SimulatedBackend {
    async fn complete(
        &self,
        messages: &[ChatMessage],
        _params: &CompletionParams,
    ) -> Result<String, BackendError> {
        check_messages(messages)?;
        let prompt = messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        Ok(reply_to(prompt))
    }
}

fn reply_to(prompt: &str) -> String {
    if prompt.contains("You are a high school student") {
        student(prompt)
    } else if prompt.contains("Function of \"Use Python\"") {
        deciding(prompt)
    } else if prompt.contains("You are an AI-powered code generation bot") {
        codegen(prompt)
    } else if prompt.contains("The output from Tutorbot's Python code is the following:") {
        received(prompt)
    } else if prompt.contains("Given a textbook problem and its textbook solution") {
        enrich(prompt)
    } else if prompt.contains("Put all the output in the following JSON structure") {
        no_python(prompt)
    } else {
        "I'm not sure how to respond to that.".to_string()
    }
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> &'a str {
    let Some(i) = text.find(start) else {
        return "";
    };
    let rest = &text[i + start.len()..];
    match rest.find(end) {
        Some(j) => &rest[..j],
        None => rest,
    }
}

fn numbers(text: &str) -> Vec<f64> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars().chain(std::iter::once(' ')) {
        if c.is_ascii_digit() || (c == '.' && !current.is_empty() && !current.contains('.')) {
            current.push(c);
        } else if !current.is_empty() {
            if let Ok(v) = current.trim_end_matches('.').parse() {
                out.push(v);
            }
            current.clear();
        }
    }
    out
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

struct HistoryView<'a> {
    lines: Vec<&'a str>,
}

impl<'a> HistoryView<'a> {
    fn new(history: &'a str) -> Self {
        Self {
            lines: history.lines().collect(),
        }
    }

    fn tutor_turns(&self) -> usize {
        self.lines.iter().filter(|l| l.starts_with("Tutorbot: ")).count()
    }

    fn approvals(&self) -> usize {
        self.lines
            .iter()
            .filter(|l| l.starts_with(&format!("Tutorbot: {APPROVAL}")))
            .count()
    }

    fn last_student(&self) -> &'a str {
        self.lines
            .iter()
            .rev()
            .find_map(|l| l.strip_prefix("Student: "))
            .unwrap_or("")
    }
}

/// The value the simulated student should report for a step.
fn expected_value(question: &str, step: usize) -> f64 {
    let base = numbers(question).first().copied().unwrap_or(10.0);
    let v = base * (step as f64) * 1.25;
    (v * 1000.0).round() / 1000.0
}

fn step_count(solution: &str) -> usize {
    (1..)
        .take_while(|k| solution.contains(&format!("Step {k})")))
        .count()
        .max(1)
}

const HISTORY_START: &str = "The current conversation history is as follows:\n\"";

fn student(prompt: &str) -> String {
    let question = between(prompt, "The question is \"", "\".\n");
    let history = HistoryView::new(between(prompt, HISTORY_START, "\"\n\nGive only one response"));
    let turns = history.tutor_turns();
    if turns == 0 {
        return format!("Hi! Can you help me with this question? {question}");
    }
    if turns % 2 == 1 {
        return "Which equation should I use for this step?".to_string();
    }
    let step = history.approvals() + 1;
    let correct = expected_value(question, step);
    if prompt.contains(ERROR_DIRECTIVE_PREFIX) {
        format!("I got {} for this step, I think the answer is {}.", fmt_num(correct * 1.5), fmt_num(correct * 1.5))
    } else {
        format!("I think the answer is {}.", fmt_num(correct))
    }
}

fn tutor_context<'a>(prompt: &'a str, history_end: &str) -> (String, usize, HistoryView<'a>) {
    let question = between(prompt, "The student's question is the following:\n\"", "\"\n").to_string();
    let solution = between(prompt, "The step-by-step solution for the question is the following:\n\"", "\"\nGuide");
    let history = HistoryView::new(between(prompt, HISTORY_START, history_end));
    (question, step_count(solution), history)
}

fn deciding(prompt: &str) -> String {
    let (question, _, history) = tutor_context(prompt, "\"\n\nFunction of");
    let last = history.last_student();
    if !(last.contains("answer is") || last.contains("I got")) {
        return Decision::no_python().to_wire();
    }
    let student_value = numbers(last).last().copied().unwrap_or(0.0);
    let step = history.approvals() + 1;
    let expected = expected_value(&question, step);
    Decision::use_python(format!(
        "Verify the student's value {} against the expected value {} for step {step} of the problem.",
        fmt_num(student_value),
        fmt_num(expected)
    ))
    .expect("non-empty description")
    .to_wire()
}

fn codegen(prompt: &str) -> String {
    let description = between(prompt, "The description of the desired calculation is the following:\n\"", "\"\n");
    let student = between(description, "student's value ", " ");
    let expected = between(description, "expected value ", " ");
    let code = format!(
        "import math\n# student's reported value\nstudent_value = {student}\n# reference value for this step\nexpected_value = {expected}\nanswer_ok = math.isclose(student_value, expected_value, rel_tol=0.01)"
    );
    CodeArtifact::new(code, vec!["answer_ok".into(), "expected_value".into()])
        .expect("valid simulated artifact")
        .to_wire()
}

fn turn(
    thoughts: &str,
    evaluation: EvaluationCode,
    action: u8,
    step: usize,
    state: StepState,
    response: String,
) -> String {
    TutorTurn {
        thoughts: thoughts.to_string(),
        evaluation,
        action: ActionCode::new(action).expect("valid action"),
        step_number: step.to_string(),
        step_state: state,
        response,
    }
    .to_wire()
}

fn received(prompt: &str) -> String {
    let (_, steps, history) = tutor_context(prompt, "\"\n\nThe description of the Tutorbot");
    let output = between(prompt, "The output from Tutorbot's Python code is the following:\n\"", "\"\n");
    let step = history.approvals() + 1;
    let expected = output
        .lines()
        .find_map(|l| l.strip_prefix("expected_value = "))
        .unwrap_or("the reference value");
    if output.contains("answer_ok = True") {
        let state = if step >= steps {
            StepState::ProblemFinished
        } else {
            StepState::StepFinished
        };
        let response = if state == StepState::ProblemFinished {
            format!("{APPROVAL} That matches. You have solved the whole problem, well done!")
        } else {
            format!("{APPROVAL} That matches. Let's move on to step {}.", step + 1)
        };
        turn("The Python check confirms the student's value.", EvaluationCode::Correct, 3, step, state, response)
    } else if output.starts_with("execution failed") {
        turn(
            "The calculation could not be checked.",
            EvaluationCode::Ambiguous,
            6,
            step,
            StepState::InProgress,
            "Could you walk me through how you got that number?".to_string(),
        )
    } else {
        turn(
            &format!("The Python check gives {expected}, which does not match the student's value."),
            EvaluationCode::Incorrect,
            1,
            step,
            StepState::InProgress,
            "That's not quite right. Check your formula and your unit conversions, then try again.".to_string(),
        )
    }
}

fn no_python(prompt: &str) -> String {
    let (_, _, history) = tutor_context(prompt, "\"\n\nPut all the output");
    let step = history.approvals() + 1;
    if history.tutor_turns() == 0 {
        return turn(
            "The student has just shared the problem.",
            EvaluationCode::Inquiry,
            11,
            step,
            StepState::InProgress,
            "Happy to help! Let's start by listing the quantities the problem gives us.".to_string(),
        );
    }
    turn(
        "The student is asking for help with the current step.",
        EvaluationCode::Inquiry,
        8,
        step,
        StepState::InProgress,
        format!("Here's a hint for step {step}: relate the known quantities with the equation for this step."),
    )
}

fn enrich(prompt: &str) -> String {
    let solution = between(prompt, "The solution is the following:\n\"", "\"\n");
    let first = solution.split(['.', '\n']).next().unwrap_or("").trim();
    EnrichedSolution::new(
        format!(
            "Step 1) Write down the known values given in the problem. Step 2) Choose the relation that connects them: {first}. Step 3) Substitute the values and solve for the unknown."
        ),
        "Step 1) List the knowns. Step 2) Pick the governing equation. Step 3) Solve for the unknown.",
    )
    .expect("numbered")
    .to_wire()
}
