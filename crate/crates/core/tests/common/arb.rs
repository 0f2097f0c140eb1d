//! proptest strategies for wire records and conversations.

use proptest::prelude::*;

use soliloquy_core::conversation::{Conversation, ConversationStatus, Provenance, Speaker, VisibleTurn};
use soliloquy_core::orchestrator::{ErrorMode, Exchange, SoliloquyState, SoliloquyTrace};
use soliloquy_core::protocol::{ActionCode, CodeArtifact, Decision, EvaluationCode, StepState, TutorTurn};
use soliloquy_core::sandbox::{CapturedValue, ExecutionResult, ExecutionStatus};

pub fn text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[ -~]{0,40}",
        "\\PC{0,30}",
        "[a-z \n\t\"\\\\{}]{0,30}",
    ]
}

pub fn nonblank() -> impl Strategy<Value = String> {
    text().prop_filter("non-blank", |s| !s.trim().is_empty())
}

pub fn identifier() -> impl Strategy<Value = String> {
    "[a-z_][a-z0-9_]{0,8}".prop_filter("not a keyword", |s| soliloquy_core::protocol::is_identifier(s))
}

pub fn evaluation_pair() -> impl Strategy<Value = (EvaluationCode, ActionCode)> {
    prop::sample::select(
        EvaluationCode::ALL
            .iter()
            .flat_map(|e| e.permitted_actions().iter().map(move |a| (*e, ActionCode::new(*a).unwrap())))
            .collect::<Vec<_>>(),
    )
}

pub fn step_state() -> impl Strategy<Value = StepState> {
    prop::sample::select(vec![
        StepState::NotApplicable,
        StepState::InProgress,
        StepState::StepFinished,
        StepState::ProblemFinished,
    ])
}

pub fn tutor_turn() -> impl Strategy<Value = TutorTurn> {
    (text(), evaluation_pair(), "[1-9]", step_state(), nonblank()).prop_map(
        |(thoughts, (evaluation, action), step_number, step_state, response)| TutorTurn {
            thoughts,
            evaluation,
            action,
            step_number,
            step_state,
            response,
        },
    )
}

pub fn code() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-z]{1,6} = [0-9]{1,4}( \\* [0-9.]{1,4})?", 1..5).prop_map(|lines| lines.join("\n"))
}

pub fn artifact() -> impl Strategy<Value = CodeArtifact> {
    (code(), prop::collection::vec(identifier(), 1..4))
        .prop_map(|(code, vars)| CodeArtifact::new(code, vars).unwrap())
}

pub fn value() -> impl Strategy<Value = CapturedValue> {
    prop_oneof![
        any::<bool>().prop_map(CapturedValue::Bool),
        any::<i64>().prop_map(CapturedValue::Int),
        any::<f64>()
            .prop_filter("finite", |x| x.is_finite())
            .prop_map(CapturedValue::Float),
        text().prop_map(CapturedValue::Text),
        text().prop_map(|repr| CapturedValue::Repr { repr }),
    ]
}

pub fn execution(vars: Vec<String>) -> impl Strategy<Value = ExecutionResult> {
    let n = vars.len();
    (prop::collection::vec(value(), n), any::<bool>(), text()).prop_map(move |(values, ok, stderr)| {
        if ok {
            ExecutionResult {
                status: ExecutionStatus::Ok,
                values: vars.iter().cloned().zip(values).collect(),
                stderr,
            }
        } else {
            ExecutionResult::failed(ExecutionStatus::RuntimeError, stderr)
        }
    })
}

pub fn trace() -> impl Strategy<Value = SoliloquyTrace> {
    let python = (nonblank(), artifact()).prop_flat_map(|(description, artifact)| {
        let vars = artifact.result_variables.clone();
        (Just(description), Just(artifact), execution(vars))
    });
    (prop::option::of(python), tutor_turn(), text(), 0u32..4).prop_map(|(python, turn, prompt, repairs)| {
        let exchange = |state, reply: String| Exchange {
            state,
            prompt: prompt.clone(),
            reply,
            error: None,
        };
        match python {
            Some((description, artifact, execution)) => SoliloquyTrace {
                decision: Decision::use_python(description.clone()).unwrap(),
                exchanges: vec![
                    exchange(SoliloquyState::Deciding, Decision::use_python(description).unwrap().to_wire()),
                    exchange(SoliloquyState::UsePython, artifact.to_wire()),
                    exchange(SoliloquyState::ReceivedPython, turn.to_wire()),
                ],
                artifact: Some(artifact),
                execution: Some(execution),
                tutor_turn: turn,
                repair_attempts: repairs,
            },
            None => SoliloquyTrace {
                decision: Decision::no_python(),
                exchanges: vec![
                    exchange(SoliloquyState::Deciding, Decision::no_python().to_wire()),
                    exchange(SoliloquyState::NoPython, turn.to_wire()),
                ],
                artifact: None,
                execution: None,
                tutor_turn: turn,
                repair_attempts: repairs,
            },
        }
    })
}

pub fn conversation() -> impl Strategy<Value = Conversation> {
    (
        "[a-z0-9-]{1,12}",
        prop::collection::vec((nonblank(), trace()), 0..5),
        any::<Option<u64>>(),
        prop::option::of(0.0f64..=1.0),
        prop::collection::vec(prop::option::of(prop::sample::select(ErrorMode::ALL.to_vec())), 0..5),
        prop::sample::select(vec![
            ConversationStatus::Complete,
            ConversationStatus::Truncated,
            ConversationStatus::Failed,
        ]),
    )
        .prop_map(|(id, rounds, seed, error_rate, modes, status)| {
            let mut c = Conversation::new(format!("{id}-r0"), id);
            for (student, trace) in rounds {
                c.turns.push(VisibleTurn {
                    speaker: Speaker::Student,
                    text: student,
                });
                c.turns.push(VisibleTurn {
                    speaker: Speaker::Tutorbot,
                    text: trace.tutor_turn.response.clone(),
                });
                c.traces.insert(c.turns.len() - 1, trace);
            }
            c.provenance = Provenance {
                seed,
                error_rate,
                max_repairs: 3,
                student_error_modes: modes,
                ..Provenance::default()
            };
            c.status = status;
            if status == ConversationStatus::Failed {
                c.failure = Some("protocol failure".into());
            }
            c
        })
}
