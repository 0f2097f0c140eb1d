//! JSON bodies exchanged with the session service.

use serde::{Deserialize, Serialize};

use crate::conversation::VisibleTurn;
use crate::evaluation::{CaseJudgment, LabelRecord};
use crate::orchestrator::{SoliloquyTrace, StepFailure};
use crate::protocol::{EnrichedSolution, StepState};

/// Solution supplied inline: plain text, or an already enriched pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InlineSolution {
    Text(String),
    Enriched { detailed: String, outline: String },
}

impl InlineSolution {
    /// Plain text is used as both the detailed solution and the outline.
    pub fn into_enriched(self) -> Result<EnrichedSolution, String> {
        let (detailed, outline) = match self {
            Self::Text(t) => (t.clone(), t),
            Self::Enriched { detailed, outline } => (detailed, outline),
        };
        if detailed.trim().is_empty() {
            return Err("solution is empty".into());
        }
        Ok(EnrichedSolution { detailed, outline })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StartSessionRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<InlineSolution>,
}

impl StartSessionRequest {
    pub fn by_id(id: impl Into<String>) -> Self {
        Self {
            question_id: Some(id.into()),
            ..Self::default()
        }
    }

    pub fn inline(question: impl Into<String>, solution: InlineSolution) -> Self {
        Self {
            question_id: None,
            question: Some(question.into()),
            solution: Some(solution),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentMessage {
    pub text: String,
}

/// Everything a student sees after one message. Nothing from the soliloquy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentReply {
    pub response: String,
    pub step_state: StepState,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum TraceView {
    Complete {
        turn: usize,
        trace: SoliloquyTrace,
    },
    Failed {
        turn: usize,
        failure: StepFailure,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptView {
    pub session_id: String,
    pub turns: Vec<VisibleTurn>,
    pub finished: bool,
}

/// SME labels for a session; the case id defaults to the session id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentSubmission {
    pub labels: Vec<LabelRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentView {
    pub session_id: String,
    pub judgment: CaseJudgment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub sessions: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solution_forms() {
        let r: StartSessionRequest =
            serde_json::from_str(r#"{"question":"q","solution":"Step 1) x"}"#).unwrap();
        assert_eq!(r.solution, Some(InlineSolution::Text("Step 1) x".into())));
        let r: StartSessionRequest =
            serde_json::from_str(r#"{"question":"q","solution":{"detailed":"d","outline":"o"}}"#).unwrap();
        let s = r.solution.unwrap().into_enriched().unwrap();
        assert_eq!((s.detailed.as_str(), s.outline.as_str()), ("d", "o"));
    }

    #[test]
    fn reply_has_three_fields() {
        let reply = StudentReply {
            response: "hi".into(),
            step_state: StepState::InProgress,
            finished: false,
        };
        let v = serde_json::to_value(&reply).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 3);
        assert_eq!(v["step_state"], "q");
    }
}
