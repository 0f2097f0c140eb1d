use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::CompletionParams;
use crate::orchestrator::{ErrorMode, SoliloquyTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Student,
    Tutorbot,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::Student => "Student",
            Speaker::Tutorbot => "Tutorbot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibleTurn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversationStatus {
    /// Still being generated (live sessions).
    Open,
    Complete,
    Truncated,
    Failed,
}

/// Where a conversation came from; enough to regenerate it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_params: Option<CompletionParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tutor_params: Option<CompletionParams>,
    pub max_repairs: u32,
    #[serde(default)]
    pub template_checksums: BTreeMap<String, String>,
    /// Error mode injected into each student turn, in student-turn order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub student_error_modes: Vec<Option<ErrorMode>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
}

/// Visible dialogue plus the hidden soliloquy behind every tutorbot turn.
///
/// `traces` is keyed by the index of the tutorbot turn inside `turns`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub question_id: String,
    pub turns: Vec<VisibleTurn>,
    pub traces: BTreeMap<usize, SoliloquyTrace>,
    pub provenance: Provenance,
    pub status: ConversationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Conversation {
    pub fn new(id: impl Into<String>, question_id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            question_id: question_id.into(),
            turns: Vec::new(),
            traces: BTreeMap::new(),
            provenance: Provenance::default(),
            status: ConversationStatus::Open,
            failure: None,
        }
    }

    pub fn tutor_turn_count(&self) -> usize {
        self.turns.iter().filter(|t| t.speaker == Speaker::Tutorbot).count()
    }

    pub fn student_turn_count(&self) -> usize {
        self.turns.iter().filter(|t| t.speaker == Speaker::Student).count()
    }

    /// Index in `turns` of the `ordinal`-th tutorbot turn.
    pub fn tutor_turn_index(&self, ordinal: usize) -> Option<usize> {
        self.turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.speaker == Speaker::Tutorbot)
            .nth(ordinal)
            .map(|(i, _)| i)
    }

    /// Traces in tutorbot-turn order.
    pub fn traces_in_order(&self) -> impl Iterator<Item = &SoliloquyTrace> {
        self.traces.values()
    }

    /// Checks the structural invariants: speakers alternate starting with
    /// the student, and every tutorbot turn (and nothing else) has a trace.
    pub fn check_well_formed(&self) -> Result<(), String> {
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 {
                Speaker::Student
            } else {
                Speaker::Tutorbot
            };
            if turn.speaker != expected {
                return Err(format!("turn {i} is {:?}, expected {expected:?}", turn.speaker));
            }
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.speaker == Speaker::Tutorbot && !self.traces.contains_key(&i) {
                return Err(format!("tutorbot turn {i} has no trace"));
            }
        }
        if let Some(k) = self.traces.keys().find(|k| {
            self.turns
                .get(**k)
                .is_none_or(|t| t.speaker != Speaker::Tutorbot)
        }) {
            return Err(format!("trace keyed at non-tutorbot index {k}"));
        }
        Ok(())
    }
}
