#![allow(dead_code)]

pub mod arb;
pub mod corpus;
pub mod fuzz;
pub mod oracle;
pub mod table;

use std::path::PathBuf;
use std::sync::Arc;

use soliloquy_core::backend::ChatBackend;
use soliloquy_core::dataset::QuestionRecord;
use soliloquy_core::orchestrator::{Clock, EngineConfig, MockConversation, StudentPolicy};
use soliloquy_core::prompts::{serialize_history, Audience, TemplateId, TemplateSet};
use soliloquy_core::sandbox::{CodeExecutor, PythonSandbox};
use soliloquy_core::{Conversation, TutorEngine};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn python() -> Arc<dyn CodeExecutor> {
    Arc::new(PythonSandbox::discover().expect("python3 on PATH"))
}

pub fn engine(executor: Arc<dyn CodeExecutor>) -> TutorEngine {
    TutorEngine::new(Arc::new(TemplateSet::builtin()), executor, EngineConfig::default())
}

pub fn walkthrough_question() -> QuestionRecord {
    let text = std::fs::read_to_string(fixtures().join("walkthrough/question.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// The free-fall walkthrough; student mistakes are scripted, not drawn.
pub async fn run_walkthrough(engine: &TutorEngine, backend: &dyn ChatBackend) -> Conversation {
    let q = walkthrough_question();
    let solution = q.enriched.clone().expect("enriched");
    engine
        .run_mock_conversation(
            MockConversation {
                conversation_id: "cliff-drop-r0",
                question_id: &q.id,
                question: &q.question,
                solution: &solution,
                policy: StudentPolicy::new(0.0, 1).unwrap(),
            },
            backend,
            &Clock::None,
        )
        .await
}

pub fn transcript_text(conversation: &Conversation) -> String {
    let mut text = serialize_history(&conversation.turns, Audience::Student);
    text.push('\n');
    text
}

pub const CHECKSUMS: [(TemplateId, &str); 6] = [
    (TemplateId::Student, "a3c2be9aea83794ff4ea0b426d7a4ac60842255c6082639762673a370b438f87"),
    (TemplateId::Deciding, "7324f9943b90477e4aeae35c6b2e580e8b907de7c9ec57cce4cc41ef4c93eee0"),
    (TemplateId::UsePython, "99dc63807500aa5680304b8332403fe7967d31c7fa8bf40d2468c6f71305aad7"),
    (TemplateId::ReceivedPython, "320c0aebb1b72024a83c834c0154d5e4929e123403dccc701386e29ff193871c"),
    (TemplateId::NoPython, "9975f2fdef20bad7fc120099b39c32cfd622fcc39389acedfd02a7df17639bb2"),
    (TemplateId::EnrichSolution, "fc692801b0df0d877deb4e61c78cfa2456e245c3e21400b1adfa7e6a1d8c4c77"),
];
