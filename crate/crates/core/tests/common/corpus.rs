use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use soliloquy_core::backend::{BackendFactory, ReplayLibrary};
use soliloquy_core::dataset::{
    export_transcripts, generate_corpus, load_questions, GenerationOptions, QuestionRecord, ScheduleSpec,
};
use soliloquy_core::Conversation;

use super::{engine, fixtures, python};

pub const SEED: u64 = 7;
pub const TOTAL: usize = 15;

pub fn questions() -> Vec<QuestionRecord> {
    load_questions(fixtures().join("dataset/questions.jsonl")).unwrap()
}

pub fn replay() -> ReplayLibrary {
    ReplayLibrary::from_file(fixtures().join("dataset/fixture.jsonl")).unwrap()
}

pub fn options(completed: HashSet<String>) -> GenerationOptions {
    GenerationOptions {
        schedule: ScheduleSpec::Total(TOTAL),
        corpus_seed: SEED,
        workers: 4,
        completed,
        ..GenerationOptions::default()
    }
}

pub async fn generate(backends: &dyn BackendFactory, completed: HashSet<String>) -> Vec<Conversation> {
    let engine = engine(python());
    generate_corpus(&questions(), &engine, backends, &options(completed), None)
        .await
        .unwrap()
}

/// Generates from the replay fixture and writes transcripts to `out`.
pub async fn replay_to(out: &Path) -> Vec<Conversation> {
    let library: Arc<dyn BackendFactory> = Arc::new(replay());
    let conversations = generate(library.as_ref(), HashSet::new()).await;
    export_transcripts(&conversations, out).unwrap();
    conversations
}
