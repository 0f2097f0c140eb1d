//! Code-soliloquy tutoring engine.
//!
//! A tutorbot answers every student message by first running a hidden
//! sub-dialogue with itself: it decides whether a calculation is needed,
//! writes Python for it, runs that code in a sandbox, and only then writes
//! the visible reply. This crate holds the wire protocol, prompt templates,
//! chat backends, the sandbox host, the dialogue engine, the dataset
//! pipeline, and the evaluation harness.

pub mod api;
pub mod backend;
pub mod conversation;
pub mod dataset;
pub mod evaluation;
pub mod orchestrator;
pub mod prompts;
pub mod protocol;
pub mod sandbox;

pub use conversation::{Conversation, ConversationStatus, Speaker, VisibleTurn};
pub use orchestrator::{Session, SoliloquyState, SoliloquyTrace, TutorEngine};
pub use protocol::{CodeArtifact, Decision, EnrichedSolution, TutorTurn};
