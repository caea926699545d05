//! Engine for generating guided multi-turn self-dialogues and mining them
//! into preference data.
//!
//! The flow: sample a (topic, principles, goal) setup from the [`registry`],
//! render the planning prompt from [`templates`], obtain a completion through
//! the [`gateway`], parse it with [`transcript`], confirm a principle
//! violation with [`critique`], rewrite the offending utterance with
//! [`revision`], and persist the resulting dialogue / preference rows via
//! [`dataset`]. [`pipeline`] orchestrates the whole loop with bounded
//! concurrency, checkpointing, and resume; [`analytics`] computes statistics
//! over the emitted splits.

pub mod analytics;
pub mod critique;
pub mod dataset;
pub mod gateway;
pub mod pipeline;
pub mod registry;
pub mod revision;
pub mod templates;
pub mod transcript;

pub use critique::{CritiqueOutcome, CritiqueResult, CritiqueStatus, Violated};
pub use gateway::{
    CompletionBackend, CompletionRequest, CompletionResult, Gateway, RetryPolicy, RoleLimiter,
    WorkerRole,
};
pub use pipeline::{CheckpointState, DialogueRecord, RunConfig, RunSummary};
pub use registry::{
    DialogueSetup, Goal, Principle, PrincipleId, Registry, TopicEntry, ViolationHistory,
};
pub use revision::{PreferencePair, Revision};
pub use templates::{PromptKind, RenderedPrompt, TemplateSet};
pub use transcript::{Anomaly, AnomalyKind, ParsedTranscript, Role, Terminal, Turn};
