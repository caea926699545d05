//! Uniform completion interface over interchangeable backends.
//!
//! A [`CompletionBackend`] makes exactly one attempt; [`complete`] wraps it
//! with the retry policy (exponential backoff, retryable-class filtering) and
//! guarantees every submitted request ends in exactly one result or one
//! terminal error. [`Gateway`] binds the three worker roles to their
//! backends and throttles them through a shared [`RoleLimiter`].

mod http;
mod limiter;
mod scripted;

pub use http::{HttpBackend, HttpBackendConfig};
pub use limiter::{LeaseDenied, RoleLimiter, SlotLease};
pub use scripted::{ScriptStep, ScriptedBackend};

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Message role on the completion wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

/// The three logical pipeline roles. Each binds to an independently
/// configured backend; by default critic and reviser share the generator's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerRole {
    Generator,
    Critic,
    Reviser,
}

impl WorkerRole {
    pub const ALL: [WorkerRole; 3] = [WorkerRole::Generator, WorkerRole::Critic, WorkerRole::Reviser];

    pub(crate) fn index(self) -> usize {
        match self {
            WorkerRole::Generator => 0,
            WorkerRole::Critic => 1,
            WorkerRole::Reviser => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WorkerRole::Generator => "generator",
            WorkerRole::Critic => "critic",
            WorkerRole::Reviser => "reviser",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub system_prompt: Option<String>,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
    /// Opaque correlation id; the scripted backend keys fixtures by it.
    pub request_tag: String,
    /// Ask the backend for a schema-validated JSON response.
    #[serde(default)]
    pub json_mode: bool,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() && self.system_prompt.is_none() {
            return Err(GatewayError::InvalidRequest(
                "request needs messages or a system prompt".into(),
            ));
        }
        if self.stop_sequences.iter().any(|s| s.is_empty()) {
            return Err(GatewayError::InvalidRequest(
                "stop sequences must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency: Duration,
    pub attempt_count: u32,
}

/// Classification of a failed attempt; drives retry decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Transport,
    Timeout,
    RateLimit,
    Auth,
    MalformedResponse,
    MissingFixture,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{class:?}: {message}")]
pub struct BackendError {
    pub class: ErrorClass,
    pub message: String,
}

impl BackendError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff: Duration,
    pub backoff_multiplier: f64,
    pub retryable_classes: BTreeSet<ErrorClass>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff: Duration::from_millis(250),
            backoff_multiplier: 2.0,
            retryable_classes: [ErrorClass::Transport, ErrorClass::Timeout, ErrorClass::RateLimit]
                .into_iter()
                .collect(),
        }
    }
}

impl RetryPolicy {
    /// Fire-and-fail policy used where the caller layers its own re-asks.
    pub fn no_retry() -> Self {
        Self {
            max_attempts: 1,
            base_backoff: Duration::ZERO,
            ..Self::default()
        }
    }

    /// Delay before attempt `attempt + 1`: `base * multiplier^(attempt - 1)`.
    /// Non-decreasing because the multiplier is >= 1.
    pub fn backoff_delay(&self, attempt: u32) -> Duration {
        let factor = self.backoff_multiplier.max(1.0).powi(attempt.saturating_sub(1) as i32);
        self.base_backoff.mul_f64(factor)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("terminal backend error after {attempts} attempt(s): {source}")]
    Terminal {
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("retries exhausted after {attempts} attempt(s): {last}")]
    Exhausted {
        attempts: u32,
        #[source]
        last: BackendError,
    },
    #[error("gateway is shutting down")]
    Shutdown,
}

impl GatewayError {
    pub fn is_retryable_exhaustion(&self) -> bool {
        matches!(self, GatewayError::Exhausted { .. })
    }
}

/// One completion attempt. Implementations must be safe to call from many
/// threads at once.
pub trait CompletionBackend: Send + Sync {
    fn attempt(&self, request: &CompletionRequest) -> Result<BackendReply, BackendError>;

    /// Identifier recorded in row provenance.
    fn model_id(&self) -> String;
}

#[derive(Debug, Clone)]
pub struct BackendReply {
    pub text: String,
    pub finish_reason: FinishReason,
}

/// Enforce the stop-sequence contract on a reply: text never extends past
/// the first stop sequence.
fn apply_stop_sequences(mut reply: BackendReply, stops: &[String]) -> BackendReply {
    let cut = stops
        .iter()
        .filter_map(|s| reply.text.find(s.as_str()))
        .min();
    if let Some(pos) = cut {
        reply.text.truncate(pos);
        reply.finish_reason = FinishReason::Stop;
    }
    reply
}

/// Run one request against a backend under a retry policy. Returns the first
/// success, a terminal error, or an exhaustion error — never a fabricated
/// completion.
pub fn complete(
    backend: &dyn CompletionBackend,
    request: &CompletionRequest,
    policy: &RetryPolicy,
) -> Result<CompletionResult, GatewayError> {
    request.validate()?;
    let started = Instant::now();
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        match backend.attempt(request) {
            Ok(reply) => {
                let reply = apply_stop_sequences(reply, &request.stop_sequences);
                return Ok(CompletionResult {
                    text: reply.text,
                    finish_reason: reply.finish_reason,
                    latency: started.elapsed(),
                    attempt_count: attempt,
                });
            }
            Err(err) if !policy.retryable_classes.contains(&err.class) => {
                return Err(GatewayError::Terminal {
                    attempts: attempt,
                    source: err,
                });
            }
            Err(err) => {
                if attempt >= policy.max_attempts.max(1) {
                    return Err(GatewayError::Exhausted {
                        attempts: attempt,
                        last: err,
                    });
                }
                let delay = policy.backoff_delay(attempt);
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
        }
    }
}

/// A backend plus the retry policy it is driven with.
#[derive(Clone)]
pub struct RoleBinding {
    pub backend: Arc<dyn CompletionBackend>,
    pub policy: RetryPolicy,
}

impl RoleBinding {
    pub fn new(backend: Arc<dyn CompletionBackend>, policy: RetryPolicy) -> Self {
        Self { backend, policy }
    }
}

/// Role-aware completion front door shared across workers.
pub struct Gateway {
    bindings: [RoleBinding; 3],
    limiter: RoleLimiter,
}

impl Gateway {
    /// Missing critic/reviser bindings fall back to the generator's.
    pub fn new(
        generator: RoleBinding,
        critic: Option<RoleBinding>,
        reviser: Option<RoleBinding>,
        limiter: RoleLimiter,
    ) -> Self {
        let critic = critic.unwrap_or_else(|| generator.clone());
        let reviser = reviser.unwrap_or_else(|| generator.clone());
        Self {
            bindings: [generator, critic, reviser],
            limiter,
        }
    }

    pub fn binding(&self, role: WorkerRole) -> &RoleBinding {
        &self.bindings[role.index()]
    }

    pub fn limiter(&self) -> &RoleLimiter {
        &self.limiter
    }

    pub fn model_id(&self, role: WorkerRole) -> String {
        self.binding(role).backend.model_id()
    }

    /// Acquire a slot for `role`, run the request under its policy, release.
    pub fn complete(
        &self,
        role: WorkerRole,
        request: &CompletionRequest,
    ) -> Result<CompletionResult, GatewayError> {
        let _lease = self
            .limiter
            .acquire(role)
            .map_err(|_| GatewayError::Shutdown)?;
        complete(self.binding(role).backend.as_ref(), request, &self.binding(role).policy)
    }
}
