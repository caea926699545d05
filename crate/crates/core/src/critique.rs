//! Critique step: ask the critic whether the final agent utterance violates
//! the sampled principles, parse its structured verdict, and verify it.
//!
//! Verification is the dataset filter: only a well-formed verdict with valid
//! indices and a non-empty rationale admits a dialogue into the revisions
//! split. Malformed output triggers an identical re-ask, bounded by the
//! critic's retry budget.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatMessage, ChatRole, CompletionRequest, Gateway, WorkerRole};
use crate::registry::{DialogueSetup, PrincipleId};
use crate::templates::TemplateSet;
use crate::transcript::{Role, Turn};

/// Verdict extracted from the critic's `PRINCIPLES VIOLATED:` slot. Indices
/// are 1-based positions into the sampled principle subset, strictly
/// increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violated {
    None,
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueResult {
    pub critique_text: String,
    pub violated: Violated,
    pub raw: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CritiqueParseError {
    #[error("missing CRITIQUE: header")]
    MissingCritiqueHeader,
    #[error("missing PRINCIPLES VIOLATED: header")]
    MissingViolatedHeader,
    #[error("index {index} out of range [1, {subset_size}]")]
    IndexOutOfRange { index: usize, subset_size: usize },
    #[error("duplicate index {0}")]
    DuplicateIndex(usize),
    #[error("unreadable verdict: {0}")]
    BadVerdict(String),
    #[error("indices claimed but critique body is empty")]
    EmptyCritique,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CritiqueStatus {
    /// Non-empty, verified index list: the dialogue is admitted.
    Confirmed,
    /// The critic answered `NONE`.
    NoViolation,
    /// Attempts exhausted without a well-formed verdict.
    RejectedMalformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueOutcome {
    pub status: CritiqueStatus,
    pub result: Option<CritiqueResult>,
    pub attempts: u32,
    /// Subset indices mapped back to global principle ids, in prompt order.
    pub violated_ids: Vec<PrincipleId>,
    /// Cause attached to a rejection (last parse error or gateway failure).
    pub failure: Option<String>,
}

/// Parse a raw critic reply. `subset_size` is the number of principles that
/// were rendered into the prompt (1 or 2).
pub fn parse_critique(raw: &str, subset_size: usize) -> Result<CritiqueResult, CritiqueParseError> {
    const CRITIQUE_HEADER: &str = "CRITIQUE:";
    const VIOLATED_HEADER: &str = "PRINCIPLES VIOLATED:";

    let crit_at = raw
        .find(CRITIQUE_HEADER)
        .ok_or(CritiqueParseError::MissingCritiqueHeader)?;
    let after_crit = crit_at + CRITIQUE_HEADER.len();
    let viol_rel = raw[after_crit..]
        .find(VIOLATED_HEADER)
        .ok_or(CritiqueParseError::MissingViolatedHeader)?;
    let critique_text = raw[after_crit..after_crit + viol_rel].trim().to_string();

    let mut verdict = raw[after_crit + viol_rel + VIOLATED_HEADER.len()..].trim();
    // A trailing DONE marker is part of the output format, not the verdict.
    if let Some(stripped) = verdict.strip_suffix("DONE") {
        verdict = stripped.trim_end();
    }

    let violated = parse_verdict(verdict, &critique_text, subset_size)?;
    if let Violated::Indices(indices) = &violated {
        if !indices.is_empty() && critique_text.is_empty() {
            return Err(CritiqueParseError::EmptyCritique);
        }
    }
    Ok(CritiqueResult {
        critique_text,
        violated,
        raw: raw.to_string(),
    })
}

fn parse_verdict(
    verdict: &str,
    critique_text: &str,
    subset_size: usize,
) -> Result<Violated, CritiqueParseError> {
    let none_token = |s: &str| {
        s == "NONE"
            || s.strip_prefix("NONE")
                .is_some_and(|rest| rest.starts_with(|c: char| !c.is_alphanumeric()))
    };
    if none_token(verdict) {
        return Ok(Violated::None);
    }
    if verdict.is_empty() {
        // The critic may put the NONE verdict in the critique body instead.
        if critique_text.trim() == "NONE" {
            return Ok(Violated::None);
        }
        return Err(CritiqueParseError::BadVerdict("empty verdict".into()));
    }
    let Some(rest) = verdict.strip_prefix('[') else {
        return Err(CritiqueParseError::BadVerdict(preview(verdict)));
    };
    let Some(close) = rest.find(']') else {
        return Err(CritiqueParseError::BadVerdict(preview(verdict)));
    };
    let inner = &rest[..close];
    if inner.trim().is_empty() {
        return Ok(Violated::None);
    }
    let mut indices = Vec::new();
    for part in inner.split(',') {
        let index: usize = part
            .trim()
            .parse()
            .map_err(|_| CritiqueParseError::BadVerdict(preview(inner)))?;
        if index < 1 || index > subset_size {
            return Err(CritiqueParseError::IndexOutOfRange { index, subset_size });
        }
        if indices.contains(&index) {
            return Err(CritiqueParseError::DuplicateIndex(index));
        }
        indices.push(index);
    }
    indices.sort_unstable();
    Ok(Violated::Indices(indices))
}

fn preview(s: &str) -> String {
    let s = s.trim();
    if s.len() > 40 {
        format!("{}…", &s[..s.char_indices().take(40).last().map_or(0, |(i, c)| i + c.len_utf8())])
    } else {
        s.to_string()
    }
}

/// Knobs for a single critique exchange.
pub struct CritiqueOptions<'a> {
    pub templates: &'a TemplateSet,
    pub request_tag: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

/// Render the critique prompt for `candidate`, ask the critic, and verify
/// the verdict. Re-asks identically on malformed output, up to the critic
/// policy's `max_attempts` gateway calls in total.
pub fn run_critique(
    candidate: &Turn,
    setup: &DialogueSetup,
    gateway: &Gateway,
    opts: &CritiqueOptions,
) -> CritiqueOutcome {
    debug_assert_eq!(candidate.role, Role::Agent);
    let max_attempts = gateway.binding(WorkerRole::Critic).policy.max_attempts.max(1);
    let prompt = match opts
        .templates
        .render_critique_prompt(&candidate.text, &setup.principles)
    {
        Ok(p) => p,
        Err(e) => {
            return CritiqueOutcome {
                status: CritiqueStatus::RejectedMalformed,
                result: None,
                attempts: 0,
                violated_ids: Vec::new(),
                failure: Some(format!("cannot render critique prompt: {e}")),
            }
        }
    };
    let request = CompletionRequest {
        model: String::new(),
        system_prompt: None,
        messages: vec![ChatMessage {
            role: ChatRole::User,
            content: prompt.text,
        }],
        max_tokens: opts.max_tokens,
        temperature: opts.temperature,
        stop_sequences: vec![],
        request_tag: opts.request_tag.clone(),
        json_mode: false,
    };

    let mut last_failure = None;
    for attempt in 1..=max_attempts {
        let reply = match gateway.complete(WorkerRole::Critic, &request) {
            Ok(r) => r,
            Err(e) => {
                return CritiqueOutcome {
                    status: CritiqueStatus::RejectedMalformed,
                    result: None,
                    attempts: attempt,
                    violated_ids: Vec::new(),
                    failure: Some(e.to_string()),
                }
            }
        };
        match parse_critique(&reply.text, setup.principles.len()) {
            Ok(result) => {
                let (status, violated_ids) = match &result.violated {
                    Violated::None => (CritiqueStatus::NoViolation, Vec::new()),
                    Violated::Indices(indices) if indices.is_empty() => {
                        (CritiqueStatus::NoViolation, Vec::new())
                    }
                    Violated::Indices(indices) => (
                        CritiqueStatus::Confirmed,
                        indices
                            .iter()
                            .map(|&i| setup.principles[i - 1].id)
                            .collect(),
                    ),
                };
                return CritiqueOutcome {
                    status,
                    result: Some(result),
                    attempts: attempt,
                    violated_ids,
                    failure: None,
                };
            }
            Err(e) => last_failure = Some(e.to_string()),
        }
    }
    CritiqueOutcome {
        status: CritiqueStatus::RejectedMalformed,
        result: None,
        attempts: max_attempts,
        violated_ids: Vec::new(),
        failure: last_failure,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{RetryPolicy, RoleBinding, RoleLimiter, ScriptStep, ScriptedBackend};
    use crate::registry::{Goal, Principle, TopicEntry};
    use std::sync::Arc;
    use std::time::Duration;

    #[test]
    fn single_index_verdict() {
        let raw = "CRITIQUE: spreads a fabricated rumor about ghost-writing. PRINCIPLES VIOLATED: [1]\nDONE";
        let r = parse_critique(raw, 1).unwrap();
        assert_eq!(r.violated, Violated::Indices(vec![1]));
        assert!(r.critique_text.starts_with("spreads a fabricated rumor"));
    }

    #[test]
    fn none_verdict() {
        let r = parse_critique("CRITIQUE: no severe issues. PRINCIPLES VIOLATED: NONE", 2).unwrap();
        assert_eq!(r.violated, Violated::None);
    }

    #[test]
    fn out_of_range_index_is_named() {
        let err = parse_critique("CRITIQUE: x PRINCIPLES VIOLATED: [3]", 2).unwrap_err();
        assert_eq!(
            err,
            CritiqueParseError::IndexOutOfRange {
                index: 3,
                subset_size: 2
            }
        );
        assert!(err.to_string().contains("index 3 out of range"));
    }

    #[test]
    fn duplicate_index_is_malformed() {
        let err = parse_critique("CRITIQUE: x PRINCIPLES VIOLATED: [1,1]", 2).unwrap_err();
        assert_eq!(err, CritiqueParseError::DuplicateIndex(1));
    }

    #[test]
    fn missing_headers_are_malformed() {
        assert_eq!(
            parse_critique("PRINCIPLES VIOLATED: [1]", 1).unwrap_err(),
            CritiqueParseError::MissingCritiqueHeader
        );
        assert_eq!(
            parse_critique("CRITIQUE: something", 1).unwrap_err(),
            CritiqueParseError::MissingViolatedHeader
        );
    }

    #[test]
    fn unordered_pair_normalizes_and_empty_list_means_none() {
        let r = parse_critique("CRITIQUE: both bad. PRINCIPLES VIOLATED: [2, 1]", 2).unwrap();
        assert_eq!(r.violated, Violated::Indices(vec![1, 2]));
        let none = parse_critique("CRITIQUE: fine. PRINCIPLES VIOLATED: []", 2).unwrap();
        assert_eq!(none.violated, Violated::None);
    }

    #[test]
    fn claimed_indices_require_a_rationale() {
        let err = parse_critique("CRITIQUE: PRINCIPLES VIOLATED: [1]", 1).unwrap_err();
        assert_eq!(err, CritiqueParseError::EmptyCritique);
    }

    fn setup_with(principles: Vec<Principle>) -> DialogueSetup {
        DialogueSetup {
            topic_entry: TopicEntry {
                domain: "d".into(),
                topic: "t".into(),
                subtopic: "s".into(),
            },
            principles,
            goal: Goal {
                id: 1,
                text: "Have the agent entertain the user.".into(),
            },
            seed: 0,
        }
    }

    fn gateway_with_critic(backend: ScriptedBackend, max_attempts: u32) -> Gateway {
        let policy = RetryPolicy {
            max_attempts,
            base_backoff: Duration::ZERO,
            ..RetryPolicy::default()
        };
        Gateway::new(
            RoleBinding::new(Arc::new(backend), policy),
            None,
            None,
            RoleLimiter::new(2, 2, 2),
        )
    }

    fn opts(templates: &TemplateSet) -> CritiqueOptions<'_> {
        CritiqueOptions {
            templates,
            request_tag: "c".into(),
            max_tokens: 512,
            temperature: 0.0,
        }
    }

    #[test]
    fn none_reply_short_circuits() {
        let backend = ScriptedBackend::new();
        backend.insert_text("c", "CRITIQUE: clean. PRINCIPLES VIOLATED: NONE");
        let gw = gateway_with_critic(backend, 3);
        let templates = TemplateSet::bundled();
        let setup = setup_with(vec![Principle {
            id: 9,
            source: "s".into(),
            text: "Do not cheat.".into(),
        }]);
        let outcome = run_critique(
            &Turn::new(Role::Agent, "all good"),
            &setup,
            &gw,
            &opts(&templates),
        );
        assert_eq!(outcome.status, CritiqueStatus::NoViolation);
        assert_eq!(outcome.attempts, 1);
    }

    #[test]
    fn malformed_replies_consume_attempts_then_confirm() {
        let backend = ScriptedBackend::new();
        backend.insert_steps(
            "c",
            vec![
                ScriptStep::reply("garbage"),
                ScriptStep::reply("still garbage"),
                ScriptStep::reply("CRITIQUE: both violated. PRINCIPLES VIOLATED: [1,2]\nDONE"),
            ],
        );
        let gw = gateway_with_critic(backend, 3);
        let templates = TemplateSet::bundled();
        let setup = setup_with(vec![
            Principle {
                id: 9,
                source: "s".into(),
                text: "Do not cheat.".into(),
            },
            Principle {
                id: 96,
                source: "s".into(),
                text: "Do not provide misinformation.".into(),
            },
        ]);
        let outcome = run_critique(
            &Turn::new(Role::Agent, "bad take"),
            &setup,
            &gw,
            &opts(&templates),
        );
        assert_eq!(outcome.status, CritiqueStatus::Confirmed);
        assert_eq!(outcome.attempts, 3);
        // Subset indices map back to global ids in prompt order.
        assert_eq!(outcome.violated_ids, vec![9, 96]);
    }

    #[test]
    fn exhausted_reasks_reject() {
        let backend = ScriptedBackend::new();
        backend.insert_text("c", "no structure at all");
        let gw = gateway_with_critic(backend, 2);
        let templates = TemplateSet::bundled();
        let setup = setup_with(vec![Principle {
            id: 1,
            source: "s".into(),
            text: "Do not be unhelpful.".into(),
        }]);
        let outcome = run_critique(
            &Turn::new(Role::Agent, "meh"),
            &setup,
            &gw,
            &opts(&templates),
        );
        assert_eq!(outcome.status, CritiqueStatus::RejectedMalformed);
        assert_eq!(outcome.attempts, 2);
        assert!(outcome.failure.is_some());
    }

    #[test]
    fn gateway_terminal_error_attaches_cause() {
        let backend = ScriptedBackend::new();
        backend.insert_steps("c", vec![ScriptStep::fail("auth")]);
        let gw = gateway_with_critic(backend, 3);
        let templates = TemplateSet::bundled();
        let setup = setup_with(vec![Principle {
            id: 1,
            source: "s".into(),
            text: "Do not be unhelpful.".into(),
        }]);
        let outcome = run_critique(
            &Turn::new(Role::Agent, "meh"),
            &setup,
            &gw,
            &opts(&templates),
        );
        assert_eq!(outcome.status, CritiqueStatus::RejectedMalformed);
        assert!(outcome.failure.unwrap().contains("Auth"));
    }
}
