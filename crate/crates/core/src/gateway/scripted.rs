//! Scripted backend that replays fixture responses, for tests and dry runs.
//!
//! Fixtures are keyed by `request_tag`. A tag maps to a sequence of steps;
//! each attempt consumes the next step and the last step repeats. On disk a
//! fixture is either `<tag>.txt` (one verbatim reply) or `<tag>.json` (a
//! step array with optional error injection and latency).

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendReply, CompletionBackend, CompletionRequest, ErrorClass, FinishReason};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScriptStep {
    /// Reply text; ignored when `error` is set.
    #[serde(default)]
    pub text: Option<String>,
    /// Inject a failure of this class: `transport`, `timeout`, `rate_limit`,
    /// `auth`, `malformed_response`.
    #[serde(default)]
    pub error: Option<String>,
    /// Injected per-call latency.
    #[serde(default)]
    pub latency_ms: Option<u64>,
    /// `stop` (default) or `length`.
    #[serde(default)]
    pub finish_reason: Option<String>,
}

impl ScriptStep {
    pub fn reply(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn fail(class: impl Into<String>) -> Self {
        Self {
            error: Some(class.into()),
            ..Self::default()
        }
    }

    pub fn with_latency_ms(mut self, ms: u64) -> Self {
        self.latency_ms = Some(ms);
        self
    }
}

struct Script {
    steps: Vec<ScriptStep>,
    cursor: usize,
}

pub struct ScriptedBackend {
    name: String,
    scripts: Mutex<HashMap<String, Script>>,
}

impl Default for ScriptedBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::with_name("scripted")
    }

    pub fn with_name(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            scripts: Mutex::new(HashMap::new()),
        }
    }

    /// Load every `*.txt` and `*.json` fixture in `dir`, keyed by file stem.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let backend = Self::with_name(format!("scripted:{}", dir.display()));
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            match path.extension().and_then(|e| e.to_str()) {
                Some("txt") => {
                    let text = fs::read_to_string(&path)?;
                    backend.insert_text(stem, text.strip_suffix('\n').unwrap_or(&text));
                }
                Some("json") => {
                    let raw = fs::read_to_string(&path)?;
                    let steps: Vec<ScriptStep> = serde_json::from_str(&raw).map_err(|e| {
                        std::io::Error::new(
                            std::io::ErrorKind::InvalidData,
                            format!("{}: {e}", path.display()),
                        )
                    })?;
                    backend.insert_steps(stem, steps);
                }
                _ => {}
            }
        }
        Ok(backend)
    }

    pub fn insert_text(&self, tag: impl Into<String>, text: impl Into<String>) {
        self.insert_steps(tag, vec![ScriptStep::reply(text)]);
    }

    pub fn insert_steps(&self, tag: impl Into<String>, steps: Vec<ScriptStep>) {
        self.scripts
            .lock()
            .expect("scripts poisoned")
            .insert(tag.into(), Script { steps, cursor: 0 });
    }

    pub fn has_fixture(&self, tag: &str) -> bool {
        self.scripts.lock().expect("scripts poisoned").contains_key(tag)
    }

    fn error_class(name: &str) -> ErrorClass {
        match name {
            "transport" => ErrorClass::Transport,
            "timeout" => ErrorClass::Timeout,
            "rate_limit" => ErrorClass::RateLimit,
            "auth" => ErrorClass::Auth,
            _ => ErrorClass::MalformedResponse,
        }
    }
}

impl CompletionBackend for ScriptedBackend {
    fn attempt(&self, request: &CompletionRequest) -> Result<BackendReply, BackendError> {
        let step = {
            let mut scripts = self.scripts.lock().expect("scripts poisoned");
            let Some(script) = scripts.get_mut(&request.request_tag) else {
                return Err(BackendError::new(
                    ErrorClass::MissingFixture,
                    format!("no fixture for tag \"{}\"", request.request_tag),
                ));
            };
            let idx = script.cursor.min(script.steps.len().saturating_sub(1));
            script.cursor += 1;
            script.steps[idx].clone()
        };
        if let Some(ms) = step.latency_ms {
            std::thread::sleep(Duration::from_millis(ms));
        }
        if let Some(class) = step.error {
            return Err(BackendError::new(
                Self::error_class(&class),
                format!("scripted {class} failure"),
            ));
        }
        let finish_reason = match step.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        Ok(BackendReply {
            text: step.text.unwrap_or_default(),
            finish_reason,
        })
    }

    fn model_id(&self) -> String {
        self.name.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatMessage, ChatRole};

    fn request(tag: &str) -> CompletionRequest {
        CompletionRequest {
            model: "m".into(),
            system_prompt: None,
            messages: vec![ChatMessage {
                role: ChatRole::User,
                content: "x".into(),
            }],
            max_tokens: 16,
            temperature: 0.0,
            stop_sequences: vec![],
            request_tag: tag.into(),
            json_mode: false,
        }
    }

    #[test]
    fn steps_advance_and_last_repeats() {
        let b = ScriptedBackend::new();
        b.insert_steps("t", vec![ScriptStep::reply("one"), ScriptStep::reply("two")]);
        assert_eq!(b.attempt(&request("t")).unwrap().text, "one");
        assert_eq!(b.attempt(&request("t")).unwrap().text, "two");
        assert_eq!(b.attempt(&request("t")).unwrap().text, "two");
    }

    #[test]
    fn dir_loading_reads_txt_and_json() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("plain.txt"), "hello\n").unwrap();
        fs::write(
            dir.path().join("steps.json"),
            r#"[{"error": "timeout"}, {"text": "recovered"}]"#,
        )
        .unwrap();
        let b = ScriptedBackend::from_dir(dir.path()).unwrap();
        assert_eq!(b.attempt(&request("plain")).unwrap().text, "hello");
        assert_eq!(
            b.attempt(&request("steps")).unwrap_err().class,
            ErrorClass::Timeout
        );
        assert_eq!(b.attempt(&request("steps")).unwrap().text, "recovered");
    }
}
