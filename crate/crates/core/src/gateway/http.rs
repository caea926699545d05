//! Wire backend speaking the de-facto OpenAI-compatible chat-completion
//! protocol: `POST <base_url>/chat/completions` with a bearer token taken
//! from `SDSD_API_KEY` (or the per-role `SDSD_API_KEY_<ROLE>` override).

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    BackendError, BackendReply, ChatMessage, ChatRole, CompletionBackend, CompletionRequest,
    ErrorClass, FinishReason, WorkerRole,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token; overrides the
    /// `SDSD_API_KEY` / `SDSD_API_KEY_<ROLE>` convention.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Per-attempt timeout in seconds.
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

pub struct HttpBackend {
    agent: ureq::Agent,
    base_url: String,
    model: String,
    bearer: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &HttpBackendConfig, role: WorkerRole) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let bearer = match &config.api_key_env {
            Some(var) => std::env::var(var).ok(),
            None => std::env::var(format!("SDSD_API_KEY_{}", role.as_str().to_uppercase()))
                .or_else(|_| std::env::var("SDSD_API_KEY"))
                .ok(),
        };
        Self {
            agent,
            base_url: config.base_url.trim_end_matches('/').to_string(),
            model: config.model.clone(),
            bearer,
        }
    }

    fn body(&self, request: &CompletionRequest) -> serde_json::Value {
        let mut messages: Vec<serde_json::Value> = Vec::new();
        if let Some(system) = &request.system_prompt {
            messages.push(json!({"role": "system", "content": system}));
        }
        for ChatMessage { role, content } in &request.messages {
            let role = match role {
                ChatRole::System => "system",
                ChatRole::User => "user",
                ChatRole::Assistant => "assistant",
            };
            messages.push(json!({"role": role, "content": content}));
        }
        let model = if request.model.is_empty() {
            &self.model
        } else {
            &request.model
        };
        let mut body = json!({
            "model": model,
            "messages": messages,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        });
        if !request.stop_sequences.is_empty() {
            body["stop"] = json!(request.stop_sequences);
        }
        if request.json_mode {
            body["response_format"] = json!({"type": "json_object"});
        }
        body
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

fn classify_transport(err: &ureq::Error) -> ErrorClass {
    match err {
        ureq::Error::Timeout(_) => ErrorClass::Timeout,
        _ => ErrorClass::Transport,
    }
}

impl CompletionBackend for HttpBackend {
    fn attempt(&self, request: &CompletionRequest) -> Result<BackendReply, BackendError> {
        let url = format!("{}/chat/completions", self.base_url);
        let mut call = self
            .agent
            .post(&url)
            .header("content-type", "application/json");
        if let Some(token) = &self.bearer {
            call = call.header("authorization", format!("Bearer {token}"));
        }
        let mut response = call
            .send_json(self.body(request))
            .map_err(|e| BackendError::new(classify_transport(&e), e.to_string()))?;

        let status = response.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => {
                return Err(BackendError::new(
                    ErrorClass::Auth,
                    format!("authentication failed ({status})"),
                ))
            }
            429 => {
                return Err(BackendError::new(
                    ErrorClass::RateLimit,
                    "rate limited (429)",
                ))
            }
            408 => return Err(BackendError::new(ErrorClass::Timeout, "request timeout (408)")),
            500..=599 => {
                return Err(BackendError::new(
                    ErrorClass::Transport,
                    format!("server error ({status})"),
                ))
            }
            _ => {
                return Err(BackendError::new(
                    ErrorClass::MalformedResponse,
                    format!("unexpected status {status}"),
                ))
            }
        }

        let parsed: WireResponse = response.body_mut().read_json().map_err(|e| {
            BackendError::new(ErrorClass::MalformedResponse, format!("bad response body: {e}"))
        })?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| {
            BackendError::new(ErrorClass::MalformedResponse, "response has no choices")
        })?;
        let text = choice.message.content.ok_or_else(|| {
            BackendError::new(ErrorClass::MalformedResponse, "choice has no message content")
        })?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("stop") | None => FinishReason::Stop,
            Some(_) => FinishReason::Stop,
        };
        Ok(BackendReply {
            text,
            finish_reason,
        })
    }

    fn model_id(&self) -> String {
        self.model.clone()
    }
}
