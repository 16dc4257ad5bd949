//! Live backend speaking the common chat-completions HTTP shape. The
//! endpoint, model name, and credential variable come from configuration;
//! the client never mutates orchestration state.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backend::{count_tokens, BackendError, CallKey, ModelBackend, ModelRequest, ModelResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpBackendConfig {
    pub base_url: String,
    /// Name of the environment variable holding the API key; unset means
    /// unauthenticated (local endpoints).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_var: Option<String>,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub request_timeout_seconds: u64,
}

fn default_timeout() -> u64 {
    120
}

impl HttpBackendConfig {
    pub fn parse(document: &str) -> Result<Self, BackendError> {
        serde_json::from_str(document).map_err(|e| BackendError::Script(e.to_string()))
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize, Default)]
struct ChatUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_seconds))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn endpoint(&self) -> String {
        let base = self.config.base_url.trim_end_matches('/');
        if base.ends_with("chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

impl ModelBackend for HttpBackend {
    fn complete(
        &self,
        request: &ModelRequest,
        _call_key: &CallKey,
    ) -> Result<ModelResponse, BackendError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: vec![ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
        };
        let mut builder = self.client.post(self.endpoint()).json(&body);
        if let Some(var) = &self.config.auth_token_var {
            let token = std::env::var(var).map_err(|_| {
                BackendError::Transport(format!("auth variable `{var}` is not set"))
            })?;
            builder = builder.bearer_auth(token);
        }
        let started = Instant::now();
        let response = builder
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !response.status().is_success() {
            return Err(BackendError::Transport(format!(
                "server returned {}",
                response.status()
            )));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let latency = started.elapsed().as_secs_f64();
        let text = parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::Transport("response has no choices".to_string()))?;
        let usage = parsed.usage.unwrap_or_default();
        Ok(ModelResponse {
            prompt_tokens: usage
                .prompt_tokens
                .unwrap_or_else(|| count_tokens(&request.prompt)),
            completion_tokens: usage
                .completion_tokens
                .unwrap_or_else(|| count_tokens(&text)),
            model_latency: latency,
            text,
        })
    }
}
