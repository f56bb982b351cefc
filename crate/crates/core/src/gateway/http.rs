//! OpenAI-style chat-completions HTTP backend. Any model family reachable
//! through a compatible endpoint or proxy works; the credential is read
//! from an environment variable and never appears in configuration files.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{ChatBackend, ChatRequest, ChatResponse, GatewayError, Usage};

pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    credential_env: String,
    model_fallback: String,
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<UsageBody>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct UsageBody {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpBackend {
    pub fn new(endpoint: &str, model: &str, credential_env: &str) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build();
        Self {
            agent: config.into(),
            endpoint: endpoint.trim_end_matches('/').to_string(),
            credential_env: credential_env.to_string(),
            model_fallback: model.to_string(),
        }
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        // Fail closed before touching the network.
        let credential = std::env::var(&self.credential_env).map_err(|_| {
            GatewayError::AuthRejected(format!(
                "environment variable {} is not set",
                self.credential_env
            ))
        })?;

        let model = if request.model_name.is_empty() {
            self.model_fallback.clone()
        } else {
            request.model_name.clone()
        };
        let mut messages = Vec::new();
        if !request.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_text}));
        }
        messages.push(json!({"role": "user", "content": request.user_text}));
        let body = json!({
            "model": model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });

        let url = format!("{}/chat/completions", self.endpoint);
        let mut response = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {credential}"))
            .header("Content-Type", "application/json")
            .send_json(&body)
            .map_err(|e| GatewayError::Transport { attempts: 1, detail: e.to_string() })?;

        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport { attempts: 1, detail: e.to_string() })?;

        match status {
            200..=299 => {}
            401 | 403 => return Err(GatewayError::AuthRejected(format!("status {status}"))),
            429 => return Err(GatewayError::RateLimited { attempts: 1 }),
            _ => {
                return Err(GatewayError::Transport {
                    attempts: 1,
                    detail: format!("status {status}: {}", truncate(&text, 200)),
                })
            }
        }

        let parsed: CompletionBody = serde_json::from_str(&text).map_err(|e| {
            GatewayError::Transport {
                attempts: 1,
                detail: format!("unparseable completion body: {e}"),
            }
        })?;
        let content = parsed
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .unwrap_or_default();
        if content.is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        let usage = parsed.usage.unwrap_or_default();
        Ok(ChatResponse {
            text: content,
            usage: Usage {
                prompt_tokens: usage.prompt_tokens,
                completion_tokens: usage.completion_tokens,
            },
            backend_id: format!("http:{model}"),
            cached: false,
        })
    }

    fn id(&self) -> String {
        "http".into()
    }
}

fn truncate(text: &str, limit: usize) -> &str {
    match text.char_indices().nth(limit) {
        Some((idx, _)) => &text[..idx],
        None => text,
    }
}
