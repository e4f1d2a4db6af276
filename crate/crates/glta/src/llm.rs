//! Blocking client for OpenAI-compatible chat-completion endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const API_KEY_VAR: &str = "GLTA_LLM_API_KEY";

const ATTEMPTS: usize = 3;
const EXCERPT: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("{API_KEY_VAR} is not set")]
    MissingKey,
    #[error("authentication failed with HTTP {status}: {body}")]
    Auth { status: u16, body: String },
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl LlmError {
    fn retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct Request<'a> {
    model: &'a str,
    messages: [Message<'a>; 1],
}

#[derive(Deserialize)]
struct Response {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: String,
}

#[derive(Debug, Clone)]
pub struct ChatClient {
    endpoint: String,
    api_key: String,
    model: String,
    backoff: Duration,
    http: reqwest::blocking::Client,
}

fn excerpt(body: &str) -> String {
    body.chars().take(EXCERPT).collect()
}

impl ChatClient {
    pub fn new(endpoint: &str, api_key: &str, model: &str, timeout: Duration) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            api_key: api_key.to_string(),
            model: model.to_string(),
            backoff: Duration::from_millis(250),
            http,
        })
    }

    /// Reads the key from `GLTA_LLM_API_KEY`.
    pub fn from_env(endpoint: &str, model: &str, timeout: Duration) -> Result<Self, LlmError> {
        let key = std::env::var(API_KEY_VAR).map_err(|_| LlmError::MissingKey)?;
        if key.is_empty() {
            return Err(LlmError::MissingKey);
        }
        Self::new(endpoint, &key, model, timeout)
    }

    /// Delay before the first retry; it doubles for each further retry.
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    fn attempt(&self, prompt: &str) -> Result<String, LlmError> {
        let body = Request {
            model: &self.model,
            messages: [Message {
                role: "user",
                content: prompt,
            }],
        };
        let resp = self
            .http
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => {
                return Err(LlmError::Auth {
                    status,
                    body: excerpt(&text),
                })
            }
            _ => {
                return Err(LlmError::Status {
                    status,
                    body: excerpt(&text),
                })
            }
        }
        let parsed: Response =
            serde_json::from_str(&text).map_err(|e| LlmError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| LlmError::Malformed(String::from("no choices")))
    }

    /// One single-turn completion, retried with exponential backoff on
    /// transport errors, 429 and 5xx.
    pub fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let mut delay = self.backoff;
        let mut attempt = 1;
        loop {
            match self.attempt(prompt) {
                Err(e) if e.retryable() && attempt < ATTEMPTS => {
                    log::warn!("chat completion attempt {attempt} failed: {e}; retrying");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Single completion against `endpoint` with a default model name.
pub fn chat_complete(
    endpoint: &str,
    api_key: &str,
    prompt: &str,
    timeout: Duration,
) -> Result<String, LlmError> {
    ChatClient::new(endpoint, api_key, "default", timeout)?.complete(prompt)
}
