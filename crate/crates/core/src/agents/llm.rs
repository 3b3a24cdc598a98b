//! Live chat-endpoint backend speaking the common chat-completion wire
//! format: message-list request, choice-list response.
//!
//! Transient failures (timeouts, connection errors, 429, 5xx) are retried
//! with exponential backoff up to `max_retries` extra attempts; auth failures
//! and other client errors surface immediately. A cassette can record live
//! exchanges or serve them back verbatim for offline tests. Unparseable
//! answers are re-asked up to twice with a format reminder before the
//! estimate is recorded as missing.

use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{CassetteMode, LlmParams};
use crate::prompting::{parse_estimate, PromptBundle};

use super::{AgentBackend, AgentError, AgentState, Cassette, CassetteEntry, Reply, RoundInput};

const PARSE_RETRIES: u32 = 2;
const FORMAT_REMINDER: &str = "Your previous answer did not follow the required format. \
Reply again using exactly this format:\nMy Final Answer: [YOUR ESTIMATE (A REAL NUMBER)]";

/// One turn in a chat conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: String,
}

enum Transient {
    RateLimited,
    Timeout,
    Transport(String),
}

impl Transient {
    fn into_error(self, attempts: u32) -> AgentError {
        match self {
            Transient::RateLimited => AgentError::RateLimited { attempts },
            Transient::Timeout => AgentError::Timeout { attempts },
            Transient::Transport(message) => AgentError::Transport { attempts, message },
        }
    }
}

pub struct LlmBackend {
    params: LlmParams,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    cassette: Option<Cassette>,
    last_request: Option<Instant>,
}

impl LlmBackend {
    /// Reads the API key from the configured environment variable. Replay
    /// mode never touches the network, so the key is optional there.
    pub fn new(params: LlmParams) -> Result<LlmBackend, AgentError> {
        let api_key = std::env::var(&params.api_key_env).ok();
        if api_key.is_none() && params.cassette_mode != CassetteMode::Replay {
            return Err(AgentError::MissingApiKey(params.api_key_env.clone()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(params.timeout_secs))
            .build()
            .map_err(|e| AgentError::Transport {
                attempts: 0,
                message: format!("client construction: {e}"),
            })?;
        let cassette = match &params.cassette {
            Some(path) if params.cassette_mode != CassetteMode::Off => {
                Some(Cassette::load(path)?)
            }
            _ => None,
        };
        Ok(LlmBackend {
            params,
            client,
            api_key,
            cassette,
            last_request: None,
        })
    }

    /// Send one conversation and return the assistant text.
    pub fn chat(
        &mut self,
        messages: &[ChatMessage],
        temperature: f64,
    ) -> Result<String, AgentError> {
        let request = serde_json::json!({
            "model": self.params.model,
            "messages": messages,
            "temperature": temperature,
        });
        let key = Cassette::request_key(&request);

        if self.params.cassette_mode == CassetteMode::Replay {
            let cassette = self.cassette.as_ref().expect("replay mode has a cassette");
            return cassette
                .get(&key)
                .map(str::to_string)
                .ok_or(AgentError::CassetteMiss { key });
        }

        let response = self.send_with_retries(&request)?;
        if self.params.cassette_mode == CassetteMode::Record {
            let cassette = self.cassette.as_mut().expect("record mode has a cassette");
            cassette.record(CassetteEntry {
                key,
                request,
                response: response.clone(),
            })?;
        }
        Ok(response)
    }

    fn send_with_retries(&mut self, request: &serde_json::Value) -> Result<String, AgentError> {
        let max_attempts = self.params.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.respect_rate_ceiling();
            match self.send_once(request) {
                Ok(text) => return Ok(text),
                Err(Ok(transient)) => {
                    if attempt >= max_attempts {
                        return Err(transient.into_error(attempt));
                    }
                    let delay = self.params.backoff_ms.saturating_mul(1 << (attempt - 1));
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(Err(fatal)) => return Err(fatal),
            }
        }
    }

    /// One request; `Err(Ok(_))` is retryable, `Err(Err(_))` is not.
    fn send_once(
        &mut self,
        request: &serde_json::Value,
    ) -> Result<String, Result<Transient, AgentError>> {
        self.last_request = Some(Instant::now());
        let mut builder = self.client.post(&self.params.endpoint).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                Ok(Transient::Timeout)
            } else {
                Ok(Transient::Transport(e.to_string()))
            }
        })?;

        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(Err(AgentError::Auth(format!("status {}", status.as_u16()))));
        }
        if status.as_u16() == 429 {
            return Err(Ok(Transient::RateLimited));
        }
        if status.is_server_error() {
            return Err(Ok(Transient::Transport(format!(
                "status {}",
                status.as_u16()
            ))));
        }
        if !status.is_success() {
            let message = response.text().unwrap_or_default();
            return Err(Err(AgentError::Endpoint {
                status: status.as_u16(),
                message: truncate(&message, 200),
            }));
        }

        let body: ChatResponse = response.json().map_err(|e| {
            Err(AgentError::Endpoint {
                status: status.as_u16(),
                message: format!("malformed response body: {e}"),
            })
        })?;
        let text = body
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or(Err(AgentError::Endpoint {
                status: status.as_u16(),
                message: "response carried no choices".into(),
            }))?;
        Ok(text)
    }

    fn respect_rate_ceiling(&self) {
        let interval = Duration::from_millis(self.params.min_request_interval_ms);
        if interval.is_zero() {
            return;
        }
        if let Some(last) = self.last_request {
            let elapsed = last.elapsed();
            if elapsed < interval {
                std::thread::sleep(interval - elapsed);
            }
        }
    }
}

impl AgentBackend for LlmBackend {
    fn reply(
        &mut self,
        state: &mut AgentState,
        prompt: &PromptBundle,
        input: &RoundInput<'_>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Reply, AgentError> {
        let mut messages: Vec<ChatMessage> =
            Vec::with_capacity(2 * state.memory.len() + 1 + 2 * PARSE_RETRIES as usize);
        for (p, r) in &state.memory {
            messages.push(ChatMessage::user(p));
            messages.push(ChatMessage::assistant(r));
        }
        messages.push(ChatMessage::user(&prompt.text));

        let mut raw = self.chat(&messages, input.temperature)?;
        let mut value = parse_estimate(&raw).ok().map(|p| p.value);
        let mut parse_attempts = 0;
        while value.is_none() && parse_attempts < PARSE_RETRIES {
            parse_attempts += 1;
            messages.push(ChatMessage::assistant(&raw));
            messages.push(ChatMessage::user(FORMAT_REMINDER));
            raw = self.chat(&messages, input.temperature)?;
            value = parse_estimate(&raw).ok().map(|p| p.value);
        }
        Ok(Reply {
            raw_text: raw,
            value,
        })
    }
}

fn truncate(text: &str, limit: usize) -> String {
    if text.len() <= limit {
        text.to_string()
    } else {
        let cut = text
            .char_indices()
            .take_while(|(i, _)| *i < limit)
            .last()
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(0);
        format!("{}...", &text[..cut])
    }
}
