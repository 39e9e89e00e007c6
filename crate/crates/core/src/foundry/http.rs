//! Chat client for an OpenAI-compatible `chat/completions` endpoint.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::error::FoundryError;
use crate::foundry::clients::{ChatClient, ChatRequest, RetryPolicy};

pub const DEFAULT_API_KEY_ENV: &str = "IER_CHAT_API_KEY";

pub struct HttpChatClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    http: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

impl HttpChatClient {
    /// Reads the API key from `api_key_env` if set; a missing key is allowed
    /// for local endpoints.
    pub fn new(endpoint: &str, model: &str, api_key_env: &str, retry: RetryPolicy) -> Result<Self, FoundryError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| FoundryError::Config(format!("http client: {e}")))?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key: std::env::var(api_key_env).ok(),
            retry,
            http,
        })
    }

    fn call_once(&self, request: &ChatRequest) -> Result<String, FoundryError> {
        let body = json!({
            "model": self.model,
            "temperature": request.temperature,
            "messages": [{"role": "user", "content": request.prompt}],
        });
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let transport = |message: String| FoundryError::Transport { attempts: 1, message };
        let resp = req.send().map_err(|e| transport(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(transport(format!("endpoint returned {status}")));
        }
        if !status.is_success() {
            return Err(FoundryError::Contract(format!("endpoint returned {status}")));
        }
        let completion: Completion = resp
            .json()
            .map_err(|e| FoundryError::Contract(format!("malformed completion: {e}")))?;
        completion
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| FoundryError::Contract("completion has no choices".into()))
    }
}

impl ChatClient for HttpChatClient {
    fn chat(&self, request: &ChatRequest) -> Result<String, FoundryError> {
        self.retry.run(|| self.call_once(request))
    }
}
