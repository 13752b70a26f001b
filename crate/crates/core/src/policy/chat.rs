// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::http::{endpoint, JsonClient};

pub const LLM_API_KEY_ENV: &str = "MEMFLY_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system: Option<String>,
    pub user: String,
    pub temperature: f64,
}

/// A chat-completion backend.
pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, PolicyError>;
}

impl<C: ChatClient + ?Sized> ChatClient for std::sync::Arc<C> {
    fn complete(&self, request: &ChatRequest) -> Result<String, PolicyError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpChatConfig {
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    /// Extra attempts after a transport failure.
    pub retries: u32,
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: Vec<Message<'a>>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

/// OpenAI-style `POST /chat/completions` client.
pub struct HttpChatClient {
    config: HttpChatConfig,
    client: JsonClient,
}

impl HttpChatClient {
    /// Reads the API key from `MEMFLY_LLM_API_KEY` when set.
    pub fn new(config: HttpChatConfig) -> Self {
        let key = std::env::var(LLM_API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_key(config, key)
    }

    pub fn with_key(config: HttpChatConfig, api_key: Option<String>) -> Self {
        let client = JsonClient::new(Duration::from_secs(config.timeout_secs), config.retries, api_key);
        HttpChatClient { config, client }
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, PolicyError> {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &request.system {
            messages.push(Message {
                role: "system",
                content: system,
            });
        }
        messages.push(Message {
            role: "user",
            content: &request.user,
        });
        let body = CompletionRequest {
            model: &self.config.model,
            temperature: request.temperature,
            messages,
        };
        let url = endpoint(&self.config.base_url, "/chat/completions");
        let resp: CompletionResponse = self.client.post(&url, &body).map_err(PolicyError::RemoteFailure)?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| PolicyError::RemoteFailure("response has no message content".into()))
    }
}
