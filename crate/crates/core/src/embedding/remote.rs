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

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{normalize, EmbedError, Embedder};
use crate::http::{endpoint, JsonClient};

pub const EMBED_API_KEY_ENV: &str = "MEMFLY_EMBED_API_KEY";

const MAX_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    pub base_url: String,
    pub model: String,
    pub dim: usize,
    pub timeout_secs: u64,
    pub retries: u32,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a [&'a str],
    model: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

/// Client for an OpenAI-style `POST /embeddings` endpoint.
///
/// Results are memoized per text for the lifetime of the client.
pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    client: JsonClient,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl HttpEmbedder {
    /// Reads the API key from `MEMFLY_EMBED_API_KEY` when set.
    pub fn new(config: HttpEmbedderConfig) -> Self {
        let key = std::env::var(EMBED_API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_key(config, key)
    }

    pub fn with_key(config: HttpEmbedderConfig, api_key: Option<String>) -> Self {
        let client = JsonClient::new(Duration::from_secs(config.timeout_secs), config.retries, api_key);
        HttpEmbedder {
            config,
            client,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn fetch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let url = endpoint(&self.config.base_url, "/embeddings");
        let req = EmbedRequest {
            input: texts,
            model: &self.config.model,
        };
        let resp: EmbedResponse = self.client.post(&url, &req).map_err(EmbedError::RemoteFailure)?;
        if resp.data.len() != texts.len() {
            return Err(EmbedError::RemoteFailure(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                resp.data.len()
            )));
        }
        resp.data
            .into_iter()
            .map(|d| {
                let mut v = d.embedding;
                if v.len() != self.config.dim {
                    return Err(EmbedError::DimensionMismatch {
                        expected: self.config.dim,
                        got: v.len(),
                    });
                }
                normalize(&mut v)?;
                Ok(v)
            })
            .collect()
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let missing: Vec<&str> = {
            let cache = self.cache.lock().expect("embedding cache poisoned");
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .copied()
                .filter(|t| !cache.contains_key(*t) && seen.insert(*t))
                .collect()
        };
        for chunk in missing.chunks(MAX_BATCH) {
            let vectors = self.fetch(chunk)?;
            let mut cache = self.cache.lock().expect("embedding cache poisoned");
            for (t, v) in chunk.iter().zip(vectors) {
                cache.insert((*t).to_string(), v);
            }
        }
        let cache = self.cache.lock().expect("embedding cache poisoned");
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }
}
