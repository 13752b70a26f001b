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

//! Blocking JSON-over-HTTP helper with bounded retries.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tracing::warn;

#[derive(Debug, Clone)]
pub(crate) struct JsonClient {
    agent: ureq::Agent,
    api_key: Option<String>,
    retries: u32,
}

impl JsonClient {
    pub(crate) fn new(timeout: Duration, retries: u32, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        JsonClient {
            agent,
            api_key,
            retries,
        }
    }

    /// POST `body` to `url`; transport errors and 5xx/429 responses are retried
    /// up to `retries` extra times.
    pub(crate) fn post<B: Serialize, R: DeserializeOwned>(&self, url: &str, body: &B) -> Result<R, String> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 * u64::from(attempt)));
            }
            let mut req = self.agent.post(url);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status == 429 || status >= 500 {
                        last = format!("{url}: HTTP {status}");
                        warn!(attempt, "{last}");
                        continue;
                    }
                    if status >= 400 {
                        let text = resp.body_mut().read_to_string().unwrap_or_default();
                        return Err(format!("{url}: HTTP {status}: {text}"));
                    }
                    return resp
                        .body_mut()
                        .read_json::<R>()
                        .map_err(|e| format!("{url}: bad response body: {e}"));
                }
                Err(e) => {
                    last = format!("{url}: {e}");
                    warn!(attempt, "{last}");
                }
            }
        }
        Err(last)
    }
}

/// Append `suffix` to `base` unless it already ends with it.
pub(crate) fn endpoint(base: &str, suffix: &str) -> String {
    let base = base.trim_end_matches('/');
    if base.ends_with(suffix) {
        base.to_string()
    } else {
        format!("{base}{suffix}")
    }
}

#[cfg(test)]
mod tests {
    use super::endpoint;

    #[test]
    fn endpoint_joins_once() {
        assert_eq!(endpoint("http://x/v1/", "/embeddings"), "http://x/v1/embeddings");
        assert_eq!(
            endpoint("http://x/v1/embeddings", "/embeddings"),
            "http://x/v1/embeddings"
        );
    }
}
