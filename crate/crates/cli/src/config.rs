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

//! Operator configuration: engine tunables, provider endpoints and paths.
//!
//! Resolution order is flags, then environment variables (both handled by
//! clap), then the TOML file, then built-in defaults.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use memfly_core::config::{AblationConfig, EngineConfig};
use memfly_core::embedding::{Embedder, HashEmbedder, HttpEmbedder, HttpEmbedderConfig};
use memfly_core::engine::MemoryEngine;
use memfly_core::graph::MemoryGraph;
use memfly_core::policy::{HttpChatClient, HttpChatConfig, LlmPolicy, MemoryPolicy, MockPolicy};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_SNAPSHOT: &str = "memfly-snapshot.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Hashing embedder and heuristic policy; no network.
    #[default]
    Mock,
    /// OpenAI-compatible chat and embedding endpoints.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub retries: u32,
    /// Temperature for the structured calls (extraction, judgments, intent).
    pub temperature: f64,
    /// Answer prompt with `{context}` and `{question}` placeholders.
    pub answer_template: Option<String>,
}

impl Default for LlmSettings {
    fn default() -> Self {
        LlmSettings {
            base_url: String::new(),
            model: String::new(),
            timeout_secs: 60,
            retries: 2,
            temperature: 0.0,
            answer_template: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedSettings {
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub retries: u32,
}

impl Default for EmbedSettings {
    fn default() -> Self {
        EmbedSettings {
            base_url: String::new(),
            model: String::new(),
            timeout_secs: 30,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub mode: Mode,
    pub snapshot: PathBuf,
    /// Dataset directory for `eval`; the bundled mini-corpus when unset.
    pub dataset: Option<PathBuf>,
    /// Seed of the hashing embedder used in mock mode.
    pub hash_seed: u64,
    pub engine: EngineConfig,
    pub llm: LlmSettings,
    pub embed: EmbedSettings,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            mode: Mode::Mock,
            snapshot: PathBuf::from(DEFAULT_SNAPSHOT),
            dataset: None,
            hash_seed: memfly_core::engine::MOCK_EMBED_SEED,
            engine: EngineConfig::default(),
            llm: LlmSettings::default(),
            embed: EmbedSettings::default(),
        }
    }
}

/// Values that may come from flags or environment variables.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub snapshot: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub llm_base_url: Option<String>,
    pub llm_model: Option<String>,
    pub embed_base_url: Option<String>,
    pub embed_model: Option<String>,
}

impl CliConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is plain data")
    }

    /// Read `file` when given, apply `overrides`, and validate.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                Self::from_toml(&text)?
            }
            None => CliConfig::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(p) = &o.snapshot {
            self.snapshot = p.clone();
        }
        if let Some(p) = &o.dataset {
            self.dataset = Some(p.clone());
        }
        for (slot, value) in [
            (&mut self.llm.base_url, &o.llm_base_url),
            (&mut self.llm.model, &o.llm_model),
            (&mut self.embed.base_url, &o.embed_base_url),
            (&mut self.embed.model, &o.embed_model),
        ] {
            if let Some(v) = value {
                *slot = v.clone();
            }
        }
    }

    /// Remote mode needs both endpoints; mock mode ignores them.
    pub fn validate(&self) -> Result<(), CliError> {
        self.engine.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.mode == Mode::Remote {
            for (name, value) in [
                ("llm.base_url", &self.llm.base_url),
                ("llm.model", &self.llm.model),
                ("embed.base_url", &self.embed.base_url),
                ("embed.model", &self.embed.model),
            ] {
                if value.trim().is_empty() {
                    return Err(CliError::Config(format!("remote mode requires {name}")));
                }
            }
        }
        Ok(())
    }

    fn providers(&self, dim: usize) -> (Arc<dyn MemoryPolicy>, Arc<dyn Embedder>) {
        match self.mode {
            Mode::Mock => {
                let embedder: Arc<dyn Embedder> = Arc::new(HashEmbedder::new(dim, self.hash_seed));
                let policy = Arc::new(MockPolicy::new(embedder.clone(), self.engine.tau_merge));
                (policy, embedder)
            }
            Mode::Remote => {
                let embedder: Arc<dyn Embedder> = Arc::new(HttpEmbedder::new(HttpEmbedderConfig {
                    base_url: self.embed.base_url.clone(),
                    model: self.embed.model.clone(),
                    dim,
                    timeout_secs: self.embed.timeout_secs,
                    retries: self.embed.retries,
                }));
                let client = Arc::new(HttpChatClient::new(HttpChatConfig {
                    base_url: self.llm.base_url.clone(),
                    model: self.llm.model.clone(),
                    timeout_secs: self.llm.timeout_secs,
                    retries: self.llm.retries,
                }));
                let mut policy = LlmPolicy::new(client, self.llm.temperature);
                if let Some(t) = &self.llm.answer_template {
                    policy = policy.with_answer_template(t.clone());
                }
                (Arc::new(policy), embedder)
            }
        }
    }

    /// Engine over the snapshot file when it exists, otherwise an empty graph.
    /// A loaded snapshot keeps the engine settings it was written with.
    pub fn open_engine(&self, ablation: AblationConfig) -> Result<MemoryEngine, CliError> {
        let graph = if self.snapshot.exists() {
            MemoryGraph::snapshot_load(&self.snapshot)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", self.snapshot.display())))?
        } else {
            MemoryGraph::new(self.engine.clone())
        };
        let (policy, embedder) = self.providers(graph.dim());
        Ok(MemoryEngine::from_graph(graph, policy, embedder, ablation))
    }

    /// Fresh providers for benchmark runs, which build their own graphs.
    pub fn benchmark_providers(&self) -> (Arc<dyn MemoryPolicy>, Arc<dyn Embedder>) {
        self.providers(self.engine.embedding_dim)
    }
}
