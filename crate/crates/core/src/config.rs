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

//! Engine configuration and ablation switches.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid thresholds: need 0 < tau_link ({tau_link}) <= tau_merge ({tau_merge}) < 1")]
    Thresholds { tau_merge: f64, tau_link: f64 },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("delta_min ({min}) exceeds delta_max ({max})")]
    CardinalityBounds { min: usize, max: usize },
}

/// Dense index strategy for note and keyword embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum IndexMode {
    /// Always scan every vector.
    Exact,
    /// Exact scan below `threshold` entries, hyperplane-hash buckets above it.
    Auto { threshold: usize },
}

impl Default for IndexMode {
    fn default() -> Self {
        IndexMode::Auto { threshold: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub general: f64,
    pub adversarial: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures {
            general: 0.7,
            adversarial: 0.5,
        }
    }
}

/// Tunables for construction, topic evolution and retrieval.
///
/// Defaults follow the published hyperparameter table where one exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Merge when the redundancy score strictly exceeds this.
    pub tau_merge: f64,
    /// Link when the complementarity score strictly exceeds this.
    pub tau_link: f64,
    pub k_topic: usize,
    pub k_key: usize,
    pub k_final: usize,
    pub i_max: usize,
    pub expansion_hops: usize,
    pub rrf_k: f64,
    pub delta_min: usize,
    pub delta_max: usize,
    /// Topic evolution runs automatically after this many ingests.
    pub evolve_every: u64,
    /// Size of the candidate neighborhood considered by the gated update.
    pub candidate_pool: usize,
    pub embedding_dim: usize,
    pub temperatures: Temperatures,
    /// Topic and keyword matches need a cosine strictly above this floor.
    pub min_similarity: f64,
    /// Stop refinement once the sufficiency verdict reports at least this confidence.
    pub sufficiency_confidence_stop: Option<f64>,
    pub leiden_seed: u64,
    pub index: IndexMode,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            tau_merge: 0.7,
            tau_link: 0.5,
            k_topic: 3,
            k_key: 10,
            k_final: 20,
            i_max: 3,
            expansion_hops: 1,
            rrf_k: 60.0,
            delta_min: 2,
            delta_max: 50,
            evolve_every: 50,
            candidate_pool: 10,
            embedding_dim: 256,
            temperatures: Temperatures::default(),
            min_similarity: 0.0,
            sufficiency_confidence_stop: None,
            leiden_seed: 42,
            index: IndexMode::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0 < self.tau_link && self.tau_link <= self.tau_merge && self.tau_merge < 1.0) {
            return Err(ConfigError::Thresholds {
                tau_merge: self.tau_merge,
                tau_link: self.tau_link,
            });
        }
        for (name, value) in [
            ("k_topic", self.k_topic),
            ("k_key", self.k_key),
            ("k_final", self.k_final),
            ("i_max", self.i_max),
            ("expansion_hops", self.expansion_hops),
            ("candidate_pool", self.candidate_pool),
            ("embedding_dim", self.embedding_dim),
            ("delta_min", self.delta_min),
        ] {
            if value == 0 {
                return Err(ConfigError::NonPositive(name));
            }
        }
        if self.evolve_every == 0 {
            return Err(ConfigError::NonPositive("evolve_every"));
        }
        if self.rrf_k <= 0.0 || !self.rrf_k.is_finite() {
            return Err(ConfigError::NonPositive("rrf_k"));
        }
        if self.delta_min > self.delta_max {
            return Err(ConfigError::CardinalityBounds {
                min: self.delta_min,
                max: self.delta_max,
            });
        }
        Ok(())
    }

    /// Upper bound on a single retrieval's pool once expansion is added.
    pub fn pool_ceiling(&self) -> usize {
        2 * self.k_final
    }
}

/// Component switches used for ablation runs. All `false` is the full pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub disable_update: bool,
    pub disable_denoise: bool,
    pub disable_link: bool,
    pub disable_merge: bool,
    pub disable_topic_pathway: bool,
    pub disable_keyword_pathway: bool,
    pub disable_neighbor: bool,
    pub disable_ier: bool,
}

impl AblationConfig {
    pub fn all() -> Self {
        AblationConfig {
            disable_update: true,
            disable_denoise: true,
            disable_link: true,
            disable_merge: true,
            disable_topic_pathway: true,
            disable_keyword_pathway: true,
            disable_neighbor: true,
            disable_ier: true,
        }
    }

    pub fn is_full(&self) -> bool {
        *self == AblationConfig::default()
    }

    /// Short label such as `"w/o update+keyword"`, or `"full"`.
    pub fn label(&self) -> String {
        let names = [
            (self.disable_update, "update"),
            (self.disable_denoise, "denoise"),
            (self.disable_link, "link"),
            (self.disable_merge, "merge"),
            (self.disable_topic_pathway, "topic"),
            (self.disable_keyword_pathway, "keyword"),
            (self.disable_neighbor, "neighbor"),
            (self.disable_ier, "ier"),
        ];
        let off: Vec<&str> = names.iter().filter(|(f, _)| *f).map(|(_, n)| *n).collect();
        if off.is_empty() {
            "full".to_string()
        } else {
            format!("w/o {}", off.join("+"))
        }
    }
}
