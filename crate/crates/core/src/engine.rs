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

//! One memory instance bundled with its policy and embedder.
//!
//! Mutating methods take `&mut self` and read-only ones `&self`, so wrapping
//! the engine in an `RwLock` gives the single-writer, many-reader contract.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{AblationConfig, ConfigError, EngineConfig};
use crate::construction::{ib_diagnostics, ingest, ConstructionError, IbDiagnostics, IngestReport, Turn};
use crate::embedding::{Embedder, HashEmbedder};
use crate::graph::{MemoryGraph, SnapshotError};
use crate::policy::{EvidenceItem, MemoryPolicy, MockPolicy};
use crate::retrieval::{retrieve_iterative, EvidencePool, RetrievalError, RetrievalTrace};
use crate::topics::evolve_topics;

/// Seed used by [`MemoryEngine::mock`] for its hashing embedder.
pub const MOCK_EMBED_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub question: String,
    pub pool: EvidencePool,
    pub evidence: Vec<EvidenceItem>,
    /// `None` when nothing was retrieved.
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_error: Option<String>,
    pub trace: RetrievalTrace,
}

pub struct MemoryEngine {
    graph: MemoryGraph,
    policy: Arc<dyn MemoryPolicy>,
    embedder: Arc<dyn Embedder>,
    ablation: AblationConfig,
}

impl std::fmt::Debug for MemoryEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryEngine")
            .field("notes", &self.graph.note_count())
            .field("ablation", &self.ablation)
            .finish_non_exhaustive()
    }
}

impl MemoryEngine {
    pub fn new(
        config: EngineConfig,
        policy: Arc<dyn MemoryPolicy>,
        embedder: Arc<dyn Embedder>,
        ablation: AblationConfig,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self::from_graph(MemoryGraph::new(config), policy, embedder, ablation))
    }

    pub fn from_graph(
        graph: MemoryGraph,
        policy: Arc<dyn MemoryPolicy>,
        embedder: Arc<dyn Embedder>,
        ablation: AblationConfig,
    ) -> Self {
        MemoryEngine {
            graph,
            policy,
            embedder,
            ablation,
        }
    }

    /// Offline engine: hashing embedder plus the heuristic policy.
    pub fn mock(config: EngineConfig) -> Result<Self, ConfigError> {
        let embedder: Arc<dyn Embedder> = Arc::new(HashEmbedder::new(config.embedding_dim.max(1), MOCK_EMBED_SEED));
        let policy = Arc::new(MockPolicy::new(embedder.clone(), config.tau_merge));
        Self::new(config, policy, embedder, AblationConfig::default())
    }

    pub fn with_ablation(mut self, ablation: AblationConfig) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn graph(&self) -> &MemoryGraph {
        &self.graph
    }

    pub fn ablation(&self) -> &AblationConfig {
        &self.ablation
    }

    pub fn ingest(&mut self, turn: &Turn) -> Result<IngestReport, ConstructionError> {
        ingest(
            &mut self.graph,
            turn,
            self.policy.as_ref(),
            self.embedder.as_ref(),
            &self.ablation,
        )
    }

    /// Retrieve evidence for `question` and answer from it. With
    /// `iterative == false` only the first retrieval round runs.
    pub fn query(&self, question: &str, iterative: bool) -> Result<QueryOutcome, RetrievalError> {
        let mut ablation = self.ablation;
        ablation.disable_ier |= !iterative;
        let (pool, trace) = retrieve_iterative(
            &self.graph,
            question,
            self.policy.as_ref(),
            self.embedder.as_ref(),
            &ablation,
        )?;
        let evidence = pool.evidence(&self.graph);
        let (answer, answer_error) = if evidence.is_empty() {
            (None, None)
        } else {
            let temperature = self.graph.config().temperatures.general;
            match self.policy.answer(question, &evidence, temperature) {
                Ok(a) => (Some(a), None),
                Err(e) => (None, Some(e.to_string())),
            }
        };
        Ok(QueryOutcome {
            question: question.to_string(),
            pool,
            evidence,
            answer,
            answer_error,
            trace,
        })
    }

    /// Recompute topics; returns the topic count.
    pub fn evolve(&mut self) -> usize {
        evolve_topics(&mut self.graph)
    }

    pub fn stats(&self) -> IbDiagnostics {
        ib_diagnostics(&self.graph)
    }

    pub fn save(&self, path: &Path) -> Result<(), SnapshotError> {
        self.graph.snapshot_save(path)
    }

    /// Replace the graph with the snapshot at `path`.
    pub fn load(&mut self, path: &Path) -> Result<(), SnapshotError> {
        self.graph = MemoryGraph::snapshot_load(path)?;
        Ok(())
    }
}
