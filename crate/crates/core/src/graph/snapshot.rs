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

//! Versioned, checksummed JSON snapshots.
//!
//! The body is serialized in canonical form (sorted keys, compact) and hashed
//! with SHA-256; the digest is appended as a trailing `checksum` field.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{CoOccurEdge, DenseIndex, IdCounters, Keyword, MemoryGraph, Note, OperationTotals, RelatedEdge, Topic};
use crate::config::EngineConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    SchemaVersionMismatch { found: u64 },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

#[derive(Serialize, Deserialize)]
struct SnapshotBody {
    schema_version: u32,
    config: EngineConfig,
    clock: u64,
    counters: IdCounters,
    totals: OperationTotals,
    notes: Vec<Note>,
    keywords: Vec<Keyword>,
    topics: Vec<Topic>,
    related_edges: Vec<RelatedEdge>,
    co_occur_edges: Vec<CoOccurEdge>,
}

fn digest(canonical: &str) -> String {
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn corrupt(msg: impl Into<String>) -> SnapshotError {
    SnapshotError::CorruptSnapshot(msg.into())
}

impl MemoryGraph {
    /// Serialize to the snapshot document format.
    pub fn to_snapshot_string(&self) -> String {
        let body = SnapshotBody {
            schema_version: SCHEMA_VERSION,
            config: self.config.clone(),
            clock: self.clock,
            counters: self.counters,
            totals: self.totals,
            notes: self.notes.values().cloned().collect(),
            keywords: self.keywords.values().cloned().collect(),
            topics: self.topics.values().cloned().collect(),
            related_edges: self.related.values().cloned().collect(),
            co_occur_edges: self.co_occurrence().collect(),
        };
        let canonical = serde_json::to_value(&body)
            .expect("snapshot body is always representable as JSON")
            .to_string();
        let sum = digest(&canonical);
        let mut out = canonical;
        out.pop(); // closing brace
        out.push_str(&format!(",\"checksum\":\"{sum}\"}}"));
        out
    }

    pub fn from_snapshot_str(text: &str) -> Result<MemoryGraph, SnapshotError> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| corrupt(format!("unparseable: {e}")))?;
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| corrupt("top level is not an object"))?;
        let version = obj
            .get("schema_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| corrupt("missing schema_version"))?;
        if version != u64::from(SCHEMA_VERSION) {
            return Err(SnapshotError::SchemaVersionMismatch { found: version });
        }
        let stored = match obj.remove("checksum") {
            Some(Value::String(s)) => s,
            _ => return Err(corrupt("missing checksum")),
        };
        if digest(&doc.to_string()) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let body: SnapshotBody = serde_json::from_value(doc).map_err(|e| corrupt(format!("bad body: {e}")))?;
        let graph = MemoryGraph::from_body(body);
        let violations = graph.check_invariants();
        if let Some(first) = violations.first() {
            return Err(corrupt(format!(
                "{} invariant violations, first: {first}",
                violations.len()
            )));
        }
        Ok(graph)
    }

    /// Write atomically: a temporary sibling file is renamed over `path`.
    pub fn snapshot_save(&self, path: &Path) -> Result<(), SnapshotError> {
        let text = self.to_snapshot_string();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(text.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn snapshot_load(path: &Path) -> Result<MemoryGraph, SnapshotError> {
        let text = fs::read_to_string(path)?;
        MemoryGraph::from_snapshot_str(&text)
    }

    fn from_body(body: SnapshotBody) -> MemoryGraph {
        let dim = body.config.embedding_dim;
        let mode = body.config.index;
        let mut note_index = DenseIndex::new(dim, mode);
        let mut keyword_index = DenseIndex::new(dim, mode);
        let notes: BTreeMap<_, _> = body
            .notes
            .into_iter()
            .map(|n| {
                if n.embedding.len() == dim {
                    note_index.upsert(n.id, &n.embedding);
                }
                (n.id, n)
            })
            .collect();
        let mut surfaces = HashMap::new();
        let keywords: BTreeMap<_, _> = body
            .keywords
            .into_iter()
            .map(|k| {
                if k.embedding.len() == dim {
                    keyword_index.upsert(k.id, &k.embedding);
                }
                surfaces.insert(k.surface.clone(), k.id);
                (k.id, k)
            })
            .collect();
        let mut adjacency: HashMap<_, BTreeSet<_>> = HashMap::new();
        let related = body
            .related_edges
            .into_iter()
            .map(|e| {
                adjacency.entry(e.from).or_default().insert(e.to);
                adjacency.entry(e.to).or_default().insert(e.from);
                ((e.from, e.to), e)
            })
            .collect();
        MemoryGraph {
            config: body.config,
            clock: body.clock,
            counters: body.counters,
            totals: body.totals,
            notes,
            keywords,
            topics: body.topics.into_iter().map(|t| (t.id, t)).collect(),
            related,
            co_occur: body.co_occur_edges.into_iter().map(|c| ((c.a, c.b), c.count)).collect(),
            surfaces,
            adjacency,
            note_index,
            keyword_index,
        }
    }
}
