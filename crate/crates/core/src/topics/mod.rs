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

//! Topic layer: keyword communities found by constrained modularity
//! optimization over the co-occurrence graph.

mod graph;
mod leiden;

pub use graph::{modularity, WeightedGraph};
pub use leiden::{leiden_partition, leiden_unconstrained, Partition};

use std::collections::BTreeSet;

use thiserror::Error;
use tracing::debug;

use crate::embedding::centroid;
use crate::graph::{KeywordId, MemoryGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopicError {
    #[error("graph has no edges")]
    EmptyGraph,
    #[error("assignment covers {got} vertices, graph has {expected}")]
    AssignmentLength { expected: usize, got: usize },
    #[error("invalid community bounds {delta_min}..={delta_max}")]
    Bounds { delta_min: usize, delta_max: usize },
}

/// The co-occurrence graph over keywords that have at least one edge.
/// Returns the graph and the keyword behind each vertex.
pub fn cooccurrence_graph(g: &MemoryGraph) -> (WeightedGraph, Vec<KeywordId>) {
    let vertices: Vec<KeywordId> = g
        .co_occurrence()
        .flat_map(|e| [e.a, e.b])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index = |k: KeywordId| vertices.binary_search(&k).expect("vertex listed");
    let edges: Vec<(usize, usize, f64)> = g
        .co_occurrence()
        .map(|e| (index(e.a), index(e.b), e.count as f64))
        .collect();
    (WeightedGraph::new(vertices.len(), &edges), vertices)
}

/// Re-partition keywords into topics and recompute centroids. Orphaned
/// keywords are dropped first. With no co-occurrence edges the topic layer is
/// left as it is. Returns the topic count.
pub fn evolve_topics(g: &mut MemoryGraph) -> usize {
    let pruned = g.prune_orphan_keywords();
    let (wg, vertices) = cooccurrence_graph(g);
    let cfg = g.config();
    let partition = match leiden_partition(&wg, cfg.delta_min, cfg.delta_max, cfg.leiden_seed) {
        Ok(p) => p,
        Err(e) => {
            debug!(error = %e, "topic evolution skipped");
            return g.topic_count();
        }
    };
    let dim = g.dim();
    let topics: Vec<(BTreeSet<KeywordId>, Vec<f64>)> = partition
        .communities()
        .into_iter()
        .filter_map(|members| {
            let members: BTreeSet<KeywordId> = members.into_iter().map(|v| vertices[v]).collect();
            let c = centroid(
                members
                    .iter()
                    .filter_map(|k| g.keyword(*k))
                    .map(|k| k.embedding.as_slice()),
                dim,
            )?;
            Some((members, c))
        })
        .collect();
    debug!(
        topics = topics.len(),
        pruned,
        modularity = partition.modularity,
        undersized = partition.undersized.len(),
        "topics evolved"
    );
    g.replace_topics(topics);
    g.topic_count()
}
