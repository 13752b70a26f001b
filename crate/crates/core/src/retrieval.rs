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

//! Tri-pathway retrieval (topic navigation, keyword anchoring, related-edge
//! expansion) fused by reciprocal rank, plus iterative evidence refinement.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::config::AblationConfig;
use crate::embedding::{dot, normalize, EmbedError, Embedder};
use crate::graph::{rank_top_k, GraphError, MemoryGraph, NoteId, TopicId};
use crate::policy::{
    fallback_intent, render_evidence, EvidenceItem, MemoryPolicy, QueryIntent, ReasoningStep, SufficiencyVerdict,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("query is empty")]
    EmptyQuery,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Pathway {
    Topic,
    Keyword,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayResult {
    pub pathway: Pathway,
    pub ranked: Vec<(NoteId, f64)>,
}

impl PathwayResult {
    fn empty(pathway: Pathway) -> Self {
        PathwayResult {
            pathway,
            ranked: Vec::new(),
        }
    }

    pub fn ids(&self) -> Vec<NoteId> {
        self.ranked.iter().map(|(id, _)| *id).collect()
    }
}

/// Reciprocal rank fusion: `score(x) = sum over lists of 1 / (k + rank)`,
/// ranks 1-based. Descending score, ascending id on ties.
pub fn rrf_fuse<Id: Copy + Ord + std::hash::Hash>(lists: &[Vec<Id>], k: f64) -> Vec<(Id, f64)> {
    let mut scores: HashMap<Id, f64> = HashMap::new();
    for list in lists {
        for (i, id) in list.iter().enumerate() {
            *scores.entry(*id).or_insert(0.0) += 1.0 / (k + (i + 1) as f64);
        }
    }
    let mut out: Vec<(Id, f64)> = scores.into_iter().collect();
    let n = out.len();
    rank_top_k(&mut out, n);
    out
}

/// Notes reachable through the `k_topic` topics closest to `h_topic`, each
/// scored by its best topic's cosine.
pub fn pathway_topic(g: &MemoryGraph, h_topic: &[f64]) -> Result<PathwayResult, RetrievalError> {
    if g.topic_count() == 0 {
        return Ok(PathwayResult::empty(Pathway::Topic));
    }
    let Some(q) = unit_query(g, h_topic)? else {
        return Ok(PathwayResult::empty(Pathway::Topic));
    };
    let floor = g.config().min_similarity;
    let mut topics: Vec<(TopicId, f64)> = g
        .topics()
        .map(|t| (t.id, dot(&q, &t.centroid)))
        .filter(|(_, s)| *s > floor)
        .collect();
    rank_top_k(&mut topics, g.config().k_topic);
    let mut best: BTreeMap<NoteId, f64> = BTreeMap::new();
    for (tid, score) in topics {
        let topic = g.topic(tid).expect("listed above");
        for k in &topic.members {
            for n in g.keyword(*k).into_iter().flat_map(|kw| &kw.note_refs) {
                let e = best.entry(*n).or_insert(f64::NEG_INFINITY);
                *e = e.max(score);
            }
        }
    }
    Ok(ranked(Pathway::Topic, best))
}

/// Notes holding any of the `k_key` keywords nearest to each query key, each
/// scored by its best matched keyword's cosine.
pub fn pathway_keyword(g: &MemoryGraph, h_keys: &[Vec<f64>]) -> Result<PathwayResult, RetrievalError> {
    let floor = g.config().min_similarity;
    let mut matched = BTreeMap::new();
    for h in h_keys {
        for (k, s) in g.nearest_keywords(h, g.config().k_key)? {
            if s > floor {
                let e = matched.entry(k).or_insert(f64::NEG_INFINITY);
                *e = f64::max(*e, s);
            }
        }
    }
    let mut best: BTreeMap<NoteId, f64> = BTreeMap::new();
    for (k, s) in matched {
        for n in g.keyword(k).into_iter().flat_map(|kw| &kw.note_refs) {
            let e = best.entry(*n).or_insert(f64::NEG_INFINITY);
            *e = e.max(s);
        }
    }
    Ok(ranked(Pathway::Keyword, best))
}

fn unit_query(g: &MemoryGraph, v: &[f64]) -> Result<Option<Vec<f64>>, RetrievalError> {
    if v.len() != g.dim() {
        return Err(GraphError::DimensionMismatch {
            expected: g.dim(),
            got: v.len(),
        }
        .into());
    }
    let mut q = v.to_vec();
    Ok(normalize(&mut q).ok().map(|_| q))
}

fn ranked(pathway: Pathway, scores: BTreeMap<NoteId, f64>) -> PathwayResult {
    let mut r: Vec<(NoteId, f64)> = scores.into_iter().collect();
    let n = r.len();
    rank_top_k(&mut r, n);
    PathwayResult { pathway, ranked: r }
}

/// Notes within `hops` related-edge steps of `anchors`, following edges in
/// both directions, excluding the anchors themselves.
pub fn topological_expand(g: &MemoryGraph, anchors: &BTreeSet<NoteId>, hops: usize) -> BTreeSet<NoteId> {
    expand_scored(g, anchors, &BTreeMap::new(), hops).into_keys().collect()
}

/// Breadth-first expansion; each reached note takes the best score of the
/// notes it was reached from. Unscored anchors count as 0.
fn expand_scored(
    g: &MemoryGraph,
    anchors: &BTreeSet<NoteId>,
    scores: &BTreeMap<NoteId, f64>,
    hops: usize,
) -> BTreeMap<NoteId, f64> {
    let mut reached: BTreeMap<NoteId, f64> = BTreeMap::new();
    let mut frontier: BTreeMap<NoteId, f64> = anchors
        .iter()
        .map(|a| (*a, scores.get(a).copied().unwrap_or(0.0)))
        .collect();
    for _ in 0..hops {
        let mut next: BTreeMap<NoteId, f64> = BTreeMap::new();
        for (&v, &s) in &frontier {
            for u in g.related_neighbors(v) {
                if anchors.contains(&u) || reached.contains_key(&u) {
                    continue;
                }
                let e = next.entry(u).or_insert(f64::NEG_INFINITY);
                *e = e.max(s);
            }
        }
        if next.is_empty() {
            break;
        }
        reached.extend(next.iter().map(|(k, v)| (*k, *v)));
        frontier = next;
    }
    reached
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidencePool {
    /// Fused notes first, then expanded notes.
    pub ranked: Vec<(NoteId, f64)>,
    /// Pathway hits kept in `ranked`.
    pub anchors: BTreeSet<NoteId>,
    pub expanded: BTreeSet<NoteId>,
    pub iteration: usize,
}

impl EvidencePool {
    pub fn ids(&self) -> Vec<NoteId> {
        self.ranked.iter().map(|(id, _)| *id).collect()
    }

    pub fn contains(&self, id: NoteId) -> bool {
        self.ranked.iter().any(|(n, _)| *n == id)
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    pub fn evidence(&self, g: &MemoryGraph) -> Vec<EvidenceItem> {
        self.ranked
            .iter()
            .filter_map(|(id, _)| g.note(*id).map(EvidenceItem::of))
            .collect()
    }

    /// Turn ids of every raw segment in the pool.
    pub fn turn_ids(&self, g: &MemoryGraph) -> BTreeSet<String> {
        self.ranked
            .iter()
            .filter_map(|(id, _)| g.note(*id))
            .flat_map(|n| n.raw.iter().map(|r| r.turn_id.clone()))
            .collect()
    }

    /// Append the notes of `other` not already present.
    fn absorb(&mut self, other: &EvidencePool) -> Vec<NoteId> {
        let mut added = Vec::new();
        for (id, s) in &other.ranked {
            if !self.contains(*id) {
                self.ranked.push((*id, *s));
                added.push(*id);
            }
        }
        self.anchors.extend(other.anchors.iter().filter(|a| added.contains(a)));
        self.expanded
            .extend(other.expanded.iter().filter(|e| added.contains(e)));
        added
    }
}

/// Why the refinement loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Disabled,
    Sufficient,
    ConfidenceReached,
    NoSubquery,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub query: String,
    pub intent: QueryIntent,
    pub topic_hits: Vec<(NoteId, f64)>,
    pub keyword_hits: Vec<(NoteId, f64)>,
    pub fused: Vec<(NoteId, f64)>,
    pub anchor_count: usize,
    pub expanded: Vec<NoteId>,
    /// Notes this iteration added to the pool.
    pub added: Vec<NoteId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<SufficiencyVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subquery: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub iterations: Vec<IterationRecord>,
    pub stop_reason: StopReason,
}

impl RetrievalTrace {
    pub fn sufficiency_calls(&self) -> usize {
        self.iterations.iter().filter(|r| r.verdict.is_some()).count()
    }
}

/// One pass of the three pathways for `query`.
pub fn retrieve_once(
    g: &MemoryGraph,
    query: &str,
    policy: &dyn MemoryPolicy,
    embedder: &dyn Embedder,
    ablation: &AblationConfig,
) -> Result<(EvidencePool, IterationRecord), RetrievalError> {
    if query.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    let intent = policy.parse_query_intent(query).unwrap_or_else(|e| {
        warn!(error = %e, "intent parsing failed; using query tokens");
        fallback_intent(query)
    });
    let topic = if ablation.disable_topic_pathway || g.topic_count() == 0 {
        PathwayResult::empty(Pathway::Topic)
    } else {
        match embed_optional(embedder, &intent.topic_desc)? {
            Some(h) => pathway_topic(g, &h)?,
            None => PathwayResult::empty(Pathway::Topic),
        }
    };
    let keyword = if ablation.disable_keyword_pathway {
        PathwayResult::empty(Pathway::Keyword)
    } else {
        let mut keys = Vec::with_capacity(intent.keywords.len());
        for k in &intent.keywords {
            if let Some(h) = embed_optional(embedder, k)? {
                keys.push(h);
            }
        }
        pathway_keyword(g, &keys)?
    };
    Ok(assemble(g, query, intent, topic, keyword, ablation))
}

fn embed_optional(embedder: &dyn Embedder, text: &str) -> Result<Option<Vec<f64>>, RetrievalError> {
    match embedder.embed(text) {
        Ok(v) => Ok(Some(v)),
        Err(EmbedError::EmptyText) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Fuse pathway results, expand, and cut to the pool size.
pub(crate) fn assemble(
    g: &MemoryGraph,
    query: &str,
    intent: QueryIntent,
    topic: PathwayResult,
    keyword: PathwayResult,
    ablation: &AblationConfig,
) -> (EvidencePool, IterationRecord) {
    let cfg = g.config();
    let all_anchors: BTreeSet<NoteId> = topic.ids().into_iter().chain(keyword.ids()).collect();
    let fused = rrf_fuse(&[topic.ids(), keyword.ids()], cfg.rrf_k);
    let mut pool_ranked: Vec<(NoteId, f64)> = fused.iter().take(cfg.k_final).copied().collect();
    let anchors: BTreeSet<NoteId> = pool_ranked.iter().map(|(id, _)| *id).collect();
    let mut expanded = BTreeSet::new();
    if !ablation.disable_neighbor {
        let fused_scores: BTreeMap<NoteId, f64> = fused.iter().copied().collect();
        let mut reached: Vec<(NoteId, f64)> = expand_scored(g, &all_anchors, &fused_scores, cfg.expansion_hops)
            .into_iter()
            .collect();
        let n = reached.len();
        rank_top_k(&mut reached, n);
        let room = cfg.pool_ceiling().saturating_sub(pool_ranked.len());
        for (id, s) in reached.into_iter().take(room) {
            expanded.insert(id);
            pool_ranked.push((id, s));
        }
    }
    let record = IterationRecord {
        iteration: 0,
        query: query.to_string(),
        intent,
        topic_hits: topic.ranked,
        keyword_hits: keyword.ranked,
        fused: fused.clone(),
        anchor_count: all_anchors.len(),
        expanded: pool_ranked
            .iter()
            .filter(|(id, _)| expanded.contains(id))
            .map(|(id, _)| *id)
            .collect(),
        added: pool_ranked.iter().map(|(id, _)| *id).collect(),
        verdict: None,
        subquery: None,
    };
    let pool = EvidencePool {
        ranked: pool_ranked,
        anchors,
        expanded,
        iteration: 0,
    };
    (pool, record)
}

/// Retrieve, then refine with sufficiency checks and sub-queries for at most
/// `i_max` rounds. The pool only ever grows.
pub fn retrieve_iterative(
    g: &MemoryGraph,
    query: &str,
    policy: &dyn MemoryPolicy,
    embedder: &dyn Embedder,
    ablation: &AblationConfig,
) -> Result<(EvidencePool, RetrievalTrace), RetrievalError> {
    let (mut pool, first) = retrieve_once(g, query, policy, embedder, ablation)?;
    let mut iterations = vec![first];
    if ablation.disable_ier {
        return Ok((
            pool,
            RetrievalTrace {
                iterations,
                stop_reason: StopReason::Disabled,
            },
        ));
    }
    let cfg = g.config();
    let mut history: Vec<ReasoningStep> = Vec::new();
    let mut stop_reason = StopReason::MaxIterations;
    for i in 0..cfg.i_max {
        let rendered = render_evidence(&pool.evidence(g));
        let verdict = policy.judge_sufficiency(&rendered, query).unwrap_or_else(|e| {
            warn!(error = %e, "sufficiency check failed; stopping");
            SufficiencyVerdict {
                sufficient: true,
                missing_info: String::new(),
                confidence: 0.0,
            }
        });
        let last = iterations.last_mut().expect("first iteration recorded");
        last.verdict = Some(verdict.clone());
        if verdict.sufficient {
            stop_reason = StopReason::Sufficient;
            break;
        }
        if cfg.sufficiency_confidence_stop.is_some_and(|t| verdict.confidence >= t) {
            stop_reason = StopReason::ConfidenceReached;
            break;
        }
        let sub = policy
            .generate_subquery(query, &rendered, &history, &verdict.missing_info)
            .unwrap_or_else(|e| {
                warn!(error = %e, "sub-query generation failed; stopping");
                None
            })
            .filter(|s| !s.trim().is_empty());
        let Some(sub) = sub else {
            stop_reason = StopReason::NoSubquery;
            break;
        };
        last.subquery = Some(sub.clone());
        let (next, mut record) = retrieve_once(g, &sub, policy, embedder, ablation)?;
        let answer = next
            .ranked
            .first()
            .and_then(|(id, _)| g.note(*id))
            .map(|n| n.context.clone())
            .unwrap_or_default();
        history.push(ReasoningStep { question: sub, answer });
        record.iteration = i + 1;
        record.added = pool.absorb(&next);
        pool.iteration = i + 1;
        iterations.push(record);
    }
    Ok((
        pool,
        RetrievalTrace {
            iterations,
            stop_reason,
        },
    ))
}
