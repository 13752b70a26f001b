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

//! Online consolidation: parse a turn, gather its candidate neighborhood, and
//! apply exactly one of Merge, Link or Append.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::config::AblationConfig;
use crate::embedding::{EmbedError, Embedder};
use crate::graph::{GraphError, KeywordId, MemoryGraph, NoteDraft, NoteId, RawSegment, RelationType};
use crate::policy::{CandidateJudgment, MemoryPolicy, NoteSummary, PolicyError};
use crate::retrieval::rrf_fuse;
use crate::topics::evolve_topics;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstructionError {
    #[error("turn text is empty")]
    EmptyInput,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// One observation to ingest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
    /// Generated as `t{clock}` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

impl Turn {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Turn {
            speaker: speaker.into(),
            text: text.into(),
            turn_id: None,
            date: None,
        }
    }

    pub fn with_id(mut self, turn_id: impl Into<String>) -> Self {
        self.turn_id = Some(turn_id.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Operation {
    Merged,
    Linked,
    Appended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    /// The note holding the turn afterwards.
    pub note_id: NoteId,
    pub operation: Operation,
    /// Merge target, or the strongest link partner.
    pub partner: Option<NoteId>,
    /// All link targets, in candidate order.
    pub links: Vec<NoteId>,
    pub judgments: Vec<CandidateJudgment>,
    pub new_keywords: Vec<KeywordId>,
    /// Topic count when this ingest triggered an evolution pass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evolved_topics: Option<usize>,
}

/// The gated-update decision for one new note.
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Merge {
        target: NoteId,
        judgment: CandidateJudgment,
    },
    Link {
        links: Vec<CandidateJudgment>,
    },
    Append,
}

/// Apply the thresholds to a set of judgments.
///
/// The strongest `SUPPORTS` judgment above `tau_merge` wins (lower id on
/// ties). Otherwise every `RELATED_TO` above `tau_link` and every
/// `CONFLICTS` becomes a link. Otherwise the note is appended alone.
pub fn decide(judgments: &[CandidateJudgment], tau_merge: f64, tau_link: f64, ablation: &AblationConfig) -> Decision {
    if ablation.disable_update {
        return Decision::Append;
    }
    if !ablation.disable_merge {
        let best = judgments
            .iter()
            .filter(|j| j.relation_type == RelationType::Supports)
            .max_by(|a, b| {
                a.connection_strength
                    .total_cmp(&b.connection_strength)
                    .then(b.candidate.cmp(&a.candidate))
            });
        if let Some(best) = best.filter(|b| b.connection_strength > tau_merge) {
            return Decision::Merge {
                target: best.candidate,
                judgment: best.clone(),
            };
        }
    }
    if ablation.disable_link {
        return Decision::Append;
    }
    let links: Vec<CandidateJudgment> = judgments
        .iter()
        .filter(|j| match j.relation_type {
            RelationType::Conflicts => true,
            RelationType::RelatedTo => j.connection_strength > tau_link,
            RelationType::Supports => false,
        })
        .cloned()
        .collect();
    if links.is_empty() {
        Decision::Append
    } else {
        Decision::Link { links }
    }
}

/// Existing notes worth judging against a new one: the dense top-`pool` and
/// every note sharing a keyword, fused by reciprocal rank and cut to `pool`.
pub fn candidate_neighborhood(
    g: &MemoryGraph,
    embedding: &[f64],
    keywords: &BTreeSet<KeywordId>,
    pool: usize,
    exclude: Option<NoteId>,
) -> Result<Vec<NoteId>, GraphError> {
    let floor = g.config().min_similarity;
    let dense: Vec<NoteId> = g
        .nearest_notes(embedding, pool + usize::from(exclude.is_some()))?
        .into_iter()
        .filter(|(id, s)| *s > floor && Some(*id) != exclude)
        .map(|(id, _)| id)
        .collect();
    let mut shared: BTreeMap<NoteId, usize> = BTreeMap::new();
    for k in keywords {
        if let Some(kw) = g.keyword(*k) {
            for n in &kw.note_refs {
                if Some(*n) != exclude {
                    *shared.entry(*n).or_insert(0) += 1;
                }
            }
        }
    }
    let mut sparse: Vec<(NoteId, usize)> = shared.into_iter().collect();
    sparse.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let sparse: Vec<NoteId> = sparse.into_iter().map(|(id, _)| id).collect();
    let mut fused = rrf_fuse(&[dense, sparse], g.config().rrf_k);
    fused.truncate(pool);
    Ok(fused.into_iter().map(|(id, _)| id).collect())
}

/// Absorb `source` into `target` with a new context embedded from scratch.
/// An empty `merged_context` falls back to `"{target}; {source}"`.
pub fn merge_notes(
    g: &mut MemoryGraph,
    target: NoteId,
    source: NoteDraft,
    merged_context: &str,
    embedder: &dyn Embedder,
) -> Result<NoteId, ConstructionError> {
    let existing = g.note(target).ok_or(GraphError::NotFound(target))?;
    let context = merged_or_joined(merged_context, &existing.context, &source.context);
    let embedding = embedder.embed(&context)?;
    g.absorb_into(target, source, context, &embedding)?;
    Ok(target)
}

fn merged_or_joined(merged: &str, existing: &str, new: &str) -> String {
    if merged.trim().is_empty() {
        format!("{existing}; {new}")
    } else {
        merged.trim().to_string()
    }
}

fn contrast_text(existing: &str, new: &str) -> String {
    format!("{}. However, {}", existing.trim_end().trim_end_matches('.'), new.trim())
}

/// Ingest one turn: exactly one of Merge, Link or Append is applied and the
/// clock advances by one. Policy and embedding calls all happen before the
/// graph is touched, so an error leaves the graph unchanged.
pub fn ingest(
    g: &mut MemoryGraph,
    turn: &Turn,
    policy: &dyn MemoryPolicy,
    embedder: &dyn Embedder,
    ablation: &AblationConfig,
) -> Result<IngestReport, ConstructionError> {
    let raw = turn.text.trim();
    if raw.is_empty() {
        return Err(ConstructionError::EmptyInput);
    }
    let parsed = policy.ingest_parse(raw, &turn.speaker)?;
    let context = if ablation.disable_denoise || parsed.context.trim().is_empty() {
        raw.to_string()
    } else {
        parsed.context.trim().to_string()
    };
    let embedding = embedder.embed(&context)?;
    let surfaces: Vec<&str> = parsed.keywords.iter().map(String::as_str).collect();
    let keyword_vectors = if surfaces.is_empty() {
        Vec::new()
    } else {
        embedder.embed_batch(&surfaces)?
    };

    let known: BTreeSet<KeywordId> = surfaces.iter().filter_map(|s| g.keyword_by_surface(s)).collect();
    let candidates = if ablation.disable_update {
        Vec::new()
    } else {
        candidate_neighborhood(g, &embedding, &known, g.config().candidate_pool, None)?
    };

    let mut judgments = Vec::new();
    if !candidates.is_empty() {
        let new_summary = NoteSummary {
            id: None,
            content: if turn.speaker.is_empty() {
                raw.to_string()
            } else {
                format!("{}: {raw}", turn.speaker)
            },
            context: context.clone(),
            keywords: parsed.keywords.clone(),
            embedding: embedding.clone(),
        };
        let summaries: Vec<NoteSummary> = candidates
            .iter()
            .filter_map(|id| g.note(*id).map(|n| NoteSummary::of(g, n)))
            .collect();
        match policy.judge_candidates(&new_summary, &summaries) {
            Ok(js) => {
                let allowed: BTreeSet<NoteId> = candidates.iter().copied().collect();
                let mut seen = BTreeSet::new();
                judgments = js
                    .into_iter()
                    .filter(|j| allowed.contains(&j.candidate) && seen.insert(j.candidate))
                    .collect();
                judgments.sort_by_key(|j| candidates.iter().position(|c| *c == j.candidate));
            }
            Err(e) => warn!(error = %e, "candidate judgment failed; appending"),
        }
    }

    let cfg = g.config();
    let decision = decide(&judgments, cfg.tau_merge, cfg.tau_link, ablation);
    let merge_plan = match &decision {
        Decision::Merge { target, judgment } => {
            let existing = &g.note(*target).ok_or(GraphError::NotFound(*target))?.context;
            let merged = merged_or_joined(judgment.merged_context.as_deref().unwrap_or(""), existing, &context);
            let merged_embedding = embedder.embed(&merged)?;
            Some((*target, merged, merged_embedding))
        }
        _ => None,
    };

    let clock = g.tick();
    let mut keyword_ids = BTreeSet::new();
    let mut new_keywords = Vec::new();
    for (surface, vector) in surfaces.iter().zip(&keyword_vectors) {
        let before = g.counters().next_keyword;
        let id = g.upsert_keyword(surface, vector)?;
        if id.0 >= before {
            new_keywords.push(id);
        }
        keyword_ids.insert(id);
    }
    g.update_cooccurrence(&keyword_ids);

    let draft = NoteDraft {
        raw: vec![RawSegment {
            text: raw.to_string(),
            speaker: turn.speaker.clone(),
            turn_id: turn.turn_id.clone().unwrap_or_else(|| format!("t{clock}")),
            timestamp: clock,
            date: turn.date.clone(),
        }],
        context: context.clone(),
        embedding,
        keywords: keyword_ids,
    };

    let (note_id, operation, partner, links) = match (decision, merge_plan) {
        (Decision::Merge { .. }, Some((target, merged, merged_embedding))) => {
            g.absorb_into(target, draft, merged, &merged_embedding)?;
            g.totals_mut().merge_total += 1;
            (target, Operation::Merged, Some(target), Vec::new())
        }
        (Decision::Link { links }, _) => {
            let id = g.add_note(draft)?;
            let mut targets = Vec::with_capacity(links.len());
            for j in &links {
                let contrast = (j.relation_type == RelationType::Conflicts)
                    .then(|| g.note(j.candidate).map(|n| contrast_text(&n.context, &context)))
                    .flatten();
                g.link_notes(id, j.candidate, j.relation_type, j.connection_strength, contrast)?;
                targets.push(j.candidate);
            }
            let partner = links
                .iter()
                .max_by(|a, b| {
                    a.connection_strength
                        .total_cmp(&b.connection_strength)
                        .then(b.candidate.cmp(&a.candidate))
                })
                .map(|j| j.candidate);
            let totals = g.totals_mut();
            totals.append_total += 1;
            totals.link_total += 1;
            (id, Operation::Linked, partner, targets)
        }
        _ => {
            let id = g.add_note(draft)?;
            g.totals_mut().append_total += 1;
            (id, Operation::Appended, None, Vec::new())
        }
    };
    g.totals_mut().inputs_seen += 1;
    debug!(note = %note_id, ?operation, "ingested turn");

    let evolved_topics = if g.totals().inputs_seen.is_multiple_of(g.config().evolve_every.max(1)) {
        Some(evolve_topics(g))
    } else {
        None
    };

    Ok(IngestReport {
        note_id,
        operation,
        partner,
        links,
        judgments,
        new_keywords,
        evolved_topics,
    })
}

/// Compression and connectivity counters for the current graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IbDiagnostics {
    pub inputs_seen: u64,
    pub note_count: usize,
    pub merge_total: u64,
    pub link_total: u64,
    pub append_total: u64,
    /// `inputs_seen / note_count`, or 1 for an empty graph.
    pub compression_ratio: f64,
    pub mean_keywords_per_note: f64,
    pub related_edge_count: usize,
    pub keyword_count: usize,
    pub topic_count: usize,
}

pub fn ib_diagnostics(g: &MemoryGraph) -> IbDiagnostics {
    let t = g.totals();
    let n = g.note_count();
    let (compression_ratio, mean_keywords_per_note) = if n == 0 {
        (1.0, 0.0)
    } else {
        let kw: usize = g.notes().map(|n| n.keywords.len()).sum();
        ((t.inputs_seen as f64 / n as f64).max(1.0), kw as f64 / n as f64)
    };
    IbDiagnostics {
        inputs_seen: t.inputs_seen,
        note_count: n,
        merge_total: t.merge_total,
        link_total: t.link_total,
        append_total: t.append_total,
        compression_ratio,
        mean_keywords_per_note,
        related_edge_count: g.related_edge_count(),
        keyword_count: g.keyword_count(),
        topic_count: g.topic_count(),
    }
}
