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

//! The stratified memory state: notes, keywords, topics and their edges.
//!
//! `MemoryGraph` owns every cross-reference between the three layers and keeps
//! the dense indices in step with the tables. All mutation goes through its
//! methods so [`MemoryGraph::check_invariants`] holds after every public call.

mod index;
mod snapshot;

pub use index::{rank_key, rank_top_k, DenseIndex, SCORE_RESOLUTION};
pub use snapshot::{SnapshotError, SCHEMA_VERSION};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EngineConfig;
use crate::embedding::{l2_norm, normalize};

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(NoteId, "n");
id_type!(KeywordId, "k");
id_type!(TopicId, "t");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown keyword {0}")]
    UnknownKeyword(KeywordId),
    #[error("keyword surface is empty")]
    EmptySurface,
    #[error("note {0} not found")]
    NotFound(NoteId),
    #[error("self-loop on note {0}")]
    SelfLoop(NoteId),
    #[error("invalid note: {0}")]
    InvalidNote(&'static str),
}

/// One verbatim observation as it entered the memory.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RawSegment {
    pub text: String,
    pub speaker: String,
    pub turn_id: String,
    /// Logical clock value at ingestion.
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub id: NoteId,
    pub raw: Vec<RawSegment>,
    pub context: String,
    pub embedding: Vec<f64>,
    pub keywords: BTreeSet<KeywordId>,
    pub created_at: u64,
    pub updated_at: u64,
    pub merge_count: u32,
}

/// A note before it has been assigned an id.
#[derive(Debug, Clone, PartialEq)]
pub struct NoteDraft {
    pub raw: Vec<RawSegment>,
    pub context: String,
    pub embedding: Vec<f64>,
    pub keywords: BTreeSet<KeywordId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub id: KeywordId,
    pub surface: String,
    pub embedding: Vec<f64>,
    pub note_refs: BTreeSet<NoteId>,
    pub topic: Option<TopicId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub id: TopicId,
    pub members: BTreeSet<KeywordId>,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RelationType {
    Supports,
    Conflicts,
    RelatedTo,
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelationType::Supports => "SUPPORTS",
            RelationType::Conflicts => "CONFLICTS",
            RelationType::RelatedTo => "RELATED_TO",
        })
    }
}

/// Directed related edge, stored new -> existing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelatedEdge {
    pub from: NoteId,
    pub to: NoteId,
    pub relation: RelationType,
    pub strength: f64,
    /// Contrast statement recorded for `CONFLICTS` links.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoOccurEdge {
    pub a: KeywordId,
    pub b: KeywordId,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdCounters {
    pub next_note: u64,
    pub next_keyword: u64,
    pub next_topic: u64,
}

/// Running totals of consolidation outcomes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationTotals {
    pub inputs_seen: u64,
    pub merge_total: u64,
    /// Ingests that created a note (plain appends and linked appends).
    pub append_total: u64,
    /// Ingests that created at least one related edge.
    pub link_total: u64,
}

/// A broken invariant found by [`MemoryGraph::check_invariants`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

#[derive(Debug, Clone)]
pub struct MemoryGraph {
    config: EngineConfig,
    clock: u64,
    counters: IdCounters,
    totals: OperationTotals,
    notes: BTreeMap<NoteId, Note>,
    keywords: BTreeMap<KeywordId, Keyword>,
    topics: BTreeMap<TopicId, Topic>,
    related: BTreeMap<(NoteId, NoteId), RelatedEdge>,
    co_occur: BTreeMap<(KeywordId, KeywordId), u64>,
    surfaces: HashMap<String, KeywordId>,
    adjacency: HashMap<NoteId, BTreeSet<NoteId>>,
    note_index: DenseIndex<NoteId>,
    keyword_index: DenseIndex<KeywordId>,
}

impl PartialEq for MemoryGraph {
    /// Structural equality over persisted state; indices are derived.
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.clock == other.clock
            && self.counters == other.counters
            && self.totals == other.totals
            && self.notes == other.notes
            && self.keywords == other.keywords
            && self.topics == other.topics
            && self.related == other.related
            && self.co_occur == other.co_occur
    }
}

const UNIT_TOLERANCE: f64 = 1e-6;

fn canonical_pair(a: KeywordId, b: KeywordId) -> (KeywordId, KeywordId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl MemoryGraph {
    pub fn new(config: EngineConfig) -> Self {
        let dim = config.embedding_dim;
        let mode = config.index;
        MemoryGraph {
            config,
            clock: 0,
            counters: IdCounters::default(),
            totals: OperationTotals::default(),
            notes: BTreeMap::new(),
            keywords: BTreeMap::new(),
            topics: BTreeMap::new(),
            related: BTreeMap::new(),
            co_occur: BTreeMap::new(),
            surfaces: HashMap::new(),
            adjacency: HashMap::new(),
            note_index: DenseIndex::new(dim, mode),
            keyword_index: DenseIndex::new(dim, mode),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Advance the logical clock by one and return the new value.
    pub fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    pub fn counters(&self) -> IdCounters {
        self.counters
    }

    pub fn totals(&self) -> OperationTotals {
        self.totals
    }

    pub(crate) fn totals_mut(&mut self) -> &mut OperationTotals {
        &mut self.totals
    }

    pub fn note(&self, id: NoteId) -> Option<&Note> {
        self.notes.get(&id)
    }

    pub fn notes(&self) -> impl Iterator<Item = &Note> {
        self.notes.values()
    }

    pub fn note_count(&self) -> usize {
        self.notes.len()
    }

    pub fn keyword(&self, id: KeywordId) -> Option<&Keyword> {
        self.keywords.get(&id)
    }

    pub fn keywords(&self) -> impl Iterator<Item = &Keyword> {
        self.keywords.values()
    }

    pub fn keyword_count(&self) -> usize {
        self.keywords.len()
    }

    pub fn keyword_by_surface(&self, surface: &str) -> Option<KeywordId> {
        self.surfaces.get(surface).copied()
    }

    pub fn topic(&self, id: TopicId) -> Option<&Topic> {
        self.topics.get(&id)
    }

    pub fn topics(&self) -> impl Iterator<Item = &Topic> {
        self.topics.values()
    }

    pub fn topic_count(&self) -> usize {
        self.topics.len()
    }

    pub fn related_edges(&self) -> impl Iterator<Item = &RelatedEdge> {
        self.related.values()
    }

    pub fn related_edge(&self, from: NoteId, to: NoteId) -> Option<&RelatedEdge> {
        self.related.get(&(from, to))
    }

    pub fn related_edge_count(&self) -> usize {
        self.related.len()
    }

    /// Notes joined to `id` by a related edge in either direction.
    pub fn related_neighbors(&self, id: NoteId) -> impl Iterator<Item = NoteId> + '_ {
        self.adjacency.get(&id).into_iter().flatten().copied()
    }

    pub fn co_occurrence(&self) -> impl Iterator<Item = CoOccurEdge> + '_ {
        self.co_occur
            .iter()
            .map(|(&(a, b), &count)| CoOccurEdge { a, b, count })
    }

    pub fn co_occurrence_weight(&self, a: KeywordId, b: KeywordId) -> u64 {
        self.co_occur.get(&canonical_pair(a, b)).copied().unwrap_or(0)
    }

    fn check_dim(&self, v: &[f64]) -> Result<(), GraphError> {
        if v.len() != self.dim() {
            return Err(GraphError::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    fn unit(&self, v: &[f64]) -> Result<Vec<f64>, GraphError> {
        self.check_dim(v)?;
        let mut out = v.to_vec();
        normalize(&mut out).map_err(|_| GraphError::InvalidNote("zero embedding"))?;
        Ok(out)
    }

    /// Return the id for `surface`, inserting a new keyword if it is unseen.
    /// An existing keyword keeps its original embedding.
    pub fn upsert_keyword(&mut self, surface: &str, embedding: &[f64]) -> Result<KeywordId, GraphError> {
        if surface.trim().is_empty() {
            return Err(GraphError::EmptySurface);
        }
        if let Some(id) = self.surfaces.get(surface) {
            return Ok(*id);
        }
        let embedding = self.unit(embedding)?;
        let id = KeywordId(self.counters.next_keyword);
        self.counters.next_keyword += 1;
        self.keyword_index.upsert(id, &embedding);
        self.surfaces.insert(surface.to_string(), id);
        self.keywords.insert(
            id,
            Keyword {
                id,
                surface: surface.to_string(),
                embedding,
                note_refs: BTreeSet::new(),
                topic: None,
            },
        );
        Ok(id)
    }

    /// Store a new note stamped with the current clock.
    pub fn add_note(&mut self, draft: NoteDraft) -> Result<NoteId, GraphError> {
        if draft.raw.is_empty() {
            return Err(GraphError::InvalidNote("raw segments are empty"));
        }
        let embedding = self.unit(&draft.embedding)?;
        if let Some(k) = draft.keywords.iter().find(|k| !self.keywords.contains_key(k)) {
            return Err(GraphError::UnknownKeyword(*k));
        }
        let id = NoteId(self.counters.next_note);
        self.counters.next_note += 1;
        for k in &draft.keywords {
            self.keywords.get_mut(k).expect("checked above").note_refs.insert(id);
        }
        self.note_index.upsert(id, &embedding);
        let merge_count = (draft.raw.len() - 1) as u32;
        self.notes.insert(
            id,
            Note {
                id,
                raw: draft.raw,
                context: draft.context,
                embedding,
                keywords: draft.keywords,
                created_at: self.clock,
                updated_at: self.clock,
                merge_count,
            },
        );
        Ok(id)
    }

    /// Absorb `source` into the existing note `target`: raw segments and
    /// keywords are unioned, context and embedding replaced.
    pub fn absorb_into(
        &mut self,
        target: NoteId,
        source: NoteDraft,
        merged_context: String,
        merged_embedding: &[f64],
    ) -> Result<(), GraphError> {
        if !self.notes.contains_key(&target) {
            return Err(GraphError::NotFound(target));
        }
        let embedding = self.unit(merged_embedding)?;
        if let Some(k) = source.keywords.iter().find(|k| !self.keywords.contains_key(k)) {
            return Err(GraphError::UnknownKeyword(*k));
        }
        for k in &source.keywords {
            self.keywords
                .get_mut(k)
                .expect("checked above")
                .note_refs
                .insert(target);
        }
        self.note_index.upsert(target, &embedding);
        let clock = self.clock;
        let note = self.notes.get_mut(&target).expect("checked above");
        let absorbed = source.raw.len() as u32;
        note.raw.extend(source.raw);
        note.raw.sort_by_key(|s| s.timestamp);
        note.context = merged_context;
        note.embedding = embedding;
        note.keywords.extend(source.keywords);
        note.merge_count += absorbed;
        note.updated_at = clock;
        Ok(())
    }

    /// Remove a note with its incident related edges. Keywords left without
    /// notes are kept until the next topic evolution.
    pub fn remove_note(&mut self, id: NoteId) -> Result<Note, GraphError> {
        let note = self.notes.remove(&id).ok_or(GraphError::NotFound(id))?;
        self.note_index.remove(id);
        for k in &note.keywords {
            if let Some(kw) = self.keywords.get_mut(k) {
                kw.note_refs.remove(&id);
            }
        }
        if let Some(neigh) = self.adjacency.remove(&id) {
            for other in neigh {
                self.related.remove(&(id, other));
                self.related.remove(&(other, id));
                if let Some(set) = self.adjacency.get_mut(&other) {
                    set.remove(&id);
                    if set.is_empty() {
                        self.adjacency.remove(&other);
                    }
                }
            }
        }
        Ok(note)
    }

    /// Add or overwrite the related edge `from -> to`.
    pub fn link_notes(
        &mut self,
        from: NoteId,
        to: NoteId,
        relation: RelationType,
        strength: f64,
        contrast: Option<String>,
    ) -> Result<(), GraphError> {
        if from == to {
            return Err(GraphError::SelfLoop(from));
        }
        for id in [from, to] {
            if !self.notes.contains_key(&id) {
                return Err(GraphError::NotFound(id));
            }
        }
        self.related.insert(
            (from, to),
            RelatedEdge {
                from,
                to,
                relation,
                strength: strength.clamp(0.0, 1.0),
                contrast,
            },
        );
        self.adjacency.entry(from).or_default().insert(to);
        self.adjacency.entry(to).or_default().insert(from);
        Ok(())
    }

    /// Increment the co-occurrence count of every unordered pair in `keywords`.
    pub fn update_cooccurrence(&mut self, keywords: &BTreeSet<KeywordId>) {
        let ks: Vec<KeywordId> = keywords.iter().copied().collect();
        for (i, &a) in ks.iter().enumerate() {
            for &b in &ks[i + 1..] {
                *self.co_occur.entry(canonical_pair(a, b)).or_insert(0) += 1;
            }
        }
    }

    /// Top-`k` notes by cosine to `query`; descending score, ascending id.
    pub fn nearest_notes(&self, query: &[f64], k: usize) -> Result<Vec<(NoteId, f64)>, GraphError> {
        self.check_dim(query)?;
        let mut q = query.to_vec();
        if normalize(&mut q).is_err() {
            return Ok(Vec::new());
        }
        Ok(self.note_index.search(&q, k))
    }

    /// Top-`k` keywords by cosine to `query`; descending score, ascending id.
    pub fn nearest_keywords(&self, query: &[f64], k: usize) -> Result<Vec<(KeywordId, f64)>, GraphError> {
        self.check_dim(query)?;
        let mut q = query.to_vec();
        if normalize(&mut q).is_err() {
            return Ok(Vec::new());
        }
        Ok(self.keyword_index.search(&q, k))
    }

    /// Replace the whole topic layer. Keywords not covered lose their topic.
    pub(crate) fn replace_topics(&mut self, topics: Vec<(BTreeSet<KeywordId>, Vec<f64>)>) -> Vec<TopicId> {
        self.topics.clear();
        for kw in self.keywords.values_mut() {
            kw.topic = None;
        }
        let mut ids = Vec::with_capacity(topics.len());
        for (members, centroid) in topics {
            let id = TopicId(self.counters.next_topic);
            self.counters.next_topic += 1;
            for k in &members {
                if let Some(kw) = self.keywords.get_mut(k) {
                    kw.topic = Some(id);
                }
            }
            self.topics.insert(id, Topic { id, members, centroid });
            ids.push(id);
        }
        ids
    }

    /// Drop keywords that no note references, together with their
    /// co-occurrence edges. Returns how many were removed.
    pub(crate) fn prune_orphan_keywords(&mut self) -> usize {
        let orphans: Vec<KeywordId> = self
            .keywords
            .values()
            .filter(|k| k.note_refs.is_empty())
            .map(|k| k.id)
            .collect();
        for id in &orphans {
            let kw = self.keywords.remove(id).expect("listed above");
            self.surfaces.remove(&kw.surface);
            self.keyword_index.remove(*id);
            for topic in self.topics.values_mut() {
                topic.members.remove(id);
            }
        }
        if !orphans.is_empty() {
            let gone: BTreeSet<KeywordId> = orphans.iter().copied().collect();
            self.co_occur.retain(|(a, b), _| !gone.contains(a) && !gone.contains(b));
            self.topics.retain(|_, t| !t.members.is_empty());
        }
        orphans.len()
    }

    /// Every invariant violation currently present; empty when consistent.
    pub fn check_invariants(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |entity: String, rule: &str| {
            out.push(Violation {
                entity,
                rule: rule.to_string(),
            })
        };
        let dim = self.dim();

        for (id, note) in &self.notes {
            let e = format!("note {id}");
            if note.id != *id {
                push(e.clone(), "id does not match table key");
            }
            if id.0 >= self.counters.next_note {
                push(e.clone(), "id not below the note counter");
            }
            if note.embedding.len() != dim {
                push(e.clone(), "embedding dimension differs from config");
            } else if (l2_norm(&note.embedding) - 1.0).abs() > UNIT_TOLERANCE {
                push(e.clone(), "embedding is not unit-norm");
            }
            if note.raw.is_empty() {
                push(e.clone(), "raw segments are empty");
            } else if note.merge_count as usize != note.raw.len() - 1 {
                push(e.clone(), "merge_count != |raw| - 1");
            }
            if note.raw.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
                push(e.clone(), "raw segments out of timestamp order");
            }
            for k in &note.keywords {
                match self.keywords.get(k) {
                    None => push(e.clone(), "references unknown keyword"),
                    Some(kw) if !kw.note_refs.contains(id) => {
                        push(format!("keyword {k}"), "note_refs missing a referencing note")
                    }
                    _ => {}
                }
            }
        }

        let mut seen_surfaces = HashMap::new();
        for (id, kw) in &self.keywords {
            let e = format!("keyword {id}");
            if kw.id != *id {
                push(e.clone(), "id does not match table key");
            }
            if id.0 >= self.counters.next_keyword {
                push(e.clone(), "id not below the keyword counter");
            }
            if kw.surface.trim().is_empty() {
                push(e.clone(), "surface is empty");
            }
            if let Some(prev) = seen_surfaces.insert(kw.surface.clone(), *id) {
                push(e.clone(), &format!("surface duplicates keyword {prev}"));
            }
            if self.surfaces.get(&kw.surface) != Some(id) {
                push(e.clone(), "surface index out of sync");
            }
            if kw.embedding.len() != dim {
                push(e.clone(), "embedding dimension differs from config");
            } else if (l2_norm(&kw.embedding) - 1.0).abs() > UNIT_TOLERANCE {
                push(e.clone(), "embedding is not unit-norm");
            }
            for n in &kw.note_refs {
                match self.notes.get(n) {
                    None => push(e.clone(), "note_refs contains a missing note"),
                    Some(note) if !note.keywords.contains(id) => {
                        push(e.clone(), "note_refs contains a note that does not reference it")
                    }
                    _ => {}
                }
            }
            if let Some(t) = kw.topic {
                match self.topics.get(&t) {
                    Some(topic) if topic.members.contains(id) => {}
                    _ => push(e.clone(), "topic back-reference is stale"),
                }
            }
        }
        if self.surfaces.len() != self.keywords.len() {
            push("surface index".into(), "size differs from keyword table");
        }

        let mut owner: HashMap<KeywordId, TopicId> = HashMap::new();
        for (id, topic) in &self.topics {
            let e = format!("topic {id}");
            if id.0 >= self.counters.next_topic {
                push(e.clone(), "id not below the topic counter");
            }
            if topic.members.is_empty() {
                push(e.clone(), "has no members");
            }
            if topic.centroid.len() != dim || (l2_norm(&topic.centroid) - 1.0).abs() > UNIT_TOLERANCE {
                push(e.clone(), "centroid is not a unit vector of the configured dimension");
            }
            for k in &topic.members {
                if let Some(prev) = owner.insert(*k, *id) {
                    push(e.clone(), &format!("shares keyword {k} with topic {prev}"));
                }
                match self.keywords.get(k) {
                    None => push(e.clone(), "member keyword does not exist"),
                    Some(kw) if kw.topic != Some(*id) => push(format!("keyword {k}"), "topic back-reference missing"),
                    _ => {}
                }
            }
        }

        for ((from, to), edge) in &self.related {
            let e = format!("related {from}->{to}");
            if from == to {
                push(e.clone(), "self-loop");
            }
            if edge.from != *from || edge.to != *to {
                push(e.clone(), "endpoints do not match key");
            }
            if !self.notes.contains_key(from) || !self.notes.contains_key(to) {
                push(e.clone(), "endpoint missing");
            }
            if !(0.0..=1.0).contains(&edge.strength) {
                push(e.clone(), "strength outside [0,1]");
            }
            let linked = |a: &NoteId, b: &NoteId| self.adjacency.get(a).is_some_and(|s| s.contains(b));
            if !linked(from, to) || !linked(to, from) {
                push(e.clone(), "adjacency out of sync");
            }
        }
        for ((a, b), count) in &self.co_occur {
            let e = format!("co_occur {a}-{b}");
            if a >= b {
                push(e.clone(), "key not canonically ordered or self-loop");
            }
            if *count == 0 {
                push(e.clone(), "non-positive count");
            }
            if !self.keywords.contains_key(a) || !self.keywords.contains_key(b) {
                push(e.clone(), "endpoint missing");
            }
        }
        if self.note_index.len() != self.notes.len() {
            push("note index".into(), "size differs from note table");
        }
        if self.keyword_index.len() != self.keywords.len() {
            push("keyword index".into(), "size differs from keyword table");
        }
        out
    }

    #[cfg(test)]
    pub(crate) fn keyword_mut_for_test(&mut self, id: KeywordId) -> &mut Keyword {
        self.keywords.get_mut(&id).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{dot, Embedder, HashEmbedder};

    fn cfg(dim: usize) -> EngineConfig {
        EngineConfig {
            embedding_dim: dim,
            ..EngineConfig::default()
        }
    }

    fn seg(text: &str, ts: u64) -> RawSegment {
        RawSegment {
            text: text.into(),
            speaker: "A".into(),
            turn_id: format!("t{ts}"),
            timestamp: ts,
            date: None,
        }
    }

    fn draft(e: &HashEmbedder, text: &str, ts: u64, keywords: &[KeywordId]) -> NoteDraft {
        NoteDraft {
            raw: vec![seg(text, ts)],
            context: text.into(),
            embedding: e.embed(text).unwrap(),
            keywords: keywords.iter().copied().collect(),
        }
    }

    #[test]
    fn add_single_note() {
        let e = HashEmbedder::new(32, 0);
        let mut g = MemoryGraph::new(cfg(32));
        let k = g.upsert_keyword("melanie", &e.embed("melanie").unwrap()).unwrap();
        let n = g.add_note(draft(&e, "Melanie paints", 1, &[k])).unwrap();
        assert_eq!(g.note_count(), 1);
        assert_eq!(g.keyword(k).unwrap().note_refs, BTreeSet::from([n]));
        assert!(g.check_invariants().is_empty());
    }

    #[test]
    fn add_note_wrong_dimension() {
        let mut g = MemoryGraph::new(cfg(8));
        let d = NoteDraft {
            raw: vec![seg("x", 1)],
            context: "x".into(),
            embedding: vec![1.0; 4],
            keywords: BTreeSet::new(),
        };
        assert_eq!(
            g.add_note(d),
            Err(GraphError::DimensionMismatch { expected: 8, got: 4 })
        );
    }

    #[test]
    fn add_note_unknown_keyword() {
        let e = HashEmbedder::new(8, 0);
        let mut g = MemoryGraph::new(cfg(8));
        assert_eq!(
            g.add_note(draft(&e, "x", 1, &[KeywordId(9)])),
            Err(GraphError::UnknownKeyword(KeywordId(9)))
        );
    }

    #[test]
    fn shared_keyword_refs_match_scan() {
        let e = HashEmbedder::new(32, 0);
        let mut g = MemoryGraph::new(cfg(32));
        let k = g.upsert_keyword("melanie", &e.embed("melanie").unwrap()).unwrap();
        let other = g.upsert_keyword("pottery", &e.embed("pottery").unwrap()).unwrap();
        g.add_note(draft(&e, "one", 1, &[k])).unwrap();
        g.add_note(draft(&e, "two", 2, &[k, other])).unwrap();
        let scanned: BTreeSet<NoteId> = g.notes().filter(|n| n.keywords.contains(&k)).map(|n| n.id).collect();
        assert_eq!(scanned.len(), 2);
        assert_eq!(g.keyword(k).unwrap().note_refs, scanned);
    }

    #[test]
    fn upsert_keyword_is_idempotent() {
        let e = HashEmbedder::new(16, 0);
        let mut g = MemoryGraph::new(cfg(16));
        let a = g
            .upsert_keyword("transformer", &e.embed("transformer").unwrap())
            .unwrap();
        let b = g.upsert_keyword("transformer", &e.embed("other").unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(g.keyword(a).unwrap().embedding, e.embed("transformer").unwrap());
        let c = g.upsert_keyword("attention", &e.embed("attention").unwrap()).unwrap();
        assert_ne!(a, c);
        assert_eq!(
            g.upsert_keyword("", &e.embed("x").unwrap()),
            Err(GraphError::EmptySurface)
        );
    }

    #[test]
    fn add_then_remove_restores_empty_tables() {
        let e = HashEmbedder::new(16, 0);
        let mut g = MemoryGraph::new(cfg(16));
        let n = g.add_note(draft(&e, "hello there", 1, &[])).unwrap();
        g.remove_note(n).unwrap();
        assert_eq!(g.note_count(), 0);
        assert!(g.nearest_notes(&e.embed("hello").unwrap(), 5).unwrap().is_empty());
        assert_eq!(g.counters().next_note, 1);
        assert_eq!(g.remove_note(n), Err(GraphError::NotFound(n)));
    }

    #[test]
    fn removing_source_drops_edge() {
        let e = HashEmbedder::new(16, 0);
        let mut g = MemoryGraph::new(cfg(16));
        let a = g.add_note(draft(&e, "a", 1, &[])).unwrap();
        let b = g.add_note(draft(&e, "b", 2, &[])).unwrap();
        g.link_notes(a, b, RelationType::RelatedTo, 0.6, None).unwrap();
        g.remove_note(a).unwrap();
        assert_eq!(g.related_edges().filter(|x| x.from == a || x.to == a).count(), 0);
        assert_eq!(g.related_neighbors(b).count(), 0);
        assert!(g.check_invariants().is_empty());
    }

    #[test]
    fn link_semantics() {
        let e = HashEmbedder::new(16, 0);
        let mut g = MemoryGraph::new(cfg(16));
        let a = g.add_note(draft(&e, "a", 1, &[])).unwrap();
        let b = g.add_note(draft(&e, "b", 2, &[])).unwrap();
        g.link_notes(a, b, RelationType::RelatedTo, 0.6, None).unwrap();
        assert_eq!(g.related_edge_count(), 1);
        g.link_notes(a, b, RelationType::Conflicts, 0.9, None).unwrap();
        assert_eq!(g.related_edge_count(), 1);
        let edge = g.related_edge(a, b).unwrap();
        assert_eq!((edge.relation, edge.strength), (RelationType::Conflicts, 0.9));
        assert_eq!(
            g.link_notes(a, a, RelationType::Supports, 1.0, None),
            Err(GraphError::SelfLoop(a))
        );
        assert_eq!(
            g.link_notes(a, NoteId(77), RelationType::Supports, 1.0, None),
            Err(GraphError::NotFound(NoteId(77)))
        );
    }

    #[test]
    fn cooccurrence_counts_pairs() {
        let e = HashEmbedder::new(16, 0);
        let mut g = MemoryGraph::new(cfg(16));
        let ids: Vec<KeywordId> = ["a", "b", "c"]
            .iter()
            .map(|s| g.upsert_keyword(s, &e.embed(s).unwrap()).unwrap())
            .collect();
        g.update_cooccurrence(&ids.iter().copied().collect());
        assert_eq!(g.co_occurrence().count(), 3);
        assert!(g.co_occurrence().all(|c| c.count == 1));
        g.update_cooccurrence(&BTreeSet::from([ids[0]]));
        assert_eq!(g.co_occurrence().count(), 3);
        g.update_cooccurrence(&BTreeSet::from([ids[1], ids[0]]));
        assert_eq!(g.co_occurrence_weight(ids[0], ids[1]), 2);
        assert_eq!(g.co_occurrence_weight(ids[1], ids[0]), 2);
    }

    #[test]
    fn nearest_notes_self_match_and_overflow() {
        let e = HashEmbedder::new(64, 0);
        let mut g = MemoryGraph::new(cfg(64));
        let texts = [
            "red apple pie",
            "green tea",
            "blue sky ocean",
            "apple orchard",
            "tea ceremony",
        ];
        let ids: Vec<NoteId> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| g.add_note(draft(&e, t, i as u64, &[])).unwrap())
            .collect();
        let top = g.nearest_notes(&e.embed("blue sky ocean").unwrap(), 1).unwrap();
        assert_eq!(top[0].0, ids[2]);
        assert!((top[0].1 - 1.0).abs() < 1e-6);
        assert_eq!(g.nearest_notes(&e.embed("tea").unwrap(), 50).unwrap().len(), 5);
        assert!(matches!(
            g.nearest_notes(&[1.0], 1),
            Err(GraphError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn nearest_notes_match_brute_force() {
        let e = HashEmbedder::new(64, 0);
        let mut g = MemoryGraph::new(cfg(64));
        for (i, t) in ["apple pie", "apple tart", "cherry pie", "pear tart", "plum"]
            .iter()
            .enumerate()
        {
            g.add_note(draft(&e, t, i as u64, &[])).unwrap();
        }
        let q = e.embed("apple pie recipe").unwrap();
        let mut brute: Vec<(NoteId, f64)> = g.notes().map(|n| (n.id, dot(&q, &n.embedding))).collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        brute.truncate(3);
        assert_eq!(g.nearest_notes(&q, 3).unwrap(), brute);
    }

    #[test]
    fn nearest_keywords_self_match() {
        let e = HashEmbedder::new(64, 0);
        let mut g = MemoryGraph::new(cfg(64));
        for s in ["painting", "pottery", "camping", "melanie"] {
            g.upsert_keyword(s, &e.embed(s).unwrap()).unwrap();
        }
        let top = g.nearest_keywords(&e.embed("camping").unwrap(), 2).unwrap();
        assert_eq!(g.keyword(top[0].0).unwrap().surface, "camping");
        assert!((top[0].1 - 1.0).abs() < 1e-6);
        assert_eq!(g.nearest_keywords(&e.embed("x").unwrap(), 10).unwrap().len(), 4);
    }

    #[test]
    fn broken_note_refs_reported() {
        let e = HashEmbedder::new(16, 0);
        let mut g = MemoryGraph::new(cfg(16));
        let k = g.upsert_keyword("k", &e.embed("k").unwrap()).unwrap();
        g.add_note(draft(&e, "n", 1, &[k])).unwrap();
        assert!(g.check_invariants().is_empty());
        g.keyword_mut_for_test(k).note_refs.clear();
        let v = g.check_invariants();
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].entity, "keyword k0");
    }

    #[test]
    fn graph_is_send_and_sync() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<MemoryGraph>();
    }
}
