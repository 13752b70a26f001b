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

//! LLM-mediated decisions behind one trait.
//!
//! [`MemoryPolicy`] covers ingestion parsing, candidate judgment, query intent,
//! sufficiency and sub-query generation, plus answer generation for
//! evaluation. [`LlmPolicy`] drives a chat model through the prompt templates
//! in [`prompts`]; [`MockPolicy`] is a deterministic offline stand-in.

mod chat;
pub mod json;
mod llm;
mod mock;
pub mod prompts;

pub use chat::{ChatClient, ChatRequest, HttpChatClient, HttpChatConfig, LLM_API_KEY_ENV};
pub(crate) use llm::fallback_intent;
pub use llm::LlmPolicy;
pub use mock::MockPolicy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{MemoryGraph, Note, NoteId, RelationType};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("model call failed: {0}")]
    RemoteFailure(String),
    #[error("precondition violated: {0}")]
    Precondition(&'static str),
}

/// Keywords and denoised context extracted from one raw turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestResult {
    pub keywords: Vec<String>,
    pub context: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateJudgment {
    pub candidate: NoteId,
    pub relation_type: RelationType,
    pub connection_strength: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_context: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryIntent {
    pub topic_desc: String,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyVerdict {
    pub sufficient: bool,
    pub missing_info: String,
    pub confidence: f64,
}

/// Text-level view of a note handed to the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct NoteSummary {
    /// `None` for a note that has not been stored yet.
    pub id: Option<NoteId>,
    pub content: String,
    pub context: String,
    pub keywords: Vec<String>,
    pub embedding: Vec<f64>,
}

impl NoteSummary {
    pub fn of(graph: &MemoryGraph, note: &Note) -> Self {
        NoteSummary {
            id: Some(note.id),
            content: note.raw.iter().map(|r| r.text.as_str()).collect::<Vec<_>>().join(" / "),
            context: note.context.clone(),
            keywords: note
                .keywords
                .iter()
                .filter_map(|k| graph.keyword(*k).map(|kw| kw.surface.clone()))
                .collect(),
            embedding: note.embedding.clone(),
        }
    }
}

/// One evidence note as shown to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub note: NoteId,
    pub context: String,
    pub first_raw: String,
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

impl EvidenceItem {
    pub fn of(note: &Note) -> Self {
        let first = note.raw.first();
        EvidenceItem {
            note: note.id,
            context: note.context.clone(),
            first_raw: first.map(|r| r.text.clone()).unwrap_or_default(),
            timestamp: first.map(|r| r.timestamp).unwrap_or(note.created_at),
            date: first.and_then(|r| r.date.clone()),
        }
    }
}

/// Render evidence in rank order, one note per line:
/// `[rank] context (raw: "first segment", t=timestamp)`.
pub fn render_evidence(items: &[EvidenceItem]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let when = match &e.date {
                Some(d) => format!("t={}, {d}", e.timestamp),
                None => format!("t={}", e.timestamp),
            };
            format!("[{}] {} (raw: \"{}\", {when})", i + 1, e.context, e.first_raw)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// A completed refinement step, fed back to the sub-query generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub question: String,
    pub answer: String,
}

pub fn render_history(history: &[ReasoningStep]) -> String {
    if history.is_empty() {
        return "(none)".to_string();
    }
    history
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Q{}: {}\nA{}: {}", i + 1, s.question, i + 1, s.answer))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Every decision the engine delegates to a language model.
///
/// Implementations must be total: malformed model output maps to the
/// documented fallback rather than an error. Only transport failures surface
/// as [`PolicyError::RemoteFailure`].
pub trait MemoryPolicy: Send + Sync {
    /// Keywords (0-5, canonical) and denoised context for a raw turn.
    /// Falls back to `{keywords: [], context: raw}` on unparseable output.
    fn ingest_parse(&self, raw: &str, speaker: &str) -> Result<IngestResult, PolicyError>;

    /// One judgment per candidate the model commented on.
    fn judge_candidates(
        &self,
        new_note: &NoteSummary,
        candidates: &[NoteSummary],
    ) -> Result<Vec<CandidateJudgment>, PolicyError>;

    fn parse_query_intent(&self, query: &str) -> Result<QueryIntent, PolicyError>;

    /// Falls back to `sufficient: true, confidence: 0` so refinement stops.
    fn judge_sufficiency(&self, evidence: &str, query: &str) -> Result<SufficiencyVerdict, PolicyError>;

    /// `None` when the model answers "None" or nothing is missing.
    fn generate_subquery(
        &self,
        query: &str,
        evidence: &str,
        history: &[ReasoningStep],
        missing_info: &str,
    ) -> Result<Option<String>, PolicyError>;

    fn answer(&self, question: &str, evidence: &[EvidenceItem], temperature: f64) -> Result<String, PolicyError>;
}

impl<P: MemoryPolicy + ?Sized> MemoryPolicy for std::sync::Arc<P> {
    fn ingest_parse(&self, raw: &str, speaker: &str) -> Result<IngestResult, PolicyError> {
        (**self).ingest_parse(raw, speaker)
    }
    fn judge_candidates(
        &self,
        new_note: &NoteSummary,
        candidates: &[NoteSummary],
    ) -> Result<Vec<CandidateJudgment>, PolicyError> {
        (**self).judge_candidates(new_note, candidates)
    }
    fn parse_query_intent(&self, query: &str) -> Result<QueryIntent, PolicyError> {
        (**self).parse_query_intent(query)
    }
    fn judge_sufficiency(&self, evidence: &str, query: &str) -> Result<SufficiencyVerdict, PolicyError> {
        (**self).judge_sufficiency(evidence, query)
    }
    fn generate_subquery(
        &self,
        query: &str,
        evidence: &str,
        history: &[ReasoningStep],
        missing_info: &str,
    ) -> Result<Option<String>, PolicyError> {
        (**self).generate_subquery(query, evidence, history, missing_info)
    }
    fn answer(&self, question: &str, evidence: &[EvidenceItem], temperature: f64) -> Result<String, PolicyError> {
        (**self).answer(question, evidence, temperature)
    }
}

/// Interpret a free-text sub-query reply; "None" (any case, quoted or not)
/// and empty replies mean no further sub-query.
pub fn parse_subquery_reply(reply: &str) -> Option<String> {
    let mut text = reply.trim();
    for prefix in [
        "Sub-question:",
        "Sub-Question:",
        "sub-question:",
        "Subquery:",
        "Sub-query:",
    ] {
        if let Some(rest) = text.strip_prefix(prefix) {
            text = rest.trim();
        }
    }
    let text = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim();
    let bare = text.trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '.' || c.is_whitespace());
    if bare.is_empty() || bare.eq_ignore_ascii_case("none") {
        None
    } else {
        Some(text.trim_matches(|c: char| c == '"' || c == '`').trim().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subquery_none_variants() {
        for r in ["None", "none", " 'None' ", "`None`.", "", "Sub-question: None"] {
            assert_eq!(parse_subquery_reply(r), None, "{r:?}");
        }
        assert_eq!(
            parse_subquery_reply("Sub-question: \"Where does Rosa live?\"\n"),
            Some("Where does Rosa live?".into())
        );
    }

    #[test]
    fn render_lists_in_rank_order() {
        let items = vec![
            EvidenceItem {
                note: NoteId(4),
                context: "Melanie paints.".into(),
                first_raw: "I paint".into(),
                timestamp: 3,
                date: None,
            },
            EvidenceItem {
                note: NoteId(1),
                context: "Rosa swims.".into(),
                first_raw: "I swim".into(),
                timestamp: 1,
                date: Some("2023-01-02".into()),
            },
        ];
        assert_eq!(
            render_evidence(&items),
            "[1] Melanie paints. (raw: \"I paint\", t=3)\n[2] Rosa swims. (raw: \"I swim\", t=1, 2023-01-02)"
        );
    }
}
