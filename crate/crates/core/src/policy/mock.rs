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

use std::collections::BTreeSet;
use std::sync::Arc;

use super::{
    CandidateJudgment, EvidenceItem, IngestResult, MemoryPolicy, NoteSummary, PolicyError, QueryIntent, ReasoningStep,
    SufficiencyVerdict,
};
use crate::embedding::{dot, Embedder};
use crate::graph::RelationType;
use crate::text::{content_tokens, tokenize, truncate_words};

const MAX_KEYWORDS: usize = 5;
const TOPIC_WORDS: usize = 8;
const NEGATIONS: &[&str] = &["not", "no", "never", "t", "nobody", "nothing", "neither", "nor"];

/// Deterministic offline policy built from token rules and the embedder.
///
/// Redundancy is `max(0, cos)` of the two context embeddings and
/// complementarity is the Jaccard index of the keyword sets.
#[derive(Clone)]
pub struct MockPolicy {
    embedder: Arc<dyn Embedder>,
    tau_merge: f64,
}

impl MockPolicy {
    pub fn new(embedder: Arc<dyn Embedder>, tau_merge: f64) -> Self {
        MockPolicy { embedder, tau_merge }
    }

    /// Redundancy score of two texts. Empty text scores 0.
    pub fn redundancy(&self, a: &str, b: &str) -> f64 {
        match (self.embedder.embed(a), self.embedder.embed(b)) {
            (Ok(x), Ok(y)) => dot(&x, &y).clamp(0.0, 1.0),
            _ => 0.0,
        }
    }

    /// Jaccard index of two keyword lists; two empty lists score 0.
    pub fn complementarity(a: &[String], b: &[String]) -> f64 {
        let a: BTreeSet<&str> = a.iter().map(String::as_str).collect();
        let b: BTreeSet<&str> = b.iter().map(String::as_str).collect();
        let union = a.union(&b).count();
        if union == 0 {
            return 0.0;
        }
        a.intersection(&b).count() as f64 / union as f64
    }

    fn judge_one(&self, new_note: &NoteSummary, cand: &NoteSummary) -> Option<CandidateJudgment> {
        let candidate = cand.id?;
        let s_red = if new_note.embedding.len() == cand.embedding.len() {
            dot(&new_note.embedding, &cand.embedding).clamp(0.0, 1.0)
        } else {
            self.redundancy(&new_note.context, &cand.context)
        };
        let s_comp = Self::complementarity(&new_note.keywords, &cand.keywords);
        if s_comp > 0.0 && negated(&new_note.context) != negated(&cand.context) {
            return Some(CandidateJudgment {
                candidate,
                relation_type: RelationType::Conflicts,
                connection_strength: s_comp,
                merged_context: None,
            });
        }
        if s_red >= self.tau_merge {
            return Some(CandidateJudgment {
                candidate,
                relation_type: RelationType::Supports,
                connection_strength: s_red,
                merged_context: Some(merge_text(&cand.context, &new_note.context)),
            });
        }
        Some(CandidateJudgment {
            candidate,
            relation_type: RelationType::RelatedTo,
            connection_strength: s_comp,
            merged_context: None,
        })
    }
}

fn negated(text: &str) -> bool {
    tokenize(text).iter().any(|t| NEGATIONS.contains(&t.as_str()))
}

fn merge_text(existing: &str, new: &str) -> String {
    let have: BTreeSet<String> = content_tokens(existing).into_iter().collect();
    if content_tokens(new).iter().all(|t| have.contains(t)) {
        return existing.to_string();
    }
    format!(
        "{}. Specifically, {}",
        existing.trim_end().trim_end_matches('.'),
        new.trim()
    )
}

impl MemoryPolicy for MockPolicy {
    fn ingest_parse(&self, raw: &str, _speaker: &str) -> Result<IngestResult, PolicyError> {
        if raw.trim().is_empty() {
            return Err(PolicyError::Precondition("raw turn is empty"));
        }
        let mut keywords = content_tokens(raw);
        keywords.truncate(MAX_KEYWORDS);
        Ok(IngestResult {
            keywords,
            context: raw.trim().to_string(),
        })
    }

    fn judge_candidates(
        &self,
        new_note: &NoteSummary,
        candidates: &[NoteSummary],
    ) -> Result<Vec<CandidateJudgment>, PolicyError> {
        Ok(candidates.iter().filter_map(|c| self.judge_one(new_note, c)).collect())
    }

    fn parse_query_intent(&self, query: &str) -> Result<QueryIntent, PolicyError> {
        if query.trim().is_empty() {
            return Err(PolicyError::Precondition("query is empty"));
        }
        let mut keywords = content_tokens(query);
        keywords.truncate(MAX_KEYWORDS);
        let topic_desc = if keywords.is_empty() {
            truncate_words(query, TOPIC_WORDS)
        } else {
            truncate_words(&keywords.join(" "), TOPIC_WORDS)
        };
        Ok(QueryIntent { topic_desc, keywords })
    }

    fn judge_sufficiency(&self, evidence: &str, query: &str) -> Result<SufficiencyVerdict, PolicyError> {
        let wanted = content_tokens(query);
        let have: BTreeSet<String> = content_tokens(evidence).into_iter().collect();
        let missing: Vec<&str> = wanted
            .iter()
            .filter(|t| !have.contains(*t))
            .map(String::as_str)
            .collect();
        let confidence = if wanted.is_empty() {
            1.0
        } else {
            (wanted.len() - missing.len()) as f64 / wanted.len() as f64
        };
        Ok(SufficiencyVerdict {
            sufficient: !evidence.trim().is_empty() && missing.is_empty(),
            missing_info: missing.join(" "),
            confidence: if evidence.trim().is_empty() { 0.0 } else { confidence },
        })
    }

    fn generate_subquery(
        &self,
        _query: &str,
        _evidence: &str,
        _history: &[ReasoningStep],
        missing_info: &str,
    ) -> Result<Option<String>, PolicyError> {
        let q = missing_info.split_whitespace().collect::<Vec<_>>().join(" ");
        Ok((!q.is_empty()).then_some(q))
    }

    fn answer(&self, _question: &str, evidence: &[EvidenceItem], _temperature: f64) -> Result<String, PolicyError> {
        Ok(evidence.first().map(|e| e.context.clone()).unwrap_or_default())
    }
}
