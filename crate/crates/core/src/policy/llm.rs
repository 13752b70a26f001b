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

use std::collections::HashMap;
use std::sync::Arc;

use serde_json::Value;
use tracing::debug;

use super::json::{as_bool, as_f64, as_string_list, extract_json};
use super::prompts::{self, fill};
use super::{
    parse_subquery_reply, render_evidence, render_history, CandidateJudgment, ChatClient, ChatRequest, EvidenceItem,
    IngestResult, MemoryPolicy, NoteSummary, PolicyError, QueryIntent, ReasoningStep, SufficiencyVerdict,
};
use crate::graph::{NoteId, RelationType};
use crate::text::{canonical_keywords, content_tokens, truncate_words};

const MAX_KEYWORDS: usize = 5;
const TOPIC_WORDS: usize = 8;

/// Policy backed by a chat model and the prompt templates.
pub struct LlmPolicy {
    client: Arc<dyn ChatClient>,
    temperature: f64,
    answer_template: String,
}

impl LlmPolicy {
    pub fn new(client: Arc<dyn ChatClient>, temperature: f64) -> Self {
        LlmPolicy {
            client,
            temperature,
            answer_template: prompts::DEFAULT_ANSWER.to_string(),
        }
    }

    /// Template with `{context}` and `{question}` placeholders.
    pub fn with_answer_template(mut self, template: impl Into<String>) -> Self {
        self.answer_template = template.into();
        self
    }

    fn ask(&self, prompt: String, temperature: f64) -> Result<String, PolicyError> {
        self.client.complete(&ChatRequest {
            system: None,
            user: prompt,
            temperature,
        })
    }

    /// Ask, parse, and on a parse failure ask once more with a reminder.
    fn ask_parsed<T>(&self, prompt: String, parse: impl Fn(&str) -> Option<T>) -> Result<Option<T>, PolicyError> {
        let reply = self.ask(prompt.clone(), self.temperature)?;
        if let Some(v) = parse(&reply) {
            return Ok(Some(v));
        }
        debug!("unparseable reply, retrying once");
        let reply = self.ask(format!("{prompt}{}", prompts::REPARSE_SUFFIX), self.temperature)?;
        Ok(parse(&reply))
    }
}

pub(crate) fn parse_ingest(reply: &str, raw: &str) -> Option<IngestResult> {
    let v = extract_json(reply)?;
    let obj = v.as_object()?;
    let keywords = as_string_list(obj.get("keywords").unwrap_or(&Value::Null))?;
    let context = match obj.get("context") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
        Some(Value::String(_)) | Some(Value::Null) | None => raw.to_string(),
        Some(_) => return None,
    };
    Some(IngestResult {
        keywords: canonical_keywords(&keywords, MAX_KEYWORDS),
        context,
    })
}

fn parse_relation(v: &Value) -> Option<RelationType> {
    let s = v.as_str()?.trim().to_ascii_uppercase().replace([' ', '-'], "_");
    match s.as_str() {
        "SUPPORTS" | "SUPPORT" => Some(RelationType::Supports),
        "CONFLICTS" | "CONFLICT" => Some(RelationType::Conflicts),
        "RELATED_TO" | "RELATED" => Some(RelationType::RelatedTo),
        _ => None,
    }
}

pub(crate) fn parse_judgments(reply: &str, candidates: &[NoteId]) -> Option<Vec<CandidateJudgment>> {
    let v = extract_json(reply)?;
    let items: Vec<Value> = match v {
        Value::Array(items) => items,
        Value::Object(mut obj) => match ["judgments", "candidates", "results"]
            .iter()
            .find_map(|k| obj.remove(*k))
        {
            Some(Value::Array(items)) => items,
            _ => vec![Value::Object(obj)],
        },
        _ => return None,
    };
    let mut by_label: HashMap<String, NoteId> = HashMap::new();
    for id in candidates {
        by_label.insert(id.to_string(), *id);
        by_label.insert(id.0.to_string(), *id);
    }
    let mut out: Vec<CandidateJudgment> = Vec::new();
    for (pos, item) in items.iter().enumerate() {
        let Some(obj) = item.as_object() else { continue };
        let candidate = match obj
            .get("candidate_id")
            .or_else(|| obj.get("candidate"))
            .or_else(|| obj.get("id"))
        {
            Some(Value::String(s)) => by_label.get(s.trim().trim_matches(|c| c == '[' || c == ']')).copied(),
            Some(Value::Number(n)) => by_label.get(&n.to_string()).copied(),
            _ => candidates.get(pos).copied(),
        };
        let (Some(candidate), Some(relation_type), Some(strength)) = (
            candidate,
            obj.get("relation_type").and_then(parse_relation),
            obj.get("connection_strength").and_then(as_f64),
        ) else {
            continue;
        };
        if out.iter().any(|j| j.candidate == candidate) || !strength.is_finite() {
            continue;
        }
        let merged_context = match (relation_type, obj.get("merged_context")) {
            (RelationType::Conflicts, _) => None,
            (_, Some(Value::String(s))) if !s.trim().is_empty() => Some(s.trim().to_string()),
            _ => None,
        };
        out.push(CandidateJudgment {
            candidate,
            relation_type,
            connection_strength: strength.clamp(0.0, 1.0),
            merged_context,
        });
    }
    Some(out)
}

pub(crate) fn fallback_intent(query: &str) -> QueryIntent {
    let mut keywords = content_tokens(query);
    keywords.truncate(MAX_KEYWORDS);
    QueryIntent {
        topic_desc: truncate_words(query, TOPIC_WORDS),
        keywords,
    }
}

pub(crate) fn parse_intent(reply: &str) -> Option<QueryIntent> {
    let v = extract_json(reply)?;
    let obj = v.as_object()?;
    let topic = obj.get("topic_desc")?.as_str()?.trim();
    let keywords = as_string_list(obj.get("keywords").unwrap_or(&Value::Null))?;
    if topic.is_empty() && keywords.is_empty() {
        return None;
    }
    Some(QueryIntent {
        topic_desc: truncate_words(topic, TOPIC_WORDS),
        keywords: canonical_keywords(&keywords, MAX_KEYWORDS),
    })
}

pub(crate) fn parse_sufficiency(reply: &str) -> Option<SufficiencyVerdict> {
    let v = extract_json(reply)?;
    let obj = v.as_object()?;
    let sufficient = as_bool(obj.get("sufficient")?)?;
    let missing_info = match obj.get("missing_info") {
        Some(Value::String(s)) => s.trim().to_string(),
        _ => String::new(),
    };
    let confidence = obj.get("confidence").and_then(as_f64).unwrap_or(0.0).clamp(0.0, 1.0);
    Some(SufficiencyVerdict {
        sufficient,
        missing_info,
        confidence,
    })
}

fn render_candidates(candidates: &[NoteSummary]) -> String {
    candidates
        .iter()
        .map(|c| {
            let id = c.id.map(|i| i.to_string()).unwrap_or_else(|| "?".into());
            format!(
                "[{id}] Content: \"{}\" | Context: \"{}\" | Keywords: [{}]",
                c.content,
                c.context,
                c.keywords.join(", ")
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub(crate) fn ingest_prompt(raw: &str, speaker: &str) -> String {
    let content = if speaker.trim().is_empty() {
        raw.to_string()
    } else {
        format!("{speaker}: {raw}")
    };
    fill(prompts::INGEST, &[("content", &content)])
}

pub(crate) fn gated_prompt(new_note: &NoteSummary, candidates: &[NoteSummary]) -> String {
    let keywords = format!("[{}]", new_note.keywords.join(", "));
    let mut p = fill(
        prompts::GATED_UPDATE,
        &[
            ("content", &new_note.content),
            ("context", &new_note.context),
            ("keywords", &keywords),
            ("candidates_str", &render_candidates(candidates)),
        ],
    );
    p.push_str(prompts::GATED_UPDATE_SCHEMA);
    p
}

impl MemoryPolicy for LlmPolicy {
    fn ingest_parse(&self, raw: &str, speaker: &str) -> Result<IngestResult, PolicyError> {
        if raw.trim().is_empty() {
            return Err(PolicyError::Precondition("raw turn is empty"));
        }
        let parsed = self.ask_parsed(ingest_prompt(raw, speaker), |r| parse_ingest(r, raw))?;
        Ok(parsed.unwrap_or_else(|| IngestResult {
            keywords: Vec::new(),
            context: raw.to_string(),
        }))
    }

    fn judge_candidates(
        &self,
        new_note: &NoteSummary,
        candidates: &[NoteSummary],
    ) -> Result<Vec<CandidateJudgment>, PolicyError> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let ids: Vec<NoteId> = candidates.iter().filter_map(|c| c.id).collect();
        let parsed = self.ask_parsed(gated_prompt(new_note, candidates), |r| parse_judgments(r, &ids))?;
        Ok(parsed.unwrap_or_default())
    }

    fn parse_query_intent(&self, query: &str) -> Result<QueryIntent, PolicyError> {
        if query.trim().is_empty() {
            return Err(PolicyError::Precondition("query is empty"));
        }
        let prompt = fill(prompts::QUERY_INTENT, &[("query", query)]);
        Ok(self
            .ask_parsed(prompt, parse_intent)?
            .unwrap_or_else(|| fallback_intent(query)))
    }

    fn judge_sufficiency(&self, evidence: &str, query: &str) -> Result<SufficiencyVerdict, PolicyError> {
        let prompt = fill(prompts::SUFFICIENCY, &[("question", query), ("context", evidence)]);
        Ok(self
            .ask_parsed(prompt, parse_sufficiency)?
            .unwrap_or(SufficiencyVerdict {
                sufficient: true,
                missing_info: String::new(),
                confidence: 0.0,
            }))
    }

    fn generate_subquery(
        &self,
        query: &str,
        evidence: &str,
        history: &[ReasoningStep],
        missing_info: &str,
    ) -> Result<Option<String>, PolicyError> {
        if missing_info.trim().is_empty() {
            return Ok(None);
        }
        let prompt = fill(
            prompts::SUBQUERY,
            &[
                ("query_str", query),
                ("context_str", evidence),
                ("prev_reasoning", &render_history(history)),
                ("missing_info", missing_info),
            ],
        );
        Ok(parse_subquery_reply(&self.ask(prompt, self.temperature)?))
    }

    fn answer(&self, question: &str, evidence: &[EvidenceItem], temperature: f64) -> Result<String, PolicyError> {
        let prompt = fill(
            &self.answer_template,
            &[("context", &render_evidence(evidence)), ("question", question)],
        );
        Ok(self.ask(prompt, temperature)?.trim().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Replays canned replies in order and records prompts.
    struct Scripted {
        replies: Mutex<Vec<Result<String, PolicyError>>>,
        prompts: Mutex<Vec<String>>,
    }

    impl Scripted {
        fn new(replies: &[&str]) -> Arc<Self> {
            Arc::new(Scripted {
                replies: Mutex::new(replies.iter().rev().map(|r| Ok(r.to_string())).collect()),
                prompts: Mutex::new(Vec::new()),
            })
        }
    }

    impl ChatClient for Scripted {
        fn complete(&self, request: &ChatRequest) -> Result<String, PolicyError> {
            self.prompts.lock().unwrap().push(request.user.clone());
            self.replies
                .lock()
                .unwrap()
                .pop()
                .unwrap_or_else(|| Err(PolicyError::RemoteFailure("script exhausted".into())))
        }
    }

    fn summary(id: u64, context: &str) -> NoteSummary {
        NoteSummary {
            id: Some(NoteId(id)),
            content: context.into(),
            context: context.into(),
            keywords: vec!["x".into()],
            embedding: vec![1.0],
        }
    }

    #[test]
    fn phatic_turn_yields_no_keywords() {
        let chat = Scripted::new(&[r#"{"keywords": [], "context": "Caroline finds that cool."}"#]);
        let p = LlmPolicy::new(chat, 0.7);
        let r = p.ingest_parse("Wow, that's cool!", "Caroline").unwrap();
        assert!(r.keywords.is_empty());
        assert_eq!(r.context, "Caroline finds that cool.");
    }

    #[test]
    fn ingest_canonicalizes_keywords() {
        let chat = Scripted::new(&[r#"```json
{"keywords": ["Paintings", "Melanie", "paintings", "LGBTQ Support Groups"], "context": "Melanie bought paintings."}
```"#]);
        let p = LlmPolicy::new(chat.clone(), 0.7);
        let r = p.ingest_parse("I bought paintings", "Melanie").unwrap();
        assert_eq!(r.keywords, vec!["painting", "melanie", "lgbtq support group"]);
        assert!(chat.prompts.lock().unwrap()[0].contains("Input Text: Melanie: I bought paintings"));
    }

    #[test]
    fn ingest_retries_once_then_falls_back() {
        let chat = Scripted::new(&["not json", "still not json"]);
        let p = LlmPolicy::new(chat.clone(), 0.7);
        let r = p.ingest_parse("raw text", "A").unwrap();
        assert_eq!(
            r,
            IngestResult {
                keywords: vec![],
                context: "raw text".into()
            }
        );
        let prompts = chat.prompts.lock().unwrap();
        assert_eq!(prompts.len(), 2);
        assert!(prompts[1].ends_with(prompts::REPARSE_SUFFIX));
    }

    #[test]
    fn ingest_recovers_on_reparse() {
        let chat = Scripted::new(&["oops", r#"{"keywords": ["dog"], "context": "A has a dog."}"#]);
        let r = LlmPolicy::new(chat, 0.7).ingest_parse("I have a dog", "A").unwrap();
        assert_eq!(r.keywords, vec!["dog"]);
    }

    #[test]
    fn transport_failure_surfaces() {
        let chat = Arc::new(Scripted {
            replies: Mutex::new(vec![Err(PolicyError::RemoteFailure("down".into()))]),
            prompts: Mutex::new(vec![]),
        });
        let p = LlmPolicy::new(chat, 0.7);
        assert!(matches!(p.ingest_parse("x", "A"), Err(PolicyError::RemoteFailure(_))));
    }

    #[test]
    fn judgments_match_candidates_by_id() {
        let reply = r#"{"judgments": [
            {"candidate_id": "n7", "relation_type": "SUPPORTS", "connection_strength": 0.9, "merged_context": "A. Specifically, B"},
            {"candidate_id": "3", "relation_type": "conflicts", "connection_strength": "0.4", "merged_context": "ignored"},
            {"candidate_id": "n99", "relation_type": "RELATED_TO", "connection_strength": 0.6},
            {"candidate_id": "n7", "relation_type": "RELATED_TO", "connection_strength": 0.2}
        ]}"#;
        let js = parse_judgments(reply, &[NoteId(7), NoteId(3)]).unwrap();
        assert_eq!(js.len(), 2);
        assert_eq!(js[0].candidate, NoteId(7));
        assert_eq!(js[0].merged_context.as_deref(), Some("A. Specifically, B"));
        assert_eq!(js[1].relation_type, RelationType::Conflicts);
        assert_eq!(js[1].merged_context, None);
        assert_eq!(js[1].connection_strength, 0.4);
    }

    #[test]
    fn judgments_positional_without_ids() {
        let reply = r#"[{"relation_type": "RELATED_TO", "connection_strength": 1.7}]"#;
        let js = parse_judgments(reply, &[NoteId(2)]).unwrap();
        assert_eq!(js[0].candidate, NoteId(2));
        assert_eq!(js[0].connection_strength, 1.0);
    }

    #[test]
    fn judge_candidates_garbage_is_empty() {
        let chat = Scripted::new(&["nope", "nope again"]);
        let p = LlmPolicy::new(chat, 0.7);
        assert!(p
            .judge_candidates(&summary(0, "a"), &[summary(1, "b")])
            .unwrap()
            .is_empty());
    }

    #[test]
    fn intent_truncates_topic_and_canonicalizes() {
        let reply = r#"{"topic_desc": "one two three four five six seven eight nine ten", "keywords": ["Transformers", "attention heads"]}"#;
        let i = parse_intent(reply).unwrap();
        assert_eq!(i.topic_desc, "one two three four five six seven eight");
        assert_eq!(i.keywords, vec!["transformer", "attention head"]);
    }

    #[test]
    fn intent_fallback_uses_content_tokens() {
        let chat = Scripted::new(&["???", "???"]);
        let i = LlmPolicy::new(chat, 0.7)
            .parse_query_intent("Where did Melanie buy the painting?")
            .unwrap();
        assert_eq!(i.keywords, vec!["melanie", "painting"]);
        assert_eq!(i.topic_desc, "Where did Melanie buy the painting?");
    }

    #[test]
    fn sufficiency_fallback_stops_loop() {
        let chat = Scripted::new(&["garbage", "garbage"]);
        let v = LlmPolicy::new(chat, 0.7).judge_sufficiency("ctx", "q").unwrap();
        assert!(v.sufficient);
        assert_eq!(v.confidence, 0.0);
    }

    #[test]
    fn sufficiency_parses_verdict() {
        let v = parse_sufficiency(r#"{"sufficient": false, "missing_info": "the city", "confidence": 0.8}"#).unwrap();
        assert!(!v.sufficient);
        assert_eq!(v.missing_info, "the city");
    }

    #[test]
    fn subquery_none_is_absent() {
        let chat = Scripted::new(&["None"]);
        let p = LlmPolicy::new(chat, 0.7);
        assert_eq!(p.generate_subquery("q", "ctx", &[], "the city").unwrap(), None);
        let chat = Scripted::new(&[]);
        let p = LlmPolicy::new(chat.clone(), 0.7);
        assert_eq!(p.generate_subquery("q", "ctx", &[], "  ").unwrap(), None);
        assert!(chat.prompts.lock().unwrap().is_empty());
    }

    #[test]
    fn answer_uses_template_and_temperature() {
        let chat = Scripted::new(&["  Lisbon \n"]);
        let p = LlmPolicy::new(chat.clone(), 0.7).with_answer_template("Q={question} C={context}");
        let ev = [EvidenceItem {
            note: NoteId(1),
            context: "Rosa lives in Lisbon.".into(),
            first_raw: "I live in Lisbon".into(),
            timestamp: 2,
            date: None,
        }];
        assert_eq!(p.answer("Where?", &ev, 0.5).unwrap(), "Lisbon");
        assert_eq!(
            chat.prompts.lock().unwrap()[0],
            "Q=Where? C=[1] Rosa lives in Lisbon. (raw: \"I live in Lisbon\", t=2)"
        );
    }
}
