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
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use super::EvalError;

pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const QA_FILE: &str = "qa.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    MultiHop,
    Temporal,
    OpenDomain,
    SingleHop,
    Adversarial,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::MultiHop,
        Category::Temporal,
        Category::OpenDomain,
        Category::SingleHop,
        Category::Adversarial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::MultiHop => "multi_hop",
            Category::Temporal => "temporal",
            Category::OpenDomain => "open_domain",
            Category::SingleHop => "single_hop",
            Category::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetTurn {
    pub speaker: String,
    pub text: String,
    pub turn_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub turns: Vec<DatasetTurn>,
}

fn string_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    match serde_json::Value::deserialize(d)? {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!(
            "expected string or number, got {other}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    #[serde(deserialize_with = "string_or_number")]
    pub gold_answer: String,
    pub category: Category,
    #[serde(default)]
    pub evidence_turn_ids: Vec<String>,
}

/// Sessions of dialogue plus question-answer pairs over them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConversationDataset {
    pub sessions: Vec<Session>,
    pub qa_pairs: Vec<QaPair>,
}

impl ConversationDataset {
    /// Parse one session object per non-blank line plus a JSON array of QA pairs.
    pub fn parse(sessions_jsonl: &str, qa_json: &str) -> Result<Self, EvalError> {
        let mut sessions = Vec::new();
        for (i, line) in sessions_jsonl.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: Session = serde_json::from_str(line)
                .map_err(|e| EvalError::DatasetFormat(format!("{SESSIONS_FILE} line {}: {e}", i + 1)))?;
            sessions.push(s);
        }
        let qa_pairs: Vec<QaPair> =
            serde_json::from_str(qa_json).map_err(|e| EvalError::DatasetFormat(format!("{QA_FILE}: {e}")))?;
        let ds = ConversationDataset { sessions, qa_pairs };
        ds.validate()?;
        Ok(ds)
    }

    /// Load `sessions.jsonl` and `qa.json` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, EvalError> {
        let read = |name: &str| -> Result<String, EvalError> {
            let path: PathBuf = dir.join(name);
            std::fs::read_to_string(&path).map_err(|source| EvalError::Io { path, source })
        };
        Self::parse(&read(SESSIONS_FILE)?, &read(QA_FILE)?)
    }

    pub fn turn_count(&self) -> usize {
        self.sessions.iter().map(|s| s.turns.len()).sum()
    }

    /// Turn ids are unique and every evidence id names a turn.
    pub fn validate(&self) -> Result<(), EvalError> {
        let mut ids = BTreeSet::new();
        for s in &self.sessions {
            for t in &s.turns {
                if !ids.insert(t.turn_id.as_str()) {
                    return Err(EvalError::DatasetFormat(format!("duplicate turn id {}", t.turn_id)));
                }
                if t.text.trim().is_empty() {
                    return Err(EvalError::DatasetFormat(format!("turn {} has empty text", t.turn_id)));
                }
            }
        }
        for (i, qa) in self.qa_pairs.iter().enumerate() {
            if qa.question.trim().is_empty() {
                return Err(EvalError::DatasetFormat(format!("question {i} is empty")));
            }
            if let Some(bad) = qa.evidence_turn_ids.iter().find(|id| !ids.contains(id.as_str())) {
                return Err(EvalError::DatasetFormat(format!(
                    "question {i} cites unknown turn {bad}"
                )));
            }
        }
        Ok(())
    }
}

/// The bundled synthetic mini-corpus (six speakers, 66 questions).
pub fn mini_corpus() -> ConversationDataset {
    ConversationDataset::parse(
        include_str!("../../data/mini_corpus/sessions.jsonl"),
        include_str!("../../data/mini_corpus/qa.json"),
    )
    .expect("bundled corpus is valid")
}

/// Single-keyword turns with no co-occurrence, so no topics form and every
/// gold turn is reachable only through keyword anchors.
pub fn keyword_fixture() -> ConversationDataset {
    ConversationDataset::parse(
        include_str!("../../data/keyword_fixture/sessions.jsonl"),
        include_str!("../../data/keyword_fixture/qa.json"),
    )
    .expect("bundled fixture is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SESSIONS: &str = r#"{"session_id": "s1", "turns": [{"speaker": "A", "text": "hi there", "turn_id": "1"}, {"speaker": "B", "text": "I live in Oslo", "turn_id": "2", "date": "2023-05-01"}]}
"#;

    #[test]
    fn parses_and_validates() {
        let qa = r#"[{"question": "Where?", "gold_answer": "Oslo", "category": "single_hop", "evidence_turn_ids": ["2"]},
                    {"question": "Year?", "gold_answer": 2023, "category": "temporal"}]"#;
        let ds = ConversationDataset::parse(SESSIONS, qa).unwrap();
        assert_eq!(ds.turn_count(), 2);
        assert_eq!(ds.qa_pairs[1].gold_answer, "2023");
    }

    #[test]
    fn bundled_data_covers_all_categories() {
        let ds = mini_corpus();
        assert!(ds.qa_pairs.len() >= 60);
        for c in Category::ALL {
            assert!(ds.qa_pairs.iter().any(|q| q.category == c), "{c}");
        }
        assert_eq!(keyword_fixture().qa_pairs.len(), 10);
    }

    #[test]
    fn missing_category_is_format_error() {
        let qa = r#"[{"question": "Where?", "gold_answer": "Oslo"}]"#;
        assert!(matches!(
            ConversationDataset::parse(SESSIONS, qa),
            Err(EvalError::DatasetFormat(_))
        ));
    }

    #[test]
    fn unknown_category_and_evidence() {
        let qa = r#"[{"question": "Where?", "gold_answer": "Oslo", "category": "trivia"}]"#;
        assert!(matches!(
            ConversationDataset::parse(SESSIONS, qa),
            Err(EvalError::DatasetFormat(_))
        ));
        let qa =
            r#"[{"question": "Where?", "gold_answer": "Oslo", "category": "single_hop", "evidence_turn_ids": ["9"]}]"#;
        assert!(matches!(
            ConversationDataset::parse(SESSIONS, qa),
            Err(EvalError::DatasetFormat(_))
        ));
    }
}
