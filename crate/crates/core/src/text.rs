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

//! Tokenization and canonicalization shared by the embedder, the mock policy
//! and the evaluation metrics.

use std::collections::HashSet;
use std::sync::OnceLock;

/// Lowercased alphanumeric runs. Apostrophes split tokens ("that's" -> "that", "s").
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

const STOP_WORDS: &[&str] = &[
    // articles, determiners, pronouns
    "a",
    "an",
    "the",
    "this",
    "that",
    "these",
    "those",
    "i",
    "me",
    "my",
    "mine",
    "myself",
    "we",
    "us",
    "our",
    "ours",
    "you",
    "your",
    "yours",
    "he",
    "him",
    "his",
    "she",
    "her",
    "hers",
    "it",
    "its",
    "they",
    "them",
    "their",
    "theirs",
    "someone",
    "something",
    "anyone",
    "anything",
    "everyone",
    "everything",
    "one",
    "ones",
    "some",
    "any",
    "all",
    "each",
    "every",
    "both",
    "other",
    "another",
    "such",
    "own",
    "same",
    // prepositions, conjunctions
    "of",
    "in",
    "on",
    "at",
    "to",
    "for",
    "from",
    "by",
    "with",
    "about",
    "into",
    "onto",
    "over",
    "under",
    "after",
    "before",
    "since",
    "during",
    "through",
    "between",
    "among",
    "up",
    "down",
    "out",
    "off",
    "and",
    "or",
    "but",
    "so",
    "if",
    "then",
    "than",
    "because",
    "as",
    "while",
    "also",
    "too",
    "very",
    "just",
    "really",
    "still",
    "even",
    "again",
    "already",
    "only",
    "not",
    "no",
    "nor",
    "yes",
    "there",
    "here",
    "now",
    "ever",
    "never",
    "always",
    "often",
    "much",
    "many",
    "more",
    "most",
    "less",
    "few",
    "lot",
    "lots",
    // question words
    "what",
    "which",
    "who",
    "whom",
    "whose",
    "when",
    "where",
    "why",
    "how",
    // auxiliaries and very common verbs
    "is",
    "am",
    "are",
    "was",
    "were",
    "be",
    "been",
    "being",
    "do",
    "does",
    "did",
    "done",
    "doing",
    "have",
    "has",
    "had",
    "having",
    "will",
    "would",
    "shall",
    "should",
    "can",
    "could",
    "may",
    "might",
    "must",
    "s",
    "t",
    "d",
    "ll",
    "m",
    "re",
    "ve",
    "get",
    "gets",
    "got",
    "getting",
    "go",
    "goes",
    "went",
    "going",
    "gone",
    "make",
    "makes",
    "made",
    "take",
    "took",
    "taken",
    "say",
    "says",
    "said",
    "tell",
    "told",
    "think",
    "thought",
    "know",
    "knew",
    "feel",
    "felt",
    "want",
    "wanted",
    "like",
    "liked",
    "love",
    "loved",
    "buy",
    "bought",
    "see",
    "saw",
    "seen",
    "come",
    "came",
    "give",
    "gave",
    "keep",
    "kept",
    "let",
    "put",
    "use",
    "used",
    "try",
    "tried",
    "look",
    "looked",
    "find",
    "found",
    "start",
    "started",
    "name",
    "named",
    "call",
    "called",
    // phatic and filler
    "wow",
    "cool",
    "nice",
    "great",
    "awesome",
    "oh",
    "ah",
    "hey",
    "hi",
    "hello",
    "thanks",
    "thank",
    "ok",
    "okay",
    "yeah",
    "yep",
    "sure",
    "well",
    "haha",
    "lol",
    "amazing",
    "good",
    "bad",
    "glad",
    "sounds",
    "sound",
    "totally",
    "definitely",
    "cute",
    "fun",
    "new",
    "old",
    "kind",
    "sort",
    "thing",
    "things",
    "way",
    "time",
    "day",
    "today",
    "yesterday",
    "tomorrow",
];

fn stop_words() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOP_WORDS.iter().copied().collect())
}

pub fn is_stop_word(token: &str) -> bool {
    stop_words().contains(token)
}

/// Rough English singularization: "parties" -> "party", "transformers" -> "transformer".
pub fn singularize(word: &str) -> String {
    let n = word.chars().count();
    if n <= 3 || !word.is_ascii() {
        return word.to_string();
    }
    if let Some(stem) = word.strip_suffix("ies") {
        return format!("{stem}y");
    }
    for suffix in ["sses", "shes", "ches", "xes", "zes"] {
        if word.ends_with(suffix) {
            return word[..word.len() - 2].to_string();
        }
    }
    if word.ends_with("ss") || word.ends_with("us") || word.ends_with("is") {
        return word.to_string();
    }
    match word.strip_suffix('s') {
        Some(stem) => stem.to_string(),
        None => word.to_string(),
    }
}

/// Canonical keyword surface: lowercase, single-spaced, each word singular.
/// Returns `None` when nothing alphanumeric remains.
pub fn canonical_keyword(surface: &str) -> Option<String> {
    let words: Vec<String> = tokenize(surface).iter().map(|w| singularize(w)).collect();
    if words.is_empty() {
        None
    } else {
        Some(words.join(" "))
    }
}

/// Canonicalize, deduplicate (first occurrence wins) and cap a keyword list.
pub fn canonical_keywords<S: AsRef<str>>(raw: &[S], cap: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for kw in raw {
        if let Some(c) = canonical_keyword(kw.as_ref()) {
            if seen.insert(c.clone()) {
                out.push(c);
                if out.len() == cap {
                    break;
                }
            }
        }
    }
    out
}

/// Non-stop-word tokens in canonical singular form, deduplicated in order.
pub fn content_tokens(text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    tokenize(text)
        .into_iter()
        .filter(|t| !is_stop_word(t) && (t.chars().count() > 1 || t.chars().all(|c| c.is_numeric())))
        .map(|t| singularize(&t))
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

/// Metric normalization: lowercase, ASCII punctuation removed, whitespace collapsed.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .to_lowercase();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// First `max_words` whitespace-separated words.
pub fn truncate_words(text: &str, max_words: usize) -> String {
    text.split_whitespace().take(max_words).collect::<Vec<_>>().join(" ")
}
