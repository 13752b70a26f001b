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

//! Prompt templates for every LLM-mediated decision.
//!
//! Placeholders are `{name}` tokens filled by [`fill`] in a single pass, so
//! substituted text is never re-scanned.

pub const INGEST: &str = r#"You are an expert Knowledge Graph Extractor. Your task is to analyze the [TARGET TURN] to extract structured metadata.

Input Text: {content}

Guidelines:

1. Keywords (Entities):
- GOAL: Extract 3-5 specific Noun Phrases explicitly present in the text.
- FOCUS PRIORITIES:
  1. Proper Nouns: People (e.g., "Melanie"), Locations, Organizations.
  2. Concrete Objects: Physical items (e.g., "painting", "plate", "contract").
  3. Specific Topics: "LGBTQ support group", "deadline".
- CRITICAL STOP LIST: Ignore conversational meta-roles, abstract terms, and speaker names acting purely as subjects.
- ZERO-SHOT RULE: If the text is purely phatic (e.g., "Wow", "That's cool"), return an empty list.
2. Context (Factual Restatement):
- GOAL: Rewrite the text into a self-contained factual statement.
- CONSTRAINT 1 (Strict Fidelity): Only use information present in the Input Text.
- CONSTRAINT 2 (Safe Resolution): Resolve "I/my/we" using the Speaker's name if it appears in the text. For external pronouns where the antecedent is missing, keep the pronoun or use a generic term. Do not guess.
- CONSTRAINT 3 (No Meta-Language): Start directly with the subject. Avoid "The speaker says...".

Output Format (JSON):
{"keywords": ["entity1", "entity2"], "context": "Melanie thinks the item is cool."}
"#;

pub const GATED_UPDATE: &str = r#"Role: You are a Knowledge Graph Updater. Your job is to evaluate the relationship between a NEW NODE and existing CANDIDATE NODES.

[NEW NODE]
Content: "{content}"
Context: "{context}"
Keywords: {keywords}

[CANDIDATE NODES]
{candidates_str}

Instructions:

Analyze each candidate and generate a JSON response following these rules:

1. Analyze Relationship:
- Determine relation_type: 'SUPPORTS', 'CONFLICTS', or 'RELATED_TO'.
- Assign connection_strength (0.0 – 1.0), indicating the degree of semantic overlap or logical connection.

2. Determine Operation (Based on Strength):
- CASE A: Strength ≥ 0.8 (High Redundancy) → MERGE
  - Action: Integrate details from the New Node into the candidate's context.
  - Template: "[Original Context]. Specifically, [New Node Info]..."
- CASE B: Strength ∈ [0.5, 0.8) (Complementary) → LINK
  - Action: Establish associative edge; keep contexts separate.
  - Template: "[Original Context]. (Related: [New Node Keyword])"
- CASE C: Strength < 0.5 (Distinct) → APPEND
  - Action: Add New Node as autonomous unit; no modification.
- CASE D: relation_type is 'CONFLICTS' → LINK with Contrast
  - Action: Note the conflicting information explicitly.
  - Template: "[Original Context]. However, [New Node] indicates that..."

3. Output: Return strictly valid JSON matching the schema.
"#;

/// Output schema appended to [`GATED_UPDATE`]; the template itself names no schema.
pub const GATED_UPDATE_SCHEMA: &str = r#"
Schema:
{"judgments": [{"candidate_id": "<id shown in brackets>", "relation_type": "SUPPORTS | CONFLICTS | RELATED_TO", "connection_strength": 0.0, "merged_context": "<CASE A merged context, or null>"}]}
"#;

pub const QUERY_INTENT: &str = r#"Analyze the user query to identify its Target Taxonomy Category, extract key entities, and detect time-related intent.

Task 1: topic_desc (Target Category)
- Predict the Taxonomy Category or Subject Heading this query falls under.
- Style: Strict Noun Phrase (like a book chapter title or library category).
- Constraint: Keep it under 8 words.
- Do NOT describe the user's intent (e.g., avoid "how to...", "techniques for..."). Instead, name the topic itself.

Task 2: Keywords
- Extract 3-5 core entities, technical terms, or specific concepts.
- CRITICAL: Convert terms to their canonical singular form (e.g., "transformers" → "Transformer").
- Exclude generic verbs or stop words.

Query: {query}

Output Format (JSON):
{"topic_desc": "Concise Noun Phrase",
 "keywords": ["keyword1", "keyword2", "keyword3"]}
"#;

pub const SUFFICIENCY: &str = r#"You are a reflector agent that evaluates whether the current context and answer is sufficient to answer a question.

Question: {question}

Current Context and Current Answer:
{context}

Evaluate whether the provided context and answer contains enough information to answer the question comprehensively.

If the context and answer is insufficient, identify what specific information is missing.

Output Format (JSON):
{"sufficient": true or false,
 "missing_info": "description of missing information",
 "confidence": 0.0 to 1.0}
"#;

pub const SUBQUERY: &str = r#"You are a Query Evolution Agent. Your goal is to decompose a complex user question into a specific, actionable sub-query to retrieve missing information from a Knowledge Graph.

Original Question: "{query_str}"

Current Known Information (Context):
{context_str}

History of Reasoning Steps (Q&A):
{prev_reasoning}

CRITICAL: The Reflector Agent has identified the following MISSING INFORMATION needed to answer the main question:
{missing_info}

Task: Based on the "Missing Information" and "History", formulate the NEXT single sub-question to retrieve this missing info.
- The sub-question must be specific.
- It should act as a search query for the next hop.
- If we have enough information to answer the main question, return 'None'.

Sub-question:
"#;

/// Default answer-generation prompt; overridable per policy.
pub const DEFAULT_ANSWER: &str = r#"Answer the question using only the memories below. Reply with a short phrase, not a full sentence.

Memories:
{context}

Question: {question}

Short answer:"#;

/// Reminder appended when a reply could not be parsed as JSON.
pub const REPARSE_SUFFIX: &str = "\n\nYour previous reply was not valid JSON. Reply with the JSON object only.";

/// Substitute `{name}` placeholders in one left-to-right pass. Braces that do
/// not spell a known placeholder are copied through unchanged.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            values.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
