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

//! Benchmark harness: dataset loading, per-question scoring and aggregation.

mod dataset;
pub mod metrics;

pub use dataset::{
    keyword_fixture, mini_corpus, Category, ConversationDataset, DatasetTurn, QaPair, Session, QA_FILE, SESSIONS_FILE,
};
pub use metrics::{
    bleu1, hit_rate, js_divergence, retrieval_recall, spearman, token_f1, weighted_average, MetricError,
    LOCOMO_CATEGORY_COUNTS,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::config::{AblationConfig, ConfigError, EngineConfig};
use crate::construction::{ib_diagnostics, ingest, IbDiagnostics, Turn};
use crate::embedding::Embedder;
use crate::graph::MemoryGraph;
use crate::policy::MemoryPolicy;
use crate::retrieval::retrieve_iterative;
use crate::topics::evolve_topics;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset format: {0}")]
    DatasetFormat(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub f1: f64,
    pub bleu1: f64,
    pub recall: f64,
    pub hit_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryScores {
    pub count: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub index: usize,
    pub category: Category,
    pub question: String,
    pub gold_answer: String,
    pub prediction: String,
    #[serde(flatten)]
    pub scores: Scores,
    pub retrieved_turn_ids: Vec<String>,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub ablation: AblationConfig,
    pub turns_ingested: usize,
    pub ingest_failures: usize,
    pub per_category: BTreeMap<Category, CategoryScores>,
    /// Category scores weighted by their question counts.
    pub weighted: Scores,
    pub diagnostics: IbDiagnostics,
    pub questions: Vec<QuestionRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    /// Aligned text table of the per-category and weighted scores.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "run: {}", self.label);
        let _ = writeln!(
            out,
            "{:<12} {:>5} {:>8} {:>8} {:>8} {:>8}",
            "category", "n", "F1", "BLEU-1", "Recall", "HitRate"
        );
        let row = |out: &mut String, name: &str, n: usize, s: &Scores| {
            let _ = writeln!(
                out,
                "{:<12} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                name, n, s.f1, s.bleu1, s.recall, s.hit_rate
            );
        };
        for (c, cs) in &self.per_category {
            row(&mut out, c.as_str(), cs.count, &cs.scores);
        }
        row(&mut out, "weighted", self.questions.len(), &self.weighted);
        out
    }
}

impl From<DatasetTurn> for Turn {
    fn from(t: DatasetTurn) -> Self {
        Turn {
            speaker: t.speaker,
            text: t.text,
            turn_id: Some(t.turn_id),
            date: t.date,
        }
    }
}

/// Ingest every session in order, then run a final topic evolution.
/// Returns the graph and the number of turns that failed to ingest.
pub fn build_memory(
    dataset: &ConversationDataset,
    config: &EngineConfig,
    ablation: &AblationConfig,
    policy: &dyn MemoryPolicy,
    embedder: &dyn Embedder,
) -> Result<(MemoryGraph, usize), EvalError> {
    config.validate()?;
    let mut g = MemoryGraph::new(config.clone());
    let mut failures = 0;
    for session in &dataset.sessions {
        for t in &session.turns {
            if let Err(e) = ingest(&mut g, &Turn::from(t.clone()), policy, embedder, ablation) {
                warn!(turn = %t.turn_id, error = %e, "turn not ingested");
                failures += 1;
            }
        }
    }
    evolve_topics(&mut g);
    Ok((g, failures))
}

fn answer_one(
    g: &MemoryGraph,
    index: usize,
    qa: &QaPair,
    ablation: &AblationConfig,
    policy: &dyn MemoryPolicy,
    embedder: &dyn Embedder,
) -> QuestionRecord {
    let temps = g.config().temperatures;
    let temperature = if qa.category == Category::Adversarial {
        temps.adversarial
    } else {
        temps.general
    };
    let gold: BTreeSet<String> = qa.evidence_turn_ids.iter().cloned().collect();
    let outcome = retrieve_iterative(g, &qa.question, policy, embedder, ablation)
        .map_err(|e| e.to_string())
        .map(|(pool, trace)| {
            let prediction = policy
                .answer(&qa.question, &pool.evidence(g), temperature)
                .map_err(|e| e.to_string());
            (pool.turn_ids(g), trace.iterations.len(), prediction)
        });
    let (retrieved, iterations, prediction, error) = match outcome {
        Ok((r, i, Ok(p))) => (r, i, p, None),
        Ok((r, i, Err(e))) => (r, i, String::new(), Some(e)),
        Err(e) => (BTreeSet::new(), 0, String::new(), Some(e)),
    };
    QuestionRecord {
        index,
        category: qa.category,
        question: qa.question.clone(),
        gold_answer: qa.gold_answer.clone(),
        scores: Scores {
            f1: token_f1(&prediction, &qa.gold_answer),
            bleu1: bleu1(&prediction, &qa.gold_answer),
            recall: retrieval_recall(&retrieved, &gold),
            hit_rate: hit_rate(&retrieved, &gold),
        },
        prediction,
        retrieved_turn_ids: retrieved.into_iter().collect(),
        iterations,
        error,
    }
}

/// Score every question against an already built memory. Questions are
/// answered on parallel threads; records come back in dataset order.
pub fn evaluate(
    g: &MemoryGraph,
    dataset: &ConversationDataset,
    ablation: &AblationConfig,
    policy: &dyn MemoryPolicy,
    embedder: &dyn Embedder,
) -> Vec<QuestionRecord> {
    let n = dataset.qa_pairs.len();
    let workers = std::thread::available_parallelism()
        .map_or(1, |p| p.get())
        .clamp(1, 8)
        .min(n.max(1));
    let chunk = n.div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = dataset
            .qa_pairs
            .chunks(chunk)
            .enumerate()
            .map(|(c, qas)| {
                s.spawn(move || {
                    qas.iter()
                        .enumerate()
                        .map(|(i, qa)| answer_one(g, c * chunk + i, qa, ablation, policy, embedder))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("question worker panicked"))
            .collect()
    })
}

/// Aggregate records per category and by question-count weighting.
pub fn aggregate(records: &[QuestionRecord]) -> (BTreeMap<Category, CategoryScores>, Scores) {
    let mut sums: BTreeMap<Category, (usize, Scores)> = BTreeMap::new();
    for r in records {
        let (n, s) = sums.entry(r.category).or_default();
        *n += 1;
        s.f1 += r.scores.f1;
        s.bleu1 += r.scores.bleu1;
        s.recall += r.scores.recall;
        s.hit_rate += r.scores.hit_rate;
    }
    let per_category: BTreeMap<Category, CategoryScores> = sums
        .into_iter()
        .map(|(c, (n, s))| {
            let k = n as f64;
            let scores = Scores {
                f1: s.f1 / k,
                bleu1: s.bleu1 / k,
                recall: s.recall / k,
                hit_rate: s.hit_rate / k,
            };
            (c, CategoryScores { count: n, scores })
        })
        .collect();
    let counts: BTreeMap<Category, usize> = per_category.iter().map(|(c, s)| (*c, s.count)).collect();
    let pick = |f: fn(&Scores) -> f64| -> f64 {
        let m: BTreeMap<Category, f64> = per_category.iter().map(|(c, s)| (*c, f(&s.scores))).collect();
        weighted_average(&m, &counts)
    };
    let weighted = Scores {
        f1: pick(|s| s.f1),
        bleu1: pick(|s| s.bleu1),
        recall: pick(|s| s.recall),
        hit_rate: pick(|s| s.hit_rate),
    };
    (per_category, weighted)
}

/// Build memory from the dataset, answer every question and aggregate.
pub fn run_benchmark(
    dataset: &ConversationDataset,
    config: &EngineConfig,
    ablation: &AblationConfig,
    policy: &dyn MemoryPolicy,
    embedder: &dyn Embedder,
) -> Result<EvalReport, EvalError> {
    dataset.validate()?;
    let (g, ingest_failures) = build_memory(dataset, config, ablation, policy, embedder)?;
    let questions = evaluate(&g, dataset, ablation, policy, embedder);
    let (per_category, weighted) = aggregate(&questions);
    Ok(EvalReport {
        label: ablation.label(),
        ablation: *ablation,
        turns_ingested: dataset.turn_count() - ingest_failures,
        ingest_failures,
        per_category,
        weighted,
        diagnostics: ib_diagnostics(&g),
        questions,
    })
}
