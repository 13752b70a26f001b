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

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. Pass criterion numbers as arguments to
//! run a subset.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use memfly_core::config::{AblationConfig, EngineConfig};
use memfly_core::construction::{decide, ingest, merge_notes, Decision, Operation, Turn};
use memfly_core::embedding::{Embedder, HashEmbedder};
use memfly_core::engine::MemoryEngine;
use memfly_core::eval::{
    bleu1, js_divergence, keyword_fixture, mini_corpus, run_benchmark, spearman, token_f1, weighted_average, Category,
    EvalReport, LOCOMO_CATEGORY_COUNTS,
};
use memfly_core::graph::{KeywordId, MemoryGraph, NoteDraft, NoteId, RawSegment, RelationType, SCORE_RESOLUTION};
use memfly_core::policy::{
    CandidateJudgment, EvidenceItem, IngestResult, MemoryPolicy, MockPolicy, NoteSummary, PolicyError, QueryIntent,
    ReasoningStep, SufficiencyVerdict,
};
use memfly_core::retrieval::{retrieve_iterative, retrieve_once, rrf_fuse, StopReason};
use memfly_core::topics::{evolve_topics, leiden_partition, WeightedGraph};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TAU_MERGE: f64 = 0.7;
const TAU_LINK: f64 = 0.5;
const VECTOR_TOL: f64 = 1e-9;
const MODULARITY_TOL: f64 = 1e-9;
const RRF_TOL: f64 = 1e-12;
const SCORE_TOL: f64 = 1e-12;
const F1_TOL: f64 = 1e-12;
const BLEU_TOL: f64 = 1e-9;
const PROPORTION_TOL: f64 = 1e-4;
const SPEARMAN_MIN: f64 = 0.8;

const BUDGET_INVARIANTS: Duration = Duration::from_secs(30);
const BUDGET_MODULARITY: Duration = Duration::from_secs(60);
const BUDGET_ABLATION: Duration = Duration::from_secs(120);

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, Option<Duration>, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        {
            let ok: bool = $cond;
            if !ok {
                return Err(format!($($arg)+));
            }
        }
    };
}

fn main() {
    let criteria: [Criterion; 10] = [
        (
            1,
            "structural invariants",
            Some(BUDGET_INVARIANTS),
            structural_invariants,
        ),
        (2, "gated update table", None, gated_update_table),
        (3, "merge semantics", None, merge_semantics),
        (4, "modularity oracle", Some(BUDGET_MODULARITY), modularity_oracle),
        (5, "retrieval equivalence", None, retrieval_equivalence),
        (6, "refinement contract", None, refinement_contract),
        (7, "metric fixtures", None, metric_fixtures),
        (8, "redundancy vs divergence", None, redundancy_vs_divergence),
        (9, "directional ablation", Some(BUDGET_ABLATION), directional_ablation),
        (10, "persistence and service", None, persistence_and_service),
    ];
    let only: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, budget, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| Err(panic_text(p)));
        let took = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(_), Some(b)) if took > b => Err(format!("took {:.1}s, budget {}s", took.as_secs_f64(), b.as_secs())),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail} ({:.2}s)", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name}: {why} ({:.2}s)", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    let msg = p
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into());
    format!("panicked: {msg}")
}

fn embedder() -> Arc<HashEmbedder> {
    Arc::new(HashEmbedder::new(EngineConfig::default().embedding_dim, 0))
}

fn mock(e: &Arc<HashEmbedder>) -> MockPolicy {
    MockPolicy::new(e.clone(), TAU_MERGE)
}

// ---------------------------------------------------------------- 1

const WORDS: [&str; 24] = [
    "rosa", "tomas", "mei", "idris", "lisbon", "porto", "beagle", "cello", "violin", "pottery", "marathon", "garden",
    "kayak", "recipe", "tram", "museum", "painting", "harbor", "festival", "novel", "bakery", "chess", "orchid",
    "lantern",
];
const FILLER: [&str; 6] = ["the", "really", "again", "with", "my", "a"];
const SPEAKERS: [&str; 4] = ["Rosa", "Tomas", "Mei", "Idris"];

type ScriptedTurn = (usize, Vec<usize>, bool, usize);

fn transcript() -> impl Strategy<Value = (Vec<ScriptedTurn>, usize)> {
    let turn = (
        0..SPEAKERS.len(),
        prop::collection::vec(0..WORDS.len() + FILLER.len(), 1..7),
        prop::bool::weighted(0.15),
        0..10usize,
    );
    (prop::collection::vec(turn, 100..=120), 0..4usize)
}

fn render_turns(script: &[ScriptedTurn], case: usize) -> Vec<Turn> {
    let mut texts: Vec<String> = Vec::new();
    let mut turns = Vec::new();
    for (i, (speaker, words, negate, repeat)) in script.iter().enumerate() {
        let text = if *repeat < 3 && !texts.is_empty() {
            texts[(i * 7 + repeat) % texts.len()].clone()
        } else {
            let mut parts: Vec<&str> = words
                .iter()
                .map(|w| {
                    if *w < WORDS.len() {
                        WORDS[*w]
                    } else {
                        FILLER[w - WORDS.len()]
                    }
                })
                .collect();
            if *negate {
                parts.insert(parts.len() / 2, "not");
            }
            parts.join(" ")
        };
        texts.push(text.clone());
        turns.push(Turn::new(SPEAKERS[*speaker], text).with_id(format!("c{case}:{i}")));
    }
    turns
}

fn ablation_variant(i: usize) -> AblationConfig {
    match i {
        1 => AblationConfig {
            disable_merge: true,
            ..Default::default()
        },
        2 => AblationConfig {
            disable_link: true,
            ..Default::default()
        },
        3 => AblationConfig {
            disable_denoise: true,
            ..Default::default()
        },
        _ => AblationConfig::default(),
    }
}

fn structural_invariants() -> Outcome {
    let e = embedder();
    let policy = mock(&e);
    let total = Cell::new(0usize);
    let merges = Cell::new(0u64);
    let case = Cell::new(0usize);
    let mut runner = TestRunner::new(PropConfig {
        cases: 5,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let result = runner.run(&transcript(), |(script, variant)| {
        let cfg = EngineConfig {
            evolve_every: 25,
            ..EngineConfig::default()
        };
        let ablation = ablation_variant(variant);
        let mut g = MemoryGraph::new(cfg);
        let turns = render_turns(&script, case.get());
        case.set(case.get() + 1);
        for t in &turns {
            ingest(&mut g, t, &policy, e.as_ref(), &ablation).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let v = g.check_invariants();
            prop_assert!(
                v.is_empty(),
                "violations after {}: {:?}",
                t.turn_id.as_deref().unwrap_or(""),
                v
            );
        }
        let mut seen: Vec<(String, String, String)> = g
            .notes()
            .flat_map(|n| {
                n.raw
                    .iter()
                    .map(|r| (r.speaker.clone(), r.text.clone(), r.turn_id.clone()))
            })
            .collect();
        let mut given: Vec<(String, String, String)> = turns
            .iter()
            .map(|t| (t.speaker.clone(), t.text.trim().to_string(), t.turn_id.clone().unwrap()))
            .collect();
        seen.sort();
        given.sort();
        prop_assert_eq!(seen, given);
        let totals = g.totals();
        prop_assert_eq!(totals.inputs_seen, turns.len() as u64);
        prop_assert_eq!(g.note_count() as u64, totals.inputs_seen - totals.merge_total);
        total.set(total.get() + turns.len());
        merges.set(merges.get() + totals.merge_total);
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    ensure!(total.get() >= 500, "only {} ingests generated", total.get());
    Ok(format!(
        "{} ingests over {} transcripts, {} merges, no violations",
        total.get(),
        case.get(),
        merges.get()
    ))
}

// ---------------------------------------------------------------- 2

/// Mock parsing with candidate judgments taken from a fixed script, one
/// entry per candidate in the order presented.
struct Scripted {
    inner: MockPolicy,
    script: Vec<(RelationType, f64)>,
}

impl MemoryPolicy for Scripted {
    fn ingest_parse(&self, raw: &str, speaker: &str) -> Result<IngestResult, PolicyError> {
        self.inner.ingest_parse(raw, speaker)
    }

    fn judge_candidates(
        &self,
        new_note: &NoteSummary,
        candidates: &[NoteSummary],
    ) -> Result<Vec<CandidateJudgment>, PolicyError> {
        Ok(candidates
            .iter()
            .zip(&self.script)
            .map(|(c, (relation_type, strength))| CandidateJudgment {
                candidate: c.id.expect("stored note"),
                relation_type: *relation_type,
                connection_strength: *strength,
                merged_context: (*relation_type == RelationType::Supports)
                    .then(|| format!("{} (merged with: {})", c.context, new_note.context)),
            })
            .collect())
    }

    fn parse_query_intent(&self, query: &str) -> Result<QueryIntent, PolicyError> {
        self.inner.parse_query_intent(query)
    }

    fn judge_sufficiency(&self, evidence: &str, query: &str) -> Result<SufficiencyVerdict, PolicyError> {
        self.inner.judge_sufficiency(evidence, query)
    }

    fn generate_subquery(
        &self,
        query: &str,
        evidence: &str,
        history: &[ReasoningStep],
        missing: &str,
    ) -> Result<Option<String>, PolicyError> {
        self.inner.generate_subquery(query, evidence, history, missing)
    }

    fn answer(&self, question: &str, evidence: &[EvidenceItem], temperature: f64) -> Result<String, PolicyError> {
        self.inner.answer(question, evidence, temperature)
    }
}

fn judgment(candidate: u64, relation_type: RelationType, connection_strength: f64) -> CandidateJudgment {
    CandidateJudgment {
        candidate: NoteId(candidate),
        relation_type,
        connection_strength,
        merged_context: None,
    }
}

fn gated_update_table() -> Outcome {
    let cfg = EngineConfig::default();
    ensure!(
        cfg.tau_merge == TAU_MERGE && cfg.tau_link == TAU_LINK,
        "default thresholds {} / {}",
        cfg.tau_merge,
        cfg.tau_link
    );
    use RelationType::{Conflicts as C, RelatedTo as R, Supports as S};

    let full = AblationConfig::default();
    let table: Vec<(Vec<CandidateJudgment>, &str)> = vec![
        (vec![judgment(1, S, 0.9)], "merge"),
        (vec![judgment(1, R, 0.6)], "link"),
        (vec![judgment(1, R, 0.4)], "append"),
        (vec![judgment(1, S, 0.5), judgment(2, R, 0.4)], "append"),
        (vec![judgment(1, C, 0.1)], "link"),
        (vec![judgment(1, S, 0.7)], "append"),
        (vec![judgment(1, R, 0.5)], "append"),
        (vec![judgment(1, S, 0.9), judgment(2, R, 0.6)], "merge"),
    ];
    for (js, want) in &table {
        let got = match decide(js, TAU_MERGE, TAU_LINK, &full) {
            Decision::Merge { .. } => "merge",
            Decision::Link { .. } => "link",
            Decision::Append => "append",
        };
        ensure!(got == *want, "decide({js:?}) = {got}, expected {want}");
    }

    let e = embedder();
    let seed_notes = ["Rosa keeps a beagle named Pixel", "Rosa walks Pixel along the harbor"];
    let incoming = "Rosa bought Pixel a red collar";
    let cases: Vec<(Vec<(RelationType, f64)>, Operation)> = vec![
        (vec![(S, 0.9)], Operation::Merged),
        (vec![(R, 0.6)], Operation::Linked),
        (vec![(R, 0.4)], Operation::Appended),
        (vec![(S, 0.5), (R, 0.4)], Operation::Appended),
        (vec![(C, 0.3)], Operation::Linked),
        (vec![(S, 0.7)], Operation::Appended),
        (vec![(R, 0.5)], Operation::Appended),
        (vec![(S, 0.9), (R, 0.6)], Operation::Merged),
        (vec![(S, 0.6), (R, 0.6)], Operation::Linked),
    ];
    for (script, want) in &cases {
        let mut g = MemoryGraph::new(cfg.clone());
        let quiet = Scripted {
            inner: mock(&e),
            script: Vec::new(),
        };
        for t in seed_notes {
            ingest(&mut g, &Turn::new("Rosa", t), &quiet, e.as_ref(), &full).map_err(|e| e.to_string())?;
        }
        let policy = Scripted {
            inner: mock(&e),
            script: script.clone(),
        };
        let r = ingest(&mut g, &Turn::new("Rosa", incoming), &policy, e.as_ref(), &full).map_err(|e| e.to_string())?;
        ensure!(
            r.judgments.len() == script.len(),
            "{script:?}: {} judgments",
            r.judgments.len()
        );
        ensure!(r.operation == *want, "{script:?}: {:?}, expected {want:?}", r.operation);
        let edges: Vec<_> = g.related_edges().cloned().collect();
        match want {
            Operation::Merged => {
                let target = r.judgments[0].candidate;
                ensure!(
                    r.note_id == target && g.note_count() == 2,
                    "{script:?}: merge into {} left {} notes",
                    r.note_id,
                    g.note_count()
                );
                ensure!(
                    g.note(target).unwrap().raw.len() == 2 && edges.is_empty(),
                    "{script:?}: merged note malformed"
                );
            }
            Operation::Linked => {
                let linked: Vec<&CandidateJudgment> = r
                    .judgments
                    .iter()
                    .filter(|j| j.relation_type == C || (j.relation_type == R && j.connection_strength > TAU_LINK))
                    .collect();
                ensure!(
                    g.note_count() == 3 && edges.len() == linked.len(),
                    "{script:?}: {} edges for {} links",
                    edges.len(),
                    linked.len()
                );
                for j in linked {
                    let edge = g
                        .related_edge(r.note_id, j.candidate)
                        .ok_or(format!("{script:?}: no edge to {}", j.candidate))?;
                    ensure!(
                        edge.relation == j.relation_type && edge.strength == j.connection_strength,
                        "{script:?}: edge {edge:?}"
                    );
                    let old = &g.note(j.candidate).unwrap().context;
                    match (j.relation_type, &edge.contrast) {
                        (C, Some(text)) => ensure!(
                            text.contains(old.trim_end_matches('.')) && text.contains(incoming),
                            "{script:?}: contrast {text:?}"
                        ),
                        (C, None) => return Err(format!("{script:?}: conflict edge lacks contrast")),
                        (_, Some(_)) => return Err(format!("{script:?}: contrast on a non-conflict edge")),
                        _ => {}
                    }
                }
            }
            Operation::Appended => {
                ensure!(
                    g.note_count() == 3 && edges.is_empty(),
                    "{script:?}: append changed edges or count"
                );
            }
        }
        ensure!(g.check_invariants().is_empty(), "{script:?}: invariants violated");
    }
    Ok(format!(
        "{} decision rows and {} ingest scenarios at tau_m={TAU_MERGE}, tau_l={TAU_LINK}",
        table.len(),
        cases.len()
    ))
}

// ---------------------------------------------------------------- 3

fn segment(text: &str, turn: &str, timestamp: u64) -> RawSegment {
    RawSegment {
        text: text.into(),
        speaker: "A".into(),
        turn_id: turn.into(),
        timestamp,
        date: None,
    }
}

fn merge_semantics() -> Outcome {
    let e = embedder();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs = 60;
    for p in 0..pairs {
        let mut g = MemoryGraph::new(EngineConfig::default());
        let pick = |rng: &mut ChaCha8Rng| -> BTreeSet<&'static str> {
            (0..rng.random_range(0..=4))
                .map(|_| WORDS[rng.random_range(0..WORDS.len())])
                .collect()
        };
        let (ka, kb) = (pick(&mut rng), pick(&mut rng));
        let ids = |g: &mut MemoryGraph, ks: &BTreeSet<&str>| -> BTreeSet<KeywordId> {
            ks.iter()
                .map(|k| g.upsert_keyword(k, &e.embed(k).unwrap()).unwrap())
                .collect()
        };
        let ka_ids = ids(&mut g, &ka);
        let ctx_a = format!("first {}", ka.iter().copied().collect::<Vec<_>>().join(" "));
        g.tick();
        let target = g
            .add_note(NoteDraft {
                raw: vec![segment(&ctx_a, "a", g.clock())],
                context: ctx_a.clone(),
                embedding: e.embed(&ctx_a).unwrap(),
                keywords: ka_ids,
            })
            .map_err(|e| e.to_string())?;
        g.tick();
        let kb_ids = ids(&mut g, &kb);
        let ctx_b = format!("second {}", kb.iter().copied().collect::<Vec<_>>().join(" "));
        let draft = NoteDraft {
            raw: vec![segment(&ctx_b, "b", g.clock())],
            context: ctx_b.clone(),
            embedding: e.embed(&ctx_b).unwrap(),
            keywords: kb_ids.clone(),
        };
        let merged = if p % 5 == 0 {
            String::new()
        } else {
            format!("merged {} {}", ctx_a, WORDS[p % WORDS.len()])
        };
        merge_notes(&mut g, target, draft, &merged, e.as_ref()).map_err(|e| e.to_string())?;
        let note = g.note(target).ok_or("target vanished")?;

        let surfaces: BTreeSet<&str> = note
            .keywords
            .iter()
            .map(|k| g.keyword(*k).unwrap().surface.as_str())
            .collect();
        let union: BTreeSet<&str> = ka.union(&kb).copied().collect();
        ensure!(surfaces == union, "pair {p}: keywords {surfaces:?} != {union:?}");
        ensure!(
            kb_ids
                .iter()
                .all(|k| g.keyword(*k).unwrap().note_refs.contains(&target)),
            "pair {p}: note_refs not updated"
        );

        let mut raw: Vec<(&str, &str)> = note.raw.iter().map(|r| (r.text.as_str(), r.turn_id.as_str())).collect();
        raw.sort();
        let mut want = vec![(ctx_a.as_str(), "a"), (ctx_b.as_str(), "b")];
        want.sort();
        ensure!(raw == want, "pair {p}: raw {raw:?}");

        let context = if merged.is_empty() {
            format!("{ctx_a}; {ctx_b}")
        } else {
            merged.clone()
        };
        ensure!(note.context == context, "pair {p}: context {:?}", note.context);
        let expected = e.embed(&context).unwrap();
        let diff = note
            .embedding
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure!(diff <= VECTOR_TOL, "pair {p}: embedding off by {diff}");
        ensure!(
            g.note_count() == 1 && g.check_invariants().is_empty(),
            "pair {p}: graph inconsistent"
        );
    }
    Ok(format!(
        "{pairs} constructed pairs: sets exact, vectors within {VECTOR_TOL:e}"
    ))
}

// ---------------------------------------------------------------- 4

/// Modularity from first principles over a dense adjacency matrix.
fn reference_modularity(n: usize, edges: &[(usize, usize, f64)], labels: &[usize]) -> f64 {
    let mut a = vec![vec![0.0; n]; n];
    for &(u, v, w) in edges {
        a[u][v] += w;
        a[v][u] += w;
    }
    let k: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    let two_m: f64 = k.iter().sum();
    if two_m == 0.0 {
        return 0.0;
    }
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += a[i][j] - k[i] * k[j] / two_m;
            }
        }
    }
    q / two_m
}

/// Best modularity over every set partition (restricted growth strings).
fn exhaustive_best(n: usize, edges: &[(usize, usize, f64)]) -> f64 {
    fn rec(i: usize, labels: &mut Vec<usize>, max: usize, n: usize, edges: &[(usize, usize, f64)], best: &mut f64) {
        if i == n {
            *best = best.max(reference_modularity(n, edges, labels));
            return;
        }
        for l in 0..=max + 1 {
            labels[i] = l;
            rec(i + 1, labels, max.max(l), n, edges, best);
        }
    }
    let mut labels = vec![0; n];
    let mut best = f64::NEG_INFINITY;
    if n == 0 {
        return 0.0;
    }
    rec(1, &mut labels, 0, n, edges, &mut best);
    best
}

fn random_connected(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize, f64)> {
    let mut edges = BTreeMap::new();
    for v in 1..n {
        let u = rng.random_range(0..v);
        edges.insert((u, v), rng.random_range(1..=3) as f64);
    }
    let extra = rng.random_range(0..=n * (n - 1) / 2);
    for _ in 0..extra {
        let (u, v) = (rng.random_range(0..n), rng.random_range(0..n));
        if u != v {
            edges.insert((u.min(v), u.max(v)), rng.random_range(1..=3) as f64);
        }
    }
    edges.into_iter().map(|((u, v), w)| (u, v, w)).collect()
}

fn components(n: usize, edges: &[(usize, usize, f64)]) -> Vec<BTreeSet<usize>> {
    let mut label: Vec<usize> = (0..n).collect();
    fn root(label: &mut [usize], v: usize) -> usize {
        let mut r = v;
        while label[r] != r {
            r = label[r];
        }
        label[v] = r;
        r
    }
    for &(u, v, _) in edges {
        let (a, b) = (root(&mut label, u), root(&mut label, v));
        label[a.max(b)] = a.min(b);
    }
    let mut out: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for v in 0..n {
        let r = root(&mut label, v);
        out.entry(r).or_default().insert(v);
    }
    out.into_values().collect()
}

fn modularity_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let graphs = 150;
    let mut worst = 0.0f64;
    for i in 0..graphs {
        let n = 2 + i % 7;
        let edges = random_connected(&mut rng, n);
        let best = exhaustive_best(n, &edges);
        let g = WeightedGraph::new(n, &edges);
        let p = leiden_partition(&g, 1, n, i as u64).map_err(|e| e.to_string())?;
        let q = reference_modularity(n, &edges, &p.assignment);
        ensure!(
            (q - p.modularity).abs() <= MODULARITY_TOL,
            "graph {i}: reported {} vs recomputed {q}",
            p.modularity
        );
        ensure!(
            best - q <= MODULARITY_TOL,
            "graph {i} (n={n}, {edges:?}): {q} below optimum {best}"
        );
        worst = worst.max(best - q);
    }

    let planted = 24;
    for i in 0..planted {
        let n_target = 20 + (i * 180) / (planted - 1);
        let mut sizes = Vec::new();
        let mut left = n_target;
        while left > 0 {
            let s = rng.random_range(1..=30).min(left);
            sizes.push(s);
            left -= s;
        }
        let n: usize = sizes.iter().sum();
        let mut edges = BTreeMap::new();
        let mut start = 0;
        let mut blocks = Vec::new();
        for s in &sizes {
            blocks.push(start..start + s);
            for u in start..start + s {
                for v in u + 1..start + s {
                    if rng.random_bool(0.6) {
                        edges.insert((u, v), 1.0);
                    }
                }
            }
            start += s;
        }
        for _ in 0..n / 4 {
            let (a, b) = (rng.random_range(0..blocks.len()), rng.random_range(0..blocks.len()));
            if a != b && rng.random_bool(0.7) {
                let u = rng.random_range(blocks[a].clone());
                let v = rng.random_range(blocks[b].clone());
                edges.insert((u.min(v), u.max(v)), 1.0);
            }
        }
        let edges: Vec<(usize, usize, f64)> = edges.into_iter().map(|((u, v), w)| (u, v, w)).collect();
        let (dmin, dmax) = [(2, 50), (3, 12), (4, 8), (5, 25)][i % 4];
        let g = WeightedGraph::new(n, &edges);
        let p = leiden_partition(&g, dmin, dmax, i as u64).map_err(|e| e.to_string())?;
        let comps = components(n, &edges);
        for (label, members) in p.communities().into_iter().enumerate() {
            let set: BTreeSet<usize> = members.iter().copied().collect();
            ensure!(
                set.len() <= dmax,
                "planted {i}: community of {} exceeds {dmax}",
                set.len()
            );
            if set.len() < dmin {
                let whole = comps
                    .iter()
                    .any(|c| c.len() < dmin && set.is_subset(c) && c.is_subset(&set));
                ensure!(
                    whole,
                    "planted {i}: community {set:?} below {dmin} is not a whole small component"
                );
                ensure!(
                    p.undersized.contains(&label),
                    "planted {i}: undersized {set:?} not reported"
                );
            }
        }
    }
    Ok(format!(
        "{graphs} graphs (n<=8) at brute-force optimum (max gap {worst:.1e}); bounds hold on {planted} planted graphs up to 200 vertices"
    ))
}

// ---------------------------------------------------------------- 5

const VOCAB: [&str; 40] = [
    "rosa", "tomas", "mei", "idris", "lisbon", "porto", "beagle", "cello", "violin", "pottery", "marathon", "garden",
    "kayak", "recipe", "tram", "museum", "painting", "harbor", "festival", "novel", "bakery", "chess", "orchid",
    "lantern", "glacier", "sonata", "falcon", "quilt", "teapot", "canyon", "robot", "meadow", "saffron", "pier",
    "comet", "lagoon", "atlas", "cipher", "drum", "ember",
];

fn random_graph(rng: &mut ChaCha8Rng, e: &HashEmbedder, cfg: EngineConfig) -> MemoryGraph {
    let mut g = MemoryGraph::new(cfg);
    let n = rng.random_range(0..=200);
    let vocab = rng.random_range(5..=VOCAB.len());
    for i in 0..n {
        g.tick();
        let kws: BTreeSet<&str> = (0..rng.random_range(0..=4))
            .map(|_| VOCAB[rng.random_range(0..vocab)])
            .collect();
        let ids: BTreeSet<KeywordId> = kws
            .iter()
            .map(|k| g.upsert_keyword(k, &e.embed(k).unwrap()).unwrap())
            .collect();
        g.update_cooccurrence(&ids);
        let text = format!("{} entry{i}", kws.iter().copied().collect::<Vec<_>>().join(" "));
        let draft = NoteDraft {
            raw: vec![segment(&text, &format!("r{i}"), g.clock())],
            context: text.clone(),
            embedding: e.embed(&text).unwrap(),
            keywords: ids,
        };
        g.add_note(draft).unwrap();
    }
    let ids: Vec<NoteId> = g.notes().map(|n| n.id).collect();
    if ids.len() >= 2 {
        for _ in 0..rng.random_range(0..=ids.len()) {
            let (a, b) = (ids[rng.random_range(0..ids.len())], ids[rng.random_range(0..ids.len())]);
            if a != b {
                g.link_notes(a, b, RelationType::RelatedTo, 0.6, None).unwrap();
            }
        }
    }
    if rng.random_bool(0.8) {
        evolve_topics(&mut g);
    }
    g
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Descending score at ranking resolution, then ascending id.
fn by_score_then_id<T: Ord + Copy>(v: &mut [(T, f64)]) {
    let key = |s: f64| (s / SCORE_RESOLUTION).round();
    v.sort_by(|a, b| key(b.1).partial_cmp(&key(a.1)).unwrap().then(a.0.cmp(&b.0)));
}

struct ReferencePool {
    topic: Vec<(NoteId, f64)>,
    keyword: Vec<(NoteId, f64)>,
    ranked: Vec<(NoteId, f64)>,
    kept: BTreeSet<NoteId>,
    expanded: BTreeSet<NoteId>,
}

/// Straight-line retrieval: every topic, keyword, note and edge is scanned.
fn reference_retrieve(
    g: &MemoryGraph,
    intent: &QueryIntent,
    e: &HashEmbedder,
    ablation: &AblationConfig,
) -> ReferencePool {
    let cfg = g.config();
    let floor = cfg.min_similarity;
    let notes: Vec<_> = g.notes().collect();
    let surface_of = |k: &KeywordId| g.keyword(*k).map(|kw| kw.surface.clone()).unwrap_or_default();

    let mut topic_list: Vec<(NoteId, f64)> = Vec::new();
    if !ablation.disable_topic_pathway && g.topic_count() > 0 {
        if let Ok(h) = e.embed(&intent.topic_desc) {
            let mut topics: Vec<(u64, f64)> = g.topics().map(|t| (t.id.0, cosine(&h, &t.centroid))).collect();
            by_score_then_id(&mut topics);
            topics.truncate(cfg.k_topic);
            topics.retain(|(_, s)| *s > floor);
            for n in &notes {
                let best = g
                    .topics()
                    .filter_map(|t| topics.iter().find(|(id, _)| *id == t.id.0).map(|(_, s)| (t, *s)))
                    .filter(|(t, _)| n.keywords.iter().any(|k| t.members.contains(k)))
                    .map(|(_, s)| s)
                    .fold(f64::NEG_INFINITY, f64::max);
                if best.is_finite() {
                    topic_list.push((n.id, best));
                }
            }
            by_score_then_id(&mut topic_list);
        }
    }

    let mut keyword_list: Vec<(NoteId, f64)> = Vec::new();
    if !ablation.disable_keyword_pathway {
        let mut matched: BTreeMap<String, f64> = BTreeMap::new();
        for q in &intent.keywords {
            let Ok(h) = e.embed(q) else { continue };
            let mut all: Vec<(u64, f64)> = g.keywords().map(|k| (k.id.0, cosine(&h, &k.embedding))).collect();
            by_score_then_id(&mut all);
            all.truncate(cfg.k_key);
            for (id, s) in all.into_iter().filter(|(_, s)| *s > floor) {
                let e = matched.entry(surface_of(&KeywordId(id))).or_insert(f64::NEG_INFINITY);
                *e = e.max(s);
            }
        }
        for n in &notes {
            let best = n
                .keywords
                .iter()
                .filter_map(|k| matched.get(&surface_of(k)))
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            if best.is_finite() {
                keyword_list.push((n.id, best));
            }
        }
        by_score_then_id(&mut keyword_list);
    }

    let mut fused: BTreeMap<NoteId, f64> = BTreeMap::new();
    for list in [&topic_list, &keyword_list] {
        for (rank, (id, _)) in list.iter().enumerate() {
            *fused.entry(*id).or_insert(0.0) += 1.0 / (cfg.rrf_k + (rank + 1) as f64);
        }
    }
    let anchors: BTreeSet<NoteId> = fused.keys().copied().collect();
    let mut fused: Vec<(NoteId, f64)> = fused.into_iter().collect();
    by_score_then_id(&mut fused);
    let mut ranked: Vec<(NoteId, f64)> = fused.iter().take(cfg.k_final).copied().collect();
    let kept: BTreeSet<NoteId> = ranked.iter().map(|(id, _)| *id).collect();

    let mut expanded = BTreeSet::new();
    if !ablation.disable_neighbor {
        let mut adjacent: BTreeMap<NoteId, BTreeSet<NoteId>> = BTreeMap::new();
        for edge in g.related_edges() {
            adjacent.entry(edge.from).or_default().insert(edge.to);
            adjacent.entry(edge.to).or_default().insert(edge.from);
        }
        let mut level: BTreeMap<NoteId, f64> = fused.iter().copied().collect();
        let mut reached: BTreeMap<NoteId, f64> = BTreeMap::new();
        for _ in 0..cfg.expansion_hops {
            let mut next: BTreeMap<NoteId, f64> = BTreeMap::new();
            for (v, s) in &level {
                for u in adjacent.get(v).into_iter().flatten() {
                    if !anchors.contains(u) && !reached.contains_key(u) {
                        let e = next.entry(*u).or_insert(f64::NEG_INFINITY);
                        *e = e.max(*s);
                    }
                }
            }
            reached.extend(next.iter().map(|(k, v)| (*k, *v)));
            level = next;
        }
        let mut reached: Vec<(NoteId, f64)> = reached.into_iter().collect();
        by_score_then_id(&mut reached);
        let room = (2 * cfg.k_final).saturating_sub(ranked.len());
        for (id, s) in reached.into_iter().take(room) {
            expanded.insert(id);
            ranked.push((id, s));
        }
    }
    ReferencePool {
        topic: topic_list,
        keyword: keyword_list,
        ranked,
        kept,
        expanded,
    }
}

fn retrieval_equivalence() -> Outcome {
    let f = rrf_fuse(&[vec![7u64, 1], vec![7u64, 3]], 60.0);
    ensure!(
        f[0].0 == 7 && (f[0].1 - 2.0 / 61.0).abs() <= RRF_TOL,
        "rrf top {:?}",
        f[0]
    );

    let e = embedder();
    let policy = mock(&e);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let graphs = 220;
    let mut queries = 0;
    let mut nonempty = 0;
    let mut with_expansion = 0;
    for gi in 0..graphs {
        let cfg = EngineConfig {
            k_final: rng.random_range(1..=25),
            k_key: rng.random_range(1..=10),
            k_topic: rng.random_range(1..=4),
            expansion_hops: rng.random_range(1..=3),
            min_similarity: if rng.random_bool(0.3) { 0.2 } else { 0.0 },
            delta_min: 2,
            delta_max: rng.random_range(3..=20),
            ..EngineConfig::default()
        };
        let g = random_graph(&mut rng, &e, cfg);
        for _ in 0..3 {
            let words: Vec<&str> = (0..rng.random_range(1..=4))
                .map(|_| VOCAB[rng.random_range(0..VOCAB.len())])
                .collect();
            let query = format!("what about {}?", words.join(" and "));
            let ablation = AblationConfig {
                disable_topic_pathway: rng.random_bool(0.15),
                disable_keyword_pathway: rng.random_bool(0.15),
                disable_neighbor: rng.random_bool(0.15),
                ..Default::default()
            };
            let (pool, record) =
                retrieve_once(&g, &query, &policy, e.as_ref(), &ablation).map_err(|e| e.to_string())?;
            let intent = policy.parse_query_intent(&query).map_err(|e| e.to_string())?;
            let want = reference_retrieve(&g, &intent, e.as_ref(), &ablation);
            let got_ids = pool.ids();
            let want_ids: Vec<NoteId> = want.ranked.iter().map(|(id, _)| *id).collect();
            ensure!(
                got_ids == want_ids,
                "graph {gi} {query:?}: pool {got_ids:?} != reference {want_ids:?} (topic {:?} vs {:?}; keyword {:?} vs {:?})",
                record.topic_hits,
                want.topic,
                record.keyword_hits,
                want.keyword
            );
            for ((_, a), (_, b)) in pool.ranked.iter().zip(&want.ranked) {
                ensure!((a - b).abs() <= SCORE_TOL, "graph {gi} {query:?}: score {a} vs {b}");
            }
            ensure!(pool.anchors == want.kept, "graph {gi} {query:?}: anchors differ");
            ensure!(
                pool.expanded == want.expanded,
                "graph {gi} {query:?}: expansion differs"
            );
            queries += 1;
            nonempty += usize::from(!pool.is_empty());
            with_expansion += usize::from(!pool.expanded.is_empty());
        }
    }
    Ok(format!(
        "{queries} queries on {graphs} graphs identical to full scan ({nonempty} non-empty, {with_expansion} with expansion); rrf 2/61 within {RRF_TOL:e}"
    ))
}

// ---------------------------------------------------------------- 6

/// Mock retrieval-side behavior with randomized sufficiency and sub-queries.
struct Erratic {
    inner: MockPolicy,
    rng: Mutex<ChaCha8Rng>,
}

impl MemoryPolicy for Erratic {
    fn ingest_parse(&self, raw: &str, speaker: &str) -> Result<IngestResult, PolicyError> {
        self.inner.ingest_parse(raw, speaker)
    }

    fn judge_candidates(
        &self,
        new_note: &NoteSummary,
        candidates: &[NoteSummary],
    ) -> Result<Vec<CandidateJudgment>, PolicyError> {
        self.inner.judge_candidates(new_note, candidates)
    }

    fn parse_query_intent(&self, query: &str) -> Result<QueryIntent, PolicyError> {
        self.inner.parse_query_intent(query)
    }

    fn judge_sufficiency(&self, _evidence: &str, _query: &str) -> Result<SufficiencyVerdict, PolicyError> {
        let mut rng = self.rng.lock().unwrap();
        if rng.random_bool(0.1) {
            return Err(PolicyError::RemoteFailure("scripted outage".into()));
        }
        Ok(SufficiencyVerdict {
            sufficient: rng.random_bool(0.2),
            missing_info: VOCAB[rng.random_range(0..VOCAB.len())].into(),
            confidence: rng.random_range(0.0..1.0),
        })
    }

    fn generate_subquery(
        &self,
        _q: &str,
        _e: &str,
        _h: &[ReasoningStep],
        _m: &str,
    ) -> Result<Option<String>, PolicyError> {
        let mut rng = self.rng.lock().unwrap();
        Ok(match rng.random_range(0..10) {
            0 => None,
            1 => Some("   ".into()),
            _ => Some(
                (0..rng.random_range(1..=3))
                    .map(|_| VOCAB[rng.random_range(0..VOCAB.len())])
                    .collect::<Vec<_>>()
                    .join(" "),
            ),
        })
    }

    fn answer(&self, question: &str, evidence: &[EvidenceItem], temperature: f64) -> Result<String, PolicyError> {
        self.inner.answer(question, evidence, temperature)
    }
}

fn refinement_contract() -> Outcome {
    let e = embedder();
    let i_max = EngineConfig::default().i_max;
    ensure!(i_max == 3, "default i_max is {i_max}");
    let policy = Erratic {
        inner: mock(&e),
        rng: Mutex::new(ChaCha8Rng::seed_from_u64(61)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let full = AblationConfig::default();
    let mut runs = 0;
    let mut rounds_seen = BTreeMap::new();
    for gi in 0..60 {
        let g = random_graph(&mut rng, &e, EngineConfig::default());
        for _ in 0..4 {
            let q = format!(
                "{} {}",
                VOCAB[rng.random_range(0..VOCAB.len())],
                VOCAB[rng.random_range(0..VOCAB.len())]
            );
            let (pool, trace) = retrieve_iterative(&g, &q, &policy, e.as_ref(), &full).map_err(|e| e.to_string())?;
            ensure!(
                pool.iteration <= i_max && trace.sufficiency_calls() <= i_max,
                "graph {gi}: {} rounds",
                pool.iteration
            );
            ensure!(
                trace.iterations.len() == pool.iteration + 1,
                "graph {gi}: trace/pool round mismatch"
            );
            let mut so_far: Vec<NoteId> = Vec::new();
            for (i, rec) in trace.iterations.iter().enumerate() {
                let (fresh, _) =
                    retrieve_once(&g, &rec.query, &policy, e.as_ref(), &full).map_err(|e| e.to_string())?;
                let want: Vec<NoteId> = if i == 0 {
                    fresh.ids()
                } else {
                    fresh.ids().into_iter().filter(|id| !so_far.contains(id)).collect()
                };
                ensure!(
                    rec.added == want,
                    "graph {gi} round {i}: added {:?}, expected {want:?}",
                    rec.added
                );
                so_far.extend(&rec.added);
            }
            ensure!(
                pool.ids() == so_far,
                "graph {gi}: final pool is not the union of rounds"
            );
            *rounds_seen.entry(pool.iteration).or_insert(0) += 1;
            runs += 1;
        }
    }

    // Gold evidence is crowded out of the first pool and only a sub-query
    // for the missing terms brings it in.
    let cfg = EngineConfig {
        k_final: 2,
        ..EngineConfig::default()
    };
    let policy = mock(&e);
    let mut g = MemoryGraph::new(cfg);
    let turns = [
        ("Rosa", "Rosa's brother Idris teaches chemistry in Porto", "h:1"),
        ("Rosa", "Rosa's brother Idris once ran a marathon", "h:2"),
        ("Idris", "Idris can play the oud, a string instrument", "h:3"),
    ];
    for (speaker, text, id) in turns {
        let r = ingest(
            &mut g,
            &Turn::new(speaker, text).with_id(id),
            &policy,
            e.as_ref(),
            &full,
        )
        .map_err(|e| e.to_string())?;
        ensure!(
            r.operation == Operation::Appended,
            "scenario turn {id} was {:?}",
            r.operation
        );
    }
    let question = "Which instrument does Rosa's brother play?";
    let (with, trace) = retrieve_iterative(&g, question, &policy, e.as_ref(), &full).map_err(|e| e.to_string())?;
    let off = AblationConfig {
        disable_ier: true,
        ..Default::default()
    };
    let (without, off_trace) =
        retrieve_iterative(&g, question, &policy, e.as_ref(), &off).map_err(|e| e.to_string())?;
    ensure!(
        with.turn_ids(&g).contains("h:3"),
        "refinement missed the gold turn: {:?}",
        with.turn_ids(&g)
    );
    ensure!(
        !without.turn_ids(&g).contains("h:3"),
        "gold turn reachable without refinement"
    );
    ensure!(
        off_trace.stop_reason == StopReason::Disabled,
        "ablated run did not report disabled"
    );
    ensure!(trace.iterations.len() >= 2, "scenario solved without a sub-query");

    let rounds: Vec<String> = rounds_seen.iter().map(|(r, n)| format!("{r}:{n}")).collect();
    Ok(format!(
        "{runs} randomized runs monotone and bounded (rounds {}); two-hop gold found in {} rounds with refinement, missed without",
        rounds.join(" "),
        trace.iterations.len() - 1
    ))
}

// ---------------------------------------------------------------- 7

fn metric_fixtures() -> Outcome {
    let f1 = token_f1("the blue car", "blue car");
    ensure!((f1 - 0.8).abs() <= F1_TOL, "token_f1 = {f1}");
    let b = bleu1("a", "a b");
    let want = (-1.0f64).exp();
    ensure!((b - want).abs() <= BLEU_TOL, "bleu1 = {b}, expected {want}");

    let counts: BTreeMap<Category, usize> = LOCOMO_CATEGORY_COUNTS.iter().copied().collect();
    let total: usize = counts.values().sum();
    ensure!(total == 1986, "category counts sum to {total}");
    let mut shares = Vec::new();
    for (cat, n) in LOCOMO_CATEGORY_COUNTS {
        let indicator: BTreeMap<Category, f64> = counts.keys().map(|c| (*c, f64::from(u8::from(*c == cat)))).collect();
        let got = weighted_average(&indicator, &counts);
        let want = n as f64 / total as f64;
        ensure!((got - want).abs() <= PROPORTION_TOL, "{cat}: {got} vs {want}");
        shares.push(format!("{cat}={got:.4}"));
    }
    let only_single: BTreeMap<Category, f64> = counts
        .keys()
        .map(|c| (*c, f64::from(u8::from(*c == Category::SingleHop))))
        .collect();
    let single = weighted_average(&only_single, &counts);
    ensure!((single - 0.4235).abs() <= PROPORTION_TOL, "single_hop share {single}");
    Ok(format!("f1=0.8, bleu1=e^-1, shares {}", shares.join(" ")))
}

// ---------------------------------------------------------------- 8

fn reference_jsd(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).log2())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|a, b| xs[*a].partial_cmp(&xs[*b]).unwrap());
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        for k in i..=j {
            r[order[k]] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

fn reference_spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn redundancy_vs_divergence() -> Outcome {
    let e = embedder();
    let policy = mock(&e);
    let candidates = [
        "amber", "basil", "cedar", "dune", "ember", "fjord", "grove", "heron", "iris", "juniper", "kelp", "linden",
    ];
    let mut buckets = BTreeSet::new();
    let labels: Vec<&str> = candidates
        .iter()
        .copied()
        .filter(|t| buckets.insert(e.bucket(t).0))
        .take(6)
        .collect();
    ensure!(labels.len() == 6, "not enough collision-free label tokens");

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        loop {
            let c: Vec<u32> = (0..labels.len())
                .map(|_| {
                    if rng.random_bool(0.3) {
                        0
                    } else {
                        rng.random_range(1..=9)
                    }
                })
                .collect();
            if c.iter().sum::<u32>() > 0 {
                return c;
            }
        }
    };
    let text = |c: &[u32]| -> String {
        labels
            .iter()
            .zip(c)
            .flat_map(|(l, n)| std::iter::repeat_n(*l, *n as usize))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let dist = |c: &[u32]| -> Vec<f64> {
        let s: u32 = c.iter().sum();
        c.iter().map(|x| f64::from(*x) / f64::from(s)).collect()
    };
    let pairs = 80;
    let (mut red, mut sim) = (Vec::new(), Vec::new());
    for i in 0..pairs {
        let a = draw(&mut rng);
        let b = if i % 3 == 0 {
            a.iter()
                .map(|x| (*x + rng.random_range(0..=2)).saturating_sub(1))
                .collect::<Vec<_>>()
        } else {
            draw(&mut rng)
        };
        let b = if b.iter().sum::<u32>() == 0 { a.clone() } else { b };
        let (p, q) = (dist(&a), dist(&b));
        let d = reference_jsd(&p, &q);
        let lib = js_divergence(&p, &q).map_err(|e| e.to_string())?;
        ensure!((d - lib).abs() <= 1e-9, "divergence {d} vs library {lib}");
        red.push(policy.redundancy(&text(&a), &text(&b)));
        sim.push(1.0 - d);
    }
    let rho = reference_spearman(&red, &sim);
    let lib = spearman(&red, &sim).map_err(|e| e.to_string())?;
    ensure!((rho - lib).abs() <= 1e-12, "spearman {rho} vs library {lib}");
    ensure!(rho >= SPEARMAN_MIN, "spearman {rho:.4} below {SPEARMAN_MIN}");
    Ok(format!(
        "spearman {rho:.4} over {pairs} pairs with explicit label distributions"
    ))
}

// ---------------------------------------------------------------- 9

fn bench(ds: &memfly_core::eval::ConversationDataset, ablation: AblationConfig) -> Result<EvalReport, String> {
    let cfg = EngineConfig::default();
    let e = embedder();
    run_benchmark(ds, &cfg, &ablation, &mock(&e), e.as_ref()).map_err(|e| e.to_string())
}

fn directional_ablation() -> Outcome {
    let corpus = mini_corpus();
    let full = bench(&corpus, AblationConfig::default())?;
    let again = bench(&corpus, AblationConfig::default())?;
    ensure!(full.to_json() == again.to_json(), "benchmark is not deterministic");
    let no_update = bench(
        &corpus,
        AblationConfig {
            disable_update: true,
            ..Default::default()
        },
    )?;
    let (f, u) = (full.weighted, no_update.weighted);
    ensure!(
        f.recall > u.recall,
        "recall full {:.4} <= w/o update {:.4}",
        f.recall,
        u.recall
    );
    ensure!(
        f.hit_rate > u.hit_rate,
        "hit rate full {:.4} <= w/o update {:.4}",
        f.hit_rate,
        u.hit_rate
    );

    let fixture = keyword_fixture();
    let kf = bench(&fixture, AblationConfig::default())?;
    let kn = bench(
        &fixture,
        AblationConfig {
            disable_keyword_pathway: true,
            ..Default::default()
        },
    )?;
    ensure!(
        kf.weighted.recall > kn.weighted.recall,
        "keyword fixture recall {:.4} <= {:.4}",
        kf.weighted.recall,
        kn.weighted.recall
    );
    Ok(format!(
        "recall {:.4} > {:.4} and hit {:.4} > {:.4} vs w/o update; fixture recall {:.4} > {:.4} vs w/o keyword",
        f.recall, u.recall, f.hit_rate, u.hit_rate, kf.weighted.recall, kn.weighted.recall
    ))
}

// ---------------------------------------------------------------- 10

fn persistence_and_service() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut engine = MemoryEngine::mock(EngineConfig::default()).map_err(|e| e.to_string())?;
    let mut i = 0;
    while engine.graph().note_count() < 1000 {
        ensure!(i < 1500, "could not reach 1000 notes");
        let text = match i % 10 {
            0 if i > 0 => format!("Guest{} painted mural{}", i - 10, i - 10),
            3 => format!("Guest{} never painted mural{}", i - 1, i - 1),
            _ => format!("Guest{i} painted mural{i}"),
        };
        engine
            .ingest(&Turn::new(format!("S{}", i % 3), text).with_id(format!("p:{i}")))
            .map_err(|e| e.to_string())?;
        i += 1;
    }
    engine.evolve();
    let g = engine.graph();
    let path = dir.path().join("big.json");
    g.snapshot_save(&path).map_err(|e| e.to_string())?;
    let back = MemoryGraph::snapshot_load(&path).map_err(|e| e.to_string())?;
    ensure!(*g == back, "reloaded graph differs");
    ensure!(
        g.to_snapshot_string() == back.to_snapshot_string(),
        "re-serialization differs"
    );
    ensure!(back.check_invariants().is_empty(), "reloaded graph violates invariants");
    let e = embedder();
    for q in ["guest17 mural17", "painted", "mural400"] {
        let v = e.embed(q).unwrap();
        ensure!(
            g.nearest_notes(&v, 10).unwrap() == back.nearest_notes(&v, 10).unwrap(),
            "index differs for {q:?}"
        );
    }
    let summary = format!(
        "{} notes, {} edges, {} merges, {} topics round-trip equal",
        back.note_count(),
        back.related_edge_count(),
        back.totals().merge_total,
        back.topic_count()
    );

    let served = service_round_trip(dir.path())?;
    Ok(format!("{summary}; {served}"))
}

fn http_agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(30)))
        .build()
        .into()
}

fn post_json(base: &str, path: &str, body: serde_json::Value) -> Result<(u16, serde_json::Value), String> {
    let mut resp = http_agent()
        .post(&format!("{base}{path}"))
        .header("content-type", "application/json")
        .send(body.to_string())
        .map_err(|e| e.to_string())?;
    let code = resp.status().as_u16();
    Ok((code, resp.body_mut().read_json().unwrap_or(serde_json::Value::Null)))
}

fn fact(i: usize) -> (String, String) {
    (
        format!("Visitor{i} adopted Critter{i}"),
        format!("What did Visitor{i} adopt?"),
    )
}

fn answered(reply: &serde_json::Value, i: usize) -> bool {
    let want = format!("Critter{i}");
    reply["evidence"].as_array().is_some_and(|ev| {
        ev.iter()
            .any(|item| item["context"].as_str().is_some_and(|c| c.contains(&want)))
    })
}

fn service_round_trip(dir: &std::path::Path) -> Outcome {
    use memfly_cli::service::{serve, AppState};
    const FACTS: usize = 60;
    const READERS: usize = 10;

    let engine = MemoryEngine::mock(EngineConfig::default()).map_err(|e| e.to_string())?;
    let state = AppState::new(engine, dir.join("served.json"), None);
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let listener = rt
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .map_err(|e| e.to_string())?;
    let base = format!("http://{}", listener.local_addr().map_err(|e| e.to_string())?);
    rt.spawn(serve(listener, state.clone(), std::future::pending()));

    let acked = Arc::new(AtomicUsize::new(0));
    let done = Arc::new(AtomicBool::new(false));
    let reads = Arc::new(AtomicUsize::new(0));
    let outcome = std::thread::scope(|s| -> Result<(), String> {
        let readers: Vec<_> = (0..READERS)
            .map(|r| {
                let (base, acked, done, reads) = (&base, &acked, &done, &reads);
                s.spawn(move || -> Result<(), String> {
                    let mut k = r;
                    while !done.load(Ordering::SeqCst) {
                        let visible = acked.load(Ordering::SeqCst);
                        let target = k % FACTS;
                        let (code, reply) = post_json(
                            base,
                            "/query",
                            serde_json::json!({"question": fact(target).1, "iterative": true}),
                        )?;
                        if code != 200 {
                            return Err(format!("reader {r}: status {code}"));
                        }
                        if target < visible && !answered(&reply, target) {
                            return Err(format!("reader {r}: acknowledged fact {target} not returned: {reply}"));
                        }
                        reads.fetch_add(1, Ordering::SeqCst);
                        k += READERS + 1;
                    }
                    Ok(())
                })
            })
            .collect();
        let writer = s.spawn(|| -> Result<(), String> {
            for i in 0..FACTS {
                let (code, reply) = post_json(
                    &base,
                    "/ingest",
                    serde_json::json!({"speaker": "Host", "text": fact(i).0, "turn_id": format!("v:{i}")}),
                )?;
                if code != 200 {
                    return Err(format!("writer: status {code} {reply}"));
                }
                acked.store(i + 1, Ordering::SeqCst);
            }
            Ok(())
        });
        let w = writer.join().map_err(|_| "writer panicked".to_string())?;
        done.store(true, Ordering::SeqCst);
        for r in readers {
            r.join().map_err(|_| "reader panicked".to_string())??;
        }
        w
    });
    outcome?;
    for i in 0..FACTS {
        let (code, reply) = post_json(&base, "/query", serde_json::json!({"question": fact(i).1}))?;
        ensure!(
            code == 200 && answered(&reply, i),
            "fact {i} not returned after ingest: {reply}"
        );
    }
    let engine = state.engine();
    let guard = engine.read().map_err(|e| e.to_string())?;
    let violations = guard.graph().check_invariants();
    ensure!(violations.is_empty(), "invariants violated: {violations:?}");
    ensure!(
        guard.graph().totals().inputs_seen == FACTS as u64,
        "inputs_seen {}",
        guard.graph().totals().inputs_seen
    );
    Ok(format!(
        "{FACTS} HTTP ingests with {READERS} concurrent readers ({} reads), every fact returned, no violations",
        reads.load(Ordering::SeqCst)
    ))
}
