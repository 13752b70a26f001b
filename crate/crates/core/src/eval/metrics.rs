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

//! Answer and retrieval metrics, aggregation, and divergence helpers.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::text::normalize_answer;

use super::Category;

/// Per-category question counts of the LoCoMo benchmark.
pub const LOCOMO_CATEGORY_COUNTS: [(Category, usize); 5] = [
    (Category::SingleHop, 841),
    (Category::Adversarial, 446),
    (Category::Temporal, 321),
    (Category::MultiHop, 282),
    (Category::OpenDomain, 96),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("distributions have different support sizes ({0} vs {1})")]
    SupportMismatch(usize, usize),
    #[error("not a probability distribution (sum {0})")]
    NotNormalized(f64),
    #[error("need at least two paired samples")]
    TooFewSamples,
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn overlap(pred: &[String], gold: &[String]) -> usize {
    let g = counts(gold);
    counts(pred)
        .into_iter()
        .map(|(t, c)| c.min(g.get(t).copied().unwrap_or(0)))
        .sum()
}

/// Token-level F1 over normalized token multisets. Both empty scores 1,
/// exactly one empty scores 0.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let common = overlap(&p, &g) as f64;
    if common == 0.0 {
        return 0.0;
    }
    let precision = common / p.len() as f64;
    let recall = common / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Clipped unigram precision times the brevity penalty
/// `exp(min(0, 1 - |gold| / |pred|))`. An empty prediction scores 0.
pub fn bleu1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    if p.is_empty() {
        return 0.0;
    }
    let precision = overlap(&p, &g) as f64 / p.len() as f64;
    let bp = (1.0 - g.len() as f64 / p.len() as f64).min(0.0).exp();
    precision * bp
}

/// Share of gold evidence ids that were retrieved; 1 when there is no gold.
pub fn retrieval_recall(retrieved: &BTreeSet<String>, gold: &BTreeSet<String>) -> f64 {
    if gold.is_empty() {
        return 1.0;
    }
    gold.intersection(retrieved).count() as f64 / gold.len() as f64
}

/// 1 when any gold evidence id was retrieved, or when there is no gold.
pub fn hit_rate(retrieved: &BTreeSet<String>, gold: &BTreeSet<String>) -> f64 {
    if gold.is_empty() || gold.intersection(retrieved).next().is_some() {
        1.0
    } else {
        0.0
    }
}

/// `sum score_c * n_c / sum n_c` over categories present in both maps.
/// Returns 0 when the weights sum to zero.
pub fn weighted_average<K: Ord>(scores: &BTreeMap<K, f64>, counts: &BTreeMap<K, usize>) -> f64 {
    let mut num = 0.0;
    let mut den = 0usize;
    for (k, s) in scores {
        if let Some(&n) = counts.get(k) {
            num += s * n as f64;
            den += n;
        }
    }
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

fn check_distribution(p: &[f64]) -> Result<(), MetricError> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || p.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(MetricError::NotNormalized(sum));
    }
    Ok(())
}

/// Jensen-Shannon divergence in bits, in `[0, 1]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64, MetricError> {
    if p.len() != q.len() {
        return Err(MetricError::SupportMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (2.0 * x / (x + y)).log2())
            .sum()
    };
    Ok((0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p)).clamp(0.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::SupportMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricError::TooFewSamples);
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}
