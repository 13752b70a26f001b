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

//! Dense vector index with deterministic ranking.
//!
//! Below the configured threshold every query scans all rows. Above it, rows
//! carry a random-hyperplane signature and only rows within a small Hamming
//! radius of the query signature are scored.

use std::collections::HashMap;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::IndexMode;
use crate::embedding::dot;

const PLANES: usize = 16;
const PLANE_SEED: u64 = 0x5eed_1dea;

#[derive(Debug, Clone)]
struct Hyperplanes {
    normals: Vec<Vec<f64>>,
}

impl Hyperplanes {
    fn new(dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PLANE_SEED);
        let normals = (0..PLANES)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Hyperplanes { normals }
    }

    fn signature(&self, v: &[f64]) -> u16 {
        self.normals
            .iter()
            .enumerate()
            .fold(0u16, |sig, (i, n)| if dot(n, v) >= 0.0 { sig | (1 << i) } else { sig })
    }
}

#[derive(Debug, Clone)]
pub struct DenseIndex<Id> {
    dim: usize,
    mode: IndexMode,
    ids: Vec<Id>,
    rows: Vec<f64>,
    pos: HashMap<Id, usize>,
    planes: Hyperplanes,
    signatures: Vec<u16>,
}

impl<Id: Copy + Ord + Hash> DenseIndex<Id> {
    pub fn new(dim: usize, mode: IndexMode) -> Self {
        DenseIndex {
            dim,
            mode,
            ids: Vec::new(),
            rows: Vec::new(),
            pos: HashMap::new(),
            planes: Hyperplanes::new(dim),
            signatures: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Insert or replace the vector stored for `id`.
    pub fn upsert(&mut self, id: Id, vector: &[f64]) {
        debug_assert_eq!(vector.len(), self.dim);
        let sig = self.planes.signature(vector);
        match self.pos.get(&id) {
            Some(&i) => {
                self.rows[i * self.dim..(i + 1) * self.dim].copy_from_slice(vector);
                self.signatures[i] = sig;
            }
            None => {
                self.pos.insert(id, self.ids.len());
                self.ids.push(id);
                self.rows.extend_from_slice(vector);
                self.signatures.push(sig);
            }
        }
    }

    pub fn remove(&mut self, id: Id) {
        let Some(i) = self.pos.remove(&id) else {
            return;
        };
        let last = self.ids.len() - 1;
        if i != last {
            let moved = self.ids[last];
            self.ids.swap(i, last);
            let (head, tail) = self.rows.split_at_mut(last * self.dim);
            head[i * self.dim..(i + 1) * self.dim].copy_from_slice(&tail[..self.dim]);
            self.signatures.swap(i, last);
            self.pos.insert(moved, i);
        }
        self.ids.pop();
        self.rows.truncate(last * self.dim);
        self.signatures.pop();
    }

    fn approximate(&self) -> bool {
        match self.mode {
            IndexMode::Exact => false,
            IndexMode::Auto { threshold } => self.ids.len() > threshold,
        }
    }

    /// Top-`k` rows by dot product with `query`; descending score, ascending id.
    pub fn search(&self, query: &[f64], k: usize) -> Vec<(Id, f64)> {
        if k == 0 || self.ids.is_empty() {
            return Vec::new();
        }
        let mut scored: Vec<(Id, f64)> = if self.approximate() {
            self.probe(query, k)
        } else {
            (0..self.ids.len())
                .map(|i| (self.ids[i], dot(query, self.row(i))))
                .collect()
        };
        rank_top_k(&mut scored, k);
        scored
    }

    fn probe(&self, query: &[f64], k: usize) -> Vec<(Id, f64)> {
        let qsig = self.planes.signature(query);
        let want = (4 * k).min(self.ids.len());
        let mut radius = 2;
        loop {
            let hits: Vec<(Id, f64)> = (0..self.ids.len())
                .filter(|&i| (self.signatures[i] ^ qsig).count_ones() <= radius)
                .map(|i| (self.ids[i], dot(query, self.row(i))))
                .collect();
            if hits.len() >= want || radius as usize >= PLANES {
                return hits;
            }
            radius += 2;
        }
    }
}

/// Ranking granularity. Scores that round to the same multiple compare equal,
/// so cosines that tie exactly in theory but differ in the last float bits
/// still fall back to id order.
pub const SCORE_RESOLUTION: f64 = 1e-12;

/// Score as compared by [`rank_top_k`].
pub fn rank_key(score: f64) -> f64 {
    (score / SCORE_RESOLUTION).round()
}

/// Sort by descending score then ascending id, keeping the first `k`.
pub fn rank_top_k<Id: Ord + Copy>(scored: &mut Vec<(Id, f64)>, k: usize) {
    let cmp = |a: &(Id, f64), b: &(Id, f64)| rank_key(b.1).total_cmp(&rank_key(a.1)).then(a.0.cmp(&b.0));
    if k == 0 {
        scored.clear();
        return;
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
}
