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

//! Leiden community detection (local moving, refinement, aggregation) with
//! cardinality repair.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{modularity, WeightedGraph};
use super::TopicError;

const RESTARTS: u64 = 8;
const SMALL_GRAPH_RESTARTS: u64 = 32;
const SMALL_GRAPH: usize = 64;
const THETA: f64 = 0.01;
const PAIR_KICK_LIMIT: usize = 16;
const MAX_LEVELS: usize = 64;
const MAX_ITERATIONS: usize = 16;
const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Community label per vertex, dense in `0..community_count`, numbered
    /// by smallest member vertex.
    pub assignment: Vec<usize>,
    pub modularity: f64,
    /// Labels of communities below the lower bound that could not be repaired.
    pub undersized: Vec<usize>,
}

impl Partition {
    pub fn community_count(&self) -> usize {
        self.assignment.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn communities(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.community_count()];
        for (v, &c) in self.assignment.iter().enumerate() {
            out[c].push(v);
        }
        out
    }
}

/// Relabel so labels are dense and ordered by first occurrence.
pub(crate) fn renumber(assignment: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    let out = assignment
        .iter()
        .map(|c| {
            let next = map.len();
            *map.entry(*c).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Per-community degree totals, indexed by label.
fn totals(g: &WeightedGraph, assignment: &[usize], count: usize) -> Vec<f64> {
    let mut tot = vec![0.0; count];
    for (v, &c) in assignment.iter().enumerate() {
        tot[c] += g.degree(v);
    }
    tot
}

/// Fast local moving: visit vertices from a queue and move each to the
/// neighboring community with the largest strictly positive gain.
fn move_nodes(g: &WeightedGraph, assignment: &mut [usize], rng: &mut ChaCha8Rng) {
    let n = g.vertex_count();
    let two_m = g.two_m();
    let mut tot = totals(
        g,
        assignment,
        n.max(assignment.iter().copied().max().map_or(0, |m| m + 1)),
    );
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut queue: VecDeque<usize> = order.into_iter().collect();
    let mut queued = vec![true; n];
    let mut link: BTreeMap<usize, f64> = BTreeMap::new();
    while let Some(v) = queue.pop_front() {
        queued[v] = false;
        let own = assignment[v];
        let k_v = g.degree(v);
        link.clear();
        link.insert(own, 0.0);
        for &(u, w) in g.neighbors(v) {
            *link.entry(assignment[u]).or_insert(0.0) += w;
        }
        tot[own] -= k_v;
        let gain = |c: usize, w: f64| w - k_v * tot[c] / two_m;
        let stay = gain(own, link[&own]);
        let mut best = (own, stay);
        for (&c, &w) in &link {
            let g_c = gain(c, w);
            if g_c > best.1 + EPS {
                best = (c, g_c);
            }
        }
        let target = if best.1 > stay + EPS { best.0 } else { own };
        tot[target] += k_v;
        if target != own {
            assignment[v] = target;
            for &(u, _) in g.neighbors(v) {
                if !queued[u] && assignment[u] != target {
                    queued[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
}

/// Refine each community of `assignment` by greedily merging well-connected
/// singletons into well-connected sub-communities. Returns refined labels.
fn refine(g: &WeightedGraph, assignment: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = g.vertex_count();
    let two_m = g.two_m();
    let mut refined: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut tot: Vec<f64> = (0..n).map(|v| g.degree(v)).collect();
    let mut comm_tot: BTreeMap<usize, f64> = BTreeMap::new();
    for (v, &c) in assignment.iter().enumerate() {
        *comm_tot.entry(c).or_insert(0.0) += g.degree(v);
    }
    // Weight from each refined community to the rest of its parent community.
    let mut external: Vec<f64> = (0..n)
        .map(|v| {
            g.neighbors(v)
                .iter()
                .filter(|(u, _)| assignment[*u] == assignment[v])
                .map(|(_, w)| w)
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut link: BTreeMap<usize, f64> = BTreeMap::new();
    for v in order {
        if size[refined[v]] != 1 {
            continue;
        }
        let parent = assignment[v];
        let k_v = g.degree(v);
        let k_c = comm_tot[&parent];
        if external[v] + EPS < k_v * (k_c - k_v) / two_m {
            continue;
        }
        link.clear();
        for &(u, w) in g.neighbors(v) {
            if assignment[u] == parent && refined[u] != refined[v] {
                *link.entry(refined[u]).or_insert(0.0) += w;
            }
        }
        let mut choices: Vec<(usize, f64)> = Vec::new();
        for (&t, &w) in &link {
            if external[t] + EPS < tot[t] * (k_c - tot[t]) / two_m {
                continue;
            }
            let gain = w - k_v * tot[t] / two_m;
            if gain >= -EPS {
                choices.push((t, gain));
            }
        }
        let best = pick_randomized(&choices, two_m / 2.0, rng);
        if let Some(t) = best {
            let own = refined[v];
            let w_vt = link[&t];
            external[t] = external[t] + external[own] - 2.0 * w_vt;
            tot[t] += tot[own];
            size[t] += 1;
            size[own] = 0;
            tot[own] = 0.0;
            refined[v] = t;
        }
    }
    refined
}

/// Pick a target with probability proportional to `exp(dq / THETA)`, where
/// `dq` is the modularity gain.
fn pick_randomized(choices: &[(usize, f64)], m: f64, rng: &mut ChaCha8Rng) -> Option<usize> {
    let top = choices.iter().map(|(_, g)| g / m).fold(f64::NEG_INFINITY, f64::max);
    if choices.is_empty() {
        return None;
    }
    let weights: Vec<f64> = choices.iter().map(|(_, g)| ((g / m - top) / THETA).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for ((t, _), w) in choices.iter().zip(&weights) {
        if r < *w {
            return Some(*t);
        }
        r -= w;
    }
    choices.last().map(|(t, _)| *t)
}

/// One Leiden run starting from `initial`; returns labels on the original vertices.
fn leiden_run(g: &WeightedGraph, initial: Vec<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut level_graph = g.clone();
    let (mut partition, _) = renumber(&initial);
    // Map from original vertex to current aggregate vertex.
    let mut members: Vec<usize> = (0..g.vertex_count()).collect();
    for _ in 0..MAX_LEVELS {
        move_nodes(&level_graph, &mut partition, rng);
        let (p, p_count) = renumber(&partition);
        partition = p;
        if p_count == level_graph.vertex_count() {
            break;
        }
        let (refined, r_count) = renumber(&refine(&level_graph, &partition, rng));
        if r_count == level_graph.vertex_count() {
            // Refinement made no progress; aggregate on the partition itself.
            let next = level_graph.aggregate(&partition, p_count);
            for m in members.iter_mut() {
                *m = partition[*m];
            }
            level_graph = next;
            partition = (0..p_count).collect();
            continue;
        }
        let next = level_graph.aggregate(&refined, r_count);
        let mut coarse = vec![0; r_count];
        for v in 0..level_graph.vertex_count() {
            coarse[refined[v]] = partition[v];
        }
        for m in members.iter_mut() {
            *m = refined[*m];
        }
        level_graph = next;
        partition = coarse;
    }
    members.iter().map(|&m| partition[m]).collect()
}

/// Iterate Leiden from its own output until modularity stops improving.
fn leiden_iterated(g: &WeightedGraph, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let mut best: Vec<usize> = (0..g.vertex_count()).collect();
    let mut best_q = modularity(g, &best).unwrap_or(0.0);
    for _ in 0..MAX_ITERATIONS {
        let next = leiden_run(g, best.clone(), rng);
        let q = modularity(g, &next).unwrap_or(0.0);
        if q > best_q + EPS {
            best = next;
            best_q = q;
        } else {
            break;
        }
    }
    (best, best_q)
}

/// Best unconstrained partition over several seeded restarts.
pub fn leiden_unconstrained(g: &WeightedGraph, seed: u64) -> Result<Partition, TopicError> {
    if g.two_m() <= 0.0 {
        return Err(TopicError::EmptyGraph);
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    let restarts = if g.vertex_count() <= SMALL_GRAPH {
        SMALL_GRAPH_RESTARTS
    } else {
        RESTARTS
    };
    for _ in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let (a, q) = leiden_iterated(g, &mut rng);
        if best.as_ref().is_none_or(|(_, b)| q > *b + EPS) {
            best = Some((a, q));
        }
    }
    let (mut assignment, mut q) = best.expect("at least one restart");
    if g.vertex_count() <= SMALL_GRAPH {
        (assignment, q) = kick(g, assignment, q, &mut master);
    }
    let _ = q;
    Ok(finish(g, assignment, Vec::new()))
}

/// Iterated local search: move one vertex to another (or a fresh) community,
/// re-run Leiden from there, and keep the result when modularity improves.
fn kick(g: &WeightedGraph, mut best: Vec<usize>, mut best_q: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = g.vertex_count();
    let mut improved = true;
    while improved {
        improved = false;
        'search: for v in 0..n {
            let labels: BTreeSet<usize> = best.iter().copied().collect();
            let fresh = labels.iter().next_back().map_or(0, |m| m + 1);
            for c in labels.into_iter().chain([fresh]) {
                if c == best[v] {
                    continue;
                }
                let mut start = best.clone();
                start[v] = c;
                let next = leiden_run(g, start, rng);
                let q = modularity(g, &next).unwrap_or(0.0);
                if q > best_q + EPS {
                    best = renumber(&next).0;
                    best_q = q;
                    improved = true;
                    break 'search;
                }
            }
        }
        if improved || n > PAIR_KICK_LIMIT {
            continue;
        }
        'pairs: for u in 0..n {
            for v in u + 1..n {
                let labels: BTreeSet<usize> = best.iter().copied().collect();
                let fresh = labels.iter().next_back().map_or(0, |m| m + 1);
                for c in labels.into_iter().chain([fresh]) {
                    if c == best[u] && c == best[v] {
                        continue;
                    }
                    let mut start = best.clone();
                    start[u] = c;
                    start[v] = c;
                    let next = leiden_run(g, start, rng);
                    let q = modularity(g, &next).unwrap_or(0.0);
                    if q > best_q + EPS {
                        best = renumber(&next).0;
                        best_q = q;
                        improved = true;
                        break 'pairs;
                    }
                }
            }
        }
    }
    (best, best_q)
}

fn finish(g: &WeightedGraph, assignment: Vec<usize>, undersized_vertices: Vec<usize>) -> Partition {
    let (assignment, _) = renumber(&assignment);
    let modularity = modularity(g, &assignment).unwrap_or(0.0);
    let undersized: BTreeSet<usize> = undersized_vertices.iter().map(|&v| assignment[v]).collect();
    Partition {
        assignment,
        modularity,
        undersized: undersized.into_iter().collect(),
    }
}

/// Leiden partition repaired to `delta_min <= |C| <= delta_max`.
///
/// Undersized communities merge into the neighboring community with the best
/// modularity change; oversized ones are split by Leiden on the induced
/// subgraph, falling back to balanced chunks. A connected component smaller
/// than `delta_min` stays as it is and is reported in `undersized`.
pub fn leiden_partition(
    g: &WeightedGraph,
    delta_min: usize,
    delta_max: usize,
    seed: u64,
) -> Result<Partition, TopicError> {
    if delta_min == 0 || delta_min > delta_max {
        return Err(TopicError::Bounds { delta_min, delta_max });
    }
    let base = leiden_unconstrained(g, seed)?;
    let mut assignment = base.assignment;
    merge_undersized(g, &mut assignment, delta_min);
    let mut next_label = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let mut split_seed = ChaCha8Rng::seed_from_u64(seed ^ 0x5b11_7000);
    let communities = group(&assignment);
    for members in communities.values() {
        if members.len() <= delta_max {
            continue;
        }
        for piece in split(g, members, delta_min, delta_max, split_seed.random())
            .into_iter()
            .skip(1)
        {
            for v in piece {
                assignment[v] = next_label;
            }
            next_label += 1;
        }
    }
    let undersized: Vec<usize> = group(&assignment)
        .values()
        .filter(|m| m.len() < delta_min)
        .map(|m| m[0])
        .collect();
    Ok(finish(g, assignment, undersized))
}

fn group(assignment: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (v, &c) in assignment.iter().enumerate() {
        out.entry(c).or_default().push(v);
    }
    out
}

/// Merge every community smaller than `delta_min` into the adjacent community
/// with the largest modularity change, smallest first.
fn merge_undersized(g: &WeightedGraph, assignment: &mut [usize], delta_min: usize) {
    let two_m = g.two_m();
    loop {
        let groups = group(assignment);
        let mut small: Vec<(usize, usize)> = groups
            .iter()
            .filter(|(_, m)| m.len() < delta_min)
            .map(|(&c, m)| (m.len(), c))
            .collect();
        small.sort_unstable();
        let mut merged = false;
        for (_, c) in small {
            let members = &groups[&c];
            let mut link: BTreeMap<usize, f64> = BTreeMap::new();
            for &v in members {
                for &(u, w) in g.neighbors(v) {
                    if assignment[u] != c {
                        *link.entry(assignment[u]).or_insert(0.0) += w;
                    }
                }
            }
            if link.is_empty() {
                continue;
            }
            let tot_c: f64 = members.iter().map(|&v| g.degree(v)).sum();
            let tot_of = |d: usize| -> f64 { groups[&d].iter().map(|&v| g.degree(v)).sum() };
            let mut best: Option<(usize, f64)> = None;
            for (&d, &w) in &link {
                let delta = 2.0 * w / two_m - 2.0 * tot_c * tot_of(d) / (two_m * two_m);
                if best.is_none_or(|(_, b)| delta > b + EPS) {
                    best = Some((d, delta));
                }
            }
            let (d, _) = best.expect("non-empty link map");
            for &v in members {
                assignment[v] = d;
            }
            merged = true;
            break;
        }
        if !merged {
            return;
        }
    }
}

/// Split an oversized community into pieces within the bounds.
fn split(g: &WeightedGraph, members: &[usize], delta_min: usize, delta_max: usize, seed: u64) -> Vec<Vec<usize>> {
    let sub = g.induced(members);
    if let Ok(p) = leiden_unconstrained(&sub, seed) {
        if p.community_count() > 1 {
            let mut local = p.assignment.clone();
            merge_undersized_capped(&sub, &mut local, delta_min, delta_max);
            let pieces: Vec<Vec<usize>> = group(&local).into_values().collect();
            if pieces.iter().all(|piece| piece.len() >= delta_min) {
                let mut out = Vec::new();
                for piece in pieces {
                    let global: Vec<usize> = piece.iter().map(|&i| members[i]).collect();
                    if global.len() > delta_max {
                        out.extend(split(g, &global, delta_min, delta_max, seed.wrapping_add(1)));
                    } else {
                        out.push(global);
                    }
                }
                return out;
            }
        }
    }
    chunk(&sub, delta_max)
        .into_iter()
        .map(|piece| piece.into_iter().map(|i| members[i]).collect())
        .collect()
}

/// Like [`merge_undersized`] but never grows a community past `delta_max`.
fn merge_undersized_capped(g: &WeightedGraph, assignment: &mut [usize], delta_min: usize, delta_max: usize) {
    let two_m = g.two_m().max(EPS);
    loop {
        let groups = group(assignment);
        let mut small: Vec<(usize, usize)> = groups
            .iter()
            .filter(|(_, m)| m.len() < delta_min)
            .map(|(&c, m)| (m.len(), c))
            .collect();
        small.sort_unstable();
        let mut merged = false;
        for (_, c) in small {
            let members = &groups[&c];
            let tot_c: f64 = members.iter().map(|&v| g.degree(v)).sum();
            let mut best: Option<(usize, f64)> = None;
            for (&d, others) in &groups {
                if d == c || others.len() + members.len() > delta_max {
                    continue;
                }
                let w: f64 = members
                    .iter()
                    .flat_map(|&v| g.neighbors(v))
                    .filter(|(u, _)| assignment[*u] == d)
                    .map(|(_, w)| w)
                    .sum();
                let tot_d: f64 = others.iter().map(|&v| g.degree(v)).sum();
                let delta = 2.0 * w / two_m - 2.0 * tot_c * tot_d / (two_m * two_m);
                if best.is_none_or(|(_, b)| delta > b + EPS) {
                    best = Some((d, delta));
                }
            }
            if let Some((d, _)) = best {
                for &v in members {
                    assignment[v] = d;
                }
                merged = true;
                break;
            }
        }
        if !merged {
            return;
        }
    }
}

/// Cut the vertices, in breadth-first order, into `ceil(n / delta_max)`
/// near-equal runs.
fn chunk(g: &WeightedGraph, delta_max: usize) -> Vec<Vec<usize>> {
    let order: Vec<usize> = g
        .components()
        .into_iter()
        .flat_map(|comp| bfs_order(g, comp[0], &comp))
        .collect();
    let n = order.len();
    let parts = n.div_ceil(delta_max.max(1));
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = n / parts + usize::from(i < n % parts);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    out
}

fn bfs_order(g: &WeightedGraph, start: usize, comp: &[usize]) -> Vec<usize> {
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    let mut out = Vec::with_capacity(comp.len());
    let mut queue = VecDeque::from([start]);
    seen.insert(start);
    while let Some(v) = queue.pop_front() {
        out.push(v);
        let mut next: Vec<usize> = g
            .neighbors(v)
            .iter()
            .map(|(u, _)| *u)
            .filter(|u| !seen.contains(u))
            .collect();
        next.sort_unstable();
        for u in next {
            seen.insert(u);
            queue.push_back(u);
        }
    }
    out
}
