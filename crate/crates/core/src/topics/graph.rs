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

use super::TopicError;

/// Undirected weighted graph over vertices `0..n`. Self-loops carry the
/// internal weight of aggregated communities.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
    degree: Vec<f64>,
    two_m: f64,
}

impl WeightedGraph {
    /// Parallel edges are summed. Non-positive weights are ignored.
    pub fn new(n: usize, edges: &[(usize, usize, f64)]) -> Self {
        let mut weights: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
        let mut self_loops = vec![0.0; n];
        for &(a, b, w) in edges {
            assert!(a < n && b < n, "edge ({a}, {b}) outside 0..{n}");
            if w <= 0.0 || !w.is_finite() {
                continue;
            }
            if a == b {
                self_loops[a] += w;
            } else {
                *weights[a].entry(b).or_insert(0.0) += w;
                *weights[b].entry(a).or_insert(0.0) += w;
            }
        }
        let adj: Vec<Vec<(usize, f64)>> = weights.into_iter().map(|m| m.into_iter().collect()).collect();
        Self::from_parts(adj, self_loops)
    }

    fn from_parts(adj: Vec<Vec<(usize, f64)>>, self_loops: Vec<f64>) -> Self {
        let degree: Vec<f64> = adj
            .iter()
            .zip(&self_loops)
            .map(|(nbrs, s)| nbrs.iter().map(|(_, w)| w).sum::<f64>() + 2.0 * s)
            .collect();
        let two_m = degree.iter().sum();
        WeightedGraph {
            adj,
            self_loops,
            degree,
            two_m,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.adj.len()
    }

    /// Total edge weight `m`, self-loops included once.
    pub fn total_weight(&self) -> f64 {
        self.two_m / 2.0
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.adj[v]
    }

    pub fn degree(&self, v: usize) -> f64 {
        self.degree[v]
    }

    pub fn self_loop(&self, v: usize) -> f64 {
        self.self_loops[v]
    }

    pub(crate) fn two_m(&self) -> f64 {
        self.two_m
    }

    /// Graph induced on `vertices`, renumbered in the given order.
    pub fn induced(&self, vertices: &[usize]) -> WeightedGraph {
        let mut local = vec![usize::MAX; self.vertex_count()];
        for (i, &v) in vertices.iter().enumerate() {
            local[v] = i;
        }
        let adj = vertices
            .iter()
            .map(|&v| {
                self.adj[v]
                    .iter()
                    .filter(|(u, _)| local[*u] != usize::MAX)
                    .map(|&(u, w)| (local[u], w))
                    .collect()
            })
            .collect();
        let loops = vertices.iter().map(|&v| self.self_loops[v]).collect();
        Self::from_parts(adj, loops)
    }

    /// Collapse each community into one vertex. `assignment` labels must be
    /// dense in `0..count`.
    pub(crate) fn aggregate(&self, assignment: &[usize], count: usize) -> WeightedGraph {
        let mut weights: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); count];
        let mut loops = vec![0.0; count];
        for v in 0..self.vertex_count() {
            let cv = assignment[v];
            loops[cv] += self.self_loops[v];
            for &(u, w) in &self.adj[v] {
                let cu = assignment[u];
                if cu == cv {
                    if u > v {
                        loops[cv] += w;
                    }
                } else {
                    *weights[cv].entry(cu).or_insert(0.0) += w;
                }
            }
        }
        let adj = weights.into_iter().map(|m| m.into_iter().collect()).collect();
        Self::from_parts(adj, loops)
    }

    /// Connected components, each sorted, ordered by smallest vertex.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.vertex_count();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut i = 0;
            while i < comp.len() {
                let v = comp[i];
                i += 1;
                for &(u, _) in &self.adj[v] {
                    if !seen[u] {
                        seen[u] = true;
                        comp.push(u);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// Newman-Girvan modularity `Q = sum_c [ in_c / 2m - (tot_c / 2m)^2 ]`, where
/// `in_c` counts internal weight in both directions and `tot_c` is the degree
/// sum of community `c`. Labels may be arbitrary.
pub fn modularity(g: &WeightedGraph, assignment: &[usize]) -> Result<f64, TopicError> {
    if g.two_m <= 0.0 {
        return Err(TopicError::EmptyGraph);
    }
    if assignment.len() != g.vertex_count() {
        return Err(TopicError::AssignmentLength {
            expected: g.vertex_count(),
            got: assignment.len(),
        });
    }
    let mut inside: std::collections::HashMap<usize, f64> = Default::default();
    let mut total: std::collections::HashMap<usize, f64> = Default::default();
    for v in 0..g.vertex_count() {
        let c = assignment[v];
        *total.entry(c).or_insert(0.0) += g.degree[v];
        let mut w_in = 2.0 * g.self_loops[v];
        for &(u, w) in &g.adj[v] {
            if assignment[u] == c {
                w_in += w;
            }
        }
        *inside.entry(c).or_insert(0.0) += w_in;
    }
    let mut labels: Vec<usize> = total.keys().copied().collect();
    labels.sort_unstable();
    Ok(labels
        .iter()
        .map(|c| inside[c] / g.two_m - (total[c] / g.two_m).powi(2))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangles() -> WeightedGraph {
        WeightedGraph::new(
            6,
            &[
                (0, 1, 1.0),
                (1, 2, 1.0),
                (0, 2, 1.0),
                (3, 4, 1.0),
                (4, 5, 1.0),
                (3, 5, 1.0),
            ],
        )
    }

    #[test]
    fn two_triangles_split() {
        let q = modularity(&triangles(), &[0, 0, 0, 1, 1, 1]).unwrap();
        assert!((q - 0.5).abs() < 1e-12);
    }

    #[test]
    fn one_community_is_zero() {
        let g = WeightedGraph::new(3, &[(0, 1, 1.0), (1, 2, 2.0)]);
        assert!(modularity(&g, &[7, 7, 7]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn single_edge_singletons() {
        let g = WeightedGraph::new(2, &[(0, 1, 1.0)]);
        assert!((modularity(&g, &[0, 1]).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_graph_errors() {
        assert_eq!(
            modularity(&WeightedGraph::new(3, &[]), &[0, 1, 2]),
            Err(TopicError::EmptyGraph)
        );
    }

    #[test]
    fn aggregation_preserves_modularity() {
        let g = triangles();
        let a = g.aggregate(&[0, 0, 1, 2, 2, 2], 3);
        let q_fine = modularity(&g, &[0, 0, 0, 1, 1, 1]).unwrap();
        let q_coarse = modularity(&a, &[0, 0, 1]).unwrap();
        assert!((q_fine - q_coarse).abs() < 1e-12);
        assert_eq!(a.total_weight(), g.total_weight());
    }

    #[test]
    fn components_and_induced() {
        let g = triangles();
        assert_eq!(g.components(), vec![vec![0, 1, 2], vec![3, 4, 5]]);
        let sub = g.induced(&[3, 4]);
        assert_eq!(sub.total_weight(), 1.0);
    }
}
