//! Undirected simple graphs and the feature metrics used for conditioning
//! and evaluation.
//!
//! Graphs store a node count and a canonical, sorted edge list (smaller
//! endpoint first), so equality is structural. All metrics are pure
//! functions of the graph.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;
use thiserror::Error;

/// Error raised when a graph fails its structural invariants.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("node id {id} out of range for graph with {node_count} nodes")]
    NodeOutOfRange { id: usize, node_count: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
}

/// Error raised when a metric is undefined on the given graph.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("{feature}: metric undefined: {reason}")]
    Undefined { feature: FeatureName, reason: String },
}

/// An undirected simple graph with contiguous integer node ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Builds a graph, canonicalizing each edge as (min, max) and sorting the
    /// edge list. Rejects self-loops, duplicate edges and out-of-range ids.
    pub fn new(
        node_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        let mut canon: Vec<(usize, usize)> = Vec::new();
        for (u, v) in edges {
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            for id in [u, v] {
                if id >= node_count {
                    return Err(GraphError::NodeOutOfRange { id, node_count });
                }
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        if let Some(w) = canon.windows(2).find(|w| w[0] == w[1]) {
            return Err(GraphError::DuplicateEdge(w[0].0, w[0].1));
        }
        Ok(Graph { node_count, edges: canon })
    }

    /// Nodes only, no edges.
    pub fn empty(node_count: usize) -> Self {
        Graph { node_count, edges: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Canonical (min, max) edge pairs in sorted order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        let key = (u.min(v), u.max(v));
        self.edges.binary_search(&key).is_ok()
    }

    /// Adjacency lists with neighbors in ascending id order.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for nbrs in &mut adj {
            nbrs.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.node_count];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Connected components as node-id lists; each component's nodes ascend.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.node_count];
        let mut comps = Vec::new();
        for start in 0..self.node_count {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &w in &adj[u] {
                    if !seen[w] {
                        seen[w] = true;
                        comp.push(w);
                        queue.push_back(w);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    /// Node ids of the largest connected component. Ties broken by the
    /// smallest minimum node id.
    pub fn largest_component(&self) -> Vec<usize> {
        self.components()
            .into_iter()
            .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
            .unwrap_or_default()
    }

    pub fn is_connected(&self) -> bool {
        self.node_count <= 1 || self.largest_component().len() == self.node_count
    }

    /// Subgraph induced by `nodes`, relabeled 0..k in the order given.
    /// Panics on out-of-range or repeated nodes.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Graph {
        let mut map = vec![usize::MAX; self.node_count];
        for (new, &old) in nodes.iter().enumerate() {
            assert!(map[old] == usize::MAX, "repeated node {old}");
            map[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter(|&&(u, v)| map[u] != usize::MAX && map[v] != usize::MAX)
            .map(|&(u, v)| (map[u], map[v]));
        Graph::new(nodes.len(), edges).expect("induced subgraph of a valid graph is valid")
    }

    /// Relabels nodes by `perm` (new id of node i is perm[i]).
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        assert_eq!(perm.len(), self.node_count);
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v]));
        Graph::new(self.node_count, edges).expect("permutation preserves validity")
    }

    /// Number of triangles in the graph.
    pub fn triangle_count(&self) -> usize {
        let adj = self.adjacency();
        let mut count = 0;
        for &(u, v) in &self.edges {
            // count common neighbors w > v to count each triangle once
            for &w in &adj[u] {
                if w > v && adj[v].binary_search(&w).is_ok() {
                    count += 1;
                }
            }
        }
        count
    }

    /// BFS hop distances from `start`; usize::MAX marks unreachable nodes.
    pub fn bfs_distances(&self, start: usize, adj: &[Vec<usize>]) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.node_count];
        dist[start] = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }
}

/// The graph features that can populate a condition vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureName {
    Aspl,
    Clustering,
    PowerlawExponent,
}

impl FeatureName {
    pub const ALL: [FeatureName; 3] =
        [FeatureName::Aspl, FeatureName::Clustering, FeatureName::PowerlawExponent];

    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureName::Aspl => "aspl",
            FeatureName::Clustering => "clustering",
            FeatureName::PowerlawExponent => "powerlaw_exponent",
        }
    }
}

impl fmt::Display for FeatureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FeatureName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| format!("unknown feature name: {s:?}"))
    }
}

/// Ordered named real feature values. Doubles as the condition vector fed to
/// the model and as the estimator's target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    entries: Vec<(FeatureName, f64)>,
}

impl FeatureVector {
    /// Builds a feature vector; names must be unique and values finite.
    pub fn new(entries: Vec<(FeatureName, f64)>) -> Self {
        for (i, (name, value)) in entries.iter().enumerate() {
            assert!(value.is_finite(), "feature {name} is not finite");
            assert!(
                entries[..i].iter().all(|(n, _)| n != name),
                "duplicate feature {name}"
            );
        }
        FeatureVector { entries }
    }

    pub fn entries(&self) -> &[(FeatureName, f64)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = FeatureName> + '_ {
        self.entries.iter().map(|&(n, _)| n)
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|&(_, v)| v).collect()
    }

    pub fn get(&self, name: FeatureName) -> Option<f64> {
        self.entries.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Mean shortest-path hop distance over all unordered node pairs of the
/// largest connected component. Undefined when that component has fewer than
/// two nodes.
pub fn average_shortest_path_length(g: &Graph) -> Result<f64, MetricError> {
    let comp = g.largest_component();
    if comp.len() < 2 {
        return Err(MetricError::Undefined {
            feature: FeatureName::Aspl,
            reason: format!("largest component has {} node(s), need at least 2", comp.len()),
        });
    }
    let adj = g.adjacency();
    let mut total: u64 = 0;
    for &u in &comp {
        let dist = g.bfs_distances(u, &adj);
        for &v in &comp {
            if v > u {
                debug_assert_ne!(dist[v], usize::MAX);
                total += dist[v] as u64;
            }
        }
    }
    let pairs = comp.len() as u64 * (comp.len() as u64 - 1) / 2;
    Ok(total as f64 / pairs as f64)
}

/// Average local clustering coefficient; nodes of degree < 2 contribute 0.
///
/// Accumulated as an exact rational (every local coefficient is
/// triangles / C(deg, 2)) and converted to f64 once, so hand-computable
/// values like 5/6 come out bit-exact.
pub fn clustering_coefficient(g: &Graph) -> Result<f64, MetricError> {
    if g.node_count() == 0 {
        return Err(MetricError::Undefined {
            feature: FeatureName::Clustering,
            reason: "graph has no nodes".to_string(),
        });
    }
    let adj = g.adjacency();
    // sum of t_i / C(d_i, 2) as num/den in u128
    let (mut num, mut den): (u128, u128) = (0, 1);
    for u in 0..g.node_count() {
        let d = adj[u].len();
        if d < 2 {
            continue;
        }
        let mut tri = 0u128;
        for (i, &v) in adj[u].iter().enumerate() {
            for &w in &adj[u][i + 1..] {
                if adj[v].binary_search(&w).is_ok() {
                    tri += 1;
                }
            }
        }
        let local_den = (d as u128) * (d as u128 - 1) / 2;
        num = num * local_den + tri * den;
        den *= local_den;
        let g_ = gcd(num, den);
        num /= g_;
        den /= g_;
    }
    Ok(num as f64 / (den as f64 * g.node_count() as f64))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Continuous maximum-likelihood power-law exponent over the degree
/// sequence, with d_min fixed at 1: alpha = 1 + n / sum_i ln(d_i).
pub fn powerlaw_exponent(g: &Graph) -> Result<f64, MetricError> {
    if g.node_count() < 2 {
        return Err(MetricError::Undefined {
            feature: FeatureName::PowerlawExponent,
            reason: "graph has fewer than 2 nodes".to_string(),
        });
    }
    let degrees: Vec<f64> = g.degrees().iter().map(|&d| d as f64).collect();
    if degrees.iter().any(|&d| d < 1.0) {
        return Err(MetricError::Undefined {
            feature: FeatureName::PowerlawExponent,
            reason: "graph has a degree-zero node".to_string(),
        });
    }
    powerlaw_mle(&degrees)
}

/// The MLE formula on a raw degree sequence (d_min = 1).
pub fn powerlaw_mle(degrees: &[f64]) -> Result<f64, MetricError> {
    let log_sum: f64 = degrees.iter().map(|&d| d.ln()).sum();
    if log_sum <= 0.0 {
        return Err(MetricError::Undefined {
            feature: FeatureName::PowerlawExponent,
            reason: "all degrees equal the minimum; exponent diverges".to_string(),
        });
    }
    Ok(1.0 + degrees.len() as f64 / log_sum)
}

/// Evaluates the named metrics in order. Errors carry the offending feature.
pub fn compute_features(g: &Graph, names: &[FeatureName]) -> Result<FeatureVector, MetricError> {
    let mut entries = Vec::with_capacity(names.len());
    for &name in names {
        let value = match name {
            FeatureName::Aspl => average_shortest_path_length(g)?,
            FeatureName::Clustering => clustering_coefficient(g)?,
            FeatureName::PowerlawExponent => powerlaw_exponent(g)?,
        };
        entries.push((name, value));
    }
    Ok(FeatureVector::new(entries))
}
