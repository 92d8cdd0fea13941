//! Labeled undirected graphs and structural utilities.
//!
//! Adjacency lists are kept sorted so every traversal, and everything built
//! on top of one (neighbor ranking, readout order), is deterministic.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Immutable undirected graph with optional discrete node labels and
/// optional positive edge weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    adjacency: Vec<Vec<NodeId>>,
    /// Weights aligned with `adjacency`; `None` means every edge weighs 1.
    adjacency_weights: Option<Vec<Vec<f64>>>,
    /// Canonical edge list, `u < v`, sorted.
    edges: Vec<(NodeId, NodeId)>,
    node_labels: Option<Vec<i64>>,
}

impl Graph {
    /// Builds a graph from an edge list. Reversed and repeated pairs are
    /// merged; self-loops and out-of-range ids are rejected.
    pub fn from_edges<I>(node_count: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (NodeId, NodeId)>,
    {
        Self::build(
            node_count,
            edges.into_iter().map(|(u, v)| (u, v, 1.0)),
            false,
        )
    }

    /// Like [`Graph::from_edges`] but with a weight per edge. When a pair is
    /// listed more than once the first weight wins.
    pub fn from_weighted_edges<I>(node_count: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (NodeId, NodeId, f64)>,
    {
        Self::build(node_count, edges, true)
    }

    fn build<I>(node_count: usize, edges: I, weighted: bool) -> Result<Self>
    where
        I: IntoIterator<Item = (NodeId, NodeId, f64)>,
    {
        let mut canon: BTreeMap<(NodeId, NodeId), f64> = BTreeMap::new();
        for (u, v, w) in edges {
            if u >= node_count || v >= node_count {
                return Err(Error::Argument(format!(
                    "edge ({u}, {v}) references a node outside 0..{node_count}"
                )));
            }
            if u == v {
                return Err(Error::Argument(format!("self-loop on node {u}")));
            }
            if weighted && !(w.is_finite() && w > 0.0) {
                return Err(Error::Argument(format!(
                    "edge ({u}, {v}) has non-positive or non-finite weight {w}"
                )));
            }
            canon.entry((u.min(v), u.max(v))).or_insert(w);
        }

        let mut adjacency = vec![Vec::new(); node_count];
        let mut weights = vec![Vec::new(); node_count];
        for (&(u, v), &w) in &canon {
            adjacency[u].push(v);
            adjacency[v].push(u);
            weights[u].push(w);
            weights[v].push(w);
        }
        // Sort each row together with its weights.
        for (row, wrow) in adjacency.iter_mut().zip(weights.iter_mut()) {
            let mut pairs: Vec<(NodeId, f64)> =
                row.iter().copied().zip(wrow.iter().copied()).collect();
            pairs.sort_by_key(|&(n, _)| n);
            *row = pairs.iter().map(|&(n, _)| n).collect();
            *wrow = pairs.iter().map(|&(_, w)| w).collect();
        }

        Ok(Graph {
            adjacency,
            adjacency_weights: weighted.then_some(weights),
            edges: canon.into_keys().collect(),
            node_labels: None,
        })
    }

    /// Attaches one discrete label per node.
    pub fn with_node_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != self.node_count() {
            return Err(Error::Argument(format!(
                "{} node labels for {} nodes",
                labels.len(),
                self.node_count()
            )));
        }
        self.node_labels = Some(labels);
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Canonical edges `(u, v)` with `u < v`, in ascending order.
    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    /// Sorted neighbors of `n`.
    pub fn neighbors(&self, n: NodeId) -> &[NodeId] {
        &self.adjacency[n]
    }

    pub fn degree(&self, n: NodeId) -> usize {
        self.adjacency[n].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn node_labels(&self) -> Option<&[i64]> {
        self.node_labels.as_deref()
    }

    pub fn is_weighted(&self) -> bool {
        self.adjacency_weights.is_some()
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        u < self.node_count() && self.adjacency[u].binary_search(&v).is_ok()
    }

    /// Weight of edge `(u, v)`, 1 for unweighted graphs, `None` if absent.
    pub fn edge_weight(&self, u: NodeId, v: NodeId) -> Option<f64> {
        if u >= self.node_count() {
            return None;
        }
        let pos = self.adjacency[u].binary_search(&v).ok()?;
        Some(match &self.adjacency_weights {
            Some(w) => w[u][pos],
            None => 1.0,
        })
    }

    /// Weights aligned with [`Graph::neighbors`].
    pub fn neighbor_weights(&self, n: NodeId) -> Vec<f64> {
        match &self.adjacency_weights {
            Some(w) => w[n].clone(),
            None => vec![1.0; self.degree(n)],
        }
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[NodeId]) -> Result<Self> {
        let n = self.node_count();
        let mut seen = vec![false; n];
        if perm.len() != n
            || perm
                .iter()
                .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Argument("not a permutation of the node ids".into()));
        }
        let edges = self
            .edges
            .iter()
            .map(|&(u, v)| (perm[u], perm[v], self.edge_weight(u, v).unwrap_or(1.0)));
        let mut g = Self::build(n, edges, self.is_weighted())?;
        if let Some(labels) = &self.node_labels {
            let mut out = vec![0; n];
            for (i, &l) in labels.iter().enumerate() {
                out[perm[i]] = l;
            }
            g.node_labels = Some(out);
        }
        Ok(g)
    }

    /// Hop distances from `source`; `None` for unreachable nodes.
    pub fn bfs_distances(&self, source: NodeId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.node_count()];
        let mut queue = VecDeque::new();
        dist[source] = Some(0);
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &self.adjacency[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// A collection of graphs with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    /// Class of each graph, in `0..num_classes()`.
    pub class_labels: Vec<usize>,
    /// Raw label value for each class index, ascending.
    pub class_values: Vec<i64>,
}

impl Dataset {
    /// Builds a dataset from graphs and already-dense class indices.
    pub fn new(
        name: impl Into<String>,
        graphs: Vec<Graph>,
        class_labels: Vec<usize>,
    ) -> Result<Self> {
        if graphs.len() != class_labels.len() {
            return Err(Error::Consistency(format!(
                "{} graphs but {} class labels",
                graphs.len(),
                class_labels.len()
            )));
        }
        let num_classes = class_labels.iter().map(|&c| c + 1).max().unwrap_or(0);
        Ok(Dataset {
            name: name.into(),
            graphs,
            class_labels,
            class_values: (0..num_classes as i64).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_values.len()
    }

    /// Number of graphs per class index.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &c in &self.class_labels {
            counts[c] += 1;
        }
        counts
    }

    pub fn max_node_count(&self) -> usize {
        self.graphs.iter().map(Graph::node_count).max().unwrap_or(0)
    }

    /// Sub-dataset with the graphs at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            graphs: indices.iter().map(|&i| self.graphs[i].clone()).collect(),
            class_labels: indices.iter().map(|&i| self.class_labels[i]).collect(),
            class_values: self.class_values.clone(),
        }
    }
}

/// The `radius`-hop ball around a node together with its induced edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EgoNetwork {
    pub center: NodeId,
    pub radius: usize,
    /// Sorted member ids.
    pub member_nodes: Vec<NodeId>,
    /// Canonical `(u, v)` pairs, `u < v`, sorted.
    pub induced_edges: Vec<(NodeId, NodeId)>,
}

pub fn ego_network(g: &Graph, center: NodeId, radius: usize) -> Result<EgoNetwork> {
    if center >= g.node_count() {
        return Err(Error::Argument(format!(
            "node {center} out of range for a graph with {} nodes",
            g.node_count()
        )));
    }
    let dist = g.bfs_distances(center);
    let inside: Vec<bool> = dist
        .iter()
        .map(|d| matches!(d, Some(d) if *d <= radius))
        .collect();
    let member_nodes = (0..g.node_count()).filter(|&n| inside[n]).collect();
    let induced_edges = g
        .edges()
        .iter()
        .copied()
        .filter(|&(u, v)| inside[u] && inside[v])
        .collect();
    Ok(EgoNetwork {
        center,
        radius,
        member_nodes,
        induced_edges,
    })
}

pub type DegreeHistogram = BTreeMap<usize, usize>;

pub fn graph_degree_histogram(g: &Graph) -> DegreeHistogram {
    let mut hist = DegreeHistogram::new();
    for n in 0..g.node_count() {
        *hist.entry(g.degree(n)).or_default() += 1;
    }
    hist
}

/// Node-degree counts over every graph of a dataset.
pub fn degree_histogram(d: &Dataset) -> DegreeHistogram {
    let mut hist = DegreeHistogram::new();
    for g in &d.graphs {
        for (k, c) in graph_degree_histogram(g) {
            *hist.entry(k).or_default() += c;
        }
    }
    hist
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerLawFit {
    /// Negated slope of log(count) against log(degree).
    pub exponent: f64,
    pub r_squared: f64,
}

/// Least-squares fit of `log(count) = c - exponent * log(degree)`.
///
/// Bins with zero count or degree zero carry no information on a log scale
/// and are skipped.
pub fn power_law_fit(hist: &DegreeHistogram) -> Result<PowerLawFit> {
    let bins: Vec<(f64, f64)> = hist.iter().map(|(&k, &c)| (k as f64, c as f64)).collect();
    power_law_fit_bins(&bins)
}

/// [`power_law_fit`] over real-valued `(degree, count)` bins.
pub fn power_law_fit_bins(bins: &[(f64, f64)]) -> Result<PowerLawFit> {
    let points: Vec<(f64, f64)> = bins
        .iter()
        .filter(|&&(k, c)| k > 0.0 && c > 0.0)
        .map(|&(k, c)| (k.ln(), c.ln()))
        .collect();
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "power-law fit needs at least 3 distinct nonzero degrees, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - (intercept + slope * p.0)).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(PowerLawFit {
        exponent: -slope,
        r_squared: r_squared.clamp(0.0, 1.0),
    })
}
