//! 1-WL color refinement and rare-neighbor selection.
//!
//! Each node keeps its `K` adjacent neighbors with the least frequent final
//! WL color. Ties fall to heavier edges, then to the smaller canonical color,
//! then to the smaller node id. The resulting [`NeighborTable`] is computed
//! once per graph and shared by every layer of the model.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::graph::{Graph, NodeId};

pub type Color = u32;

/// Colors per refinement round; round 0 comes from node labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WlColoring {
    pub colors: Vec<Vec<Color>>,
    /// Node count per color at the final round.
    pub color_frequencies: BTreeMap<Color, usize>,
}

impl WlColoring {
    pub fn final_colors(&self) -> &[Color] {
        self.colors.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn num_colors(&self, round: usize) -> usize {
        let mut c = self.colors[round].clone();
        c.sort_unstable();
        c.dedup();
        c.len()
    }

    /// Final-round frequency of node `n`'s color.
    pub fn frequency_of(&self, n: NodeId) -> usize {
        self.color_frequencies[&self.final_colors()[n]]
    }
}

/// Assigns dense ids to `keys` in ascending key order, so the ids depend only
/// on the multiset of keys and not on node numbering.
fn canonical_ids<K: Ord + Clone>(keys: &[K]) -> Vec<Color> {
    let mut distinct: Vec<K> = keys.to_vec();
    distinct.sort();
    distinct.dedup();
    keys.iter()
        .map(|k| distinct.binary_search(k).expect("key present") as Color)
        .collect()
}

/// Runs `iterations` rounds of 1-WL refinement.
///
/// Round `t` recolors each node by its round `t-1` color together with the
/// sorted multiset of its neighbors' round `t-1` colors.
pub fn wl_refine(g: &Graph, iterations: usize) -> WlColoring {
    let initial: Vec<Color> = match g.node_labels() {
        Some(labels) => canonical_ids(labels),
        None => vec![0; g.node_count()],
    };
    let mut colors = vec![initial];
    for _ in 0..iterations {
        let prev = colors.last().expect("at least one round");
        let signatures: Vec<(Color, Vec<Color>)> = (0..g.node_count())
            .map(|n| {
                let mut nbr: Vec<Color> = g.neighbors(n).iter().map(|&m| prev[m]).collect();
                nbr.sort_unstable();
                (prev[n], nbr)
            })
            .collect();
        colors.push(canonical_ids(&signatures));
    }
    let mut color_frequencies = BTreeMap::new();
    for &c in colors.last().expect("at least one round") {
        *color_frequencies.entry(c).or_insert(0) += 1;
    }
    WlColoring {
        colors,
        color_frequencies,
    }
}

/// Frozen per-node list of `K` selected neighbors; `None` marks padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborTable {
    k: usize,
    slots: Vec<Option<NodeId>>,
}

impl NeighborTable {
    /// Builds a table from explicit rows, each of length `k`.
    pub fn from_rows(k: usize, rows: Vec<Vec<Option<NodeId>>>) -> Self {
        assert!(rows.iter().all(|r| r.len() == k), "every row needs k slots");
        NeighborTable {
            k,
            slots: rows.into_iter().flatten().collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn node_count(&self) -> usize {
        self.slots.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn row(&self, n: NodeId) -> &[Option<NodeId>] {
        &self.slots[n * self.k..(n + 1) * self.k]
    }

    pub fn slot(&self, n: NodeId, k: usize) -> Option<NodeId> {
        self.slots[n * self.k + k]
    }

    pub fn pad_mask(&self, n: NodeId) -> Vec<bool> {
        self.row(n).iter().map(Option::is_none).collect()
    }

    /// Selected (non-padding) neighbors of `n`, in slot order.
    pub fn selected(&self, n: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.row(n).iter().flatten().copied()
    }

    /// The same table keeping only the first `k` slots of every row.
    pub fn truncated(&self, k: usize) -> NeighborTable {
        let k = k.min(self.k);
        NeighborTable {
            k,
            slots: (0..self.node_count())
                .flat_map(|n| self.row(n)[..k].to_vec())
                .collect(),
        }
    }
}

/// Ranks `n`'s neighbors and keeps the first `k`.
pub fn select_neighbors(g: &Graph, k: usize, coloring: &WlColoring) -> NeighborTable {
    assert!(k >= 1, "K must be at least 1");
    let colors = coloring.final_colors();
    let mut slots = Vec::with_capacity(g.node_count() * k);
    for n in 0..g.node_count() {
        let weights = g.neighbor_weights(n);
        let mut ranked: Vec<(usize, f64, Color, NodeId)> = g
            .neighbors(n)
            .iter()
            .zip(&weights)
            .map(|(&m, &w)| (coloring.frequency_of(m), w, colors[m], m))
            .collect();
        ranked.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then(b.1.total_cmp(&a.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        slots.extend(ranked.iter().take(k).map(|r| Some(r.3)));
        slots.extend(std::iter::repeat_n(None, k.saturating_sub(ranked.len())));
    }
    NeighborTable { k, slots }
}

/// Global node order: rare final colors first, then canonical color, then id.
pub fn node_ranking(coloring: &WlColoring) -> Vec<NodeId> {
    let colors = coloring.final_colors();
    let mut order: Vec<NodeId> = (0..colors.len()).collect();
    order.sort_by_key(|&n| (coloring.frequency_of(n), colors[n], n));
    order
}

/// `N x K` adjacency vectors: the edge weight to each selected neighbor and
/// zero at padding slots.
pub fn initial_embedding(g: &Graph, t: &NeighborTable) -> Tensor {
    let mut data = vec![0.0; g.node_count() * t.k()];
    for n in 0..g.node_count() {
        for (k, slot) in t.row(n).iter().enumerate() {
            if let Some(m) = *slot {
                data[n * t.k() + k] = g.edge_weight(n, m).expect("slot holds an adjacent node");
            }
        }
    }
    Tensor::new(vec![g.node_count(), t.k()], data).expect("shape matches")
}
