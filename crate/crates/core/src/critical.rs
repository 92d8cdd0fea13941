//! Post-hoc explanation of a trained model.
//!
//! An attention probe is trained on frozen last-layer node embeddings. Nodes
//! whose attention exceeds a threshold seed a backward reconstruction that
//! pushes their scaled embeddings through the transposed ego-convolution
//! filters down to the input adjacency rows, where each entry belongs to one
//! edge of the graph.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm, Adam, AdamConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{Model, PreparedGraph};

/// Softmax attention over node embeddings followed by a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProbe {
    /// `[D]` weights of the per-node attention score.
    pub score: Tensor,
    /// `[D, C]`.
    pub weight: Tensor,
    /// `[C]`.
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 1e-2,
            epochs: 100,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl AttentionProbe {
    /// All-zero start: uniform attention and a head that ignores its input.
    /// The head learns the mean-pooled class direction first and the scores
    /// then follow it.
    pub fn zeros(d: usize, classes: usize) -> Self {
        AttentionProbe {
            score: Tensor::zeros(&[d, 1]),
            weight: Tensor::zeros(&[d, classes]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn d(&self) -> usize {
        self.score.numel()
    }

    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }

    fn check(&self, h: &Tensor) -> Result<()> {
        if h.shape().len() != 2 || h.shape()[1] != self.d() || h.shape()[0] == 0 {
            return Err(Error::Argument(format!(
                "probe over width {} given embeddings {:?}",
                self.d(),
                h.shape()
            )));
        }
        Ok(())
    }

    /// Attention `γ` over the rows of `h` (`[N, D]`); non-negative, sums to 1.
    pub fn attention(&self, h: &Tensor) -> Result<Vec<f64>> {
        self.check(h)?;
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let s = tape.constant(self.score.clone());
        let z = tape.matmul(hv, s)?;
        let g = tape.softmax(z);
        Ok(tape.value(g).data().to_vec())
    }

    pub fn logits(&self, h: &Tensor) -> Result<Vec<f64>> {
        self.check(h)?;
        let gamma = self.attention(h)?;
        let d = self.d();
        let mut pooled = vec![0.0; d];
        gemm(
            1,
            h.rows(),
            d,
            &gamma,
            false,
            h.data(),
            false,
            0.0,
            &mut pooled,
        );
        let mut out = self.bias.data().to_vec();
        gemm(
            1,
            d,
            out.len(),
            &pooled,
            false,
            self.weight.data(),
            false,
            1.0,
            &mut out,
        );
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"EGOPROBE");
        out.extend_from_slice(&(self.d() as u64).to_le_bytes());
        out.extend_from_slice(&(self.num_classes() as u64).to_le_bytes());
        for t in [&self.score, &self.weight, &self.bias] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            path: "<probe bytes>".into(),
            msg: msg.into(),
        };
        if bytes.len() < 24 || &bytes[..8] != b"EGOPROBE" {
            return Err(bad("not a probe file"));
        }
        let d = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let c = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let n = d
            .checked_mul(c)
            .and_then(|dc| dc.checked_add(d + c))
            .ok_or_else(|| bad("probe dimensions overflow"))?;
        if bytes.len() != 24 + 8 * n {
            return Err(bad("probe file has the wrong length"));
        }
        let vals: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(AttentionProbe {
            score: Tensor::new(vec![d, 1], vals[..d].to_vec())?,
            weight: Tensor::new(vec![d, c], vals[d..d + d * c].to_vec())?,
            bias: Tensor::new(vec![c], vals[d + d * c..].to_vec())?,
        })
    }
}

/// Trains a probe on the frozen last-layer embeddings of `model`. The model
/// is only read, so its weights cannot change.
pub fn fit_attention_probe(
    model: &Model,
    graphs: &[PreparedGraph],
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<AttentionProbe> {
    if graphs.len() != labels.len() || graphs.is_empty() {
        return Err(Error::Argument(format!(
            "{} graphs against {} labels",
            graphs.len(),
            labels.len()
        )));
    }
    let embeddings: Vec<Tensor> = graphs
        .iter()
        .map(|g| Ok(model.embed(g)?.pop().expect("at least one layer")))
        .collect::<Result<_>>()?;
    let mut probe = AttentionProbe::zeros(model.stack.d_out(), model.num_classes());
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &[&probe.score, &probe.weight, &probe.bias],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let s = tape.param(&probe.score);
            let w = tape.param(&probe.weight);
            let b = tape.param(&probe.bias);
            let mut pooled = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let h = tape.constant(embeddings[i].clone());
                let z = tape.matmul(h, s)?;
                let gamma = tape.softmax(z);
                let gamma = tape.reshape(gamma, vec![1, embeddings[i].rows()])?;
                pooled.push(tape.matmul(gamma, h)?);
            }
            let x = tape.concat_rows(&pooled)?;
            let logits = tape.matmul(x, w)?;
            let logits = tape.add_bias(logits, b)?;
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = tape.softmax_cross_entropy(logits, &ys)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Training(format!(
                    "probe loss became {lv} at epoch {epoch}"
                )));
            }
            total += lv * chunk.len() as f64;
            let grads = tape.backward(loss);
            let g = [grads.tensor(s), grads.tensor(w), grads.tensor(b)];
            adam.update(
                &mut [&mut probe.score, &mut probe.weight, &mut probe.bias],
                &g,
            );
        }
        debug!(
            "probe epoch {epoch}: loss {:.4}",
            total / graphs.len() as f64
        );
    }
    Ok(probe)
}

/// `{n : γ(n) > threshold}`; the default threshold is `1 / (2N)`.
pub fn select_important(gamma: &[f64], threshold: Option<f64>) -> Result<Vec<NodeId>> {
    let t = threshold.unwrap_or(1.0 / (2.0 * gamma.len().max(1) as f64));
    if t.is_nan() || t < 0.0 {
        return Err(Error::Argument(format!(
            "threshold {t} must be non-negative"
        )));
    }
    Ok((0..gamma.len()).filter(|&n| gamma[n] > t).collect())
}

/// Evaluation-mode activations of one graph: the stack input followed by
/// every layer's output.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    pub outputs: Vec<Tensor>,
}

impl LayerCache {
    pub fn compute(model: &Model, g: &PreparedGraph) -> Result<Self> {
        Ok(LayerCache {
            outputs: model.embed(g)?,
        })
    }

    pub fn last(&self) -> Option<&Tensor> {
        self.outputs.last()
    }
}

/// Signed reconstruction of the stack input, `[N, D_in]`.
///
/// Starts from `γ(n) · H^(L)[n]` and, layer by layer, expands every node's
/// row through the transposed filters into a `(K+1) x D_in` block whose row
/// 0 returns to the node and row `k+1` to its slot-`k` neighbor. The map is
/// linear in `gamma`.
pub fn backtrack_signed(
    model: &Model,
    g: &PreparedGraph,
    cache: &LayerCache,
    gamma: &[f64],
) -> Result<Tensor> {
    let depth = model.stack.depth();
    if cache.outputs.len() != depth + 1 {
        return Err(Error::State(format!(
            "backtracking needs {} cached activations, found {}",
            depth + 1,
            cache.outputs.len()
        )));
    }
    let n = g.node_count();
    if gamma.len() != n {
        return Err(Error::Argument(format!(
            "{} attention scores for {n} nodes",
            gamma.len()
        )));
    }
    let last = &cache.outputs[depth];
    if last.shape() != [n, model.stack.d_out()] {
        return Err(Error::State(format!(
            "cached last layer has shape {:?}",
            last.shape()
        )));
    }
    let d = last.row_len();
    let mut h: Vec<f64> = last.data().to_vec();
    for (i, row) in h.chunks_mut(d).enumerate() {
        row.iter_mut().for_each(|v| *v *= gamma[i]);
    }
    let k = g.table.k();
    for l in (0..depth).rev() {
        let layer = model.stack.layer(l);
        let (d_out, d_in) = (layer.d_out(), layer.d_in());
        let block = (k + 1) * d_in;
        let mut e = vec![0.0; n * block];
        gemm(
            n,
            d_out,
            block,
            &h,
            false,
            layer.filters.data(),
            false,
            0.0,
            &mut e,
        );
        let mut prev = vec![0.0; n * d_in];
        for node in 0..n {
            let en = &e[node * block..(node + 1) * block];
            add_into(&mut prev[node * d_in..(node + 1) * d_in], &en[..d_in]);
            for (slot, m) in g.table.row(node).iter().enumerate() {
                if let Some(m) = *m {
                    let src = &en[(slot + 1) * d_in..(slot + 2) * d_in];
                    add_into(&mut prev[m * d_in..(m + 1) * d_in], src);
                }
            }
        }
        h = prev;
    }
    Tensor::new(vec![n, model.stack.d_in()], h)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Importance per canonical `(u, v)` edge, `u < v`.
pub type EdgeImportance = BTreeMap<(NodeId, NodeId), f64>;

/// Node and edge importances on the input graph.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticalStructure {
    pub node_importance: Vec<f64>,
    /// Every edge of the graph, keyed `(u, v)` with `u < v`.
    pub edge_importance: EdgeImportance,
    pub threshold: f64,
    /// Nodes whose attention exceeded the threshold.
    pub seeds: Vec<NodeId>,
}

fn key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    (a.min(b), a.max(b))
}

/// Converts a signed stack-input reconstruction into importances.
///
/// With adjacency input, entry `(n, k)` belongs to the edge from `n` to its
/// slot-`k` neighbor; its magnitude is added to that edge and to both
/// endpoints. With the base layer, each node's reconstructed row is mapped
/// through the base filters to a `K_base x K_base` block whose entries are
/// attributed to the edges between slot neighbors.
pub fn importances(
    model: &Model,
    graph: &Graph,
    g: &PreparedGraph,
    h0: &Tensor,
) -> Result<(Vec<f64>, EdgeImportance)> {
    let n = graph.node_count();
    if g.node_count() != n || h0.rows() != n {
        return Err(Error::Argument(
            "graph, prepared graph and reconstruction disagree on size".into(),
        ));
    }
    let mut nodes = vec![0.0; n];
    let mut edges: EdgeImportance =
        graph.edges().iter().map(|&e| (e, 0.0)).collect();
    let mut credit = |a: NodeId, b: NodeId, v: f64, nodes: &mut Vec<f64>| {
        *edges.get_mut(&key(a, b)).expect("slot pairs are edges") += v;
        nodes[a] += v;
        nodes[b] += v;
    };
    match &model.front {
        None => {
            for node in 0..n {
                for (slot, m) in g.table.row(node).iter().enumerate() {
                    if let Some(m) = *m {
                        credit(node, m, h0.at2(node, slot).abs(), &mut nodes);
                    }
                }
            }
        }
        Some(base) => {
            let kb = base.k_base();
            let d = base.d();
            let mut a = vec![0.0; n * kb * kb];
            gemm(
                n,
                d,
                kb * kb,
                h0.data(),
                false,
                base.filters.data(),
                false,
                0.0,
                &mut a,
            );
            for node in 0..n {
                let row = g.table.row(node);
                for i in 0..kb.min(row.len()) {
                    for j in 0..kb.min(row.len()) {
                        if let (Some(u), Some(v)) = (row[i], row[j]) {
                            if graph.has_edge(u, v) {
                                credit(u, v, a[node * kb * kb + i * kb + j].abs(), &mut nodes);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((nodes, edges))
}

/// Full explanation of one graph: attention, thresholding, backtracking.
pub fn backtrack(
    model: &Model,
    probe: &AttentionProbe,
    graph: &Graph,
    g: &PreparedGraph,
    threshold: Option<f64>,
) -> Result<(CriticalStructure, Vec<f64>)> {
    let cache = LayerCache::compute(model, g)?;
    let gamma = probe.attention(cache.last().expect("cache holds the last layer"))?;
    let t = threshold.unwrap_or(1.0 / (2.0 * gamma.len() as f64));
    let seeds = select_important(&gamma, Some(t))?;
    let mut seeded = vec![0.0; gamma.len()];
    for &s in &seeds {
        seeded[s] = gamma[s];
    }
    let h0 = backtrack_signed(model, g, &cache, &seeded)?;
    let (node_importance, edge_importance) = importances(model, graph, g, &h0)?;
    Ok((
        CriticalStructure {
            node_importance,
            edge_importance,
            threshold: t,
            seeds,
        },
        gamma,
    ))
}

pub const MIN_WIDTH: f64 = 0.2;
pub const MAX_WIDTH: f64 = 4.0;

fn scale(v: f64, max: f64) -> f64 {
    if max <= 0.0 || v < 1e-6 * max {
        MIN_WIDTH
    } else {
        MIN_WIDTH + (MAX_WIDTH - MIN_WIDTH) * v / max
    }
}

/// Undirected DOT rendering: node `width` and edge `penwidth` grow linearly
/// with importance; attention seeds are filled grey.
pub fn to_dot(cs: &CriticalStructure) -> String {
    let nmax = cs.node_importance.iter().cloned().fold(0.0, f64::max);
    let emax = cs.edge_importance.values().cloned().fold(0.0, f64::max);
    let mut s = String::from("graph critical {\n  node [shape=circle, label=\"\"];\n");
    for (n, &v) in cs.node_importance.iter().enumerate() {
        let fill = if cs.seeds.contains(&n) {
            ", style=filled, fillcolor=grey"
        } else {
            ""
        };
        let _ = writeln!(
            s,
            "  {n} [width={:.6}, importance={v:.6e}{fill}];",
            scale(v, nmax)
        );
    }
    for (&(u, v), &w) in &cs.edge_importance {
        let _ = writeln!(
            s,
            "  {u} -- {v} [penwidth={:.6}, importance={w:.6e}];",
            scale(w, emax)
        );
    }
    s.push_str("}\n");
    s
}

pub fn export_dot(cs: &CriticalStructure, path: &Path) -> Result<()> {
    std::fs::write(path, to_dot(cs)).map_err(|e| Error::io(path, e))
}

pub fn write_node_csv<W: Write>(cs: &CriticalStructure, mut out: W) -> std::io::Result<()> {
    writeln!(out, "node,importance")?;
    for (n, v) in cs.node_importance.iter().enumerate() {
        writeln!(out, "{n},{v:.17e}")?;
    }
    Ok(())
}

pub fn write_edge_csv<W: Write>(cs: &CriticalStructure, mut out: W) -> std::io::Result<()> {
    writeln!(out, "u,v,importance")?;
    for (&(u, v), w) in &cs.edge_importance {
        writeln!(out, "{u},{v},{w:.17e}")?;
    }
    Ok(())
}
