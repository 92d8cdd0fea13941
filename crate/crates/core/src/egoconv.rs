//! Ego-convolution layers, the Patchy-San style base layer, and stacking.
//!
//! Layer `l` stacks, for every node `n`, its own previous-layer row on top of
//! the rows of its `K` selected neighbors into a `(K+1) x D_in` matrix and
//! scores it against each `(K+1) x D_in` filter with a Frobenius inner
//! product. The neighbor table is the same at every depth, so a node's
//! receptive field grows by one hop per layer.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;

use crate::autodiff::{Activation, BatchStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::neighbors::NeighborTable;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

fn fan_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// One ego-convolution: filters `[D_out, K+1, D_in]` and bias `[D_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EgoConvLayer {
    pub filters: Tensor,
    pub bias: Tensor,
}

impl EgoConvLayer {
    /// Filters uniform in `±sqrt(6 / ((K+1) D_in + D_out))`, zero bias.
    pub fn init<R: Rng>(k: usize, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = fan_bound((k + 1) * d_in, d_out);
        EgoConvLayer {
            filters: Tensor::uniform(&[d_out, k + 1, d_in], bound, rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn from_parts(filters: Tensor, bias: Tensor) -> Result<Self> {
        let fs = filters.shape();
        if fs.len() != 3 || bias.shape() != [fs[0]] {
            return Err(Error::Argument(format!(
                "ego-conv filters {fs:?} with bias {:?}",
                bias.shape()
            )));
        }
        Ok(EgoConvLayer { filters, bias })
    }

    pub fn k(&self) -> usize {
        self.filters.shape()[1] - 1
    }

    pub fn d_in(&self) -> usize {
        self.filters.shape()[2]
    }

    pub fn d_out(&self) -> usize {
        self.filters.shape()[0]
    }

    /// `D_out (K+1) D_in + D_out`.
    pub fn param_count(&self) -> usize {
        self.filters.numel() + self.bias.numel()
    }
}

/// Row indices that assemble every node's neighborhood matrix from the
/// previous layer: node `n` contributes `n` itself followed by its `K` slots.
/// `offset` shifts ids when several graphs share one tensor.
pub fn neighborhood_index(t: &NeighborTable, offset: usize) -> Vec<Option<usize>> {
    let mut index = Vec::with_capacity(t.node_count() * (t.k() + 1));
    for n in 0..t.node_count() {
        index.push(Some(n + offset));
        index.extend(t.row(n).iter().map(|s| s.map(|m| m + offset)));
    }
    index
}

/// Records one ego-convolution on `tape`. `h_prev` is `[N, D_in]` and `index`
/// comes from [`neighborhood_index`].
pub fn ego_conv_tape(
    tape: &mut Tape,
    h_prev: Var,
    index: &[Option<usize>],
    k: usize,
    filters: Var,
    bias: Var,
    act: Activation,
) -> Result<Var> {
    let sh = tape.shape(h_prev).to_vec();
    let sf = tape.shape(filters).to_vec();
    if sh.len() != 2 || sf.len() != 3 || sf[1] != k + 1 || sf[2] != sh[1] {
        return Err(Error::Argument(format!(
            "ego-conv of {sh:?} against filters {sf:?} with K = {k}"
        )));
    }
    if !index.len().is_multiple_of(k + 1) {
        return Err(Error::Argument(
            "neighborhood index is not a multiple of K+1".into(),
        ));
    }
    let n = index.len() / (k + 1);
    let stacked = tape.gather_rows(h_prev, index.to_vec())?;
    let stacked = tape.reshape(stacked, vec![n, k + 1, sh[1]])?;
    let z = tape.frobenius_batch(stacked, filters)?;
    let z = tape.add_bias(z, bias)?;
    Ok(tape.activate(z, act))
}

/// Applies a single ego-convolution outside any training context.
pub fn ego_conv_forward(
    h_prev: &Tensor,
    t: &NeighborTable,
    layer: &EgoConvLayer,
    act: Activation,
) -> Result<Tensor> {
    if h_prev.shape().len() != 2 || h_prev.shape()[0] != t.node_count() {
        return Err(Error::Argument(format!(
            "layer input {:?} for a table over {} nodes",
            h_prev.shape(),
            t.node_count()
        )));
    }
    if t.k() != layer.k() {
        return Err(Error::Argument(format!(
            "table has K = {} but the layer expects K = {}",
            t.k(),
            layer.k()
        )));
    }
    let mut tape = Tape::new();
    let h = tape.constant(h_prev.clone());
    let w = tape.constant(layer.filters.clone());
    let b = tape.constant(layer.bias.clone());
    let out = ego_conv_tape(&mut tape, h, &neighborhood_index(t, 0), t.k(), w, b, act)?;
    Ok(tape.value(out).clone())
}

/// Base layer scanning the `K_base x K_base` adjacency among each node's
/// first `K_base` selected neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchySanLayer {
    pub filters: Tensor,
    pub bias: Tensor,
}

impl PatchySanLayer {
    pub fn init<R: Rng>(k_base: usize, d: usize, rng: &mut R) -> Self {
        let bound = fan_bound(k_base * k_base, d);
        PatchySanLayer {
            filters: Tensor::uniform(&[d, k_base, k_base], bound, rng),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn k_base(&self) -> usize {
        self.filters.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.filters.numel() + self.bias.numel()
    }
}

/// `[N, K_base, K_base]` stack of local adjacency matrices. Entry `(i, j)` of
/// node `n`'s matrix is the weight of the edge between its slot-`i` and
/// slot-`j` neighbors; padding rows and columns stay zero.
pub fn patchy_san_input(g: &Graph, t: &NeighborTable, k_base: usize) -> Tensor {
    let kb = k_base;
    let mut data = vec![0.0; g.node_count() * kb * kb];
    for n in 0..g.node_count() {
        let row = t.row(n);
        let block = &mut data[n * kb * kb..(n + 1) * kb * kb];
        for i in 0..kb.min(row.len()) {
            for j in 0..kb.min(row.len()) {
                if let (Some(a), Some(b)) = (row[i], row[j]) {
                    if let Some(w) = g.edge_weight(a, b) {
                        block[i * kb + j] = w;
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.node_count(), kb, kb], data).expect("shape matches")
}

pub fn patchy_san_tape(
    tape: &mut Tape,
    input: Var,
    filters: Var,
    bias: Var,
    act: Activation,
) -> Result<Var> {
    let z = tape.frobenius_batch(input, filters)?;
    let z = tape.add_bias(z, bias)?;
    Ok(tape.activate(z, act))
}

pub fn patchy_san_forward(
    g: &Graph,
    t: &NeighborTable,
    layer: &PatchySanLayer,
    act: Activation,
) -> Result<Tensor> {
    if t.k() < layer.k_base() {
        return Err(Error::Argument(format!(
            "table K = {} is smaller than K_base = {}",
            t.k(),
            layer.k_base()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(patchy_san_input(g, t, layer.k_base()));
    let w = tape.constant(layer.filters.clone());
    let b = tape.constant(layer.bias.clone());
    let out = patchy_san_tape(&mut tape, a, w, b, act)?;
    Ok(tape.value(out).clone())
}

/// Running per-channel statistics for evaluation-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningNorm {
    pub fn new(channels: usize) -> Self {
        RunningNorm {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, stats: &BatchStats) {
        let m = BATCH_NORM_MOMENTUM;
        let correction = if stats.rows > 1 {
            stats.rows as f64 / (stats.rows - 1) as f64
        } else {
            1.0
        };
        for j in 0..self.mean.len() {
            self.mean[j] = (1.0 - m) * self.mean[j] + m * stats.mean[j];
            self.var[j] = (1.0 - m) * self.var[j] + m * stats.var[j] * correction;
        }
    }
}

/// Regularization applied to the input of every ego-convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StackOptions {
    pub activation: Activation,
    pub dropout_rate: f64,
    pub batch_norm: bool,
}

impl Default for StackOptions {
    fn default() -> Self {
        StackOptions {
            activation: Activation::Relu,
            dropout_rate: 0.5,
            batch_norm: true,
        }
    }
}

/// `L` ego-convolutions over one shared neighbor table. A tied stack stores
/// a single layer and applies it at every depth.
#[derive(Clone, Debug, PartialEq)]
pub struct EgoStack {
    layers: Vec<EgoConvLayer>,
    depth: usize,
    tied: bool,
    /// One per depth; buffers, not trainable parameters.
    pub norms: Vec<RunningNorm>,
    pub options: StackOptions,
}

impl EgoStack {
    /// Untied stack of `depth` layers with input width `d_in` and `d` filters each.
    pub fn init<R: Rng>(
        k: usize,
        d_in: usize,
        d: usize,
        depth: usize,
        tied: bool,
        options: StackOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config(
                "an ego stack needs at least one layer".into(),
            ));
        }
        if tied && d_in != d {
            return Err(Error::Config(format!(
                "tied layers need equal input and output width, got D_in = {d_in} and D = {d}"
            )));
        }
        let layers = if tied {
            vec![EgoConvLayer::init(k, d, d, rng)]
        } else {
            (0..depth)
                .map(|l| EgoConvLayer::init(k, if l == 0 { d_in } else { d }, d, rng))
                .collect()
        };
        let norms = (0..depth)
            .map(|l| RunningNorm::new(if l == 0 { d_in } else { d }))
            .collect();
        Ok(EgoStack {
            layers,
            depth,
            tied,
            norms,
            options,
        })
    }

    /// Assembles a stack from explicit layers. A tied stack takes exactly one.
    pub fn from_layers(
        layers: Vec<EgoConvLayer>,
        depth: usize,
        tied: bool,
        options: StackOptions,
    ) -> Result<Self> {
        if depth == 0 || layers.is_empty() {
            return Err(Error::Config(
                "an ego stack needs at least one layer".into(),
            ));
        }
        if tied {
            if layers.len() != 1 {
                return Err(Error::Config(
                    "a tied stack stores exactly one layer".into(),
                ));
            }
            if layers[0].d_in() != layers[0].d_out() {
                return Err(Error::Config(format!(
                    "tied layers need equal input and output width, got D_in = {} and D = {}",
                    layers[0].d_in(),
                    layers[0].d_out()
                )));
            }
        } else if layers.len() != depth {
            return Err(Error::Config(format!(
                "{} layers for depth {depth}",
                layers.len()
            )));
        }
        for l in 1..depth {
            let (prev, cur) = (
                Self::pick(&layers, tied, l - 1),
                Self::pick(&layers, tied, l),
            );
            if prev.d_out() != cur.d_in() || prev.k() != cur.k() {
                return Err(Error::Config(format!(
                    "layer {} does not fit layer {}",
                    l + 1,
                    l
                )));
            }
        }
        let norms = (0..depth)
            .map(|l| RunningNorm::new(Self::pick(&layers, tied, l).d_in()))
            .collect();
        Ok(EgoStack {
            layers,
            depth,
            tied,
            norms,
            options,
        })
    }

    fn pick(layers: &[EgoConvLayer], tied: bool, l: usize) -> &EgoConvLayer {
        if tied {
            &layers[0]
        } else {
            &layers[l]
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn is_tied(&self) -> bool {
        self.tied
    }

    pub fn k(&self) -> usize {
        self.layers[0].k()
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers[0].d_out()
    }

    /// Layer applied at depth `l` (0-based).
    pub fn layer(&self, l: usize) -> &EgoConvLayer {
        Self::pick(&self.layers, self.tied, l)
    }

    /// Distinct parameter sets: one when tied, `depth` otherwise.
    pub fn unique_layers(&self) -> &[EgoConvLayer] {
        &self.layers
    }

    pub fn unique_layers_mut(&mut self) -> &mut [EgoConvLayer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(EgoConvLayer::param_count).sum()
    }

    /// Registers the trainable tensors on `tape`: `(filters, bias)` per unique layer.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(&l.filters), tape.param(&l.bias))
                } else {
                    (
                        tape.constant(l.filters.clone()),
                        tape.constant(l.bias.clone()),
                    )
                }
            })
            .collect()
    }

    /// Records the full stack. Each layer normalizes and drops out its input,
    /// then convolves and activates. Returns every layer's output and, in
    /// training mode, the batch statistics seen at each depth.
    pub fn forward_tape<R: Rng>(
        &self,
        tape: &mut Tape,
        h0: Var,
        index: &[Option<usize>],
        vars: &[(Var, Var)],
        train: bool,
        rng: &mut R,
    ) -> Result<(Vec<Var>, Vec<BatchStats>)> {
        let mut h = h0;
        let mut outputs = Vec::with_capacity(self.depth);
        let mut stats = Vec::new();
        for l in 0..self.depth {
            let (w, b) = vars[if self.tied { 0 } else { l }];
            let mut x = h;
            if self.options.batch_norm {
                x = if train {
                    let (y, s) = tape.batch_norm_train(x, BATCH_NORM_EPS)?;
                    stats.push(s);
                    y
                } else {
                    let n = &self.norms[l];
                    tape.batch_norm_eval(x, &n.mean, &n.var, BATCH_NORM_EPS)?
                };
            }
            x = tape.dropout(x, self.options.dropout_rate, train, rng)?;
            h = ego_conv_tape(tape, x, index, self.k(), w, b, self.options.activation)?;
            outputs.push(h);
        }
        Ok((outputs, stats))
    }
}

/// Runs the stack on one graph and returns `H^(1)..H^(L)`.
pub fn stack_forward<R: Rng>(
    h0: &Tensor,
    t: &NeighborTable,
    stack: &EgoStack,
    train: bool,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    if h0.shape().len() != 2 || h0.shape()[0] != t.node_count() || h0.shape()[1] != stack.d_in() {
        return Err(Error::Argument(format!(
            "stack input {:?} for {} nodes and D_in = {}",
            h0.shape(),
            t.node_count(),
            stack.d_in()
        )));
    }
    if t.k() != stack.k() {
        return Err(Error::Argument(format!(
            "table K = {} but stack K = {}",
            t.k(),
            stack.k()
        )));
    }
    let mut tape = Tape::new();
    let h = tape.constant(h0.clone());
    let vars = stack.register(&mut tape, false);
    let (outs, _) =
        stack.forward_tape(&mut tape, h, &neighborhood_index(t, 0), &vars, train, rng)?;
    Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Nodes whose input rows can influence node `n` after `l` layers: everything
/// reachable from `n` by at most `l` steps from a node to one of its slots.
pub fn receptive_field(t: &NeighborTable, n: NodeId, l: usize) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::from([n]);
    let mut queue = VecDeque::from([(n, 0usize)]);
    let mut depth = vec![usize::MAX; t.node_count()];
    depth[n] = 0;
    while let Some((u, d)) = queue.pop_front() {
        if d == l {
            continue;
        }
        for m in t.selected(u) {
            if d + 1 < depth[m] {
                depth[m] = d + 1;
                seen.insert(m);
                queue.push_back((m, d + 1));
            }
        }
    }
    seen
}
