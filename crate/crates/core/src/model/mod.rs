//! Full network: optional base layer, ego-convolution stack, ranked-node
//! readout and a dense classification head, plus training, cross-validation
//! and a binary parameter container.
//!
//! Graphs of different sizes feed a fixed-width head by ranking nodes with
//! [`node_ranking`] and keeping the first `node_budget` rows of the last
//! layer, zero-padding smaller graphs.

mod config;
mod cv;
mod io;
mod train;

pub use config::{Architecture, FrontEnd, ModelConfig, TrainingConfig};
pub use cv::{
    cross_validate, default_node_budget, stratified_folds, write_metrics_csv, CvReport, CvRun,
    MetricRow,
};
pub use train::{EpochMetrics, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Tape, Tensor, Var};
use crate::egoconv::{
    neighborhood_index, patchy_san_input, patchy_san_tape, EgoStack, PatchySanLayer, StackOptions,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::neighbors::{
    initial_embedding, node_ranking, select_neighbors, wl_refine, NeighborTable,
};

/// Per-graph preprocessing that does not depend on model weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedGraph {
    pub table: NeighborTable,
    /// `[N, K]` adjacency rows, or `[N, K_base, K_base]` local adjacency
    /// blocks for the base layer.
    pub input: Tensor,
    /// Global node order used by the readout.
    pub ranking: Vec<NodeId>,
}

impl PreparedGraph {
    pub fn new(g: &Graph, arch: &Architecture) -> Result<Self> {
        if g.node_count() == 0 {
            return Err(Error::Argument(
                "cannot classify a graph with no nodes".into(),
            ));
        }
        let coloring = wl_refine(g, arch.wl_iterations);
        let table = select_neighbors(g, arch.neighbors, &coloring);
        let input = match arch.front_end {
            FrontEnd::Adjacency => initial_embedding(g, &table),
            FrontEnd::PatchySan { k_base, .. } => patchy_san_input(g, &table, k_base),
        };
        Ok(PreparedGraph {
            table,
            input,
            ranking: node_ranking(&coloring),
        })
    }

    pub fn node_count(&self) -> usize {
        self.table.node_count()
    }
}

pub fn prepare_all(graphs: &[Graph], arch: &Architecture) -> Result<Vec<PreparedGraph>> {
    graphs.iter().map(|g| PreparedGraph::new(g, arch)).collect()
}

/// One fully connected layer: `weight` is `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        DenseLayer {
            weight: Tensor::uniform(&[d_in, d_out], bound, rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }
}

/// Tape handles for every trainable tensor, in [`Model::params`] order.
pub(crate) struct ParamVars {
    front: Option<(Var, Var)>,
    stack: Vec<(Var, Var)>,
    head: Vec<(Var, Var)>,
}

impl ParamVars {
    pub(crate) fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in self.front.iter().chain(&self.stack).chain(&self.head) {
            out.push(*w);
            out.push(*b);
        }
        out
    }
}

/// What one recorded forward pass produced.
pub(crate) struct BatchForward {
    pub logits: Var,
    /// Stack input `H^(0)` over the union.
    pub input: Var,
    /// Stack outputs `H^(1)..H^(L)` over the disjoint union of the batch.
    pub layers: Vec<Var>,
    pub stats: Vec<BatchStats>,
    pub vars: ParamVars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    num_classes: usize,
    node_budget: usize,
    pub front: Option<PatchySanLayer>,
    pub stack: EgoStack,
    pub head: Vec<DenseLayer>,
}

impl Model {
    /// Initializes every tensor from `seed`.
    pub fn build(
        config: &ModelConfig,
        num_classes: usize,
        node_budget: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if node_budget == 0 {
            return Err(Error::Config("node_budget must be at least 1".into()));
        }
        let a = &config.arch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let front = match a.front_end {
            FrontEnd::Adjacency => None,
            FrontEnd::PatchySan { k_base, channels } => {
                Some(PatchySanLayer::init(k_base, channels, &mut rng))
            }
        };
        let options = StackOptions {
            activation: a.activation,
            dropout_rate: a.dropout,
            batch_norm: a.batch_norm,
        };
        let stack = EgoStack::init(
            a.neighbors,
            config.stack_input_width(),
            a.channels,
            a.depth,
            a.tied,
            options,
            &mut rng,
        )?;
        let mut widths = vec![node_budget * a.channels];
        widths.extend(&a.dense);
        widths.push(num_classes);
        let head = widths
            .windows(2)
            .map(|w| DenseLayer::init(w[0], w[1], &mut rng))
            .collect();
        Ok(Model {
            config: config.clone(),
            num_classes,
            node_budget,
            front,
            stack,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn node_budget(&self) -> usize {
        self.node_budget
    }

    /// Closed-form trainable parameter count.
    pub fn expected_param_count(
        config: &ModelConfig,
        num_classes: usize,
        node_budget: usize,
    ) -> usize {
        let a = &config.arch;
        let (k, d) = (a.neighbors, a.channels);
        let front = match a.front_end {
            FrontEnd::Adjacency => 0,
            FrontEnd::PatchySan { k_base, channels } => channels * k_base * k_base + channels,
        };
        let d_in = config.stack_input_width();
        let first = d * (k + 1) * d_in + d;
        let rest = d * (k + 1) * d + d;
        let stack = if a.tied {
            first
        } else {
            first + (a.depth - 1) * rest
        };
        let mut widths = vec![node_budget * d];
        widths.extend(&a.dense);
        widths.push(num_classes);
        let head: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        front + stack + head
    }

    /// Trainable tensors: base layer, unique stack layers, then head.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let Some(f) = &self.front {
            out.extend([&f.filters, &f.bias]);
        }
        for l in self.stack.unique_layers() {
            out.extend([&l.filters, &l.bias]);
        }
        for l in &self.head {
            out.extend([&l.weight, &l.bias]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(f) = &mut self.front {
            out.extend([&mut f.filters, &mut f.bias]);
        }
        for l in self.stack.unique_layers_mut() {
            out.extend([&mut l.filters, &mut l.bias]);
        }
        for l in &mut self.head {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    fn check_prepared(&self, g: &PreparedGraph) -> Result<()> {
        if g.table.k() != self.stack.k() {
            return Err(Error::Argument(format!(
                "graph prepared with K = {} for a model with K = {}",
                g.table.k(),
                self.stack.k()
            )));
        }
        let expect_rank = match &self.front {
            None => 2,
            Some(_) => 3,
        };
        if g.input.shape().len() != expect_rank {
            return Err(Error::Argument(
                "graph prepared for a different front end".into(),
            ));
        }
        Ok(())
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        };
        let front = self.front.as_ref().map(|f| (reg(&f.filters), reg(&f.bias)));
        let head = self
            .head
            .iter()
            .map(|l| (reg(&l.weight), reg(&l.bias)))
            .collect();
        let stack = self.stack.register(tape, trainable);
        ParamVars { front, stack, head }
    }

    /// Records a forward pass over several graphs at once. Batch
    /// normalization sees the nodes of all graphs together.
    pub(crate) fn forward_batch<R: Rng>(
        &self,
        tape: &mut Tape,
        graphs: &[&PreparedGraph],
        trainable: bool,
        train: bool,
        rng: &mut R,
    ) -> Result<BatchForward> {
        if graphs.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let vars = self.register(tape, trainable);
        let mut offsets = Vec::with_capacity(graphs.len());
        let mut index = Vec::new();
        let mut input = Vec::new();
        let mut total = 0;
        for g in graphs {
            self.check_prepared(g)?;
            offsets.push(total);
            index.extend(neighborhood_index(&g.table, total));
            input.extend_from_slice(g.input.data());
            total += g.node_count();
        }
        let mut shape = g_shape(graphs[0]);
        shape[0] = total;
        let x = tape.constant(Tensor::new(shape, input)?);
        let h0 = match (&self.front, vars.front) {
            (Some(_), Some((w, b))) => patchy_san_tape(tape, x, w, b, self.config.arch.activation)?,
            _ => x,
        };
        let (layers, stats) = self
            .stack
            .forward_tape(tape, h0, &index, &vars.stack, train, rng)?;
        let last = *layers.last().expect("depth is at least 1");

        let budget = self.node_budget;
        let mut readout = Vec::with_capacity(graphs.len() * budget);
        for (g, &off) in graphs.iter().zip(&offsets) {
            readout.extend(g.ranking.iter().take(budget).map(|&n| Some(n + off)));
            readout.extend(std::iter::repeat_n(None, budget.saturating_sub(g.node_count())));
        }
        let z = tape.gather_rows(last, readout)?;
        let mut z = tape.reshape(z, vec![graphs.len(), budget * self.stack.d_out()])?;
        let n_head = self.head.len();
        for (i, &(w, b)) in vars.head.iter().enumerate() {
            z = tape.matmul(z, w)?;
            z = tape.add_bias(z, b)?;
            if i + 1 < n_head {
                z = tape.activate(z, self.config.arch.activation);
                z = tape.dropout(z, self.config.arch.dropout, train, rng)?;
            }
        }
        Ok(BatchForward {
            logits: z,
            input: h0,
            layers,
            stats,
            vars,
        })
    }

    /// Class logits for one graph.
    pub fn forward_graph<R: Rng>(
        &self,
        g: &PreparedGraph,
        train: bool,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let f = self.forward_batch(&mut tape, &[g], false, train, rng)?;
        Ok(tape.value(f.logits).data().to_vec())
    }

    /// Evaluation-mode logits, `[B, C]` row-major, computed in chunks of `batch`.
    pub fn logits(&self, graphs: &[PreparedGraph]) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(graphs.len());
        let refs: Vec<&PreparedGraph> = graphs.iter().collect();
        for chunk in refs.chunks(self.config.training.batch_size.max(1)) {
            let mut tape = Tape::new();
            let f = self.forward_batch(&mut tape, chunk, false, false, &mut rng)?;
            let v = tape.value(f.logits);
            out.extend((0..chunk.len()).map(|i| v.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn predict(&self, graphs: &[PreparedGraph]) -> Result<Vec<usize>> {
        Ok(self.logits(graphs)?.iter().map(|l| argmax(l)).collect())
    }

    /// Mean cross-entropy and accuracy in evaluation mode.
    pub fn evaluate(&self, graphs: &[PreparedGraph], labels: &[usize]) -> Result<(f64, f64)> {
        if graphs.len() != labels.len() || graphs.is_empty() {
            return Err(Error::Argument(format!(
                "{} graphs against {} labels",
                graphs.len(),
                labels.len()
            )));
        }
        let logits = self.logits(graphs)?;
        let mut loss = 0.0;
        let mut correct = 0;
        for (l, &y) in logits.iter().zip(labels) {
            if y >= self.num_classes {
                return Err(Error::Argument(format!(
                    "label {y} for {} classes",
                    self.num_classes
                )));
            }
            loss += log_sum_exp(l) - l[y];
            correct += usize::from(argmax(l) == y);
        }
        Ok((
            loss / labels.len() as f64,
            correct as f64 / labels.len() as f64,
        ))
    }

    /// Evaluation-mode stack outputs for one graph: the stack input
    /// `H^(0)` followed by `H^(1)..H^(L)`.
    pub fn embed(&self, g: &PreparedGraph) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = self.forward_batch(&mut tape, &[g], false, false, &mut rng)?;
        let mut out = vec![tape.value(f.input).clone()];
        out.extend(f.layers.iter().map(|&v| tape.value(v).clone()));
        Ok(out)
    }
}

fn g_shape(g: &PreparedGraph) -> Vec<usize> {
    g.input.shape().to_vec()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
