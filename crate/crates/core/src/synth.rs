//! Synthetic datasets with known critical structures: alkanes and alcohols,
//! methyl-branched isomers, and stochastic Kronecker graphs.
//!
//! Compound node labels are atomic numbers (H = 1, C = 6, O = 8). Every
//! generated compound has its vertex ids shuffled by a seeded permutation.

use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Dataset, Graph, NodeId};

pub const HYDROGEN: i64 = 1;
pub const CARBON: i64 = 6;
pub const OXYGEN: i64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Alkane,
    /// Alkane with one terminal hydrogen replaced by a hydroxyl group.
    Alcohol,
    /// Main chain with a methyl branch on carbon `branch` (1-based).
    Isomer {
        branch: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompoundSpec {
    pub carbons: usize,
    pub variant: Variant,
    pub hydrogens: bool,
    pub permutation_seed: u64,
}

struct Builder {
    labels: Vec<i64>,
    edges: Vec<(NodeId, NodeId)>,
}

impl Builder {
    fn atom(&mut self, label: i64) -> NodeId {
        self.labels.push(label);
        self.labels.len() - 1
    }

    fn bond(&mut self, a: NodeId, b: NodeId) {
        self.edges.push((a, b));
    }

    fn degree(&self, n: NodeId) -> usize {
        self.edges
            .iter()
            .filter(|&&(a, b)| a == n || b == n)
            .count()
    }
}

/// Generates one compound.
pub fn gen_compound(spec: &CompoundSpec) -> Result<Graph> {
    let c = spec.carbons;
    if c == 0 {
        return Err(Error::Argument(
            "a compound needs at least one carbon".into(),
        ));
    }
    let mut b = Builder {
        labels: Vec::new(),
        edges: Vec::new(),
    };
    let chain: Vec<NodeId> = (0..c).map(|_| b.atom(CARBON)).collect();
    for w in chain.windows(2) {
        b.bond(w[0], w[1]);
    }
    match spec.variant {
        Variant::Alkane => {}
        Variant::Alcohol => {
            let o = b.atom(OXYGEN);
            b.bond(chain[0], o);
            let h = b.atom(HYDROGEN);
            b.bond(o, h);
        }
        Variant::Isomer { branch } => {
            if branch == 0 || branch > c {
                return Err(Error::Argument(format!(
                    "branch position {branch} outside 1..={c}"
                )));
            }
            let methyl = b.atom(CARBON);
            b.bond(chain[branch - 1], methyl);
        }
    }
    if spec.hydrogens {
        let carbons: Vec<NodeId> = (0..b.labels.len())
            .filter(|&n| b.labels[n] == CARBON)
            .collect();
        for cn in carbons {
            for _ in b.degree(cn)..4 {
                let h = b.atom(HYDROGEN);
                b.bond(cn, h);
            }
        }
    }
    let n = b.labels.len();
    let g = Graph::from_edges(n, b.edges)?.with_node_labels(b.labels)?;
    let mut perm: Vec<NodeId> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.permutation_seed));
    g.permuted(&perm)
}

pub fn gen_alkane(carbons: usize, hydrogens: bool, permutation_seed: u64) -> Result<Graph> {
    gen_compound(&CompoundSpec {
        carbons,
        variant: Variant::Alkane,
        hydrogens,
        permutation_seed,
    })
}

pub fn gen_alcohol(carbons: usize, hydrogens: bool, permutation_seed: u64) -> Result<Graph> {
    gen_compound(&CompoundSpec {
        carbons,
        variant: Variant::Alcohol,
        hydrogens,
        permutation_seed,
    })
}

pub fn gen_isomer(
    chain: usize,
    branch: usize,
    hydrogens: bool,
    permutation_seed: u64,
) -> Result<Graph> {
    gen_compound(&CompoundSpec {
        carbons: chain,
        variant: Variant::Isomer { branch },
        hydrogens,
        permutation_seed,
    })
}

/// Stochastic Kronecker graph on `s^power` nodes. Each ordered pair `i != j`
/// becomes an edge with probability equal to the `power`-fold Kronecker
/// product entry; the result is symmetrized.
pub fn gen_kronecker(initiator: &[Vec<f64>], power: usize, seed: u64) -> Result<Graph> {
    let s = initiator.len();
    if s == 0 || initiator.iter().any(|r| r.len() != s) {
        return Err(Error::Argument(
            "initiator must be a non-empty square matrix".into(),
        ));
    }
    if initiator.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Argument(
            "initiator entries must lie in [0, 1]".into(),
        ));
    }
    if power == 0 {
        return Err(Error::Argument("power must be at least 1".into()));
    }
    let n = u32::try_from(power)
        .ok()
        .and_then(|p| s.checked_pow(p))
        .filter(|&n| n <= 1 << 16)
        .ok_or_else(|| Error::Argument(format!("{s}^{power} nodes is too many")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (mut a, mut b, mut p) = (i, j, 1.0);
            for _ in 0..power {
                p *= initiator[a % s][b % s];
                a /= s;
                b /= s;
            }
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, edges)
}

/// Settings shared by the compound dataset builders.
#[derive(Clone, Debug, PartialEq)]
pub struct CompoundConfig {
    /// Carbon counts (alcohols) or main-chain lengths (isomers).
    pub sizes: RangeInclusive<usize>,
    pub per_class: usize,
    pub hydrogens: bool,
    pub seed: u64,
}

impl Default for CompoundConfig {
    fn default() -> Self {
        CompoundConfig {
            sizes: 6..=20,
            per_class: 200,
            hydrogens: true,
            seed: 0,
        }
    }
}

fn check_range(sizes: &RangeInclusive<usize>) -> Result<()> {
    if sizes.is_empty() || *sizes.start() == 0 {
        return Err(Error::Argument(format!(
            "size range {sizes:?} is empty or starts at 0"
        )));
    }
    Ok(())
}

/// Class 0: alkanes, class 1: alcohols; carbon counts uniform over `sizes`.
pub fn alcohol_dataset(cfg: &CompoundConfig) -> Result<Dataset> {
    check_range(&cfg.sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut graphs = Vec::with_capacity(2 * cfg.per_class);
    let mut labels = Vec::with_capacity(2 * cfg.per_class);
    for _ in 0..cfg.per_class {
        for (class, variant) in [(0, Variant::Alkane), (1, Variant::Alcohol)] {
            graphs.push(gen_compound(&CompoundSpec {
                carbons: rng.gen_range(cfg.sizes.clone()),
                variant,
                hydrogens: cfg.hydrogens,
                permutation_seed: rng.gen(),
            })?);
            labels.push(class);
        }
    }
    Dataset::new("alcohol", graphs, labels)
}

/// Class 0: symmetric isomers (methyl on the central carbon), class 1:
/// asymmetric ones (methyl on any other inner carbon). Chain lengths are
/// the odd values in `sizes`, so a center always exists.
pub fn isomer_dataset(cfg: &CompoundConfig) -> Result<Dataset> {
    check_range(&cfg.sizes)?;
    let lengths: Vec<usize> = cfg
        .sizes
        .clone()
        .filter(|c| c % 2 == 1 && *c >= 5)
        .collect();
    if lengths.is_empty() {
        return Err(Error::Argument(format!(
            "size range {:?} holds no odd chain length of at least 5",
            cfg.sizes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut graphs = Vec::with_capacity(2 * cfg.per_class);
    let mut labels = Vec::with_capacity(2 * cfg.per_class);
    for _ in 0..cfg.per_class {
        for class in [0, 1] {
            let c = *lengths.choose(&mut rng).expect("non-empty");
            let center = c.div_ceil(2);
            let branch = if class == 0 {
                center
            } else {
                let off: Vec<usize> = (2..c).filter(|&p| p != center).collect();
                *off.choose(&mut rng)
                    .expect("c >= 5 leaves an off-center position")
            };
            graphs.push(gen_isomer(c, branch, cfg.hydrogens, rng.gen())?);
            labels.push(class);
        }
    }
    Dataset::new("isomer", graphs, labels)
}

/// Both compound tasks from one configuration.
pub fn build_compound_datasets(
    alcohols: &CompoundConfig,
    isomers: &CompoundConfig,
) -> Result<(Dataset, Dataset)> {
    Ok((alcohol_dataset(alcohols)?, isomer_dataset(isomers)?))
}

/// Two scale-free classes from different initiators.
pub const KRONECKER_INITIATORS: [[[f64; 2]; 2]; 2] =
    [[[0.9, 0.5], [0.5, 0.1]], [[0.9, 0.6], [0.6, 0.2]]];

pub fn kronecker_dataset(per_class: usize, power: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(2 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    for _ in 0..per_class {
        for (class, init) in KRONECKER_INITIATORS.iter().enumerate() {
            let init: Vec<Vec<f64>> = init.iter().map(|r| r.to_vec()).collect();
            graphs.push(gen_kronecker(&init, power, rng.gen())?);
            labels.push(class);
        }
    }
    Dataset::new("kronecker", graphs, labels)
}
