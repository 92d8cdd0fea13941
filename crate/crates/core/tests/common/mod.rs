//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::BTreeSet;

use egograph::autodiff::{finite_diff_check, Activation, Tensor};
use egograph::egoconv::EgoConvLayer;
use egograph::model::{Model, ModelConfig, PreparedGraph};
use egograph::neighbors::NeighborTable;
use egograph::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Erdős–Rényi style graph with edge probability `p`.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, p: f64) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::from_edges(n, edges).unwrap()
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Tanh => x.tanh(),
        Activation::Identity => x,
    }
}

/// Builds every node's `(K+1) x D_in` matrix explicitly and scores it
/// against each filter with nested loops.
pub fn explicit_ego_conv(
    h: &Tensor,
    t: &NeighborTable,
    layer: &EgoConvLayer,
    a: Activation,
) -> Vec<Vec<f64>> {
    let (k, d_in, d_out) = (t.k(), layer.d_in(), layer.d_out());
    let w = layer.filters.data();
    (0..t.node_count())
        .map(|n| {
            let mut e = vec![vec![0.0; d_in]; k + 1];
            e[0] = h.row(n).to_vec();
            for s in 0..k {
                if let Some(m) = t.slot(n, s) {
                    e[s + 1] = h.row(m).to_vec();
                }
            }
            (0..d_out)
                .map(|d| {
                    let mut z = layer.bias.data()[d];
                    for (r, row) in e.iter().enumerate() {
                        for (c, v) in row.iter().enumerate() {
                            z += v * w[(d * (k + 1) + r) * d_in + c];
                        }
                    }
                    act(a, z)
                })
                .collect()
        })
        .collect()
}

/// Set closure: `S_0 = {n}`, `S_{i+1} = S_i ∪ slots(S_i)`.
pub fn closure_receptive_field(t: &NeighborTable, n: usize, l: usize) -> BTreeSet<usize> {
    let mut s = BTreeSet::from([n]);
    for _ in 0..l {
        let mut next = s.clone();
        for &u in &s {
            next.extend(t.selected(u));
        }
        s = next;
    }
    s
}

/// Backtracking search for an isomorphism `g1 -> g2` preserving node
/// labels, optionally forcing `a -> b`.
pub fn find_isomorphism(
    g1: &Graph,
    g2: &Graph,
    forced: Option<(usize, usize)>,
) -> Option<Vec<usize>> {
    let n = g1.node_count();
    if n != g2.node_count() || g1.edge_count() != g2.edge_count() {
        return None;
    }
    let label = |g: &Graph, i: usize| g.node_labels().map_or(0, |l| l[i]);
    let compatible =
        |u: usize, v: usize| g1.degree(u) == g2.degree(v) && label(g1, u) == label(g2, v);
    // Visit g1 in BFS order so every new node has mapped neighbors.
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    let starts: Vec<usize> = forced.map(|(a, _)| a).into_iter().chain(0..n).collect();
    for s in starts {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut q = std::collections::VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            order.push(u);
            for &v in g1.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    q.push_back(v);
                }
            }
        }
    }
    let mut map = vec![usize::MAX; n];
    let mut used = vec![false; n];
    fn go(
        i: usize,
        order: &[usize],
        map: &mut Vec<usize>,
        used: &mut Vec<bool>,
        g1: &Graph,
        g2: &Graph,
        forced: Option<(usize, usize)>,
        compatible: &dyn Fn(usize, usize) -> bool,
    ) -> bool {
        if i == order.len() {
            return true;
        }
        let u = order[i];
        let candidates: Vec<usize> = match forced {
            Some((a, b)) if a == u => vec![b],
            _ => (0..g2.node_count()).collect(),
        };
        for v in candidates {
            if used[v] || !compatible(u, v) {
                continue;
            }
            let ok = g1
                .neighbors(u)
                .iter()
                .filter(|&&w| map[w] != usize::MAX)
                .all(|&w| g2.has_edge(v, map[w]));
            let mapped_nbrs = g1
                .neighbors(u)
                .iter()
                .filter(|&&w| map[w] != usize::MAX)
                .count();
            let v_mapped_nbrs = g2.neighbors(v).iter().filter(|&&x| used[x]).count();
            if !ok || mapped_nbrs != v_mapped_nbrs {
                continue;
            }
            map[u] = v;
            used[v] = true;
            if go(i + 1, order, map, used, g1, g2, forced, compatible) {
                return true;
            }
            map[u] = usize::MAX;
            used[v] = false;
        }
        false
    }
    if go(0, &order, &mut map, &mut used, g1, g2, forced, &compatible) {
        Some(map)
    } else {
        None
    }
}

/// Orbits of the automorphism group, by trying every forced pair.
pub fn automorphism_orbits(g: &Graph) -> Vec<BTreeSet<usize>> {
    let n = g.node_count();
    let mut orbit_of = vec![usize::MAX; n];
    let mut orbits: Vec<BTreeSet<usize>> = Vec::new();
    for a in 0..n {
        if orbit_of[a] != usize::MAX {
            continue;
        }
        let mut o = BTreeSet::from([a]);
        for b in a + 1..n {
            if orbit_of[b] == usize::MAX && find_isomorphism(g, g, Some((a, b))).is_some() {
                o.insert(b);
            }
        }
        for &m in &o {
            orbit_of[m] = orbits.len();
        }
        orbits.push(o);
    }
    orbits
}

/// Two ego layers, K = 3, D = 4, dropout off.
pub fn desk_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.arch.neighbors = 3;
    c.arch.depth = 2;
    c.arch.channels = 4;
    c.arch.dense = vec![6];
    c.arch.dropout = 0.0;
    c.arch.wl_iterations = 4;
    c
}

/// Largest relative error of the full model gradient against central
/// differences, on three random graphs of at most 10 nodes.
pub fn grad_check_model(c: &ModelConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs: Vec<PreparedGraph> = (0..3)
        .map(|_| {
            let n = rng.gen_range(4..=10);
            PreparedGraph::new(&random_graph(&mut rng, n, 0.4), &c.arch).unwrap()
        })
        .collect();
    let refs: Vec<&PreparedGraph> = graphs.iter().collect();
    let labels = [0, 1, 1];
    let mut m = Model::build(c, 2, 6, seed).unwrap();
    for t in m.params_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let start: Vec<Tensor> = m.params().into_iter().cloned().collect();
    let report = finite_diff_check(&start, 1e-5, |ps| {
        let mut mm = m.clone();
        for (dst, src) in mm.params_mut().into_iter().zip(ps) {
            *dst = src.clone();
        }
        mm.loss_and_gradients(&refs, &labels, true, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
    });
    report.max_rel_error
}
