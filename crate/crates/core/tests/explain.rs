mod common;

use std::collections::BTreeMap;

use common::*;
use egograph::critical::*;
use egograph::egoconv::receptive_field;
use egograph::model::{FrontEnd, Model, ModelConfig, PreparedGraph};
use egograph::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(depth: usize) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.arch.neighbors = 2;
    c.arch.depth = depth;
    c.arch.channels = 3;
    c.arch.dense = vec![];
    c
}

#[test]
fn single_layer_matches_hand_unrolled_formula() {
    // 4 nodes: a triangle 0-1-2 with a pendant 3 on node 2.
    let g = Graph::from_edges(4, [(0, 1), (1, 2), (0, 2), (2, 3)]).unwrap();
    let c = config(1);
    let m = Model::build(&c, 2, 4, 7).unwrap();
    let p = PreparedGraph::new(&g, &c.arch).unwrap();
    let cache = LayerCache::compute(&m, &p).unwrap();
    let gamma = [0.1, 0.4, 0.3, 0.2];
    let h0 = backtrack_signed(&m, &p, &cache, &gamma).unwrap();

    let h1 = &cache.outputs[1];
    let w = m.stack.layer(0).filters.data();
    let (k, d_in, d_out) = (2, 2, 3);
    let mut expect = vec![vec![0.0; d_in]; 4];
    for n in 0..4 {
        for d in 0..d_out {
            let coef = gamma[n] * h1.at2(n, d);
            for r in 0..=k {
                let target = if r == 0 {
                    Some(n)
                } else {
                    p.table.slot(n, r - 1)
                };
                if let Some(t) = target {
                    for col in 0..d_in {
                        expect[t][col] += coef * w[(d * (k + 1) + r) * d_in + col];
                    }
                }
            }
        }
    }
    for n in 0..4 {
        for col in 0..d_in {
            assert!((h0.at2(n, col) - expect[n][col]).abs() < 1e-14);
        }
    }

    let (_, edges) = importances(&m, &g, &p, &h0).unwrap();
    let mut expect_edges: BTreeMap<(usize, usize), f64> =
        g.edges().iter().map(|&e| (e, 0.0)).collect();
    for n in 0..4 {
        for s in 0..k {
            if let Some(t) = p.table.slot(n, s) {
                *expect_edges.get_mut(&(n.min(t), n.max(t))).unwrap() += expect[n][s].abs();
            }
        }
    }
    for (e, v) in &expect_edges {
        assert!((edges[e] - v).abs() < 1e-14);
    }
}

#[test]
fn backtracking_is_linear_in_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for front in [
        FrontEnd::Adjacency,
        FrontEnd::PatchySan {
            k_base: 2,
            channels: 3,
        },
    ] {
        let mut c = config(3);
        c.arch.front_end = front;
        let m = Model::build(&c, 2, 5, 1).unwrap();
        let g = random_graph(&mut rng, 12, 0.3);
        let p = PreparedGraph::new(&g, &c.arch).unwrap();
        let cache = LayerCache::compute(&m, &p).unwrap();
        let g1: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g2: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let a = backtrack_signed(&m, &p, &cache, &g1).unwrap();
        let b = backtrack_signed(&m, &p, &cache, &g2).unwrap();
        let s = backtrack_signed(&m, &p, &cache, &sum).unwrap();
        for i in 0..s.numel() {
            assert!((s.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-12);
        }
        let scaled: Vec<f64> = g1.iter().map(|x| 2.5 * x).collect();
        let t = backtrack_signed(&m, &p, &cache, &scaled).unwrap();
        for i in 0..t.numel() {
            assert!((t.data()[i] - 2.5 * a.data()[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn importance_stays_near_the_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let c = config(2);
    let m = Model::build(&c, 2, 5, 2).unwrap();
    for _ in 0..10 {
        let g = random_graph(&mut rng, 15, 0.15);
        let p = PreparedGraph::new(&g, &c.arch).unwrap();
        let cache = LayerCache::compute(&m, &p).unwrap();
        for seed in 0..15 {
            let mut gamma = vec![0.0; 15];
            gamma[seed] = 1.0;
            let h0 = backtrack_signed(&m, &p, &cache, &gamma).unwrap();
            let rows = receptive_field(&p.table, seed, 2);
            for n in 0..15 {
                if !rows.contains(&n) {
                    assert!(h0.row(n).iter().all(|&v| v == 0.0));
                }
            }
            let wider = receptive_field(&p.table, seed, 3);
            let (nodes, _) = importances(&m, &g, &p, &h0).unwrap();
            for (n, v) in nodes.iter().enumerate() {
                if *v > 0.0 {
                    assert!(wider.contains(&n));
                }
            }
        }
    }
}

#[test]
fn probe_training_leaves_model_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let c = config(2);
    let m = Model::build(&c, 2, 5, 3).unwrap();
    let before = m.to_bytes();
    let graphs: Vec<PreparedGraph> = (0..8)
        .map(|_| PreparedGraph::new(&random_graph(&mut rng, 8, 0.3), &c.arch).unwrap())
        .collect();
    let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
    let probe = fit_attention_probe(&m, &graphs, &labels, &ProbeConfig::default()).unwrap();
    assert_eq!(m.to_bytes(), before);
    for g in &graphs {
        let gamma = probe.attention(&m.embed(g).unwrap()[2]).unwrap();
        assert!(gamma.iter().all(|&v| v >= 0.0));
        assert!((gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

/// Pulls `u -- v` edges and their `penwidth` and `importance` attributes
/// back out of DOT text.
fn parse_edges(dot: &str) -> Vec<((usize, usize), f64, f64)> {
    let mut out = Vec::new();
    for line in dot.lines() {
        let Some((lhs, attrs)) = line.trim().split_once('[') else {
            continue;
        };
        let Some((u, v)) = lhs.split_once("--") else {
            continue;
        };
        let attr = |name: &str| -> f64 {
            attrs
                .trim_end_matches("];")
                .split(',')
                .find_map(|kv| {
                    let (k, v) = kv.trim().split_once('=')?;
                    (k == name).then(|| v.parse().unwrap())
                })
                .unwrap()
        };
        out.push((
            (u.trim().parse().unwrap(), v.trim().parse().unwrap()),
            attr("penwidth"),
            attr("importance"),
        ));
    }
    out
}

fn is_balanced_graph_block(dot: &str) -> bool {
    let t = dot.trim();
    t.starts_with("graph ") && t.ends_with('}') && t.matches('{').count() == 1 && !t.contains("->")
}

#[test]
fn dot_round_trip_preserves_edge_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(203);
    let c = config(2);
    let m = Model::build(&c, 2, 5, 4).unwrap();
    let g = random_graph(&mut rng, 10, 0.35);
    let p = PreparedGraph::new(&g, &c.arch).unwrap();
    let probe = AttentionProbe::zeros(3, 2);
    let (cs, _) = backtrack(&m, &probe, &g, &p, Some(0.0)).unwrap();
    let dot = to_dot(&cs);
    assert!(is_balanced_graph_block(&dot));
    let parsed = parse_edges(&dot);
    assert_eq!(parsed.len(), g.edge_count());
    for a in &parsed {
        assert!((0.2..=4.0).contains(&a.1));
        for b in &parsed {
            if cs.edge_importance[&a.0] > cs.edge_importance[&b.0] * (1.0 + 1e-6) {
                assert!(a.1 >= b.1);
            }
        }
    }
}

#[test]
fn dominant_edge_gets_widest_pen() {
    let cs = CriticalStructure {
        node_importance: vec![1.0, 1.0, 0.1],
        edge_importance: BTreeMap::from([((0, 1), 5.0), ((0, 2), 0.3), ((1, 2), 0.2)]),
        threshold: 0.1,
        seeds: vec![0],
    };
    let parsed = parse_edges(&to_dot(&cs));
    let widest = parsed.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert_eq!(widest.0, (0, 1));
    assert!(parsed
        .iter()
        .filter(|e| e.0 != (0, 1))
        .all(|e| e.1 < widest.1));
}

#[test]
fn threshold_above_every_attention_gives_minimal_widths() {
    let c = config(2);
    let m = Model::build(&c, 2, 5, 5).unwrap();
    let g = Graph::from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
    let p = PreparedGraph::new(&g, &c.arch).unwrap();
    let (cs, _) = backtrack(&m, &AttentionProbe::zeros(3, 2), &g, &p, Some(1.0)).unwrap();
    assert!(cs.seeds.is_empty());
    let parsed = parse_edges(&to_dot(&cs));
    assert!(parsed.iter().all(|e| e.1 == 0.2));
}

#[test]
fn export_writes_dot_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cs = CriticalStructure {
        node_importance: vec![0.5, 0.25],
        edge_importance: BTreeMap::from([((0, 1), 1.0)]),
        threshold: 0.25,
        seeds: vec![0],
    };
    let path = dir.path().join("g.dot");
    export_dot(&cs, &path).unwrap();
    assert!(std::fs::read_to_string(&path)
        .unwrap()
        .starts_with("graph critical {"));
    let mut nodes = Vec::new();
    write_node_csv(&cs, &mut nodes).unwrap();
    assert_eq!(String::from_utf8(nodes).unwrap().lines().count(), 3);
    let mut edges = Vec::new();
    write_edge_csv(&cs, &mut edges).unwrap();
    assert!(String::from_utf8(edges)
        .unwrap()
        .starts_with("u,v,importance\n0,1,"));
    let bad = dir.path().join("missing").join("g.dot");
    assert!(matches!(
        export_dot(&cs, &bad),
        Err(egograph::Error::Io { .. })
    ));
}
