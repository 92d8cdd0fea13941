//! Reader and writer for the plain-text graph benchmark layout.
//!
//! A dataset `DS` lives in one directory:
//!
//! ```text
//! DS_A.txt                "i, j" per line, 1-indexed global node ids
//! DS_graph_indicator.txt  graph id (1-indexed) of node i on line i
//! DS_graph_labels.txt     class value of graph g on line g
//! DS_node_labels.txt      optional, discrete label of node i on line i
//! DS_edge_weights.txt     optional, positive weight of the edge on line i of DS_A.txt
//! ```
//!
//! Global ids are converted to per-graph 0-based ids on read. Directed pairs
//! are symmetrized and duplicates merged. Class values are remapped to
//! `0..C` in ascending order of the raw value.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{Dataset, Graph};

fn file(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}.txt"))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: format!("cannot read mandatory file: {e}"),
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

fn read_optional_lines(path: &Path) -> Result<Option<Vec<String>>> {
    if path.exists() {
        read_lines(path).map(Some)
    } else {
        Ok(None)
    }
}

fn parse_num<T: std::str::FromStr>(path: &Path, line_no: usize, s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: format!("line {}: cannot parse {:?}", line_no + 1, s.trim()),
    })
}

/// Reads `<name>_*.txt` from `dir`.
pub fn parse_benchmark_dataset(dir: &Path, name: &str) -> Result<Dataset> {
    let a_path = file(dir, name, "A");
    let ind_path = file(dir, name, "graph_indicator");
    let lab_path = file(dir, name, "graph_labels");
    let node_lab_path = file(dir, name, "node_labels");
    let weight_path = file(dir, name, "edge_weights");

    let a_lines = read_lines(&a_path)?;
    let indicator: Vec<usize> = read_lines(&ind_path)?
        .iter()
        .enumerate()
        .map(|(i, l)| parse_num(&ind_path, i, l))
        .collect::<Result<_>>()?;
    let raw_labels: Vec<i64> = read_lines(&lab_path)?
        .iter()
        .enumerate()
        .map(|(i, l)| parse_num(&lab_path, i, l))
        .collect::<Result<_>>()?;
    let node_labels: Option<Vec<i64>> = read_optional_lines(&node_lab_path)?
        .map(|lines| {
            lines
                .iter()
                .enumerate()
                // Some collections store extra comma-separated columns; the first is the label.
                .map(|(i, l)| parse_num(&node_lab_path, i, l.split(',').next().unwrap_or(l)))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let weights: Option<Vec<f64>> = read_optional_lines(&weight_path)?
        .map(|lines| {
            lines
                .iter()
                .enumerate()
                .map(|(i, l)| parse_num(&weight_path, i, l))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;

    let graph_count = raw_labels.len();
    let total_nodes = indicator.len();
    if let Some(nl) = &node_labels {
        if nl.len() != total_nodes {
            return Err(Error::Consistency(format!(
                "{} node labels for {} nodes",
                nl.len(),
                total_nodes
            )));
        }
    }
    if let Some(w) = &weights {
        if w.len() != a_lines.len() {
            return Err(Error::Consistency(format!(
                "{} edge weights for {} edge lines",
                w.len(),
                a_lines.len()
            )));
        }
    }

    // Map global node -> (graph, local id).
    let mut local = vec![(0usize, 0usize); total_nodes];
    let mut sizes = vec![0usize; graph_count];
    for (node, &gid) in indicator.iter().enumerate() {
        if gid == 0 || gid > graph_count {
            return Err(Error::Consistency(format!(
                "node {} assigned to graph {gid}, but only {graph_count} graph labels exist",
                node + 1
            )));
        }
        local[node] = (gid - 1, sizes[gid - 1]);
        sizes[gid - 1] += 1;
    }

    let mut edge_lists: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); graph_count];
    for (line_no, line) in a_lines.iter().enumerate() {
        let mut parts = line.split(',');
        let (Some(i), Some(j), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format {
                path: a_path.clone(),
                msg: format!("line {}: expected \"i, j\", got {line:?}", line_no + 1),
            });
        };
        let i: usize = parse_num(&a_path, line_no, i)?;
        let j: usize = parse_num(&a_path, line_no, j)?;
        for &x in &[i, j] {
            if x == 0 || x > total_nodes {
                return Err(Error::Consistency(format!(
                    "edge line {} references node {x} outside 1..={total_nodes}",
                    line_no + 1
                )));
            }
        }
        let (gi, li) = local[i - 1];
        let (gj, lj) = local[j - 1];
        if gi != gj {
            return Err(Error::Consistency(format!(
                "edge line {} joins node {i} (graph {}) and node {j} (graph {})",
                line_no + 1,
                gi + 1,
                gj + 1
            )));
        }
        if li == lj {
            log::warn!("{}: dropping self-loop on node {i}", a_path.display());
            continue;
        }
        let w = weights.as_ref().map_or(1.0, |w| w[line_no]);
        edge_lists[gi].push((li, lj, w));
    }

    let mut graphs = Vec::with_capacity(graph_count);
    for (gid, edges) in edge_lists.into_iter().enumerate() {
        let g = if weights.is_some() {
            Graph::from_weighted_edges(sizes[gid], edges)
        } else {
            Graph::from_edges(sizes[gid], edges.into_iter().map(|(u, v, _)| (u, v)))
        }
        .map_err(|e| Error::Consistency(format!("graph {}: {e}", gid + 1)))?;
        graphs.push(g);
    }
    if let Some(nl) = node_labels {
        let mut per_graph: Vec<Vec<i64>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (node, &l) in nl.iter().enumerate() {
            per_graph[local[node].0].push(l);
        }
        graphs = graphs
            .into_iter()
            .zip(per_graph)
            .map(|(g, l)| g.with_node_labels(l))
            .collect::<Result<_>>()?;
    }

    let class_values: Vec<i64> = raw_labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let class_labels = raw_labels
        .iter()
        .map(|v| class_values.binary_search(v).unwrap_or_default())
        .collect();

    Ok(Dataset {
        name: name.to_owned(),
        graphs,
        class_labels,
        class_values,
    })
}

/// Writes `d` under `dir` using the dataset's name as the file prefix.
///
/// Each undirected edge is written in both directions, as the benchmark
/// collection does.
pub fn write_benchmark_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut a = String::new();
    let mut weights = String::new();
    let mut indicator = String::new();
    let mut node_labels = String::new();
    let mut graph_labels = String::new();
    let all_labeled = d.graphs.iter().all(|g| g.node_labels().is_some());
    let any_weighted = d.graphs.iter().any(Graph::is_weighted);

    let mut offset = 0usize;
    for (gid, g) in d.graphs.iter().enumerate() {
        for &(u, v) in g.edges() {
            let w = g.edge_weight(u, v).unwrap_or(1.0);
            for (x, y) in [(u, v), (v, u)] {
                a.push_str(&format!("{}, {}\n", x + offset + 1, y + offset + 1));
                weights.push_str(&format!("{w:?}\n"));
            }
        }
        for n in 0..g.node_count() {
            indicator.push_str(&format!("{}\n", gid + 1));
            if all_labeled {
                node_labels.push_str(&format!("{}\n", g.node_labels().map_or(0, |l| l[n])));
            }
        }
        graph_labels.push_str(&format!("{}\n", d.class_values[d.class_labels[gid]]));
        offset += g.node_count();
    }

    let name = &d.name;
    write_file(&file(dir, name, "A"), &a)?;
    write_file(&file(dir, name, "graph_indicator"), &indicator)?;
    write_file(&file(dir, name, "graph_labels"), &graph_labels)?;
    if all_labeled && !d.graphs.is_empty() {
        write_file(&file(dir, name, "node_labels"), &node_labels)?;
    }
    if any_weighted {
        write_file(&file(dir, name, "edge_weights"), &weights)?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| Error::io(path, e))
}
