//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use egograph::critical::{
    backtrack, fit_attention_probe, to_dot, write_edge_csv, write_node_csv, AttentionProbe,
    ProbeConfig,
};
use egograph::dataset_io::{parse_benchmark_dataset, write_benchmark_dataset};
use egograph::graph::{degree_histogram, power_law_fit};
use egograph::model::{
    cross_validate, prepare_all, write_metrics_csv, Model, ModelConfig, PreparedGraph,
};
use egograph::synth::{alcohol_dataset, isomer_dataset, kronecker_dataset, CompoundConfig};
use egograph::Dataset;
use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::manifest::{move_files, write_atomic, RunManifest};
use crate::Kind;

/// Bad input detected by the tool itself rather than by the library.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let is_usage = e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some()
            || c.downcast_ref::<egograph::Error>()
                .is_some_and(egograph::Error::is_usage)
    });
    if is_usage {
        2
    } else {
        1
    }
}

/// Parses an inclusive `A..B` range.
pub fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected A..B, got {s:?}"))?;
    let a: usize = a
        .trim()
        .parse()
        .map_err(|e| format!("bad range start {a:?}: {e}"))?;
    let b: usize = b
        .trim()
        .parse()
        .map_err(|e| format!("bad range end {b:?}: {e}"))?;
    if a > b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok((a, b))
}

/// Loads the single benchmark dataset stored in `dir`, named after its
/// `<name>_A.txt` file.
fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(usage(format!(
            "data directory {} does not exist",
            dir.display()
        )));
    }
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()?
                .strip_suffix("_A.txt")
                .map(str::to_string)
        })
        .collect();
    names.sort();
    match names.as_slice() {
        [name] => Ok(parse_benchmark_dataset(dir, name)?),
        [] => Err(usage(format!("no <name>_A.txt file in {}", dir.display()))),
        _ => Err(usage(format!(
            "several datasets in {}: {}",
            dir.display(),
            names.join(", ")
        ))),
    }
}

#[derive(Debug, Serialize)]
pub struct GenerateArgs {
    pub kind: Kind,
    pub out: PathBuf,
    pub seed: u64,
    pub sizes: Option<(usize, usize)>,
    pub per_class: usize,
    pub hydrogens: bool,
    pub power: usize,
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    if args.per_class == 0 {
        return Err(usage("--per-class must be at least 1"));
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let manifest_path = args.out.join("manifest.json");
    let mut manifest = RunManifest::new(
        "generate",
        serde_json::to_value(&args)?,
        args.seed,
        vec![manifest_path.clone()],
    );
    manifest.write(&manifest_path)?;

    let compound = |default: CompoundConfig| CompoundConfig {
        sizes: args.sizes.map_or(default.sizes.clone(), |(a, b)| a..=b),
        per_class: args.per_class,
        hydrogens: args.hydrogens,
        seed: args.seed,
    };
    let dataset = match args.kind {
        Kind::Alcohol => alcohol_dataset(&compound(CompoundConfig::default()))?,
        Kind::Isomer => isomer_dataset(&compound(CompoundConfig::default()))?,
        Kind::Kronecker => kronecker_dataset(args.per_class, args.power, args.seed)?,
    };
    let staging = tempfile::tempdir_in(&args.out)?;
    write_benchmark_dataset(&dataset, staging.path())?;
    manifest
        .outputs
        .extend(move_files(staging.path(), &args.out)?);
    manifest.finish(&manifest_path)?;
    println!(
        "wrote {} graphs ({} classes) to {}",
        dataset.len(),
        dataset.num_classes(),
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Summary {
    fold_accuracies: Vec<f64>,
    mean: f64,
    std: f64,
    param_count: usize,
    node_budget: usize,
    wall_time_secs: f64,
    warnings: Vec<String>,
}

pub fn train(
    data: &Path,
    config: &Path,
    out: &Path,
    folds: usize,
    tied: bool,
    seed: Option<u64>,
) -> Result<()> {
    if !config.is_file() {
        return Err(usage(format!(
            "config file {} does not exist",
            config.display()
        )));
    }
    let mut cfg = ModelConfig::load(config)?;
    cfg.arch.tied |= tied;
    if let Some(s) = seed {
        cfg.training.seed = s;
    }
    cfg.validate()?;
    if cfg.arch.tied && cfg.stack_input_width() != cfg.arch.channels {
        return Err(usage(format!(
            "tied layers need a stack input as wide as `channels` ({}), but it is {}; \
             use a patchy_san front end with that many channels or set neighbors = channels",
            cfg.arch.channels,
            cfg.stack_input_width()
        )));
    }
    let dataset = load_dataset(data)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest_path = out.join("manifest.json");
    let metrics_path = out.join("metrics.csv");
    let summary_path = out.join("summary.json");
    let config_path = out.join("config.toml");
    let model_paths: Vec<PathBuf> = (0..folds)
        .map(|f| out.join(format!("fold_{f}.model")))
        .collect();
    let mut outputs = vec![
        manifest_path.clone(),
        metrics_path.clone(),
        summary_path.clone(),
        config_path.clone(),
    ];
    outputs.extend(model_paths.iter().cloned());
    let mut manifest = RunManifest::new(
        "train",
        serde_json::to_value(&cfg)?,
        cfg.training.seed,
        outputs,
    );
    manifest.write(&manifest_path)?;
    write_atomic(&config_path, cfg.to_toml_string().as_bytes())?;

    info!(
        "cross-validating {} graphs over {folds} folds",
        dataset.len()
    );
    let run = cross_validate(&cfg, &dataset, folds)?;
    let report = &run.report;
    let mut csv = Vec::new();
    write_metrics_csv(&report.metrics, &mut csv)?;
    write_atomic(&metrics_path, &csv)?;
    for (m, path) in run.models.iter().zip(&model_paths) {
        write_atomic(path, &m.to_bytes())?;
    }
    let summary = Summary {
        fold_accuracies: report.fold_accuracies.clone(),
        mean: report.mean,
        std: report.std,
        param_count: report.param_count,
        node_budget: report.node_budget,
        wall_time_secs: report.wall_time.as_secs_f64(),
        warnings: report.warnings.clone(),
    };
    write_atomic(
        &summary_path,
        (serde_json::to_string_pretty(&summary)? + "\n").as_bytes(),
    )?;
    manifest.finish(&manifest_path)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}", report.summary_line());
    Ok(())
}

/// `<model>.<hash>.probe`, keyed by the first 16 hex digits of the model's SHA-256.
fn probe_path(model_path: &Path, model_bytes: &[u8]) -> PathBuf {
    let digest = Sha256::digest(model_bytes);
    let hash: String = digest.iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    });
    let mut name = model_path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".{hash}.probe"));
    model_path.with_file_name(name)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}{suffix}"))
}

#[derive(Serialize)]
struct VisualizeEcho<'a> {
    model: &'a Path,
    data: &'a Path,
    graph: usize,
    threshold: Option<f64>,
    probe: ProbeConfig,
}

pub fn visualize(
    model_path: &Path,
    data: &Path,
    index: usize,
    out: &Path,
    threshold: Option<f64>,
) -> Result<()> {
    if !model_path.is_file() {
        return Err(usage(format!(
            "model file {} does not exist",
            model_path.display()
        )));
    }
    if threshold.is_some_and(|t| t.is_nan() || t < 0.0) {
        return Err(usage("--threshold must be non-negative"));
    }
    let model_bytes =
        fs::read(model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let model = Model::from_bytes(&model_bytes)
        .map_err(|e| usage(format!("{}: {e}", model_path.display())))?;
    let dataset = load_dataset(data)?;
    if index >= dataset.len() {
        return Err(usage(format!(
            "graph index {index} out of range for {} graphs",
            dataset.len()
        )));
    }
    if dataset.num_classes() != model.num_classes() {
        return Err(usage(format!(
            "model predicts {} classes but the dataset has {}",
            model.num_classes(),
            dataset.num_classes()
        )));
    }

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let probe_cfg = ProbeConfig::default();
    let probe_file = probe_path(model_path, &model_bytes);
    let nodes_path = with_suffix(out, ".nodes.csv");
    let edges_path = with_suffix(out, ".edges.csv");
    let manifest_path = with_suffix(out, ".manifest.json");
    let echo = VisualizeEcho {
        model: model_path,
        data,
        graph: index,
        threshold,
        probe: probe_cfg.clone(),
    };
    let outputs = vec![
        manifest_path.clone(),
        out.to_path_buf(),
        nodes_path.clone(),
        edges_path.clone(),
        probe_file.clone(),
    ];
    let mut manifest = RunManifest::new(
        "visualize",
        serde_json::to_value(&echo)?,
        probe_cfg.seed,
        outputs,
    );
    manifest.write(&manifest_path)?;

    let probe = if probe_file.is_file() {
        info!("using cached probe {}", probe_file.display());
        AttentionProbe::from_bytes(&fs::read(&probe_file)?)?
    } else {
        info!("fitting the attention probe on {} graphs", dataset.len());
        let prepared = prepare_all(&dataset.graphs, &model.config.arch)?;
        let probe = fit_attention_probe(&model, &prepared, &dataset.class_labels, &probe_cfg)?;
        write_atomic(&probe_file, &probe.to_bytes())?;
        probe
    };

    let graph = &dataset.graphs[index];
    let prepared = PreparedGraph::new(graph, &model.config.arch)?;
    let (cs, gamma) = backtrack(&model, &probe, graph, &prepared, threshold)?;
    write_atomic(out, to_dot(&cs).as_bytes())?;
    let mut nodes = Vec::new();
    write_node_csv(&cs, &mut nodes)?;
    write_atomic(&nodes_path, &nodes)?;
    let mut edges = Vec::new();
    write_edge_csv(&cs, &mut edges)?;
    write_atomic(&edges_path, &edges)?;
    manifest.finish(&manifest_path)?;

    let top = (0..gamma.len()).max_by(|&a, &b| gamma[a].total_cmp(&gamma[b]));
    println!(
        "graph {index}: {} nodes, {} attention seeds above {:.4}, peak attention at node {}",
        graph.node_count(),
        cs.seeds.len(),
        cs.threshold,
        top.map_or_else(|| "-".to_string(), |n| n.to_string())
    );
    Ok(())
}

pub fn stats(data: &Path, power_law: bool) -> Result<()> {
    let d = load_dataset(data)?;
    let nodes: usize = d.graphs.iter().map(|g| g.node_count()).sum();
    let edges: usize = d.graphs.iter().map(|g| g.edge_count()).sum();
    println!("dataset: {}", d.name);
    println!("graphs: {}", d.len());
    println!("nodes: {nodes}");
    println!("edges: {edges}");
    println!("max nodes per graph: {}", d.max_node_count());
    println!("classes:");
    for (value, count) in d.class_values.iter().zip(d.class_histogram()) {
        println!("  {value}: {count}");
    }
    let hist = degree_histogram(&d);
    println!("degree histogram:");
    for (k, c) in &hist {
        println!("  {k}: {c}");
    }
    if power_law {
        match power_law_fit(&hist) {
            Ok(fit) => println!(
                "power law: exponent {:.4}, r^2 {:.4}",
                fit.exponent, fit.r_squared
            ),
            Err(egograph::Error::InsufficientData(msg)) => {
                println!("power law: insufficient data ({msg})")
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}
