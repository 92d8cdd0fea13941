use std::io::Write;
use std::time::{Duration, Instant};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{prepare_all, Model, ModelConfig, PreparedGraph};
use crate::error::{Error, Result};
use crate::graph::Dataset;

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub fold: usize,
    pub epoch: usize,
    /// `train`, `valid` or `test`.
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
    pub wall_time: Duration,
    pub param_count: usize,
    pub node_budget: usize,
    pub metrics: Vec<MetricRow>,
    pub warnings: Vec<String>,
}

impl CvReport {
    pub fn summary_line(&self) -> String {
        format!(
            "accuracy {:.4} +/- {:.4} over {} folds, {} parameters, {:.1}s",
            self.mean,
            self.std,
            self.fold_accuracies.len(),
            self.param_count,
            self.wall_time.as_secs_f64()
        )
    }
}

/// Report plus the trained model of every fold.
#[derive(Clone, Debug)]
pub struct CvRun {
    pub report: CvReport,
    pub models: Vec<Model>,
}

/// Stratified fold assignment. Each class is shuffled with `seed` and dealt
/// round-robin, continuing where the previous class stopped so fold sizes
/// differ by at most one.
pub fn stratified_folds(
    labels: &[usize],
    folds: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<String>)> {
    if folds < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if labels.len() < folds {
        return Err(Error::Argument(format!(
            "{} graphs cannot fill {folds} folds",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign = vec![0; labels.len()];
    let mut warnings = Vec::new();
    let mut next = 0;
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < folds {
            warnings.push(format!(
                "class {c} has {} graphs, so some of the {folds} folds lack it",
                members.len()
            ));
        }
        members.shuffle(&mut rng);
        for i in members {
            assign[i] = next % folds;
            next += 1;
        }
    }
    Ok((assign, warnings))
}

/// 90th percentile (nearest rank) of the node counts.
pub fn default_node_budget(d: &Dataset) -> usize {
    let mut sizes: Vec<usize> = d.graphs.iter().map(|g| g.node_count()).collect();
    if sizes.is_empty() {
        return 1;
    }
    sizes.sort_unstable();
    let rank = ((0.9 * sizes.len() as f64).ceil() as usize).clamp(1, sizes.len());
    sizes[rank - 1].max(1)
}

/// Splits `idx` into (train, validation), taking `fraction` of every class.
fn carve_validation(
    idx: &[usize],
    labels: &[usize],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut members: Vec<usize> = idx.iter().copied().filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let take = ((members.len() as f64) * fraction).floor() as usize;
        let take = take.min(members.len().saturating_sub(1));
        va.extend(&members[..take]);
        tr.extend(&members[take..]);
    }
    tr.sort_unstable();
    va.sort_unstable();
    (tr, va)
}

fn pick(prepared: &[PreparedGraph], idx: &[usize]) -> Vec<PreparedGraph> {
    idx.iter().map(|&i| prepared[i].clone()).collect()
}

struct FoldResult {
    accuracy: f64,
    rows: Vec<MetricRow>,
    model: Model,
}

fn run_fold(
    cfg: &ModelConfig,
    prepared: &[PreparedGraph],
    labels: &[usize],
    assign: &[usize],
    fold: usize,
    num_classes: usize,
    budget: usize,
) -> Result<FoldResult> {
    let test_idx: Vec<usize> = (0..labels.len()).filter(|&i| assign[i] == fold).collect();
    let rest: Vec<usize> = (0..labels.len()).filter(|&i| assign[i] != fold).collect();
    let fold_seed = cfg.training.seed.wrapping_add(fold as u64);
    let (tr, va) = carve_validation(&rest, labels, cfg.training.validation_fraction, fold_seed);

    let mut fold_cfg = cfg.clone();
    fold_cfg.training.seed = fold_seed;
    let mut model = Model::build(&fold_cfg, num_classes, budget, fold_seed)?;
    let (trg, vag, teg) = (
        pick(prepared, &tr),
        pick(prepared, &va),
        pick(prepared, &test_idx),
    );
    let try_: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
    let vay: Vec<usize> = va.iter().map(|&i| labels[i]).collect();
    let tey: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
    let outcome = model.train(&trg, &try_, Some((&vag, &vay)))?;

    let mut rows = Vec::new();
    for e in &outcome.epochs {
        rows.push(MetricRow {
            fold,
            epoch: e.epoch,
            split: "train",
            loss: e.train_loss,
            accuracy: e.train_accuracy,
        });
        if let (Some(l), Some(a)) = (e.valid_loss, e.valid_accuracy) {
            rows.push(MetricRow {
                fold,
                epoch: e.epoch,
                split: "valid",
                loss: l,
                accuracy: a,
            });
        }
    }
    let (loss, accuracy) = model.evaluate(&teg, &tey)?;
    rows.push(MetricRow {
        fold,
        epoch: outcome.best_epoch,
        split: "test",
        loss,
        accuracy,
    });
    info!("fold {fold}: test accuracy {accuracy:.4}");
    Ok(FoldResult {
        accuracy,
        rows,
        model,
    })
}

/// Stratified k-fold cross-validation: train on `folds - 1` parts (minus a
/// validation slice for early stopping) and test on the remaining one.
///
/// Folds run on up to `available_parallelism` threads; each fold seeds its
/// own model and data order, so results do not depend on the thread count.
pub fn cross_validate(cfg: &ModelConfig, dataset: &Dataset, folds: usize) -> Result<CvRun> {
    cfg.validate()?;
    let start = Instant::now();
    let num_classes = dataset.num_classes();
    if num_classes < 2 {
        return Err(Error::InsufficientData(format!(
            "dataset {} has {num_classes} class(es)",
            dataset.name
        )));
    }
    let (assign, warnings) = stratified_folds(&dataset.class_labels, folds, cfg.training.seed)?;
    for w in &warnings {
        warn!("{w}");
    }
    let budget = cfg
        .arch
        .node_budget
        .unwrap_or_else(|| default_node_budget(dataset));
    let prepared = prepare_all(&dataset.graphs, &cfg.arch)?;
    let labels = &dataset.class_labels;

    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(folds);
    let mut results: Vec<Option<Result<FoldResult>>> = (0..folds).map(|_| None).collect();
    if workers <= 1 {
        for (f, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_fold(
                cfg,
                &prepared,
                labels,
                &assign,
                f,
                num_classes,
                budget,
            ));
        }
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let (prepared, assign) = (&prepared, &assign);
                    s.spawn(move || {
                        (w..folds)
                            .step_by(workers)
                            .map(|f| {
                                (
                                    f,
                                    run_fold(cfg, prepared, labels, assign, f, num_classes, budget),
                                )
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (f, r) in h.join().expect("fold worker panicked") {
                    results[f] = Some(r);
                }
            }
        });
    }

    let mut fold_accuracies = Vec::with_capacity(folds);
    let mut metrics = Vec::new();
    let mut models = Vec::with_capacity(folds);
    for r in results {
        let r = r.expect("every fold ran")?;
        fold_accuracies.push(r.accuracy);
        metrics.extend(r.rows);
        models.push(r.model);
    }
    let mean = fold_accuracies.iter().sum::<f64>() / folds as f64;
    let std = (fold_accuracies
        .iter()
        .map(|a| (a - mean).powi(2))
        .sum::<f64>()
        / folds as f64)
        .sqrt();
    let report = CvReport {
        fold_accuracies,
        mean,
        std,
        wall_time: start.elapsed(),
        param_count: models[0].param_count(),
        node_budget: budget,
        metrics,
        warnings,
    };
    Ok(CvRun { report, models })
}

/// Writes `fold,epoch,split,loss,accuracy` rows.
pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "fold,epoch,split,loss,accuracy")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.17e},{:.17e}",
            r.fold, r.epoch, r.split, r.loss, r.accuracy
        )?;
    }
    Ok(())
}
