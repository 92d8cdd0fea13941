use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{argmax, Model, PreparedGraph};
use crate::autodiff::{Adam, AdamConfig, BatchStats, Tape, Tensor};
use crate::egoconv::RunningNorm;
use crate::error::{Error, Result};

/// Per-epoch training curve entry. Training figures are running averages
/// over the epoch's minibatches in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub valid_loss: Option<f64>,
    pub valid_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch (1-based) whose parameters the model holds afterwards.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Loss, gradients and batch statistics for one minibatch.
pub(crate) struct StepResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<Tensor>,
    pub stats: Vec<BatchStats>,
}

impl Model {
    /// Mean cross-entropy over `graphs` and its gradient with respect to
    /// every tensor in [`Model::params`] order.
    pub fn loss_and_gradients<R: Rng>(
        &self,
        graphs: &[&PreparedGraph],
        labels: &[usize],
        train: bool,
        rng: &mut R,
    ) -> Result<(f64, Vec<Tensor>)> {
        let s = self.step(graphs, labels, train, rng)?;
        Ok((s.loss, s.grads))
    }

    pub(crate) fn step<R: Rng>(
        &self,
        graphs: &[&PreparedGraph],
        labels: &[usize],
        train: bool,
        rng: &mut R,
    ) -> Result<StepResult> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Argument(format!(
                "label {bad} for {} classes",
                self.num_classes
            )));
        }
        let mut tape = Tape::new();
        let f = self.forward_batch(&mut tape, graphs, true, train, rng)?;
        let loss = tape.softmax_cross_entropy(f.logits, labels)?;
        let logits = tape.value(f.logits);
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| argmax(logits.row(i)) == y)
            .count();
        let grads = tape.backward(loss);
        Ok(StepResult {
            loss: tape.value(loss).data()[0],
            correct,
            grads: f.vars.flat().into_iter().map(|v| grads.tensor(v)).collect(),
            stats: f.stats,
        })
    }

    /// Minimizes softmax cross-entropy with Adam.
    ///
    /// With a validation set and a patience, training stops once the
    /// validation loss has not improved for `patience` epochs and the model
    /// is restored to its best epoch.
    pub fn train(
        &mut self,
        train: &[PreparedGraph],
        labels: &[usize],
        valid: Option<(&[PreparedGraph], &[usize])>,
    ) -> Result<TrainOutcome> {
        if train.len() != labels.len() || train.is_empty() {
            return Err(Error::Argument(format!(
                "{} training graphs against {} labels",
                train.len(),
                labels.len()
            )));
        }
        let mut present: Vec<usize> = labels.to_vec();
        present.sort_unstable();
        present.dedup();
        if present.len() < 2 {
            return Err(Error::InsufficientData(
                "training needs at least 2 classes present".into(),
            ));
        }
        let valid = valid.filter(|(g, _)| !g.is_empty());
        let tc = self.config.training.clone();
        let mut adam = Adam::new(
            AdamConfig {
                lr: tc.lr,
                ..AdamConfig::default()
            },
            &self.params(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epochs = Vec::with_capacity(tc.epochs);
        let mut best: Option<(f64, usize, Vec<Tensor>, Vec<RunningNorm>)> = None;
        let mut since_best = 0;
        let mut stopped_early = false;

        for epoch in 1..=tc.epochs {
            order.shuffle(&mut rng);
            let (mut loss_sum, mut correct) = (0.0, 0);
            for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
                let graphs: Vec<&PreparedGraph> = chunk.iter().map(|&i| &train[i]).collect();
                let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let s = self.step(&graphs, &ys, true, &mut rng)?;
                if !s.loss.is_finite() || s.grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Training(format!(
                        "non-finite loss or gradient at epoch {epoch}, batch {bi} (loss {}, lr {})",
                        s.loss, tc.lr
                    )));
                }
                loss_sum += s.loss * chunk.len() as f64;
                correct += s.correct;
                for (norm, st) in self.stack.norms.iter_mut().zip(&s.stats) {
                    norm.update(st);
                }
                adam.update(&mut self.params_mut(), &s.grads);
            }
            let mut m = EpochMetrics {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                train_accuracy: correct as f64 / train.len() as f64,
                valid_loss: None,
                valid_accuracy: None,
            };
            if let Some((vg, vy)) = valid {
                let (l, a) = self.evaluate(vg, vy)?;
                m.valid_loss = Some(l);
                m.valid_accuracy = Some(a);
                if best.as_ref().is_none_or(|b| l < b.0) {
                    let snapshot = self.params().into_iter().cloned().collect();
                    best = Some((l, epoch, snapshot, self.stack.norms.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                }
            }
            debug!(
                "epoch {epoch}: train loss {:.4} acc {:.3}, valid {:?}",
                m.train_loss, m.train_accuracy, m.valid_loss
            );
            epochs.push(m);
            if let Some(p) = tc.patience {
                if valid.is_some() && since_best >= p {
                    stopped_early = true;
                    break;
                }
            }
        }

        let mut best_epoch = epochs.len();
        if let Some((_, epoch, params, norms)) = best {
            if tc.patience.is_some() {
                for (dst, src) in self.params_mut().into_iter().zip(params) {
                    *dst = src;
                }
                self.stack.norms = norms;
                best_epoch = epoch;
            }
        }
        info!(
            "trained {} epochs, keeping epoch {best_epoch}{}",
            epochs.len(),
            if stopped_early { " (early stop)" } else { "" }
        );
        Ok(TrainOutcome {
            epochs,
            best_epoch,
            stopped_early,
        })
    }
}
