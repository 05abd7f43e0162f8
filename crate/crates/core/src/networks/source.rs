use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::layers::Mode;
use super::models::{EncoderSpec, Network, SourceArch, SourceModel};
use super::optim::{OptimConfig, Sgd};
use super::params::Grads;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, argmax};
use crate::pseudo::conventional_label_smooth;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTrainConfig {
    /// Label-smoothing strength.
    pub epsilon: f64,
    pub epochs: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            epochs: 50,
            hidden: vec![64, 64],
            seed: 1234,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SourceTraining {
    pub model: SourceModel,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

/// Label-smoothed cross-entropy on a batch and its parameter gradients.
pub fn source_objective(
    model: &SourceModel,
    x: ArrayView2<f64>,
    labels: &[usize],
    epsilon: f64,
) -> Result<(f64, Grads)> {
    let k = model.num_classes();
    if labels.len() != x.nrows() {
        return Err(Error::shape("one label per input row required"));
    }
    let mut targets = Array2::zeros((labels.len(), k));
    for (mut row, &y) in targets.rows_mut().into_iter().zip(labels) {
        let q = conventional_label_smooth(y, k, epsilon)?;
        row.assign(&ndarray::ArrayView1::from(q.as_slice()));
    }
    let (logits, trace) = model.forward_traced(x, Mode::Train)?;
    let loss = losses::soft_cross_entropy(targets.view(), logits.view())?;
    let grads = model.backward(&trace, loss.grad.view());
    Ok((loss.value, grads))
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy<N: Network>(model: &N, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let logits = model.forward(x, Mode::Eval)?;
    let correct = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Train the source classifier with label smoothing and keep the checkpoint
/// with the best accuracy on `validation` (or on the training set when no
/// held-out split is given).
pub fn train_source(
    data: &Dataset,
    validation: Option<&Dataset>,
    cfg: &SourceTrainConfig,
) -> Result<SourceTraining> {
    if data.is_empty() {
        return Err(Error::invalid(
            "cannot train a source model on an empty dataset",
        ));
    }
    if !(0.0..=1.0).contains(&cfg.epsilon) {
        return Err(Error::invalid(format!(
            "epsilon {} outside [0, 1]",
            cfg.epsilon
        )));
    }
    cfg.optim.validate()?;
    let x = data.feature_matrix()?;
    let y = data.labels()?;
    let (val_x, val_y) = match validation {
        Some(v) => (v.feature_matrix()?, v.labels()?),
        None => (x.clone(), y.clone()),
    };
    let arch = SourceArch {
        encoder: EncoderSpec {
            input_dim: x.ncols(),
            hidden: cfg.hidden.clone(),
        },
        num_classes: data.num_classes(),
    };
    let mut model = SourceModel::new(arch, cfg.seed)?;
    let mut sgd = Sgd::new(&cfg.optim, model.store());
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, "source/shuffle");
    let batches_per_epoch = x.nrows().div_ceil(cfg.optim.batch_size);
    let max_iter = (cfg.epochs * batches_per_epoch).max(1);
    let mut iter = 0;
    let mut best: Option<(SourceModel, usize, f64)> = None;
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.optim.batch_size).enumerate() {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let (loss, grads) = source_objective(&model, xb.view(), &yb, cfg.epsilon)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "source loss at epoch {epoch}, step {step}: {loss}"
                )));
            }
            let lr = cfg.optim.lr_at(iter as f64 / max_iter as f64)?;
            sgd.step(model.store_mut(), &grads, lr);
            total += loss * chunk.len() as f64;
            iter += 1;
        }
        losses.push(total / x.nrows() as f64);
        let acc = accuracy(&model, val_x.view(), &val_y)?;
        log::debug!(
            "source epoch {epoch}: loss {:.4} acc {acc:.4}",
            losses[epoch - 1]
        );
        if best.as_ref().is_none_or(|(_, _, b)| acc > *b) {
            best = Some((model.clone(), epoch, acc));
        }
    }
    let (model, best_epoch, best_accuracy) = match best {
        Some(b) => b,
        None => {
            let acc = accuracy(&model, val_x.view(), &val_y)?;
            (model, 0, acc)
        }
    };
    Ok(SourceTraining {
        model,
        best_epoch,
        best_accuracy,
        losses,
    })
}
