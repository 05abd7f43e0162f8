//! Step one: distil a target model from the oracle's truncated answers.
//!
//! The per-example teacher is a blend of the smoothed oracle answer and a
//! prototype-based soft label, refreshed by EMA after each epoch. The
//! student minimises `skd + mix - mi`: KL to the teacher, interpolation
//! consistency under MixUp and (negated) batch mutual information.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::losses;
use crate::networks::{Grads, Mode, Network, OptimConfig, Sgd, TargetModel};
use crate::oracle::{QueryMode, QueryResults};
use crate::pseudo::{
    compute_prototypes, conventional_label_smooth, default_pca_dim, ema_update, init_teacher,
    probs_from_logits, prototype_pseudo_labels, reduce_features, smooth_top_r, Hyperparams,
    ProbMatrix, ProbVector, TeacherBank,
};
use crate::rng::{self, Rng};

/// Which terms of the distillation objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DistillFlags {
    pub skd: bool,
    pub mix: bool,
    pub mi: bool,
    /// Blend prototype pseudo-labels into the teacher; off means `beta = 1`.
    pub proto: bool,
}

impl Default for DistillFlags {
    fn default() -> Self {
        Self {
            skd: true,
            mix: true,
            mi: true,
            proto: true,
        }
    }
}

impl DistillFlags {
    pub fn any_objective(&self) -> bool {
        self.skd || self.mix || self.mi
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub skd: f64,
    pub mix: f64,
    pub mi: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            skd: sum(|b| b.skd),
            mix: sum(|b| b.mix),
            mi: sum(|b| b.mi),
            total: sum(|b| b.total),
        }
    }
}

/// One MixUp draw for a batch: a shared `lambda` and the pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct MixSample {
    pub lambda: f64,
    pub pairs: Vec<(usize, usize)>,
}

impl MixSample {
    /// Pair `i` with `partner[i]`.
    pub fn new(lambda: f64, partner: &[usize]) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
        }
        if partner.iter().any(|&j| j >= partner.len()) {
            return Err(Error::invalid("partner index out of range"));
        }
        Ok(Self {
            lambda,
            pairs: partner.iter().copied().enumerate().collect(),
        })
    }
}

/// `lambda ~ Beta(alpha, alpha)` and a random permutation partner.
pub fn sample_mix(n: usize, alpha: f64, rng: &mut Rng) -> Result<MixSample> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "MixUp needs a batch of at least 2, got {n}"
        )));
    }
    let beta =
        Beta::new(alpha, alpha).map_err(|e| Error::invalid(format!("alpha {alpha}: {e}")))?;
    let lambda = beta.sample(rng).clamp(0.0, 1.0);
    let mut partner: Vec<usize> = (0..n).collect();
    partner.shuffle(rng);
    MixSample::new(lambda, &partner)
}

fn mix_rows(a: ArrayView2<f64>, mix: &MixSample) -> Result<Array2<f64>> {
    if mix.pairs.len() != a.nrows() {
        return Err(Error::shape(format!(
            "{} pairs for a batch of {}",
            mix.pairs.len(),
            a.nrows()
        )));
    }
    let mut out = Array2::zeros(a.dim());
    for (mut row, &(i, j)) in out.rows_mut().into_iter().zip(&mix.pairs) {
        row.assign(&(&a.row(i) * mix.lambda + &(&a.row(j) * (1.0 - mix.lambda))));
    }
    Ok(out)
}

/// `lambda x_i + (1 - lambda) x_j` for every pair.
pub fn mix_inputs(x: ArrayView2<f64>, mix: &MixSample) -> Result<Array2<f64>> {
    mix_rows(x, mix)
}

/// Mean `KL(teacher || softmax(logits))`; teacher rows are used as given.
pub fn skd_loss(teacher: ArrayView2<f64>, logits: ArrayView2<f64>) -> Result<f64> {
    Ok(losses::kl_divergence(teacher, logits)?.value)
}

/// Batch mutual information of the predictions.
pub fn mutual_info(logits: ArrayView2<f64>) -> Result<f64> {
    Ok(losses::mutual_information(logits)?.value)
}

/// Mixed targets from a gradient-free training-mode pass; running
/// statistics are not updated.
pub fn ict_targets(
    model: &TargetModel,
    x: ArrayView2<f64>,
    mix: &MixSample,
) -> Result<Array2<f64>> {
    let p = losses::softmax(model.forward(x, Mode::Train)?.view());
    mix_rows(p.view(), mix)
}

/// Interpolation-consistency loss on a batch with a fixed MixUp draw.
pub fn ict_loss_with(model: &TargetModel, x: ArrayView2<f64>, mix: &MixSample) -> Result<f64> {
    let targets = ict_targets(model, x, mix)?;
    let mixed = mix_inputs(x, mix)?;
    let logits = model.forward(mixed.view(), Mode::Train)?;
    Ok(losses::soft_cross_entropy(targets.view(), logits.view())?.value)
}

/// Interpolation-consistency loss with `lambda` and the pairing drawn from
/// `seed`.
pub fn ict_loss(model: &TargetModel, x: ArrayView2<f64>, alpha: f64, seed: u64) -> Result<f64> {
    let mix = sample_mix(x.nrows(), alpha, &mut rng::stream(seed, "ict"))?;
    ict_loss_with(model, x, &mix)
}

/// `skd` term and its parameter gradient.
pub fn skd_objective(
    model: &TargetModel,
    x: ArrayView2<f64>,
    teacher: ArrayView2<f64>,
) -> Result<(f64, Grads)> {
    let (logits, trace) = model.forward_traced(x, Mode::Train)?;
    let lg = losses::kl_divergence(teacher, logits.view())?;
    Ok((lg.value, model.backward(&trace, lg.grad.view())))
}

/// `mix` term against precomputed (frozen) targets and its gradient.
pub fn ict_objective(
    model: &TargetModel,
    x: ArrayView2<f64>,
    mix: &MixSample,
    targets: ArrayView2<f64>,
) -> Result<(f64, Grads)> {
    let mixed = mix_inputs(x, mix)?;
    let (logits, trace) = model.forward_traced(mixed.view(), Mode::Train)?;
    let lg = losses::soft_cross_entropy(targets, logits.view())?;
    Ok((lg.value, model.backward(&trace, lg.grad.view())))
}

/// Mutual information and the gradient of `+mi`.
pub fn mi_objective(model: &TargetModel, x: ArrayView2<f64>) -> Result<(f64, Grads)> {
    let (logits, trace) = model.forward_traced(x, Mode::Train)?;
    let lg = losses::mutual_information(logits.view())?;
    Ok((lg.value, model.backward(&trace, lg.grad.view())))
}

/// Value and gradient of `skd + mix - mi` restricted to the enabled terms.
/// The clean-view terms share one forward pass; MixUp uses its own.
pub fn prod_objective(
    model: &TargetModel,
    x: ArrayView2<f64>,
    teacher: ArrayView2<f64>,
    mix: &MixSample,
    mix_targets: ArrayView2<f64>,
    flags: DistillFlags,
) -> Result<(LossBreakdown, Grads)> {
    let mut grads = Grads::zeros_like(model.store());
    let mut out = LossBreakdown::default();
    if flags.skd || flags.mi {
        let (logits, trace) = model.forward_traced(x, Mode::Train)?;
        let mut dlogits = Array2::zeros(logits.dim());
        if flags.skd {
            let lg = losses::kl_divergence(teacher, logits.view())?;
            out.skd = lg.value;
            dlogits += &lg.grad;
        }
        if flags.mi {
            let lg = losses::mutual_information(logits.view())?;
            out.mi = lg.value;
            dlogits -= &lg.grad;
        }
        grads.add_assign(&model.backward(&trace, dlogits.view()));
    }
    if flags.mix {
        let (value, g) = ict_objective(model, x, mix, mix_targets)?;
        out.mix = value;
        grads.add_assign(&g);
    }
    out.total = out.skd + out.mix - out.mi;
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!("distillation loss {out:?}")));
    }
    Ok((out, grads))
}

/// One SGD step on a batch. Running batch-norm statistics are refreshed
/// from the clean view.
pub fn prod_step(
    model: &mut TargetModel,
    sgd: &mut Sgd,
    x: ArrayView2<f64>,
    teacher: ArrayView2<f64>,
    mix: &MixSample,
    flags: DistillFlags,
    lr: crate::networks::LrPair,
) -> Result<LossBreakdown> {
    let targets = if flags.mix {
        ict_targets(model, x, mix)?
    } else {
        Array2::zeros((x.nrows(), model.num_classes()))
    };
    let (breakdown, grads) = prod_objective(model, x, teacher, mix, targets.view(), flags)?;
    let (_, trace) = model.forward_traced(x, Mode::Train)?;
    sgd.step(model.store_mut(), &grads, lr);
    model.commit(&trace);
    Ok(breakdown)
}

/// Smoothed oracle prediction for every example, in dataset order:
/// adaptive smoothing for soft answers, conventional smoothing with
/// `epsilon` for hard ones.
pub fn smoothed_source_predictions(
    dataset: &Dataset,
    oracle: &QueryResults,
    epsilon: f64,
) -> Result<ProbMatrix> {
    let k = dataset.num_classes();
    if oracle.num_classes != k {
        return Err(Error::shape(format!(
            "oracle answers over {} classes, dataset has {k}",
            oracle.num_classes
        )));
    }
    let rows = dataset
        .ids()
        .map(|id| {
            let res = oracle.get(id)?;
            match (res.mode, &res.confidences) {
                (QueryMode::SoftTopR { .. }, Some(conf)) => smooth_top_r(&res.labels, conf, k),
                (QueryMode::Hard, _) => conventional_label_smooth(res.top_label(), k, epsilon),
                (QueryMode::SoftTopR { .. }, None) => Err(Error::invalid(format!(
                    "soft answer for `{id}` has no confidences"
                ))),
            }
        })
        .collect::<Result<Vec<ProbVector>>>()?;
    ProbMatrix::from_rows(&rows)
}

/// Soft labels from the distance of each example's reduced features to the
/// class prototypes weighted by `weights`.
pub fn prototype_teacher(
    model: &TargetModel,
    x: ArrayView2<f64>,
    weights: &ProbMatrix,
    hp: &Hyperparams,
) -> Result<ProbMatrix> {
    let feats = model.features(x)?;
    let dim = hp
        .pca_dim
        .unwrap_or_else(|| default_pca_dim(feats.nrows(), feats.ncols()));
    let reduced = reduce_features(feats.view(), dim)?;
    let protos = compute_prototypes(reduced.view(), weights)?;
    prototype_pseudo_labels(reduced.view(), &protos, hp.tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub skd: f64,
    pub mix: f64,
    pub mi: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DistillHistory {
    pub steps: Vec<StepRecord>,
    /// Mean breakdown per epoch.
    pub epochs: Vec<LossBreakdown>,
    /// Bank after initialisation and after every epoch.
    #[serde(skip)]
    pub banks: Vec<TeacherBank>,
}

/// Split `order` into batches; a trailing batch of one is dropped since
/// neither MixUp nor batch statistics are defined for it.
pub(crate) fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size).filter(|b| b.len() >= 2)
}

pub(crate) fn gather(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Called after every epoch with the epoch number and current model.
pub type EpochObserver<'a> = dyn FnMut(usize, &TargetModel) -> Result<()> + 'a;

/// Full distillation loop.
pub fn run_distillation(
    model: TargetModel,
    dataset: &Dataset,
    oracle: &QueryResults,
    hp: &Hyperparams,
    optim: &OptimConfig,
    flags: DistillFlags,
    seed: u64,
) -> Result<(TargetModel, DistillHistory)> {
    let mut ignore = |_: usize, _: &TargetModel| Ok(());
    run_distillation_observed(model, dataset, oracle, hp, optim, flags, seed, &mut ignore)
}

#[allow(clippy::too_many_arguments)]
pub fn run_distillation_observed(
    mut model: TargetModel,
    dataset: &Dataset,
    oracle: &QueryResults,
    hp: &Hyperparams,
    optim: &OptimConfig,
    flags: DistillFlags,
    seed: u64,
    observer: &mut EpochObserver<'_>,
) -> Result<(TargetModel, DistillHistory)> {
    hp.validate()?;
    optim.validate()?;
    if !flags.any_objective() {
        return Err(Error::invalid("no distillation term is enabled"));
    }
    let x = dataset.feature_matrix()?;
    let ids: Vec<String> = dataset.ids().map(str::to_string).collect();
    let p_src = smoothed_source_predictions(dataset, oracle, hp.epsilon)?;
    let beta = if flags.proto { hp.beta } else { 1.0 };
    let mut bank = if beta < 1.0 {
        let p_proto = prototype_teacher(&model, x.view(), &p_src, hp)?;
        init_teacher(ids.clone(), &p_src, &p_proto, beta)?
    } else {
        TeacherBank::new(ids.clone(), p_src)?
    };
    let mut history = DistillHistory {
        banks: vec![bank.clone()],
        ..Default::default()
    };

    let mut sgd = Sgd::new(optim, model.store());
    let mut shuffle_rng = rng::stream(seed, "distill/shuffle");
    let mut mix_rng = rng::stream(seed, "distill/mix");
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let per_epoch = batches(&order, optim.batch_size).count();
    let total_iters = (hp.epochs * per_epoch).max(1);
    let mut iter = 0;

    for epoch in 1..=hp.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_losses = Vec::with_capacity(per_epoch);
        for (step, idx) in batches(&order, optim.batch_size).enumerate() {
            let xb = gather(x.view(), idx);
            let teacher = bank.select(idx);
            let mix = sample_mix(idx.len(), hp.alpha, &mut mix_rng)?;
            let lr = optim.lr_at(iter as f64 / total_iters as f64)?;
            let b = prod_step(
                &mut model,
                &mut sgd,
                xb.view(),
                teacher.view(),
                &mix,
                flags,
                lr,
            )?;
            history.steps.push(StepRecord {
                epoch,
                step,
                skd: b.skd,
                mix: b.mix,
                mi: b.mi,
                total: b.total,
            });
            epoch_losses.push(b);
            iter += 1;
        }
        let student = probs_from_logits(model.forward(x.view(), Mode::Eval)?.view())?;
        ema_update(&mut bank, &ids, &student, hp.gamma)?;
        let mean = LossBreakdown::mean(&epoch_losses);
        log::debug!("distill epoch {epoch}: {mean:?}");
        history.epochs.push(mean);
        history.banks.push(bank.clone());
        observer(epoch, &model)?;
    }
    Ok((model, history))
}
