//! Step two: debiased fine-tuning of the distilled model.
//!
//! Confident weak-view predictions become hard labels for the strong view
//! (FixMatch), the strong logits are shifted by `rho * ln(pi)` with `pi`
//! the current pseudo-label frequency, and batch mutual information on the
//! weak view is maximised.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::{augment, AugmentParams, AugmentationPolicy, Dataset};
use crate::distill::{batches, gather, EpochObserver};
use crate::error::{Error, Result};
use crate::losses::{self, argmax, threshold_consistency};
use crate::networks::{Grads, LrPair, Mode, Network, OptimConfig, Sgd, TargetModel};
use crate::pseudo::Hyperparams;
use crate::rng;

pub const PRIOR_FLOOR: f64 = 1e-4;

/// Estimated class prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEstimate {
    pub pi: Vec<f64>,
}

impl PriorEstimate {
    pub fn uniform(k: usize) -> Self {
        Self {
            pi: vec![1.0 / k as f64; k],
        }
    }

    /// `rho * ln(pi)`; every entry must be positive.
    pub fn log_offset(&self, rho: f64) -> Result<Array1<f64>> {
        if let Some(k) = self.pi.iter().position(|&p| p.is_nan() || p <= 0.0) {
            return Err(Error::invalid(format!(
                "prior entry {k} is {}; floor it first",
                self.pi[k]
            )));
        }
        Ok(self.pi.iter().map(|&p| rho * p.ln()).collect())
    }
}

/// Pseudo-label frequencies, floored at [`PRIOR_FLOOR`].
///
/// Entries below the floor are set to it and the remaining entries are
/// rescaled to carry the rest of the mass, repeating until no rescaled
/// entry drops below the floor.
pub fn estimate_prior(pseudo_labels: &[usize], k: usize) -> Result<PriorEstimate> {
    if pseudo_labels.is_empty() {
        return Err(Error::invalid(
            "prior estimate needs at least one pseudo-label",
        ));
    }
    if k == 0 || k as f64 * PRIOR_FLOOR > 1.0 {
        return Err(Error::invalid(format!(
            "cannot floor a prior over {k} classes"
        )));
    }
    let mut counts = vec![0usize; k];
    for &y in pseudo_labels {
        if y >= k {
            return Err(Error::invalid(format!(
                "pseudo-label {y} out of range for K = {k}"
            )));
        }
        counts[y] += 1;
    }
    let n = pseudo_labels.len() as f64;
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let mut floored = vec![false; k];
    loop {
        let free_mass = 1.0 - PRIOR_FLOOR * floored.iter().filter(|&&f| f).count() as f64;
        let free_sum: f64 = (0..k).filter(|&i| !floored[i]).map(|i| freq[i]).sum();
        let scale = free_mass / free_sum;
        let mut changed = false;
        for i in 0..k {
            if !floored[i] && freq[i] * scale < PRIOR_FLOOR {
                floored[i] = true;
                changed = true;
            }
        }
        if !changed {
            let pi = (0..k)
                .map(|i| {
                    if floored[i] {
                        PRIOR_FLOOR
                    } else {
                        freq[i] * scale
                    }
                })
                .collect();
            return Ok(PriorEstimate { pi });
        }
    }
}

/// FixMatch loss: `(1/n) sum_i 1[max p_weak_i >= eta] CE(onehot(y_i),
/// strong_i)`.
pub fn fixmatch_loss(weak: ArrayView2<f64>, strong: ArrayView2<f64>, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    Ok(threshold_consistency(weak, strong, eta, None)?.value)
}

/// FixMatch with the strong logits shifted by `rho * ln(pi)`.
pub fn adjusted_fixmatch_loss(
    weak: ArrayView2<f64>,
    strong: ArrayView2<f64>,
    eta: f64,
    pi: &PriorEstimate,
    rho: f64,
) -> Result<f64> {
    check_eta(eta)?;
    if rho.is_nan() || rho < 0.0 {
        return Err(Error::invalid(format!("rho {rho} must be >= 0")));
    }
    let offset = pi.log_offset(rho)?;
    Ok(threshold_consistency(weak, strong, eta, Some(offset.view()))?.value)
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("eta {eta} must be > 0")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyKind {
    None,
    Fm,
    #[default]
    Afm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FinetuneFlags {
    pub consistency: ConsistencyKind,
    pub mi: bool,
}

impl Default for FinetuneFlags {
    fn default() -> Self {
        Self {
            consistency: ConsistencyKind::Afm,
            mi: true,
        }
    }
}

impl FinetuneFlags {
    pub fn any_objective(&self) -> bool {
        self.consistency != ConsistencyKind::None || self.mi
    }
}

/// Weak and strong views of the same examples, with the gate outcome once
/// the weak view has been scored.
#[derive(Debug, Clone)]
pub struct ConsistencyBatch {
    pub weak: Array2<f64>,
    pub strong: Array2<f64>,
    pub pseudo_labels: Vec<usize>,
    pub mask: Vec<bool>,
}

impl ConsistencyBatch {
    pub fn new(weak: Array2<f64>, strong: Array2<f64>) -> Result<Self> {
        if weak.dim() != strong.dim() {
            return Err(Error::shape("weak and strong views differ in shape"));
        }
        Ok(Self {
            weak,
            strong,
            pseudo_labels: Vec::new(),
            mask: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DingBreakdown {
    /// FixMatch or adjusted FixMatch term (0 when disabled).
    pub consistency: f64,
    pub mi: f64,
    pub total: f64,
    pub pass_rate: f64,
}

/// Value and gradient of `consistency - mi`. Fills in the batch's
/// pseudo-labels and mask.
pub fn ding_objective(
    model: &TargetModel,
    batch: &mut ConsistencyBatch,
    pi: &PriorEstimate,
    hp: &Hyperparams,
    flags: FinetuneFlags,
) -> Result<(DingBreakdown, Grads)> {
    let (weak_logits, weak_trace) = model.forward_traced(batch.weak.view(), Mode::Train)?;
    let (strong_logits, strong_trace) = model.forward_traced(batch.strong.view(), Mode::Train)?;
    let offset = match flags.consistency {
        ConsistencyKind::Afm => Some(pi.log_offset(hp.rho)?),
        _ => None,
    };
    let gate = threshold_consistency(
        weak_logits.view(),
        strong_logits.view(),
        hp.eta,
        offset.as_ref().map(|o| o.view()),
    )?;
    let n = batch.weak.nrows().max(1);
    let mut out = DingBreakdown {
        pass_rate: gate.pass_count() as f64 / n as f64,
        ..Default::default()
    };
    let mut grads = Grads::zeros_like(model.store());
    if flags.consistency != ConsistencyKind::None {
        out.consistency = gate.value;
        grads.add_assign(&model.backward(&strong_trace, gate.grad.view()));
    }
    if flags.mi {
        let lg = losses::mutual_information(weak_logits.view())?;
        out.mi = lg.value;
        grads.add_assign(&model.backward(&weak_trace, (-&lg.grad).view()));
    }
    out.total = out.consistency - out.mi;
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!("fine-tuning loss {out:?}")));
    }
    batch.pseudo_labels = gate.pseudo_labels;
    batch.mask = gate.mask;
    Ok((out, grads))
}

/// One SGD step on `consistency - mi`; running statistics follow the weak
/// view.
pub fn ding_step(
    model: &mut TargetModel,
    sgd: &mut Sgd,
    batch: &mut ConsistencyBatch,
    pi: &PriorEstimate,
    hp: &Hyperparams,
    flags: FinetuneFlags,
    lr: LrPair,
) -> Result<DingBreakdown> {
    let (out, grads) = ding_objective(model, batch, pi, hp, flags)?;
    let (_, trace) = model.forward_traced(batch.weak.view(), Mode::Train)?;
    sgd.step(model.store_mut(), &grads, lr);
    model.commit(&trace);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub pi: Vec<f64>,
    pub pass_rate: f64,
    pub afm: f64,
    pub mi: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneHistory {
    pub epochs: Vec<FinetuneEpoch>,
}

fn augmented_matrix(
    dataset: &Dataset,
    policy: &AugmentationPolicy,
    seed: u64,
    label: &str,
) -> Result<Array2<f64>> {
    let rows = dataset
        .examples()
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            augment(
                ex.input(),
                policy,
                rng::child_seed(seed, &format!("{label}/{i}")),
            )?
            .to_row()
        })
        .collect::<Result<Vec<_>>>()?;
    let d = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((rows.len(), d), rows.concat()).map_err(|e| Error::shape(e.to_string()))
}

/// Eval-mode argmax predictions.
pub fn predict(model: &TargetModel, x: ArrayView2<f64>) -> Result<Vec<usize>> {
    let logits = model.forward(x, Mode::Eval)?;
    Ok(logits.rows().into_iter().map(argmax).collect())
}

/// Full fine-tuning loop.
pub fn run_finetune(
    model: TargetModel,
    dataset: &Dataset,
    hp: &Hyperparams,
    optim: &OptimConfig,
    flags: FinetuneFlags,
    augment_params: &AugmentParams,
    seed: u64,
) -> Result<(TargetModel, FinetuneHistory)> {
    let mut ignore = |_: usize, _: &TargetModel| Ok(());
    run_finetune_observed(
        model,
        dataset,
        hp,
        optim,
        flags,
        augment_params,
        seed,
        &mut ignore,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn run_finetune_observed(
    mut model: TargetModel,
    dataset: &Dataset,
    hp: &Hyperparams,
    optim: &OptimConfig,
    flags: FinetuneFlags,
    augment_params: &AugmentParams,
    seed: u64,
    observer: &mut EpochObserver<'_>,
) -> Result<(TargetModel, FinetuneHistory)> {
    hp.validate()?;
    optim.validate()?;
    if !flags.any_objective() {
        return Err(Error::invalid("no fine-tuning term is enabled"));
    }
    let k = model.num_classes();
    let weak = AugmentationPolicy::weak(augment_params.clone());
    let strong = AugmentationPolicy::strong(augment_params.clone());
    let mut sgd = Sgd::new(optim, model.store());
    let mut shuffle_rng = rng::stream(seed, "finetune/shuffle");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let per_epoch = batches(&order, optim.batch_size).count();
    let total_iters = (hp.epochs * per_epoch).max(1);
    let mut iter = 0;
    let mut history = FinetuneHistory::default();

    for epoch in 1..=hp.epochs {
        let prior_view = augmented_matrix(dataset, &weak, seed, &format!("prior/{epoch}"))?;
        let pi = estimate_prior(&predict(&model, prior_view.view())?, k)?;
        let weak_x = augmented_matrix(dataset, &weak, seed, &format!("weak/{epoch}"))?;
        let strong_x = augmented_matrix(dataset, &strong, seed, &format!("strong/{epoch}"))?;

        order.shuffle(&mut shuffle_rng);
        let mut sums = DingBreakdown::default();
        let mut steps = 0usize;
        for idx in batches(&order, optim.batch_size) {
            let mut batch =
                ConsistencyBatch::new(gather(weak_x.view(), idx), gather(strong_x.view(), idx))?;
            let lr = optim.lr_at(iter as f64 / total_iters as f64)?;
            let b = ding_step(&mut model, &mut sgd, &mut batch, &pi, hp, flags, lr)?;
            sums.consistency += b.consistency;
            sums.mi += b.mi;
            sums.total += b.total;
            sums.pass_rate += b.pass_rate;
            steps += 1;
            iter += 1;
        }
        let s = steps.max(1) as f64;
        let record = FinetuneEpoch {
            epoch,
            pi: pi.pi,
            pass_rate: sums.pass_rate / s,
            afm: sums.consistency / s,
            mi: sums.mi / s,
            total: sums.total / s,
        };
        log::debug!("finetune epoch {epoch}: {record:?}");
        history.epochs.push(record);
        observer(epoch, &model)?;
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn prior_checkpoints() {
        assert_eq!(estimate_prior(&[0, 0, 1, 1], 2).unwrap().pi, vec![0.5, 0.5]);
        let p = estimate_prior(&[0, 0, 0], 3).unwrap().pi;
        assert_eq!(p[1], PRIOR_FLOOR);
        assert_eq!(p[2], PRIOR_FLOOR);
        assert!((p[0] - 0.9998).abs() < 1e-12);
        let u = estimate_prior(&[0, 1, 2, 3], 4).unwrap().pi;
        assert_eq!(u, vec![0.25; 4]);
        assert!(estimate_prior(&[], 3).is_err());
    }

    #[test]
    fn fixmatch_checkpoint() {
        // weak confidence 0.99 on class 0, strong softmax [0.9, 0.1]
        let weak = array![[0.99f64.ln() - 0.01f64.ln(), 0.0]];
        let strong = array![[0.9f64.ln(), 0.1f64.ln()]];
        let v = fixmatch_loss(weak.view(), strong.view(), 0.95).unwrap();
        assert!((v - (-(0.9f64).ln())).abs() < 1e-12);
        assert_eq!(
            fixmatch_loss(weak.view(), strong.view(), 1.01).unwrap(),
            0.0
        );
    }

    #[test]
    fn adjusted_checkpoint() {
        let weak = array![[10.0, 0.0]];
        let strong = array![[2.0, 0.0]];
        let pi = PriorEstimate { pi: vec![0.9, 0.1] };
        let v = adjusted_fixmatch_loss(weak.view(), strong.view(), 0.95, &pi, 0.5).unwrap();
        let z = 2.0 + 0.5 * 0.9f64.ln() - 0.5 * 0.1f64.ln();
        assert!((v - (1.0 + (-z).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.0441).abs() < 1e-3);
    }

    #[test]
    fn zero_prior_entry_is_rejected() {
        let pi = PriorEstimate { pi: vec![1.0, 0.0] };
        let w = array![[1.0, 0.0]];
        assert!(adjusted_fixmatch_loss(w.view(), w.view(), 0.5, &pi, 0.5).is_err());
    }
}
