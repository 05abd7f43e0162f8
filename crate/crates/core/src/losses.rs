//! Loss values together with their gradients with respect to logits.
//!
//! All probabilities use the natural logarithm. Every function rejects
//! non-finite logits.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// A scalar loss and `d loss / d logits`.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

fn check_finite(logits: ArrayView2<f64>, what: &str) -> Result<()> {
    if logits.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_same(a: ArrayView2<f64>, b: ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Row-wise softmax.
pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    log_softmax(logits).mapv(f64::exp)
}

pub fn softmax_row(logits: ArrayView1<f64>) -> Array1<f64> {
    softmax(logits.insert_axis(Axis(0))).row(0).to_owned()
}

/// Shannon entropy `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: ArrayView1<f64>) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean over rows of `H(target, softmax(logits))`.
pub fn soft_cross_entropy(targets: ArrayView2<f64>, logits: ArrayView2<f64>) -> Result<LossGrad> {
    check_same(targets, logits, "cross-entropy targets/logits")?;
    check_finite(logits, "cross-entropy logits")?;
    let n = logits.nrows();
    if n == 0 {
        return Ok(LossGrad {
            value: 0.0,
            grad: Array2::zeros(logits.dim()),
        });
    }
    let logp = log_softmax(logits);
    let value = -(&targets * &logp).sum() / n as f64;
    let p = logp.mapv(f64::exp);
    let mass = targets.sum_axis(Axis(1)).insert_axis(Axis(1));
    let grad = (&p * &mass - targets) / n as f64;
    Ok(LossGrad { value, grad })
}

/// Mean over rows of `KL(teacher || softmax(logits))`.
pub fn kl_divergence(teacher: ArrayView2<f64>, logits: ArrayView2<f64>) -> Result<LossGrad> {
    let ce = soft_cross_entropy(teacher, logits)?;
    let n = teacher.nrows().max(1) as f64;
    let neg_entropy: f64 = teacher
        .iter()
        .filter(|&&t| t > 0.0)
        .map(|&t| t * t.ln())
        .sum::<f64>()
        / n;
    Ok(LossGrad {
        value: ce.value + neg_entropy,
        grad: ce.grad,
    })
}

/// Batch mutual information `h(mean_i p_i) - mean_i h(p_i)`, `p_i` the
/// softmax of row `i`, and its gradient.
pub fn mutual_information(logits: ArrayView2<f64>) -> Result<LossGrad> {
    check_finite(logits, "mutual-information logits")?;
    let n = logits.nrows();
    if n == 0 {
        return Err(Error::invalid("mutual information of an empty batch"));
    }
    let logp = log_softmax(logits);
    let p = logp.mapv(f64::exp);
    let marginal = p.mean_axis(Axis(0)).expect("non-empty");
    let conditional = p.rows().into_iter().map(entropy).sum::<f64>() / n as f64;
    let value = entropy(marginal.view()) - conditional;

    // d/dp_ik = (ln p_ik - ln pbar_k) / n, then through the softmax Jacobian
    let log_marginal = marginal.mapv(|m| m.max(f64::MIN_POSITIVE).ln());
    let dp = (&logp - &log_marginal) / n as f64;
    let inner = (&dp * &p).sum_axis(Axis(1)).insert_axis(Axis(1));
    let grad = &p * &(&dp - &inner);
    Ok(LossGrad { value, grad })
}

/// Outcome of thresholded weak-to-strong consistency on one batch.
#[derive(Debug, Clone)]
pub struct Consistency {
    pub value: f64,
    /// Gradient with respect to the strong-view logits.
    pub grad: Array2<f64>,
    /// Hard pseudo-labels from the weak view.
    pub pseudo_labels: Vec<usize>,
    /// Whether the weak confidence reached the threshold.
    pub mask: Vec<bool>,
}

impl Consistency {
    pub fn pass_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `(1/n) sum_i 1[max p_weak_i >= threshold] H(onehot(argmax p_weak_i),
/// softmax(strong_i + offset))`.
///
/// The weak branch only produces labels and the mask, so it carries no
/// gradient. `offset` is added to every strong logit row before the
/// softmax (logit adjustment).
pub fn threshold_consistency(
    weak_logits: ArrayView2<f64>,
    strong_logits: ArrayView2<f64>,
    threshold: f64,
    offset: Option<ArrayView1<f64>>,
) -> Result<Consistency> {
    check_same(weak_logits, strong_logits, "weak/strong logits")?;
    check_finite(weak_logits, "weak logits")?;
    check_finite(strong_logits, "strong logits")?;
    let (n, k) = strong_logits.dim();
    let weak = softmax(weak_logits);
    let pseudo_labels: Vec<usize> = weak.rows().into_iter().map(argmax).collect();
    let mask: Vec<bool> = weak
        .rows()
        .into_iter()
        .zip(&pseudo_labels)
        .map(|(row, &y)| row[y] >= threshold)
        .collect();
    let adjusted = match offset {
        Some(o) => {
            if o.len() != k {
                return Err(Error::shape(format!(
                    "offset of length {} for {k} classes",
                    o.len()
                )));
            }
            &strong_logits + &o
        }
        None => strong_logits.to_owned(),
    };
    let mut targets = Array2::zeros((n, k));
    for i in 0..n {
        if mask[i] {
            targets[[i, pseudo_labels[i]]] = 1.0;
        }
    }
    let ce = soft_cross_entropy(targets.view(), adjusted.view())?;
    Ok(Consistency {
        value: ce.value,
        grad: ce.grad,
        pseudo_labels,
        mask,
    })
}
