use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LabelShift {
    /// Geometric class-frequency profile: class of rank `j` keeps
    /// `floor(m * decay^j)` examples, `m` being the smallest class count.
    /// Ranks run with the class index, or against it when `reversed`, so a
    /// source/target pair built with opposite `reversed` flags has mirrored
    /// profiles.
    Rsut {
        decay: f64,
        reversed: bool,
        seed: u64,
    },
    /// Keep the first `ceil(fraction * K)` classes, alphabetically by class
    /// name when names are known, otherwise by index. Class indices are
    /// left untouched.
    Partial { fraction: f64 },
}

/// Subsample `dataset` according to `mode`. Labels are never modified.
pub fn apply_label_shift(dataset: &Dataset, mode: &LabelShift) -> Result<Dataset> {
    if !dataset.is_labeled() && !dataset.is_empty() {
        return Err(Error::invalid("label shift requires a labeled dataset"));
    }
    let k = dataset.num_classes();
    let keep: Vec<bool> = match *mode {
        LabelShift::Partial { fraction } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::invalid(format!(
                    "partial fraction {fraction} outside (0, 1]"
                )));
            }
            // tolerate representation error, e.g. 25/65 * 65
            let m = ((fraction * k as f64) - 1e-9).ceil().max(1.0) as usize;
            let mut order: Vec<usize> = (0..k).collect();
            if let Some(names) = dataset.class_names() {
                order.sort_by(|&a, &b| names[a].cmp(&names[b]).then(a.cmp(&b)));
            }
            let mut kept = vec![false; k];
            for &c in order.iter().take(m) {
                kept[c] = true;
            }
            (0..dataset.len())
                .map(|i| kept[dataset.raw_label(i).expect("labeled")])
                .collect()
        }
        LabelShift::Rsut {
            decay,
            reversed,
            seed,
        } => {
            if !(decay > 0.0 && decay <= 1.0) {
                return Err(Error::invalid(format!("rsut decay {decay} outside (0, 1]")));
            }
            let counts = dataset.class_counts();
            let base = counts.iter().copied().min().unwrap_or(0);
            let mut keep = vec![false; dataset.len()];
            for c in 0..k {
                let rank = if reversed { k - 1 - c } else { c };
                let target = (base as f64 * decay.powi(rank as i32) + 1e-9).floor() as usize;
                if target == 0 {
                    return Err(Error::EmptyClass { class: c });
                }
                let members: Vec<usize> = (0..dataset.len())
                    .filter(|&i| dataset.raw_label(i) == Some(c))
                    .collect();
                let mut rng = rng::stream(seed, &format!("rsut/{c}"));
                for j in index::sample(&mut rng, members.len(), target) {
                    keep[members[j]] = true;
                }
            }
            keep
        }
    };
    let examples: Vec<Example> = dataset
        .examples()
        .iter()
        .zip(keep)
        .filter(|&(_, k)| k)
        .map(|(ex, _)| ex.clone())
        .collect();
    Ok(Dataset::from_parts(
        examples,
        k,
        dataset.role(),
        dataset.class_names().map(<[String]>::to_vec),
    ))
}
