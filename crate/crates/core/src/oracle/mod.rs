//! The source model behind a black-box query interface.
//!
//! [`BlackBoxOracle`] owns the source network and answers each query with a
//! [`QueryResult`]: the top label only ([`QueryMode::Hard`]) or the top-`r`
//! labels with their probabilities ([`QueryMode::SoftTopR`]). Parameters,
//! gradients and full probability vectors never leave this module.

mod cache;
mod server;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datasets::Input;
use crate::error::{Error, Result};
use crate::losses;
use crate::networks::{Checkpoint, Mode, Network, SourceModel};
use crate::pseudo::top_r_indices;

pub use cache::{invalidate_cache, query_dataset, QueryResults};
pub use server::{serve, serve_blocking, RemoteOracle, ServerHandle, PROTOCOL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueryMode {
    /// Predicted label only.
    Hard,
    /// Top-`r` labels and their probabilities.
    SoftTopR { r: usize },
}

impl QueryMode {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match *self {
            QueryMode::Hard => Ok(()),
            QueryMode::SoftTopR { r } if r >= 1 && r < num_classes => Ok(()),
            QueryMode::SoftTopR { r } => Err(Error::invalid(format!(
                "invalid mode: r = {r} must satisfy 1 <= r <= K - 1 = {}",
                num_classes.saturating_sub(1)
            ))),
        }
    }

    fn kept(&self) -> usize {
        match *self {
            QueryMode::Hard => 1,
            QueryMode::SoftTopR { r } => r,
        }
    }
}

/// What the oracle reveals about one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    /// Class indices by decreasing confidence.
    pub labels: Vec<usize>,
    /// Probabilities matching `labels`; absent for hard answers.
    pub confidences: Option<Vec<f64>>,
    pub mode: QueryMode,
}

impl QueryResult {
    pub fn top_label(&self) -> usize {
        self.labels[0]
    }
}

/// Query counter with a per-id record of the mode used.
#[derive(Debug, Default)]
pub struct QueryLog {
    count: AtomicUsize,
    per_id: Mutex<BTreeMap<String, Vec<QueryMode>>>,
}

impl QueryLog {
    pub fn count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }

    fn record(&self, id: Option<&str>, mode: QueryMode) {
        self.count.fetch_add(1, Ordering::SeqCst);
        if let Some(id) = id {
            self.per_id
                .lock()
                .expect("query log poisoned")
                .entry(id.to_string())
                .or_default()
                .push(mode);
        }
    }

    /// Modes used for `id`, in query order.
    pub fn modes_for(&self, id: &str) -> Vec<QueryMode> {
        self.per_id
            .lock()
            .expect("query log poisoned")
            .get(id)
            .cloned()
            .unwrap_or_default()
    }

    /// Largest number of queries issued for any single id.
    pub fn max_queries_per_id(&self) -> usize {
        self.per_id
            .lock()
            .expect("query log poisoned")
            .values()
            .map(Vec::len)
            .max()
            .unwrap_or(0)
    }

    pub fn distinct_ids(&self) -> usize {
        self.per_id.lock().expect("query log poisoned").len()
    }
}

/// Anything that answers black-box queries: the in-process oracle or a
/// remote client.
pub trait QueryService {
    fn num_classes(&self) -> usize;
    /// Stable identity of the model behind the service.
    fn fingerprint(&self) -> String;
    fn query_with_id(&self, id: &str, x: &Input, mode: QueryMode) -> Result<QueryResult>;
}

pub struct BlackBoxOracle {
    model: SourceModel,
    fingerprint: String,
    log: QueryLog,
}

impl BlackBoxOracle {
    pub fn new(model: SourceModel) -> Self {
        let fingerprint = model.checksum();
        Self {
            model,
            fingerprint,
            log: QueryLog::default(),
        }
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        Ok(Self::new(Checkpoint::load(path)?.into_source()?))
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    pub fn log(&self) -> &QueryLog {
        &self.log
    }

    /// Answer a single anonymous query.
    pub fn query(&self, x: &Input, mode: QueryMode) -> Result<QueryResult> {
        self.answer(None, x, mode)
    }

    fn answer(&self, id: Option<&str>, x: &Input, mode: QueryMode) -> Result<QueryResult> {
        mode.validate(self.model.num_classes())?;
        let row = x.to_row()?;
        if row.len() != self.model.input_dim() {
            return Err(Error::shape(format!(
                "malformed input: {} values, oracle expects {}",
                row.len(),
                self.model.input_dim()
            )));
        }
        let probs = self.probabilities(&row)?;
        self.log.record(id, mode);
        Ok(truncate(&probs, mode))
    }

    fn probabilities(&self, row: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, row.len()), row.to_vec())
            .map_err(|e| Error::shape(e.to_string()))?;
        let logits = self.model.forward(x.view(), Mode::Eval)?;
        Ok(losses::softmax(logits.view()).row(0).to_vec())
    }

    /// Full probability vector; test builds only.
    #[cfg(test)]
    fn backdoor_probabilities(&self, x: &Input) -> Vec<f64> {
        self.probabilities(&x.to_row().unwrap()).unwrap()
    }
}

impl QueryService for BlackBoxOracle {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn query_with_id(&self, id: &str, x: &Input, mode: QueryMode) -> Result<QueryResult> {
        self.answer(Some(id), x, mode)
    }
}

/// Sort-and-truncate; ties go to the lowest class index in both modes.
fn truncate(probs: &[f64], mode: QueryMode) -> QueryResult {
    let labels = top_r_indices(probs, mode.kept());
    let confidences = match mode {
        QueryMode::Hard => None,
        QueryMode::SoftTopR { .. } => Some(labels.iter().map(|&i| probs[i]).collect()),
    };
    QueryResult {
        labels,
        confidences,
        mode,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{EncoderSpec, SourceArch};

    pub(super) fn oracle(k: usize, dim: usize, seed: u64) -> BlackBoxOracle {
        BlackBoxOracle::new(
            SourceModel::new(
                SourceArch {
                    encoder: EncoderSpec {
                        input_dim: dim,
                        hidden: vec![8],
                    },
                    num_classes: k,
                },
                seed,
            )
            .unwrap(),
        )
    }

    #[test]
    fn truncation_checkpoints() {
        let hard = truncate(&[0.7, 0.2, 0.1], QueryMode::Hard);
        assert_eq!((hard.labels, hard.confidences), (vec![0], None));
        let top1 = truncate(&[0.7, 0.2, 0.1], QueryMode::SoftTopR { r: 1 });
        assert_eq!((top1.labels, top1.confidences), (vec![0], Some(vec![0.7])));
        let top2 = truncate(&[0.5, 0.3, 0.2], QueryMode::SoftTopR { r: 2 });
        assert_eq!(
            (top2.labels, top2.confidences),
            (vec![0, 1], Some(vec![0.5, 0.3]))
        );
    }

    #[test]
    fn ties_resolve_to_lowest_index_in_both_modes() {
        let p = [0.2, 0.4, 0.4];
        assert_eq!(truncate(&p, QueryMode::Hard).labels, vec![1]);
        assert_eq!(
            truncate(&p, QueryMode::SoftTopR { r: 2 }).labels,
            vec![1, 2]
        );
    }

    #[test]
    fn top_label_is_hidden_argmax() {
        let o = oracle(5, 3, 17);
        let mut rng = crate::rng::stream(1, "oracle-test");
        use rand::Rng as _;
        for _ in 0..200 {
            let x = Input::Features((0..3).map(|_| rng.random_range(-3.0..3.0)).collect());
            let full = o.backdoor_probabilities(&x);
            let argmax = crate::losses::argmax(ndarray::ArrayView1::from(full.as_slice()));
            for mode in [
                QueryMode::Hard,
                QueryMode::SoftTopR { r: 1 },
                QueryMode::SoftTopR { r: 4 },
            ] {
                let res = o.query(&x, mode).unwrap();
                assert_eq!(res.labels[0], argmax);
                if let Some(c) = &res.confidences {
                    assert!(c.windows(2).all(|w| w[0] >= w[1]));
                    assert!(c.iter().all(|&v| v > 0.0 && v <= 1.0));
                    assert!(c.iter().sum::<f64>() <= 1.0 + 1e-12);
                    let mut uniq = res.labels.clone();
                    uniq.dedup();
                    assert_eq!(uniq.len(), res.labels.len());
                }
            }
        }
        assert_eq!(o.log().count(), 600);
    }

    #[test]
    fn invalid_mode_and_input_are_rejected() {
        let o = oracle(3, 2, 0);
        let x = Input::Features(vec![0.0, 1.0]);
        assert!(o.query(&x, QueryMode::SoftTopR { r: 3 }).is_err());
        assert!(o.query(&x, QueryMode::SoftTopR { r: 0 }).is_err());
        assert!(o
            .query(&Input::Features(vec![1.0]), QueryMode::Hard)
            .is_err());
        assert_eq!(o.log().count(), 0);
    }

    #[test]
    fn query_result_json_is_lossless() {
        let r = QueryResult {
            labels: vec![2, 0],
            confidences: Some(vec![0.123_456_789_012_345_68, 1.0 / 3.0]),
            mode: QueryMode::SoftTopR { r: 2 },
        };
        let back: QueryResult = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
