//! The only harness code that touches the source network: train it (or
//! reload it) and seal it inside the oracle.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentConfig;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::networks::{train_source, Checkpoint, SourceTrainConfig};
use crate::oracle::BlackBoxOracle;

pub(crate) struct SourceStage {
    pub oracle: BlackBoxOracle,
    /// Source-domain accuracy of the selected checkpoint.
    pub accuracy: f64,
}

pub(crate) fn source_train_config(cfg: &ExperimentConfig) -> SourceTrainConfig {
    SourceTrainConfig {
        epsilon: cfg.epsilon,
        epochs: cfg.source_epochs,
        hidden: cfg.hidden.clone(),
        seed: cfg.source_seed,
        optim: cfg.optim(),
    }
}

#[derive(Serialize)]
struct SourceKey<'a> {
    data: String,
    train: &'a SourceTrainConfig,
}

#[derive(Serialize, Deserialize)]
struct SourceMeta {
    key: String,
    accuracy: f64,
}

/// Train the source model, or reload it from `dir` when it was trained
/// with the same data and settings, and wrap it in an oracle.
pub(crate) fn prepare_source(
    cfg: &ExperimentConfig,
    source: &Dataset,
    dir: &Path,
) -> Result<SourceStage> {
    let train = source_train_config(cfg);
    let key = hex::encode(Sha256::digest(
        serde_json::to_string(&SourceKey {
            data: source.fingerprint(),
            train: &train,
        })?
        .as_bytes(),
    ));
    let ckpt_path = dir.join("checkpoint.json");
    let meta_path = dir.join("meta.json");
    let meta: Option<SourceMeta> = fs::read_to_string(&meta_path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    if let Some(meta) = meta.filter(|m| m.key == key && ckpt_path.exists()) {
        log::info!("reusing source checkpoint {}", ckpt_path.display());
        return Ok(SourceStage {
            oracle: BlackBoxOracle::from_checkpoint(&ckpt_path)?,
            accuracy: meta.accuracy,
        });
    }
    let trained = train_source(source, None, &train)?;
    log::info!(
        "source model: epoch {} accuracy {:.4}",
        trained.best_epoch,
        trained.best_accuracy
    );
    Checkpoint::from_source(&trained.model, train.seed, trained.best_epoch).save(&ckpt_path)?;
    let meta = SourceMeta {
        key,
        accuracy: trained.best_accuracy,
    };
    fs::write(&meta_path, serde_json::to_string(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    Ok(SourceStage {
        oracle: BlackBoxOracle::new(trained.model),
        accuracy: trained.best_accuracy,
    })
}
