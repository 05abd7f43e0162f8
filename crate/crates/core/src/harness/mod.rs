//! Experiment orchestration: configuration, seeded runs over an ablation
//! matrix, evaluation and report emission.

mod config;
mod plot;
mod report;
mod source_stage;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    preset, DatasetKind, ExperimentConfig, MetricKind, OracleKind, Preset, ShiftKind,
    ABLATION_TABLE,
};
pub use plot::{plot_convergence, plot_losses};
pub use report::{emit_report, CurvePoint, Report, ReportFormat, RowReport, SeedOutcome, Stage};

use crate::datasets::{
    apply_label_shift, load_image_list, make_synthetic_shift, Dataset, DomainRole, ImageFileLoader,
    LabelShift,
};
use crate::distill::{run_distillation_observed, DistillFlags, DistillHistory};
use crate::error::{Error, Result};
use crate::finetune::{predict, run_finetune_observed, FinetuneFlags, FinetuneHistory};
use crate::networks::{Checkpoint, EncoderSpec, Network, TargetArch, TargetModel};
use crate::oracle::{query_dataset, BlackBoxOracle, QueryLog, QueryResults};
use crate::rng::child_seed;

/// Overall and per-class accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Mean recall over the classes present in the evaluation set.
    pub per_class_accuracy: f64,
    /// Recall of each class, `None` for classes with no examples.
    pub class_recall: Vec<Option<f64>>,
}

impl Metrics {
    pub fn value(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::Accuracy => self.accuracy,
            MetricKind::PerClass => self.per_class_accuracy,
        }
    }
}

pub fn metrics_from_predictions(preds: &[usize], labels: &[usize], k: usize) -> Result<Metrics> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no evaluation labels"));
    }
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= k {
            return Err(Error::invalid(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let class_recall: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let present: Vec<f64> = class_recall.iter().flatten().copied().collect();
    Ok(Metrics {
        accuracy: hits.iter().sum::<usize>() as f64 / labels.len() as f64,
        per_class_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        class_recall,
    })
}

/// Score `model` on the held-out labels of `dataset`.
pub fn evaluate(model: &TargetModel, dataset: &Dataset) -> Result<Metrics> {
    let labels = dataset
        .evaluation_labels()
        .map_err(|_| Error::invalid("evaluation needs a labeled dataset"))?;
    let x = dataset.feature_matrix()?;
    metrics_from_predictions(&predict(model, x.view())?, &labels, dataset.num_classes())
}

/// Source and target domains described by `cfg`, label shift applied.
pub fn load_domains(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (source, target) = match cfg.dataset {
        DatasetKind::Synthetic => make_synthetic_shift(&cfg.synthetic_spec())?,
        DatasetKind::ImageList => {
            let k = cfg.class_count();
            let loader = ImageFileLoader {
                size: cfg.image_size,
            };
            let load = |list: &Path| -> Result<Dataset> {
                let root = cfg
                    .image_root
                    .clone()
                    .or_else(|| list.parent().map(Path::to_path_buf))
                    .unwrap_or_default();
                load_image_list(list, &root, k)?.materialize(&loader)
            };
            let source = load(cfg.source_list.as_deref().expect("validated"))?;
            let target = load(cfg.target_list.as_deref().expect("validated"))?;
            (source, target.with_role(DomainRole::Target))
        }
    };
    match cfg.label_shift {
        ShiftKind::None => Ok((source, target)),
        ShiftKind::Rsut => {
            let shift = |reversed| LabelShift::Rsut {
                decay: cfg.rsut_decay,
                reversed,
                seed: cfg.synthetic_seed,
            };
            Ok((
                apply_label_shift(&source, &shift(false))?,
                apply_label_shift(&target, &shift(true))?,
            ))
        }
        ShiftKind::Partial => {
            let shift = LabelShift::Partial {
                fraction: cfg.partial_fraction,
            };
            Ok((source, apply_label_shift(&target, &shift)?))
        }
    }
}

pub fn target_arch(cfg: &ExperimentConfig, input_dim: usize) -> TargetArch {
    TargetArch {
        encoder: EncoderSpec {
            input_dim,
            hidden: cfg.hidden.clone(),
        },
        bottleneck: cfg.bottleneck,
        num_classes: cfg.class_count(),
    }
}

/// Resolve a configured output directory against an optional root.
pub fn resolve_output(dir: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(root) if dir.is_relative() => root.join(dir),
        _ => dir.to_path_buf(),
    }
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

type Distilled = (TargetModel, DistillHistory, Vec<CurvePoint>);

/// Data, oracle and oracle answers of one configured experiment.
pub struct Experiment {
    cfg: ExperimentConfig,
    target: Dataset,
    oracle: BlackBoxOracle,
    source_accuracy: f64,
    answers: QueryResults,
}

impl Experiment {
    /// Load the domains, train or reload the source model and query the
    /// oracle once for every target example (cached on disk).
    pub fn prepare(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (source, target) = load_domains(&cfg)?;
        let stage = source_stage::prepare_source(&cfg, &source, &cfg.output_dir.join("source"))?;
        let cache = oracle_cache_path(&cfg);
        create_dir(cache.parent().expect("cache file has a parent"))?;
        let answers = query_dataset(&stage.oracle, &target, cfg.query_mode(), Some(&cache))?;
        Ok(Self {
            cfg,
            target,
            oracle: stage.oracle,
            source_accuracy: stage.accuracy,
            answers,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn target(&self) -> &Dataset {
        &self.target
    }

    pub fn oracle_answers(&self) -> &QueryResults {
        &self.answers
    }

    /// The query-only view of the source model.
    pub fn oracle(&self) -> &BlackBoxOracle {
        &self.oracle
    }

    pub fn query_log(&self) -> &QueryLog {
        self.oracle.log()
    }

    pub fn source_accuracy(&self) -> f64 {
        self.source_accuracy
    }

    /// Fresh, seeded target model.
    pub fn init_target(&self, seed: u64) -> Result<TargetModel> {
        TargetModel::new(
            target_arch(&self.cfg, self.target.input_dim()?),
            child_seed(seed, "target-init"),
        )
    }

    /// Accuracy of the oracle's own top-1 answers.
    pub fn no_adapt_metrics(&self) -> Result<Metrics> {
        let preds = self
            .target
            .ids()
            .map(|id| Ok(self.answers.get(id)?.top_label()))
            .collect::<Result<Vec<_>>>()?;
        metrics_from_predictions(
            &preds,
            &self.target.evaluation_labels()?,
            self.target.num_classes(),
        )
    }

    pub fn distill(
        &self,
        seed: u64,
        flags: DistillFlags,
        curve: &mut Vec<CurvePoint>,
    ) -> Result<(TargetModel, DistillHistory)> {
        let metric = self.cfg.metric();
        let mut observe = |epoch: usize, model: &TargetModel| {
            curve.push(CurvePoint {
                stage: Stage::Distill,
                epoch,
                accuracy: evaluate(model, &self.target)?.value(metric),
            });
            Ok(())
        };
        run_distillation_observed(
            self.init_target(seed)?,
            &self.target,
            &self.answers,
            &self.cfg.hyperparams(),
            &self.cfg.optim(),
            flags,
            child_seed(seed, "distill"),
            &mut observe,
        )
    }

    pub fn finetune(
        &self,
        model: TargetModel,
        seed: u64,
        flags: FinetuneFlags,
        curve: &mut Vec<CurvePoint>,
    ) -> Result<(TargetModel, FinetuneHistory)> {
        let metric = self.cfg.metric();
        let mut observe = |epoch: usize, model: &TargetModel| {
            curve.push(CurvePoint {
                stage: Stage::Finetune,
                epoch,
                accuracy: evaluate(model, &self.target)?.value(metric),
            });
            Ok(())
        };
        run_finetune_observed(
            model,
            &self.target,
            &self.cfg.finetune_hyperparams(),
            &self.cfg.optim(),
            flags,
            &self.cfg.augment_params(),
            child_seed(seed, "finetune"),
            &mut observe,
        )
    }

    /// Every preset for one seed. Distilled models are shared between rows
    /// with the same distillation flags.
    fn run_seed(&self, seed: u64, presets: &[Preset]) -> Vec<SeedOutcome> {
        let dir = self.cfg.output_dir.join(format!("seed-{seed}"));
        let mut distilled: HashMap<DistillFlags, Result<Distilled, String>> = HashMap::new();
        presets
            .iter()
            .map(|p| {
                let row_dir = dir.join(slug(&p.name));
                let outcome = self.run_row(seed, p, &row_dir, &mut distilled);
                outcome.unwrap_or_else(|e| {
                    log::error!("seed {seed}, row {}: {e}", p.name);
                    SeedOutcome::failed(seed, e.to_string())
                })
            })
            .collect()
    }

    #[allow(clippy::type_complexity)]
    fn run_row(
        &self,
        seed: u64,
        preset: &Preset,
        dir: &Path,
        distilled: &mut HashMap<
            DistillFlags,
            Result<(TargetModel, DistillHistory, Vec<CurvePoint>), String>,
        >,
    ) -> Result<SeedOutcome> {
        let metric = self.cfg.metric();
        let Some(dflags) = preset.distill else {
            let metrics = self.no_adapt_metrics()?;
            return Ok(SeedOutcome::new(seed, metrics, metric));
        };
        create_dir(dir)?;
        let entry = distilled.entry(dflags).or_insert_with(|| {
            let mut curve = Vec::new();
            self.distill(seed, dflags, &mut curve)
                .map(|(m, h)| (m, h, curve))
                .map_err(|e| e.to_string())
        });
        let (model, dhist, dcurve) = match entry {
            Ok(v) => v,
            Err(e) => return Err(Error::invalid(format!("distillation failed: {e}"))),
        };
        let mut curve = dcurve.clone();
        write_jsonl(&dir.join("distill.jsonl"), &dhist.steps)?;
        if let (Some(first), Some(last)) = (dhist.banks.first(), dhist.banks.last()) {
            first.save(&dir.join("bank-init.json"))?;
            last.save(&dir.join("bank-final.json"))?;
        }
        let mut outcome_model = model.clone();
        let mut fhist = None;
        if let Some(fflags) = preset.finetune {
            let (m, h) = self.finetune(model.clone(), seed, fflags, &mut curve)?;
            write_jsonl(&dir.join("finetune.jsonl"), &h.epochs)?;
            outcome_model = m;
            fhist = Some(h);
        }
        let epoch = curve.last().map_or(0, |c| c.epoch);
        Checkpoint::from_target(&outcome_model, seed, epoch).save(&dir.join("model.json"))?;
        let metrics = evaluate(&outcome_model, &self.target)?;
        let mut outcome = SeedOutcome::new(seed, metrics, metric);
        outcome.checksum = Some(outcome_model.checksum());
        outcome.distill = dhist.epochs.clone();
        outcome.finetune = fhist.map(|h| h.epochs).unwrap_or_default();
        outcome.curve = curve;
        Ok(outcome)
    }

    /// Run every configured preset for every seed, seeds in parallel.
    pub fn run(&self) -> Result<Report> {
        let presets = self.cfg.presets()?;
        let per_seed: Vec<Vec<SeedOutcome>> = self
            .cfg
            .seeds
            .par_iter()
            .map(|&s| self.run_seed(s, &presets))
            .collect();
        let rows = presets
            .iter()
            .enumerate()
            .map(|(i, p)| {
                RowReport::new(
                    p.name.clone(),
                    per_seed.iter().map(|o| o[i].clone()).collect(),
                )
            })
            .collect();
        Ok(Report::new(&self.cfg, self.source_accuracy, rows))
    }
}

/// Where the oracle answers of `cfg` are cached; one file per query mode.
pub fn oracle_cache_path(cfg: &ExperimentConfig) -> PathBuf {
    let mode = match cfg.oracle_mode {
        OracleKind::Hard => "hard".to_string(),
        OracleKind::Soft => format!("soft-top{}", cfg.r),
    };
    cfg.output_dir
        .join("cache")
        .join(format!("oracle-{mode}.jsonl"))
}

/// Train (or reload) the source model alone; returns the checkpoint path
/// and its source-domain accuracy.
pub fn prepare_source_checkpoint(cfg: &ExperimentConfig) -> Result<(PathBuf, f64)> {
    cfg.validate()?;
    let (source, _) = load_domains(cfg)?;
    let dir = cfg.output_dir.join("source");
    let stage = source_stage::prepare_source(cfg, &source, &dir)?;
    Ok((dir.join("checkpoint.json"), stage.accuracy))
}

/// Prepare and run the experiment described by `cfg`.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<Report> {
    Experiment::prepare(cfg)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_checkpoints() {
        let m = metrics_from_predictions(&[0, 1, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!((m.accuracy, m.per_class_accuracy), (1.0, 1.0));

        // class 0: 10 of 10 right, class 1: 15 of 30 right
        let mut labels = vec![0; 10];
        labels.extend(vec![1; 30]);
        let mut preds = vec![0; 10];
        preds.extend(vec![1; 15]);
        preds.extend(vec![0; 15]);
        let m = metrics_from_predictions(&preds, &labels, 2).unwrap();
        assert!((m.per_class_accuracy - 0.75).abs() < 1e-12);
        assert!((m.accuracy - 0.625).abs() < 1e-12);
    }

    #[test]
    fn balanced_sets_agree_and_absent_classes_are_skipped() {
        let m = metrics_from_predictions(&[0, 1, 1, 2], &[0, 0, 1, 1], 3).unwrap();
        assert_eq!(m.accuracy, m.per_class_accuracy);
        assert_eq!(m.class_recall[2], None);
        assert!(metrics_from_predictions(&[], &[], 2).is_err());
    }

    #[test]
    fn output_root_applies_to_relative_dirs() {
        let root = Path::new("/srv/runs");
        assert_eq!(resolve_output(Path::new("a"), Some(root)), root.join("a"));
        assert_eq!(
            resolve_output(Path::new("/abs"), Some(root)),
            PathBuf::from("/abs")
        );
        assert_eq!(resolve_output(Path::new("a"), None), PathBuf::from("a"));
    }
}
