use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, MetricKind};
use super::plot::{plot_convergence, plot_losses};
use super::Metrics;
use crate::distill::LossBreakdown;
use crate::error::{Error, Result};
use crate::finetune::FinetuneEpoch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Distill,
    Finetune,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Distill => "distill",
            Stage::Finetune => "finetune",
        }
    }
}

/// Target accuracy after one epoch of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub stage: Stage,
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// The reported metric; `None` when the run failed.
    pub value: Option<f64>,
    pub metrics: Option<Metrics>,
    /// Checksum of the final model parameters.
    pub checksum: Option<String>,
    pub distill: Vec<LossBreakdown>,
    pub finetune: Vec<FinetuneEpoch>,
    pub curve: Vec<CurvePoint>,
    pub error: Option<String>,
}

impl SeedOutcome {
    pub fn new(seed: u64, metrics: Metrics, kind: MetricKind) -> Self {
        Self {
            seed,
            value: Some(metrics.value(kind)),
            metrics: Some(metrics),
            checksum: None,
            distill: Vec::new(),
            finetune: Vec::new(),
            curve: Vec::new(),
            error: None,
        }
    }

    pub fn failed(seed: u64, error: String) -> Self {
        Self {
            seed,
            value: None,
            metrics: None,
            checksum: None,
            distill: Vec::new(),
            finetune: Vec::new(),
            curve: Vec::new(),
            error: Some(error),
        }
    }

    /// Accuracy of the stage input, i.e. the last distillation epoch.
    pub fn distilled_value(&self) -> Option<f64> {
        self.curve
            .iter()
            .rev()
            .find(|c| c.stage == Stage::Distill)
            .map(|c| c.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub name: String,
    pub seeds: Vec<SeedOutcome>,
    /// Mean over the seeds that completed.
    pub mean: Option<f64>,
}

impl RowReport {
    pub fn new(name: String, seeds: Vec<SeedOutcome>) -> Self {
        let mean = mean(seeds.iter().filter_map(|s| s.value));
        Self { name, seeds, mean }
    }
}

/// Arithmetic mean, `None` for an empty sequence.
pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub config_fingerprint: String,
    pub metric: MetricKind,
    pub seeds: Vec<u64>,
    pub source_accuracy: f64,
    pub rows: Vec<RowReport>,
    /// Some seed of some row failed.
    pub partial: bool,
    /// Content hash of everything above.
    pub fingerprint: String,
}

impl Report {
    pub fn new(cfg: &ExperimentConfig, source_accuracy: f64, rows: Vec<RowReport>) -> Self {
        let partial = rows
            .iter()
            .any(|r| r.seeds.iter().any(|s| s.error.is_some()));
        let mut report = Self {
            name: cfg.name.clone(),
            config_fingerprint: cfg.fingerprint(),
            metric: cfg.metric(),
            seeds: cfg.seeds.clone(),
            source_accuracy,
            rows,
            partial,
            fingerprint: String::new(),
        };
        report.fingerprint = report.content_hash();
        report
    }

    pub fn content_hash(&self) -> String {
        let mut blank = self.clone();
        blank.fingerprint.clear();
        let json = serde_json::to_string(&blank).expect("report serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn row(&self, name: &str) -> Option<&RowReport> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Accuracy table: one row per preset, one column per seed, then the
    /// mean. Failed seeds are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for s in &self.seeds {
            write!(out, ",seed_{s}").unwrap();
        }
        out.push_str(",mean\n");
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for row in &self.rows {
            out.push_str(&row.name);
            for s in &row.seeds {
                write!(out, ",{}", cell(s.value)).unwrap();
            }
            writeln!(out, ",{}", cell(row.mean)).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Plots,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "plots" => Ok(Self::Plots),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

/// Write `report` into `dir` in the requested formats; returns the files
/// written.
pub fn emit_report(report: &Report, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    for f in formats {
        match f {
            ReportFormat::Csv => put("accuracy.csv", report.to_csv())?,
            ReportFormat::Json => put("report.json", serde_json::to_string_pretty(report)?)?,
            ReportFormat::Plots => {
                put("convergence.svg", plot_convergence(report)?)?;
                put("losses.svg", plot_losses(report)?)?;
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_skips_nothing_it_is_given() {
        assert_eq!(mean([0.5, 0.7, 0.9]), Some(0.7000000000000001));
        assert_eq!(mean(std::iter::empty()), None);
    }

    #[test]
    fn failed_seeds_mark_partial() {
        let cfg = ExperimentConfig::default();
        let ok = SeedOutcome::new(
            1,
            Metrics {
                accuracy: 0.5,
                per_class_accuracy: 0.5,
                class_recall: vec![Some(0.5)],
            },
            MetricKind::Accuracy,
        );
        let rows = vec![RowReport::new(
            "r".into(),
            vec![ok, SeedOutcome::failed(2, "boom".into())],
        )];
        let r = Report::new(&cfg, 0.9, rows);
        assert!(r.partial);
        assert_eq!(r.rows[0].mean, Some(0.5));
        assert_eq!(r.fingerprint, r.content_hash());
    }
}
