use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{AugmentParams, SyntheticSpec};
use crate::distill::DistillFlags;
use crate::error::{Error, Result};
use crate::finetune::{ConsistencyKind, FinetuneFlags};
use crate::networks::OptimConfig;
use crate::oracle::QueryMode;
use crate::pseudo::Hyperparams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    ImageList,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    Rsut,
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    PerClass,
}

/// Flat experiment description, read from TOML. Unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,

    pub dataset: DatasetKind,
    pub synthetic_classes: usize,
    pub synthetic_dim: usize,
    pub synthetic_samples_per_class: usize,
    pub synthetic_rotation_deg: f64,
    pub synthetic_translation: Vec<f64>,
    pub synthetic_radius: f64,
    pub synthetic_noise: f64,
    pub synthetic_seed: u64,
    /// Image-list files, one `path label` per line.
    pub source_list: Option<PathBuf>,
    pub target_list: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub num_classes: Option<usize>,
    pub image_size: u32,

    pub label_shift: ShiftKind,
    pub rsut_decay: f64,
    pub partial_fraction: f64,
    /// Reported metric; defaults to per-class accuracy under label shift.
    pub metric: Option<MetricKind>,

    pub oracle_mode: OracleKind,

    pub source_epochs: usize,
    pub source_seed: u64,
    pub hidden: Vec<usize>,
    pub bottleneck: usize,

    pub r: usize,
    pub beta: f64,
    pub tau: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub eta: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Fine-tuning epochs; `epochs` when absent.
    pub finetune_epochs: Option<usize>,
    pub pca_dim: Option<usize>,

    pub lr_backbone: f64,
    pub lr_new_layers: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,

    pub augment_jitter: f64,
    pub augment_strong_factor: f64,
    pub augment_mask_fraction: f64,

    pub skd: bool,
    pub mix: bool,
    pub mi_distill: bool,
    pub proto: bool,
    pub fm: bool,
    pub afm: bool,
    pub mi_finetune: bool,
    /// Named presets to run instead of the single flag combination above.
    pub ablations: Vec<String>,

    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let hp = Hyperparams::default();
        let optim = OptimConfig::default();
        let synth = SyntheticSpec::default();
        let aug = AugmentParams::default();
        Self {
            name: "experiment".into(),
            dataset: DatasetKind::Synthetic,
            synthetic_classes: synth.num_classes,
            synthetic_dim: synth.dim,
            synthetic_samples_per_class: synth.samples_per_class,
            synthetic_rotation_deg: synth.rotation_deg,
            synthetic_translation: synth.translation,
            synthetic_radius: synth.radius,
            synthetic_noise: synth.noise_scale,
            synthetic_seed: 7,
            source_list: None,
            target_list: None,
            image_root: None,
            num_classes: None,
            image_size: 32,
            label_shift: ShiftKind::None,
            rsut_decay: 0.7,
            partial_fraction: 1.0,
            metric: None,
            oracle_mode: OracleKind::Soft,
            source_epochs: 50,
            source_seed: 1234,
            hidden: vec![64, 64],
            bottleneck: 256,
            r: hp.r,
            beta: hp.beta,
            tau: hp.tau,
            gamma: hp.gamma,
            alpha: hp.alpha,
            eta: hp.eta,
            rho: hp.rho,
            epsilon: hp.epsilon,
            epochs: hp.epochs,
            finetune_epochs: None,
            pca_dim: None,
            lr_backbone: optim.lr_backbone,
            lr_new_layers: optim.lr_new_layers,
            momentum: optim.momentum,
            weight_decay: optim.weight_decay,
            batch_size: optim.batch_size,
            augment_jitter: aug.jitter,
            augment_strong_factor: aug.strong_factor,
            augment_mask_fraction: aug.mask_fraction,
            skd: true,
            mix: true,
            mi_distill: true,
            proto: true,
            fm: false,
            afm: true,
            mi_finetune: true,
            ablations: Vec::new(),
            seeds: vec![2024, 2025, 2026],
            output_dir: PathBuf::from("runs/experiment"),
        }
    }
}

/// One row of an ablation: which terms are on in each step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    /// `None` means no adaptation at all (the source model's own answers).
    pub distill: Option<DistillFlags>,
    pub finetune: Option<FinetuneFlags>,
}

const fn prod_flags(skd: bool, mix: bool, mi: bool, proto: bool) -> DistillFlags {
    DistillFlags {
        skd,
        mix,
        mi,
        proto,
    }
}

const FULL_PROD: DistillFlags = prod_flags(true, true, true, true);

/// The eleven rows of the component ablation, in order.
pub const ABLATION_TABLE: [&str; 11] = [
    "none",
    "skd",
    "skd+mix",
    "skd+mi",
    "skd+mix+mi",
    "skd+mix+mi+proto",
    "prod+fm",
    "prod+afm",
    "prod+mi",
    "prod+fm+mi",
    "prod+afm+mi",
];

/// Resolve a preset name. Besides the table rows, `no_adapt`, `skd_only`,
/// `prod` and `prodding` are accepted.
pub fn preset(name: &str) -> Result<Preset> {
    let canonical = match name {
        "no_adapt" => "none",
        "skd_only" => "skd",
        "prod" => "skd+mix+mi+proto",
        "prodding" => "prod+afm+mi",
        other => other,
    };
    let ft = |consistency, mi| Some(FinetuneFlags { consistency, mi });
    let (distill, finetune) = match canonical {
        "none" => (None, None),
        "skd" => (Some(prod_flags(true, false, false, false)), None),
        "skd+mix" => (Some(prod_flags(true, true, false, false)), None),
        "skd+mi" => (Some(prod_flags(true, false, true, false)), None),
        "skd+mix+mi" => (Some(prod_flags(true, true, true, false)), None),
        "skd+mix+mi+proto" => (Some(FULL_PROD), None),
        "prod+fm" => (Some(FULL_PROD), ft(ConsistencyKind::Fm, false)),
        "prod+afm" => (Some(FULL_PROD), ft(ConsistencyKind::Afm, false)),
        "prod+mi" => (Some(FULL_PROD), ft(ConsistencyKind::None, true)),
        "prod+fm+mi" => (Some(FULL_PROD), ft(ConsistencyKind::Fm, true)),
        "prod+afm+mi" => (Some(FULL_PROD), ft(ConsistencyKind::Afm, true)),
        other => return Err(Error::Config(format!("unknown ablation preset `{other}`"))),
    };
    Ok(Preset {
        name: name.to_string(),
        distill,
        finetune,
    })
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let config_err = |e: Error| Error::Config(e.to_string());
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.fm && self.afm {
            return Err(Error::Config("fm and afm are mutually exclusive".into()));
        }
        self.hyperparams().validate().map_err(config_err)?;
        if let Some(ft) = self.finetune_epochs {
            self.hyperparams_for(ft).validate().map_err(config_err)?;
        }
        self.optim().validate().map_err(config_err)?;
        if self.bottleneck == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        match self.dataset {
            DatasetKind::Synthetic => self.synthetic_spec().validate().map_err(config_err)?,
            DatasetKind::ImageList => {
                if self.source_list.is_none() || self.target_list.is_none() {
                    return Err(Error::Config(
                        "image_list datasets need source_list and target_list".into(),
                    ));
                }
                if self.num_classes.is_none_or(|k| k < 2) {
                    return Err(Error::Config(
                        "image_list datasets need num_classes >= 2".into(),
                    ));
                }
            }
        }
        if self.label_shift == ShiftKind::Rsut && !(self.rsut_decay > 0.0 && self.rsut_decay <= 1.0)
        {
            return Err(Error::Config(format!(
                "rsut_decay {} outside (0, 1]",
                self.rsut_decay
            )));
        }
        if self.label_shift == ShiftKind::Partial
            && !(self.partial_fraction > 0.0 && self.partial_fraction <= 1.0)
        {
            return Err(Error::Config(format!(
                "partial_fraction {} outside (0, 1]",
                self.partial_fraction
            )));
        }
        for name in &self.ablations {
            preset(name)?;
        }
        self.query_mode()
            .validate(self.class_count())
            .map_err(config_err)?;
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        match self.dataset {
            DatasetKind::Synthetic => self.synthetic_classes,
            DatasetKind::ImageList => self.num_classes.unwrap_or(0),
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.synthetic_classes,
            dim: self.synthetic_dim,
            samples_per_class: self.synthetic_samples_per_class,
            rotation_deg: self.synthetic_rotation_deg,
            translation: self.synthetic_translation.clone(),
            radius: self.synthetic_radius,
            noise_scale: self.synthetic_noise,
            seed: self.synthetic_seed,
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        self.hyperparams_for(self.epochs)
    }

    pub fn finetune_hyperparams(&self) -> Hyperparams {
        self.hyperparams_for(self.finetune_epochs.unwrap_or(self.epochs))
    }

    fn hyperparams_for(&self, epochs: usize) -> Hyperparams {
        Hyperparams {
            r: self.r,
            beta: self.beta,
            tau: self.tau,
            gamma: self.gamma,
            alpha: self.alpha,
            eta: self.eta,
            rho: self.rho,
            epsilon: self.epsilon,
            epochs,
            pca_dim: self.pca_dim,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr_backbone: self.lr_backbone,
            lr_new_layers: self.lr_new_layers,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
        }
    }

    pub fn augment_params(&self) -> AugmentParams {
        AugmentParams {
            jitter: self.augment_jitter,
            strong_factor: self.augment_strong_factor,
            mask_fraction: self.augment_mask_fraction,
            ..AugmentParams::default()
        }
    }

    pub fn query_mode(&self) -> QueryMode {
        match self.oracle_mode {
            OracleKind::Hard => QueryMode::Hard,
            OracleKind::Soft => QueryMode::SoftTopR { r: self.r },
        }
    }

    pub fn metric(&self) -> MetricKind {
        self.metric.unwrap_or(match self.label_shift {
            ShiftKind::None => MetricKind::Accuracy,
            _ => MetricKind::PerClass,
        })
    }

    /// The rows to run: the named presets, or the single combination given
    /// by the flag keys.
    pub fn presets(&self) -> Result<Vec<Preset>> {
        if !self.ablations.is_empty() {
            return self.ablations.iter().map(|n| preset(n)).collect();
        }
        let distill = DistillFlags {
            skd: self.skd,
            mix: self.mix,
            mi: self.mi_distill,
            proto: self.proto,
        };
        let consistency = match (self.fm, self.afm) {
            (true, _) => ConsistencyKind::Fm,
            (false, true) => ConsistencyKind::Afm,
            (false, false) => ConsistencyKind::None,
        };
        let finetune = FinetuneFlags {
            consistency,
            mi: self.mi_finetune,
        };
        Ok(vec![Preset {
            name: self.name.clone(),
            distill: distill.any_objective().then_some(distill),
            finetune: (distill.any_objective() && finetune.any_objective()).then_some(finetune),
        }])
    }

    /// Content hash of every field that affects results (the output
    /// directory does not).
    pub fn fingerprint(&self) -> String {
        let mut semantic = self.clone();
        semantic.output_dir = PathBuf::new();
        let json = serde_json::to_string(&semantic).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("etta = 0.9\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn defaults_follow_reference_settings() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c.seeds, vec![2024, 2025, 2026]);
        assert_eq!(c.hyperparams(), Hyperparams::default());
        assert_eq!(c.optim(), OptimConfig::default());
    }

    #[test]
    fn fingerprint_ignores_comments_order_and_output_dir() {
        let a = ExperimentConfig::from_toml_str("eta = 0.6\nrho = 0.4\n").unwrap();
        let b = ExperimentConfig::from_toml_str(
            "# tuned\nrho = 0.4\neta = 0.6\noutput_dir = \"elsewhere\"\n",
        )
        .unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = ExperimentConfig::from_toml_str("eta = 0.61\nrho = 0.4\n").unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn exclusive_flags_and_ranges() {
        assert!(ExperimentConfig::from_toml_str("fm = true\nafm = true\n").is_err());
        assert!(ExperimentConfig::from_toml_str("beta = 1.5\n").is_err());
        assert!(ExperimentConfig::from_toml_str("seeds = []\n").is_err());
        assert!(ExperimentConfig::from_toml_str("ablations = [\"bogus\"]\n").is_err());
        assert!(ExperimentConfig::from_toml_str("r = 4\n").is_err());
    }

    #[test]
    fn table_presets_resolve() {
        for name in ABLATION_TABLE {
            preset(name).unwrap();
        }
        let none = preset("no_adapt").unwrap();
        assert!(none.distill.is_none() && none.finetune.is_none());
        let p = preset("prodding").unwrap();
        assert_eq!(p.distill, Some(FULL_PROD));
        assert_eq!(p.finetune, Some(FinetuneFlags::default()));
        assert!(!preset("skd_only").unwrap().distill.unwrap().proto);
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
