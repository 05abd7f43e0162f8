use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamGroup, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_backbone: f64,
    pub lr_new_layers: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-3,
            lr_new_layers: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 64,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.lr_backbone,
            self.lr_new_layers,
            self.momentum,
            self.weight_decay,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.batch_size == 0 {
            return Err(Error::invalid("optimizer settings must all be positive"));
        }
        if self.lr_new_layers < self.lr_backbone {
            return Err(Error::invalid("lr_new_layers must be >= lr_backbone"));
        }
        Ok(())
    }

    /// Learning rates at training progress `p`: `lr_0 * (1 + 10 p)^-0.75`
    /// for each group.
    pub fn lr_at(&self, progress: f64) -> Result<LrPair> {
        if !(0.0..=1.0).contains(&progress) {
            return Err(Error::invalid(format!(
                "progress {progress} outside [0, 1]"
            )));
        }
        let decay = (1.0 + 10.0 * progress).powf(-0.75);
        Ok(LrPair {
            backbone: self.lr_backbone * decay,
            new_layers: self.lr_new_layers * decay,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPair {
    pub backbone: f64,
    pub new_layers: f64,
}

impl LrPair {
    pub const ZERO: LrPair = LrPair {
        backbone: 0.0,
        new_layers: 0.0,
    };

    pub fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::NewLayers => self.new_layers,
            ParamGroup::Buffer => 0.0,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(cfg: &OptimConfig, store: &ParamStore) -> Self {
        Self {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: store
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
        }
    }

    /// Apply one update; returns the learning rate each parameter received.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: LrPair) -> Vec<f64> {
        let mut applied = Vec::with_capacity(store.len());
        for i in 0..store.len() {
            let group = store.get(i).group;
            let rate = lr.for_group(group);
            applied.push(rate);
            if group == ParamGroup::Buffer {
                continue;
            }
            let (wd, mu) = (self.weight_decay, self.momentum);
            let param = &mut store.get_mut(i).value;
            let vel = &mut self.velocity[i];
            ndarray::Zip::from(&mut *vel)
                .and(&*param)
                .and(grads.get(i))
                .for_each(|v, &p, &g| *v = mu * *v + g + wd * p);
            if rate != 0.0 {
                param.zip_mut_with(vel, |p, &v| *p -= rate * v);
            }
        }
        applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{EncoderSpec, Network, TargetArch, TargetModel};

    #[test]
    fn schedule_anchors() {
        let cfg = OptimConfig::default();
        let lr = cfg.lr_at(0.0).unwrap();
        assert_eq!((lr.backbone, lr.new_layers), (1e-3, 1e-2));
        let end = cfg.lr_at(1.0).unwrap();
        // exp(-0.75 ln 11) = 0.165560...
        assert!((end.backbone / 1e-3 - 0.165_560).abs() < 1e-5);
        assert!((end.new_layers / 1e-2 - 0.165_560).abs() < 1e-5);
    }

    #[test]
    fn schedule_is_monotone_and_bounded() {
        let cfg = OptimConfig::default();
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let lr = cfg.lr_at(i as f64 / 100.0).unwrap();
            assert!(lr.new_layers < prev);
            prev = lr.new_layers;
        }
        assert!(cfg.lr_at(-0.01).is_err());
        assert!(cfg.lr_at(1.01).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        let bad = OptimConfig {
            lr_new_layers: 1e-4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_group_audit() {
        let mut model = TargetModel::new(
            TargetArch {
                encoder: EncoderSpec {
                    input_dim: 3,
                    hidden: vec![4],
                },
                bottleneck: 4,
                num_classes: 3,
            },
            0,
        )
        .unwrap();
        let cfg = OptimConfig::default();
        let mut sgd = Sgd::new(&cfg, model.store());
        let grads = Grads::zeros_like(model.store());
        let lr = cfg.lr_at(0.0).unwrap();
        let names: Vec<_> = model.store().iter().map(|p| p.name.clone()).collect();
        let applied = sgd.step(model.store_mut(), &grads, lr);
        for (name, rate) in names.iter().zip(applied) {
            let expected = if name.starts_with("encoder") {
                1e-3
            } else if name.contains("running") {
                0.0
            } else {
                1e-2
            };
            assert_eq!(rate, expected, "{name}");
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut model = TargetModel::new(
            TargetArch {
                encoder: EncoderSpec::desk(2),
                bottleneck: 8,
                num_classes: 2,
            },
            3,
        )
        .unwrap();
        let before = model.checksum();
        let mut grads = Grads::zeros_like(model.store());
        for t in grads.tensors.iter_mut() {
            t.fill(0.37);
        }
        let mut sgd = Sgd::new(&OptimConfig::default(), model.store());
        sgd.step(model.store_mut(), &grads, LrPair::ZERO);
        assert_eq!(model.checksum(), before);
    }
}
