use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DomainRole, Example, Input};
use crate::error::{Error, Result};
use crate::rng;

/// Gaussian blobs on a circle, with the target domain rotated and/or
/// translated relative to the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Rotation of the target domain in the plane of the first two axes.
    pub rotation_deg: f64,
    /// Added to every target point; empty means no translation.
    pub translation: Vec<f64>,
    /// Distance of the class means from the origin.
    pub radius: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 2,
            samples_per_class: 200,
            rotation_deg: 40.0,
            translation: Vec::new(),
            radius: 3.0,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(
                "synthetic benchmark needs at least 2 classes",
            ));
        }
        if self.dim < 2 {
            return Err(Error::invalid("synthetic benchmark needs dim >= 2"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::invalid("samples_per_class must be positive"));
        }
        if !self.translation.is_empty() && self.translation.len() != self.dim {
            return Err(Error::shape(format!(
                "translation has length {}, dim is {}",
                self.translation.len(),
                self.dim
            )));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(Error::invalid(
                "noise_scale must be finite and non-negative",
            ));
        }
        Ok(())
    }

    fn class_mean(&self, k: usize) -> Vec<f64> {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / self.num_classes as f64;
        let mut m = vec![0.0; self.dim];
        m[0] = self.radius * angle.cos();
        m[1] = self.radius * angle.sin();
        m
    }

    fn shift(&self, x: &mut [f64]) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (a, b) = (x[0], x[1]);
        x[0] = c * a - s * b;
        x[1] = s * a + c * b;
        for (xi, t) in x.iter_mut().zip(&self.translation) {
            *xi += t;
        }
    }
}

/// Build the labeled source domain and its shifted target counterpart.
///
/// Target labels are kept but the dataset carries the target role, so they
/// are only reachable through the evaluation accessor.
pub fn make_synthetic_shift(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise_scale).map_err(|e| Error::invalid(e.to_string()))?;
    let sample = |label: &str, shifted: bool| {
        let mut rng = rng::stream(spec.seed, label);
        let mut out = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
        for i in 0..spec.samples_per_class {
            for k in 0..spec.num_classes {
                let mut x = spec.class_mean(k);
                for xi in x.iter_mut() {
                    *xi += noise.sample(&mut rng);
                }
                if shifted {
                    spec.shift(&mut x);
                }
                let prefix = if shifted { "tgt" } else { "src" };
                let id = format!("{prefix}-{:06}", i * spec.num_classes + k);
                out.push(Example::new(id, Input::Features(x), Some(k)));
            }
        }
        out
    };
    let source = Dataset::from_parts(
        sample("synthetic/source", false),
        spec.num_classes,
        DomainRole::Source,
        None,
    );
    let target = Dataset::from_parts(
        sample("synthetic/target", true),
        spec.num_classes,
        DomainRole::Target,
        None,
    );
    Ok((source, target))
}
