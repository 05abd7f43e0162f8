#![allow(dead_code)]

use ndarray::Array2;
use prodding::harness::ExperimentConfig;
use prodding::networks::{
    EncoderSpec, Grads, Network, SourceArch, SourceModel, TargetArch, TargetModel,
};
use prodding::rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const K: usize = 3;
pub const DIM: usize = 4;
pub const FD_STEP: f64 = 1e-5;

pub fn toy_target(seed: u64) -> TargetModel {
    TargetModel::new(
        TargetArch {
            encoder: EncoderSpec {
                input_dim: DIM,
                hidden: vec![6],
            },
            bottleneck: 5,
            num_classes: K,
        },
        seed,
    )
    .unwrap()
}

pub fn toy_source(seed: u64) -> SourceModel {
    SourceModel::new(
        SourceArch {
            encoder: EncoderSpec {
                input_dim: DIM,
                hidden: vec![6],
            },
            num_classes: K,
        },
        seed,
    )
    .unwrap()
}

pub fn gaussian(rows: usize, cols: usize, seed: u64, label: &str) -> Array2<f64> {
    let mut r = rng::stream(seed, label);
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut r))
}

/// Random probability rows from a Dirichlet(1) draw.
pub fn prob_rows(rows: usize, k: usize, r: &mut impl Rng) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, k), |_| -(r.random::<f64>().max(1e-12)).ln());
    for mut row in m.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    m
}

/// Central-difference gradient of `f` over the trainable parameters.
pub fn finite_difference<N: Network + Clone>(model: &N, f: impl Fn(&N) -> f64) -> Vec<f64> {
    let base = model.store().flat_trainable();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + FD_STEP;
        probe.store_mut().set_flat_trainable(&p);
        let up = f(&probe);
        p[i] = base[i] - FD_STEP;
        probe.store_mut().set_flat_trainable(&p);
        let down = f(&probe);
        out.push((up - down) / (2.0 * FD_STEP));
    }
    out
}

/// Norm-wise relative error between two gradients.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

pub fn analytic<N: Network>(model: &N, g: &Grads) -> Vec<f64> {
    g.flat_trainable(model.store())
}

/// The rotated-blob benchmark used throughout the suite.
pub fn benchmark_config(dir: &std::path::Path) -> ExperimentConfig {
    let text = format!(
        "name = \"synthetic-rotation\"\n\
         synthetic_rotation_deg = 40.0\n\
         synthetic_noise = 1.0\n\
         ablations = [\"no_adapt\", \"skd_only\", \"prod\", \"prodding\"]\n\
         output_dir = {:?}\n",
        dir.display().to_string()
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

/// A cut-down configuration for plumbing tests.
pub fn small_config(dir: &std::path::Path) -> ExperimentConfig {
    let text = format!(
        "name = \"small\"\n\
         synthetic_samples_per_class = 40\n\
         source_epochs = 5\n\
         epochs = 2\n\
         hidden = [16]\n\
         bottleneck = 16\n\
         seeds = [2024]\n\
         output_dir = {:?}\n",
        dir.display().to_string()
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}
