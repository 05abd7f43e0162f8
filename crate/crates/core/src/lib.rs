//! Black-box unsupervised domain adaptation.
//!
//! A source classifier is reachable only through a query interface that
//! returns truncated predictions (top-r labels with confidences, or bare
//! labels). The target model is built in two steps:
//!
//! 1. prototypical distillation: smoothed oracle predictions are blended with
//!    prototype pseudo-labels into a teacher bank, which the target model
//!    distills from under MixUp consistency and mutual-information
//!    regularisation, the bank itself being refreshed by EMA every epoch;
//! 2. debiased fine-tuning: thresholded weak-to-strong consistency with
//!    prior-based logit adjustment, again regularised by mutual information.
//!
//! The [`harness`] module wires the pieces into seeded, cached experiment runs.

pub mod datasets;
pub mod distill;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod losses;
pub mod networks;
pub mod oracle;
pub mod pseudo;
pub mod rng;

pub use error::{Error, Result};
