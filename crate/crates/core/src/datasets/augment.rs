use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImageTensor, Input};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Weak,
    Strong,
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(AugmentKind::Weak),
            "strong" => Ok(AugmentKind::Strong),
            other => Err(Error::invalid(format!(
                "unknown augmentation policy `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Std-dev of the weak Gaussian jitter on feature inputs.
    pub jitter: f64,
    /// Strong jitter is `jitter * strong_factor`.
    pub strong_factor: f64,
    /// Fraction of coordinates zeroed by the strong feature policy
    /// (`floor(fraction * dim)` of them).
    pub mask_fraction: f64,
    /// Padding used by the image random crop.
    pub crop_padding: usize,
    /// Number of operations chained by the strong image policy.
    pub strong_ops: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            jitter: 0.1,
            strong_factor: 4.0,
            mask_fraction: 0.25,
            crop_padding: 4,
            strong_ops: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub kind: AugmentKind,
    pub params: AugmentParams,
}

impl AugmentationPolicy {
    pub fn weak(params: AugmentParams) -> Self {
        Self {
            kind: AugmentKind::Weak,
            params,
        }
    }

    pub fn strong(params: AugmentParams) -> Self {
        Self {
            kind: AugmentKind::Strong,
            params,
        }
    }
}

/// Apply `policy` to `x`. Deterministic in `seed`; output shape equals input
/// shape.
pub fn augment(x: &Input, policy: &AugmentationPolicy, seed: u64) -> Result<Input> {
    let mut rng = rng::stream(seed, "augment");
    match x {
        Input::Features(v) => Ok(Input::Features(augment_features(v, policy, &mut rng)?)),
        Input::Image(img) => Ok(Input::Image(augment_image(img, policy, &mut rng))),
        Input::Path(p) => Err(Error::invalid(format!(
            "cannot augment undecoded input {}",
            p.display()
        ))),
    }
}

fn augment_features(v: &[f64], policy: &AugmentationPolicy, rng: &mut Rng) -> Result<Vec<f64>> {
    let p = &policy.params;
    let sigma = match policy.kind {
        AugmentKind::Weak => p.jitter,
        AugmentKind::Strong => p.jitter * p.strong_factor,
    };
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::invalid(format!("invalid jitter scale {sigma}")));
    }
    let mut out = v.to_vec();
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        for x in out.iter_mut() {
            *x += noise.sample(rng);
        }
    }
    if policy.kind == AugmentKind::Strong {
        if !(0.0..=1.0).contains(&p.mask_fraction) {
            return Err(Error::invalid(format!(
                "mask fraction {} outside [0, 1]",
                p.mask_fraction
            )));
        }
        let count = ((p.mask_fraction * out.len() as f64) + 1e-9).floor() as usize;
        for i in index::sample(rng, out.len(), count.min(out.len())) {
            out[i] = 0.0;
        }
    }
    Ok(out)
}

fn augment_image(img: &ImageTensor, policy: &AugmentationPolicy, rng: &mut Rng) -> ImageTensor {
    let mut out = crop_flip(img, policy.params.crop_padding, rng);
    if policy.kind == AugmentKind::Strong {
        for _ in 0..policy.params.strong_ops {
            let op = ImageOp::ALL[rng.random_range(0..ImageOp::ALL.len())];
            let magnitude: f32 = rng.random_range(0.0..1.0);
            out = op.apply(&out, magnitude);
        }
    }
    out
}

/// Zero-padded random crop back to the original size, then a coin-flip
/// horizontal mirror.
fn crop_flip(img: &ImageTensor, pad: usize, rng: &mut Rng) -> ImageTensor {
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let flip = rng.random_bool(0.5);
    let mut out = ImageTensor::zeros(img.channels, img.height, img.width);
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let sx = if flip { img.width - 1 - x } else { x } as isize + dx;
                let sy = y as isize + dy;
                if sx >= 0 && sy >= 0 && (sx as usize) < img.width && (sy as usize) < img.height {
                    let i = out.idx(c, y, x);
                    out.data[i] = img.get(c, sy as usize, sx as usize);
                }
            }
        }
    }
    out
}

/// Photometric and geometric operations of the AutoAugment family.
#[derive(Debug, Clone, Copy)]
enum ImageOp {
    Brightness,
    Contrast,
    Solarize,
    Posterize,
    AutoContrast,
    Rotate,
    ShearX,
    TranslateY,
}

impl ImageOp {
    const ALL: [ImageOp; 8] = [
        ImageOp::Brightness,
        ImageOp::Contrast,
        ImageOp::Solarize,
        ImageOp::Posterize,
        ImageOp::AutoContrast,
        ImageOp::Rotate,
        ImageOp::ShearX,
        ImageOp::TranslateY,
    ];

    fn apply(self, img: &ImageTensor, m: f32) -> ImageTensor {
        let mut out = img.clone();
        match self {
            ImageOp::Brightness => {
                let f = 0.1 + 1.8 * m;
                out.data
                    .iter_mut()
                    .for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
            }
            ImageOp::Contrast => {
                let f = 0.1 + 1.8 * m;
                let mean = img.data.iter().sum::<f32>() / img.data.len().max(1) as f32;
                out.data
                    .iter_mut()
                    .for_each(|v| *v = (mean + (*v - mean) * f).clamp(0.0, 1.0));
            }
            ImageOp::Solarize => {
                let t = 1.0 - m;
                out.data.iter_mut().for_each(|v| {
                    if *v >= t {
                        *v = 1.0 - *v
                    }
                });
            }
            ImageOp::Posterize => {
                let levels = (2.0f32).powi(1 + (m * 6.0) as i32);
                out.data
                    .iter_mut()
                    .for_each(|v| *v = (*v * (levels - 1.0)).round() / (levels - 1.0));
            }
            ImageOp::AutoContrast => {
                let plane = img.height * img.width;
                for c in 0..img.channels {
                    let ch = &mut out.data[c * plane..(c + 1) * plane];
                    let (lo, hi) = ch
                        .iter()
                        .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                    if hi > lo {
                        ch.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
                    }
                }
            }
            ImageOp::Rotate => {
                let theta = (m * 60.0 - 30.0).to_radians();
                out = resample(img, |x, y| {
                    let (s, c) = theta.sin_cos();
                    (c * x + s * y, -s * x + c * y)
                });
            }
            ImageOp::ShearX => {
                let k = m * 0.6 - 0.3;
                out = resample(img, |x, y| (x + k * y, y));
            }
            ImageOp::TranslateY => {
                let t = (m - 0.5) * 0.6 * img.height as f32;
                out = resample(img, |x, y| (x, y - t));
            }
        }
        out
    }
}

/// Nearest-neighbour inverse warp about the image centre; out-of-range
/// samples are zero.
fn resample(img: &ImageTensor, map: impl Fn(f32, f32) -> (f32, f32)) -> ImageTensor {
    let mut out = ImageTensor::zeros(img.channels, img.height, img.width);
    let cy = (img.height as f32 - 1.0) / 2.0;
    let cx = (img.width as f32 - 1.0) / 2.0;
    for y in 0..img.height {
        for x in 0..img.width {
            let (sx, sy) = map(x as f32 - cx, y as f32 - cy);
            let (sx, sy) = ((sx + cx).round(), (sy + cy).round());
            if sx < 0.0 || sy < 0.0 || sx >= img.width as f32 || sy >= img.height as f32 {
                continue;
            }
            for c in 0..img.channels {
                let i = out.idx(c, y, x);
                out.data[i] = img.get(c, sy as usize, sx as usize);
            }
        }
    }
    out
}
