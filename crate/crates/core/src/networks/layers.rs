//! Building blocks with explicit forward caches and backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// `y = x W^T + b`, `W` stored as `(out, in)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialisation for weight and bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
        let b = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound));
        Self {
            w: store.add(&format!("{name}.weight"), group, w.into_dyn()),
            b: store.add(&format!("{name}.bias"), group, b.into_dyn()),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&store.mat(self.w).t()) + store.vec(self.b)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grads: &mut Grads,
    ) -> Array2<f64> {
        grads.add_to(self.w, dy.t().dot(&x));
        grads.add_to(self.b, dy.sum_axis(Axis(0)));
        dy.dot(&store.mat(self.w))
    }
}

/// Stack of linear layers, each followed by ReLU.
#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub(crate) struct MlpTrace {
    /// Input of every layer, then the final output.
    pub acts: Vec<Array2<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("non-empty trace")
    }
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input_dim: usize,
        hidden: &[usize],
        rng: &mut Rng,
    ) -> Self {
        let mut fan_in = input_dim;
        let layers = hidden
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let l = Linear::new(store, &format!("{name}.{i}"), group, fan_in, h, rng);
                fan_in = h;
                l
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f64>) -> MlpTrace {
        let mut acts = vec![x.to_owned()];
        for layer in &self.layers {
            let z = layer.forward(store, acts.last().unwrap().view());
            acts.push(z.mapv(|v| v.max(0.0)));
        }
        MlpTrace { acts }
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        trace: &MlpTrace,
        dout: ArrayView2<f64>,
        grads: &mut Grads,
    ) -> Array2<f64> {
        let mut d = dout.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            // ReLU: active where the output is positive
            d.zip_mut_with(&trace.acts[i + 1], |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            });
            d = layer.backward(store, trace.acts[i].view(), d.view(), grads);
        }
        d
    }
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub(crate) struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BnTrace {
    pub mode: Mode,
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(
                &format!("{name}.weight"),
                ParamGroup::NewLayers,
                Array1::<f64>::ones(dim).into_dyn(),
            ),
            beta: store.add(
                &format!("{name}.bias"),
                ParamGroup::NewLayers,
                Array1::<f64>::zeros(dim).into_dyn(),
            ),
            running_mean: store.add(
                &format!("{name}.running_mean"),
                ParamGroup::Buffer,
                Array1::<f64>::zeros(dim).into_dyn(),
            ),
            running_var: store.add(
                &format!("{name}.running_var"),
                ParamGroup::Buffer,
                Array1::<f64>::ones(dim).into_dyn(),
            ),
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: ArrayView2<f64>,
        mode: Mode,
    ) -> Result<(Array2<f64>, BnTrace)> {
        let (mean, var) = match mode {
            Mode::Train => {
                if x.nrows() < 2 {
                    return Err(Error::invalid(
                        "batch norm in training mode needs at least 2 rows",
                    ));
                }
                let mean = x.mean_axis(Axis(0)).expect("non-empty");
                let var = x.var_axis(Axis(0), 0.0);
                (mean, var)
            }
            Mode::Eval => (
                store.vec(self.running_mean).to_owned(),
                store.vec(self.running_var).to_owned(),
            ),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = (&x - &mean) * &inv_std;
        let y = &xhat * &store.vec(self.gamma) + store.vec(self.beta);
        Ok((
            y,
            BnTrace {
                mode,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        trace: &BnTrace,
        dy: ArrayView2<f64>,
        grads: &mut Grads,
    ) -> Array2<f64> {
        grads.add_to(self.gamma, (&dy * &trace.xhat).sum_axis(Axis(0)));
        grads.add_to(self.beta, dy.sum_axis(Axis(0)));
        let dxhat = &dy * &store.vec(self.gamma);
        match trace.mode {
            Mode::Eval => dxhat * &trace.inv_std,
            Mode::Train => {
                let n = dy.nrows() as f64;
                let sum_d = dxhat.sum_axis(Axis(0));
                let sum_dx = (&dxhat * &trace.xhat).sum_axis(Axis(0));
                let inner = dxhat * n - &sum_d - &(&trace.xhat * &sum_dx);
                inner * &(&trace.inv_std / n)
            }
        }
    }

    /// Fold the batch statistics of a training-mode pass into the running
    /// estimates (unbiased variance, momentum 0.1).
    pub fn commit(&self, store: &mut ParamStore, trace: &BnTrace) {
        if trace.mode != Mode::Train {
            return;
        }
        let n = trace.xhat.nrows() as f64;
        let unbiased = &trace.batch_var * (n / (n - 1.0));
        let rm = &mut store.get_mut(self.running_mean).value;
        *rm = &*rm * (1.0 - BN_MOMENTUM) + &(trace.batch_mean.clone().into_dyn() * BN_MOMENTUM);
        let rv = &mut store.get_mut(self.running_var).value;
        *rv = &*rv * (1.0 - BN_MOMENTUM) + &(unbiased.into_dyn() * BN_MOMENTUM);
    }
}

/// Linear layer whose effective weight rows are `v_k / ||v_k||`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct WeightNormLinear {
    pub v: usize,
    pub b: usize,
}

impl WeightNormLinear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let v = Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(rng));
        Self {
            v: store.add(
                &format!("{name}.weight_v"),
                ParamGroup::NewLayers,
                v.into_dyn(),
            ),
            b: store.add(
                &format!("{name}.bias"),
                ParamGroup::NewLayers,
                Array1::<f64>::zeros(fan_out).into_dyn(),
            ),
        }
    }

    pub fn row_norms(store: &ParamStore, v: usize) -> Array1<f64> {
        store
            .mat(v)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt().max(f64::MIN_POSITIVE))
    }

    /// Effective (unit-row) weight matrix.
    pub fn weight(&self, store: &ParamStore) -> Array2<f64> {
        let norms = Self::row_norms(store, self.v);
        &store.mat(self.v) / &norms.insert_axis(Axis(1))
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight(store).t()) + store.vec(self.b)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grads: &mut Grads,
    ) -> Array2<f64> {
        let w = self.weight(store);
        let norms = Self::row_norms(store, self.v);
        let dw = dy.t().dot(&x);
        // project out the radial component, rescale by 1/||v||
        let radial = (&dw * &w).sum_axis(Axis(1)).insert_axis(Axis(1));
        let dv = (&dw - &(&w * &radial)) / &norms.insert_axis(Axis(1));
        grads.add_to(self.v, dv);
        grads.add_to(self.b, dy.sum_axis(Axis(0)));
        dy.dot(&w)
    }
}

pub(crate) fn check_input(x: ArrayView2<f64>, input_dim: usize) -> Result<()> {
    if x.ncols() != input_dim && x.nrows() > 0 {
        return Err(Error::shape(format!(
            "input has {} columns, model expects {input_dim}",
            x.ncols()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model input".into()));
    }
    Ok(())
}

pub(crate) fn empty_logits(k: usize) -> Array2<f64> {
    Array2::zeros((0, k))
}
