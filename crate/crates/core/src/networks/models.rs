use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::layers::{
    check_input, empty_logits, BatchNorm, BnTrace, Linear, Mlp, MlpTrace, Mode, WeightNormLinear,
};
use super::params::{Grads, ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::rng;

/// Feature encoder: ReLU perceptron with the given hidden widths. An empty
/// `hidden` list is the identity map, which is how frozen external features
/// (e.g. embeddings from an image backbone) are plugged in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl EncoderSpec {
    /// Two hidden layers of width 64.
    pub fn desk(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
        }
    }

    pub fn output_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceArch {
    pub encoder: EncoderSpec,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetArch {
    pub encoder: EncoderSpec,
    /// Bottleneck width (256 by default).
    pub bottleneck: usize,
    pub num_classes: usize,
}

/// Common interface of the two model families.
pub trait Network {
    type Trace;

    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Logits plus whatever the backward pass needs.
    fn forward_traced(&self, x: ArrayView2<f64>, mode: Mode) -> Result<(Array2<f64>, Self::Trace)>;

    /// Parameter gradients given `d loss / d logits`.
    fn backward(&self, trace: &Self::Trace, dlogits: ArrayView2<f64>) -> Grads;

    /// Fold training-mode batch statistics into running estimates.
    fn commit(&mut self, _trace: &Self::Trace) {}

    fn forward(&self, x: ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>> {
        Ok(self.forward_traced(x, mode)?.0)
    }

    fn checksum(&self) -> String {
        self.store().checksum()
    }
}

/// Encoder followed by a single linear head; no bottleneck, no weight
/// normalisation.
#[derive(Debug, Clone)]
pub struct SourceModel {
    arch: SourceArch,
    store: ParamStore,
    encoder: Mlp,
    head: Linear,
}

pub struct SourceTrace {
    encoder: MlpTrace,
}

impl SourceModel {
    pub fn new(arch: SourceArch, seed: u64) -> Result<Self> {
        arch.encoder.validate()?;
        if arch.num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        let mut rng = rng::stream(seed, "init/source");
        let mut store = ParamStore::default();
        let encoder = Mlp::new(
            &mut store,
            "encoder",
            ParamGroup::Backbone,
            arch.encoder.input_dim,
            &arch.encoder.hidden,
            &mut rng,
        );
        let head = Linear::new(
            &mut store,
            "head",
            ParamGroup::NewLayers,
            arch.encoder.output_dim(),
            arch.num_classes,
            &mut rng,
        );
        Ok(Self {
            arch,
            store,
            encoder,
            head,
        })
    }

    pub(crate) fn from_parts(arch: SourceArch, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(arch, 0)?;
        if !model.store.same_layout(&store) {
            return Err(Error::shape(
                "checkpoint parameters do not match source architecture",
            ));
        }
        model.store = store;
        Ok(model)
    }

    pub fn arch(&self) -> &SourceArch {
        &self.arch
    }
}

impl Network for SourceModel {
    type Trace = SourceTrace;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn input_dim(&self) -> usize {
        self.arch.encoder.input_dim
    }

    fn forward_traced(
        &self,
        x: ArrayView2<f64>,
        _mode: Mode,
    ) -> Result<(Array2<f64>, SourceTrace)> {
        check_input(x, self.input_dim())?;
        let encoder = self.encoder.forward(&self.store, x);
        let logits = if x.nrows() == 0 {
            empty_logits(self.num_classes())
        } else {
            self.head.forward(&self.store, encoder.output().view())
        };
        Ok((logits, SourceTrace { encoder }))
    }

    fn backward(&self, trace: &SourceTrace, dlogits: ArrayView2<f64>) -> Grads {
        let mut grads = Grads::zeros_like(&self.store);
        let dh = self.head.backward(
            &self.store,
            trace.encoder.output().view(),
            dlogits,
            &mut grads,
        );
        self.encoder
            .backward(&self.store, &trace.encoder, dh.view(), &mut grads);
        grads
    }
}

/// Encoder, then a batch-norm + linear bottleneck, then a weight-normalised
/// linear classifier.
#[derive(Debug, Clone)]
pub struct TargetModel {
    arch: TargetArch,
    store: ParamStore,
    encoder: Mlp,
    bn: BatchNorm,
    bottleneck: Linear,
    classifier: WeightNormLinear,
}

pub struct TargetTrace {
    encoder: MlpTrace,
    bn: BnTrace,
    bn_out: Array2<f64>,
    bottleneck_out: Array2<f64>,
}

impl TargetModel {
    pub fn new(arch: TargetArch, seed: u64) -> Result<Self> {
        arch.encoder.validate()?;
        if arch.num_classes < 2 || arch.bottleneck == 0 {
            return Err(Error::invalid(
                "need >= 2 classes and a positive bottleneck",
            ));
        }
        let mut rng = rng::stream(seed, "init/target");
        let mut store = ParamStore::default();
        let encoder = Mlp::new(
            &mut store,
            "encoder",
            ParamGroup::Backbone,
            arch.encoder.input_dim,
            &arch.encoder.hidden,
            &mut rng,
        );
        let e = arch.encoder.output_dim();
        let bn = BatchNorm::new(&mut store, "bottleneck.bn", e);
        let bottleneck = Linear::new(
            &mut store,
            "bottleneck.fc",
            ParamGroup::NewLayers,
            e,
            arch.bottleneck,
            &mut rng,
        );
        let classifier = WeightNormLinear::new(
            &mut store,
            "classifier",
            arch.bottleneck,
            arch.num_classes,
            &mut rng,
        );
        Ok(Self {
            arch,
            store,
            encoder,
            bn,
            bottleneck,
            classifier,
        })
    }

    pub(crate) fn from_parts(arch: TargetArch, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(arch, 0)?;
        if !model.store.same_layout(&store) {
            return Err(Error::shape(
                "checkpoint parameters do not match target architecture",
            ));
        }
        model.store = store;
        Ok(model)
    }

    pub fn arch(&self) -> &TargetArch {
        &self.arch
    }

    /// Encoder output, the feature space used for prototypes.
    pub fn features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_input(x, self.input_dim())?;
        Ok(self.encoder.forward(&self.store, x).output().clone())
    }

    /// Effective classifier weights (unit rows).
    pub fn classifier_weight(&self) -> Array2<f64> {
        self.classifier.weight(&self.store)
    }
}

impl Network for TargetModel {
    type Trace = TargetTrace;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn input_dim(&self) -> usize {
        self.arch.encoder.input_dim
    }

    fn forward_traced(&self, x: ArrayView2<f64>, mode: Mode) -> Result<(Array2<f64>, TargetTrace)> {
        check_input(x, self.input_dim())?;
        let encoder = self.encoder.forward(&self.store, x);
        let mode = if x.nrows() == 0 { Mode::Eval } else { mode };
        let (bn_out, bn) = self
            .bn
            .forward(&self.store, encoder.output().view(), mode)?;
        let bottleneck_out = self.bottleneck.forward(&self.store, bn_out.view());
        let logits = if x.nrows() == 0 {
            empty_logits(self.num_classes())
        } else {
            self.classifier.forward(&self.store, bottleneck_out.view())
        };
        Ok((
            logits,
            TargetTrace {
                encoder,
                bn,
                bn_out,
                bottleneck_out,
            },
        ))
    }

    fn backward(&self, trace: &TargetTrace, dlogits: ArrayView2<f64>) -> Grads {
        let mut grads = Grads::zeros_like(&self.store);
        let d = self.classifier.backward(
            &self.store,
            trace.bottleneck_out.view(),
            dlogits,
            &mut grads,
        );
        let d = self
            .bottleneck
            .backward(&self.store, trace.bn_out.view(), d.view(), &mut grads);
        let d = self
            .bn
            .backward(&self.store, &trace.bn, d.view(), &mut grads);
        self.encoder
            .backward(&self.store, &trace.encoder, d.view(), &mut grads);
        grads
    }

    fn commit(&mut self, trace: &TargetTrace) {
        self.bn.commit(&mut self.store, &trace.bn);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_target() -> TargetModel {
        TargetModel::new(
            TargetArch {
                encoder: EncoderSpec {
                    input_dim: 4,
                    hidden: vec![6],
                },
                bottleneck: 5,
                num_classes: 3,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn empty_batch_gives_empty_logits() {
        let m = toy_target();
        let out = m
            .forward(Array2::zeros((0, 4)).view(), Mode::Train)
            .unwrap();
        assert_eq!(out.dim(), (0, 3));
    }

    #[test]
    fn duplicated_rows_give_identical_logits_in_eval() {
        let m = toy_target();
        let x = array![[0.1, 0.2, -0.3, 0.5], [0.1, 0.2, -0.3, 0.5]];
        let out = m.forward(x.view(), Mode::Eval).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = toy_target();
        let err = m
            .forward(Array2::zeros((2, 3)).view(), Mode::Eval)
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn classifier_rows_are_unit_norm() {
        let w = toy_target().classifier_weight();
        for row in w.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn groups_split_backbone_from_new_layers() {
        let m = toy_target();
        for p in m.store().iter() {
            let expected = if p.name.starts_with("encoder") {
                ParamGroup::Backbone
            } else if p.name.contains("running") {
                ParamGroup::Buffer
            } else {
                ParamGroup::NewLayers
            };
            assert_eq!(p.group, expected, "{}", p.name);
        }
    }
}
