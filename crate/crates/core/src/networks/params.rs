use ndarray::{ArrayD, ArrayView1, ArrayView2, Ix1, Ix2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Optimizer parameter groups. Buffers (batch-norm running statistics) are
/// stored alongside parameters but never receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    NewLayers,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: ArrayD<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub(crate) fn add(&mut self, name: &str, group: ParamGroup, value: ArrayD<f64>) -> usize {
        self.params.push(Param {
            name: name.to_string(),
            group,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub(crate) fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub(crate) fn mat(&self, i: usize) -> ArrayView2<'_, f64> {
        self.params[i]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("parameter is a matrix")
    }

    pub(crate) fn vec(&self, i: usize) -> ArrayView1<'_, f64> {
        self.params[i]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("parameter is a vector")
    }

    /// Total count of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.group != ParamGroup::Buffer)
            .map(|p| p.value.len())
            .sum()
    }

    /// Trainable parameters flattened in storage order.
    pub fn flat_trainable(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.group != ParamGroup::Buffer)
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }

    /// Inverse of [`flat_trainable`](Self::flat_trainable).
    pub fn set_flat_trainable(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_trainable(), "flat parameter length");
        let mut offset = 0;
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.group != ParamGroup::Buffer)
        {
            for v in p.value.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        }
    }

    /// Hash of names, groups, shapes and exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update(format!("{:?}{:?}", p.group, p.value.shape()).as_bytes());
            for v in p.value.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name && a.group == b.group && a.value.shape() == b.value.shape()
            })
    }
}

/// Gradients, one tensor per entry of the owning [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub(crate) tensors: Vec<ArrayD<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            tensors: store
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
        }
    }

    pub(crate) fn add_to<D: ndarray::Dimension>(&mut self, i: usize, g: ndarray::Array<f64, D>) {
        self.tensors[i] += &g.into_dyn();
    }

    pub fn get(&self, i: usize) -> &ArrayD<f64> {
        &self.tensors[i]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * s);
        }
    }

    /// Trainable gradient entries flattened in the store's order.
    pub fn flat_trainable(&self, store: &ParamStore) -> Vec<f64> {
        store
            .iter()
            .zip(&self.tensors)
            .filter(|(p, _)| p.group != ParamGroup::Buffer)
            .flat_map(|(_, g)| g.iter().copied())
            .collect()
    }
}
