use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Sub-network a parameter belongs to; each group has its own learning
/// rate during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Audio,
    Vision,
    Fusion,
    Consistency,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Audio,
        ParamGroup::Vision,
        ParamGroup::Fusion,
        ParamGroup::Consistency,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batch-norm scale or shift.
    Norm,
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    group: ParamGroup,
    kind: ParamKind,
    value: Tensor,
    trainable: bool,
}

#[derive(Clone, Debug)]
struct Buffer {
    name: String,
    data: Vec<f64>,
}

/// Owns every learnable parameter and non-learnable buffer (batch-norm
/// running statistics) of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        kind: ParamKind,
        value: Tensor,
    ) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            kind,
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, data: Vec<f64>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            data,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = BufferId> + '_ {
        (0..self.buffers.len()).map(BufferId)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.params[id.0].kind
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn buffer(&self, id: BufferId) -> &[f64] {
        &self.buffers[id.0].data
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut [f64] {
        &mut self.buffers[id.0].data
    }

    pub fn buffer_name(&self, id: BufferId) -> &str {
        &self.buffers[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|b| b.name == name).map(BufferId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            params: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.data().to_vec()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| (b.name.clone(), b.data.clone()))
                .collect(),
        }
    }

    /// Writes every stored value back. Fails without modifying anything if
    /// the snapshot was taken from a differently shaped model.
    pub fn restore(&mut self, snap: &ParamSnapshot) -> Result<()> {
        let mismatch = |what: &str, name: &str| {
            Error::InvalidArgument(format!("snapshot does not match model: {what} {name}"))
        };
        if snap.params.len() != self.params.len() || snap.buffers.len() != self.buffers.len() {
            return Err(mismatch("entry count", ""));
        }
        for (p, (name, data)) in self.params.iter().zip(&snap.params) {
            if &p.name != name || p.value.numel() != data.len() {
                return Err(mismatch("parameter", name));
            }
        }
        for (b, (name, data)) in self.buffers.iter().zip(&snap.buffers) {
            if &b.name != name || b.data.len() != data.len() {
                return Err(mismatch("buffer", name));
            }
        }
        for (p, (_, data)) in self.params.iter_mut().zip(&snap.params) {
            p.value.data_mut().copy_from_slice(data);
        }
        for (b, (_, data)) in self.buffers.iter_mut().zip(&snap.buffers) {
            b.data.copy_from_slice(data);
        }
        Ok(())
    }

    /// Plain gradient descent on the given gradients.
    pub fn sgd_step(&mut self, grads: &[(ParamId, Vec<f64>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            let value = self.params[id.0].value.data_mut();
            if value.len() != g.len() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("gradient of length {} for {} values", g.len(), value.len()),
                ));
            }
            value.iter_mut().zip(g).for_each(|(v, g)| *v -= lr * g);
        }
        Ok(())
    }

    /// Rounds all values to `f32` precision, matching what a checkpoint
    /// stores.
    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
        for b in &mut self.buffers {
            b.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Full copy of parameter values and buffers, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot {
    pub params: Vec<(String, Vec<f64>)>,
    pub buffers: Vec<(String, Vec<f64>)>,
}

impl ParamSnapshot {
    /// Bitwise comparison, treating NaNs with equal bits as equal.
    pub fn bitwise_eq(&self, other: &ParamSnapshot) -> bool {
        fn same(a: &[(String, Vec<f64>)], b: &[(String, Vec<f64>)]) -> bool {
            a.len() == b.len()
                && a.iter().zip(b).all(|((na, va), (nb, vb))| {
                    na == nb
                        && va.len() == vb.len()
                        && va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits())
                })
        }
        same(&self.params, &other.params) && same(&self.buffers, &other.buffers)
    }
}
