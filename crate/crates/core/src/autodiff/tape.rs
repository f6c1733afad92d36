use std::collections::HashMap;

use super::kernels::ColGeom;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    BroadcastTo(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ColGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ColGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    Log1p(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    IndexSelect {
        x: Var,
        indices: Vec<usize>,
    },
    RowDistance {
        a: Var,
        b: Var,
        dists: Vec<f64>,
    },
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// A tape lives for one forward/backward pass. Parameters are copied in
/// from a [`ParamStore`] on first use and their gradients are handed back
/// through [`Gradients::params`].
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    bound: HashMap<(ParamId, bool), Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a parameter from `store`. Trainable parameters receive
    /// gradients; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&(id, true)) {
            return v;
        }
        let value = store.tensor(id).clone();
        let v = self.push(value, Op::Param(id), store.is_trainable(id));
        self.bound.insert((id, true), v);
        v
    }

    /// Binds a parameter as a constant: no gradient flows to it.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&(id, false)) {
            return v;
        }
        let v = self.push(store.tensor(id).clone(), Op::Leaf, false);
        self.bound.insert((id, false), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be a scalar, got shape {:?}",
                    loss_node.value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                }
                _ => {
                    super::ops::backward_node(&self.nodes, node, &g, &mut grads);
                    if !g.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite(format!(
                            "gradient at node {i} ({})",
                            op_name(&node.op)
                        )));
                    }
                }
            }
        }
        let mut params = Vec::new();
        let mut inputs = HashMap::new();
        for (i, (node, g)) in self.nodes.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            match node.op {
                Op::Param(id) => params.push((id, g)),
                Op::Leaf => {
                    inputs.insert(i, g);
                }
                _ => {}
            }
        }
        Ok(Gradients { params, inputs })
    }
}

pub(crate) fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::BroadcastTo(_) => "broadcast_to",
        Op::Reshape(_) => "reshape",
        Op::MatMul(..) => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Log1p(_) => "log1p",
        Op::BatchNorm { .. } => "batchnorm",
        Op::MaxPool { .. } => "maxpool",
        Op::GlobalAvgPool(_) => "global_avg_pool",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::Concat { .. } => "concat",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::SumAxis { .. } => "sum_axis",
        Op::IndexSelect { .. } => "index_select",
        Op::RowDistance { .. } => "row_distance",
        Op::Bce { .. } => "bce",
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
    inputs: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient of a differentiable input created with [`Tape::var`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.inputs.get(&v.0).map(Vec::as_slice)
    }

    /// Parameter gradients in binding order.
    pub fn params(&self) -> &[(ParamId, Vec<f64>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Vec<f64>)> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }
}
