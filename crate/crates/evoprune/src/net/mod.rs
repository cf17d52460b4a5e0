//! Network description and the forward/backward engine.
//!
//! Topologies are sequential chains with optional `residual-add` layers that
//! reference an earlier layer's output; that covers VGG-style stacks and
//! identity-shortcut bottleneck blocks. Inference is deterministic (batch
//! norm reads running statistics); training-mode forward uses batch
//! statistics and records what backward needs.

pub mod models;
pub mod ops;

use crate::{Error, Result, Tensor};
use ops::ConvGeometry;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Identifier of a layer inside a [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(String);

impl LayerId {
    pub fn new(id: impl Into<String>) -> Self {
        LayerId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LayerId {
    fn from(s: &str) -> Self {
        LayerId(s.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `F x C x K x K`, row-major.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv2d {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// Weight viewed as `F x (C*K*K)`.
    pub fn weight_matrix(&self) -> Tensor {
        self.weight
            .clone()
            .reshaped(&[self.out_channels, self.in_channels * self.kernel * self.kernel])
            .expect("conv weight reshape")
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `out x in`, row-major.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub enum LayerKind {
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    Linear(Linear),
    Flatten,
    ResidualAdd { source: LayerId },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::BatchNorm(_) => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::GlobalAvgPool => "global-avg-pool",
            LayerKind::Linear(_) => "linear",
            LayerKind::Flatten => "flatten",
            LayerKind::ResidualAdd { .. } => "residual-add",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub id: LayerId,
    pub kind: LayerKind,
}

/// Ordered layer graph plus parameters.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Self {
        NetworkSpec {
            input_shape,
            layers,
        }
    }

    pub fn layer_index(&self, id: &LayerId) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| &l.id == id)
            .ok_or_else(|| Error::UnknownLayer(id.to_string()))
    }

    pub fn layer(&self, id: &LayerId) -> Result<&Layer> {
        Ok(&self.layers[self.layer_index(id)?])
    }

    pub fn conv(&self, id: &LayerId) -> Result<&Conv2d> {
        match &self.layer(id)?.kind {
            LayerKind::Conv2d(c) => Ok(c),
            _ => Err(Error::NotConv(id.to_string())),
        }
    }

    pub fn conv_ids(&self) -> Vec<LayerId> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv2d(_)))
            .map(|l| l.id.clone())
            .collect()
    }

    /// Number of classes = feature count of the last layer's output.
    pub fn classes(&self) -> Result<usize> {
        let shapes = self.output_shapes()?;
        let last = shapes.last().ok_or(Error::ShapeMismatch("empty network".into()))?;
        Ok(last[0] * last[1] * last[2])
    }

    /// Per-layer output shapes `(C, H, W)`; validates graph consistency.
    pub fn output_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape;
        for layer in &self.layers {
            cur = match &layer.kind {
                LayerKind::Conv2d(c) => {
                    if c.in_channels != cur[0] {
                        return Err(Error::ShapeMismatch(format!(
                            "{}: expects {} input channels, gets {}",
                            layer.id, c.in_channels, cur[0]
                        )));
                    }
                    let (oh, ow) = c.geometry().out_hw(cur[1], cur[2]);
                    [c.out_channels, oh, ow]
                }
                LayerKind::BatchNorm(bn) => {
                    if bn.channels != cur[0] {
                        return Err(Error::ShapeMismatch(format!(
                            "{}: norms {} channels, gets {}",
                            layer.id, bn.channels, cur[0]
                        )));
                    }
                    cur
                }
                LayerKind::Relu => cur,
                LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                    if cur[1] < *kernel || cur[2] < *kernel {
                        return Err(Error::ShapeMismatch(format!(
                            "{}: pool window {} on {}x{}",
                            layer.id, kernel, cur[1], cur[2]
                        )));
                    }
                    [
                        cur[0],
                        (cur[1] - kernel) / stride + 1,
                        (cur[2] - kernel) / stride + 1,
                    ]
                }
                LayerKind::GlobalAvgPool => [cur[0], 1, 1],
                LayerKind::Linear(lin) => {
                    let features = cur[0] * cur[1] * cur[2];
                    if lin.in_features != features {
                        return Err(Error::ShapeMismatch(format!(
                            "{}: expects {} features, gets {}",
                            layer.id, lin.in_features, features
                        )));
                    }
                    [lin.out_features, 1, 1]
                }
                LayerKind::Flatten => [cur[0] * cur[1] * cur[2], 1, 1],
                LayerKind::ResidualAdd { source } => {
                    let src = self.layer_index(source)?;
                    let src_shape = shapes[src];
                    if src_shape != cur {
                        return Err(Error::ShapeMismatch(format!(
                            "{}: operands {:?} vs {:?}",
                            layer.id, src_shape, cur
                        )));
                    }
                    cur
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Layer indices whose output feeds a later `residual-add`.
    fn residual_sources(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for layer in &self.layers {
            if let LayerKind::ResidualAdd { source } = &layer.kind {
                if let Ok(idx) = self.layer_index(source) {
                    out.insert(idx);
                }
            }
        }
        out
    }

    /// Deterministic inference with optional activation capture.
    ///
    /// Returns `N x classes` logits plus the post-layer activations of every
    /// captured id. Batch norm uses running statistics.
    pub fn forward(
        &self,
        batch: &Tensor,
        capture: &BTreeSet<LayerId>,
    ) -> Result<(Tensor, BTreeMap<LayerId, Tensor>)> {
        for id in capture {
            self.layer_index(id)?;
        }
        self.check_input(batch)?;
        let sources = self.residual_sources();
        let mut saved: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut trace = BTreeMap::new();

        let mut cur = batch.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = self.apply_infer(layer, &cur, &saved)?;
            cur.ensure_finite(layer.id.as_str())?;
            if sources.contains(&idx) {
                saved.insert(idx, cur.clone());
            }
            if capture.contains(&layer.id) {
                trace.insert(layer.id.clone(), cur.clone());
            }
        }

        let n = batch.batch();
        let classes = cur.len() / n;
        Ok((cur.reshaped(&[n, classes])?, trace))
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let chw = batch.chw()?;
        if chw != self.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "batch {:?} vs network input {:?}",
                chw, self.input_shape
            )));
        }
        Ok(())
    }

    fn apply_infer(
        &self,
        layer: &Layer,
        input: &Tensor,
        saved: &BTreeMap<usize, Tensor>,
    ) -> Result<Tensor> {
        Ok(match &layer.kind {
            LayerKind::Conv2d(c) => {
                ops::conv_forward(input, &c.weight_matrix(), c.bias.as_ref(), &c.geometry())
            }
            LayerKind::BatchNorm(bn) => ops::batchnorm_infer_forward(
                input,
                bn.gamma.data(),
                bn.beta.data(),
                bn.running_mean.data(),
                bn.running_var.data(),
                bn.eps,
            ),
            LayerKind::Relu => ops::relu_forward(input),
            LayerKind::MaxPool { kernel, stride } => ops::maxpool_forward(input, *kernel, *stride).0,
            LayerKind::AvgPool { kernel, stride } => ops::avgpool_forward(input, *kernel, *stride),
            LayerKind::GlobalAvgPool => ops::global_avgpool_forward(input),
            LayerKind::Linear(lin) => {
                ops::linear_forward(input, &lin.weight, lin.bias.as_ref())
            }
            LayerKind::Flatten => {
                let n = input.batch();
                let f = input.len() / n;
                input.clone().reshaped(&[n, f, 1, 1])?
            }
            LayerKind::ResidualAdd { source } => {
                let src = self.layer_index(source)?;
                let skip = saved.get(&src).ok_or_else(|| {
                    Error::ShapeMismatch(format!("{}: source {} not yet computed", layer.id, source))
                })?;
                if skip.shape() != input.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "{}: {:?} vs {:?}",
                        layer.id,
                        skip.shape(),
                        input.shape()
                    )));
                }
                ops::add(input, skip)
            }
        })
    }
}

/// Per-layer scratch recorded by the training-mode forward pass.
pub enum LayerAux {
    None,
    MaxPool(Vec<u32>),
    BatchNorm(ops::BnCache),
}

/// Everything backward needs from a training-mode forward pass.
pub struct TrainContext {
    /// Input tensor of each layer (aligned with `layers`).
    pub inputs: Vec<Tensor>,
    pub aux: Vec<LayerAux>,
    pub batch: usize,
    pub classes: usize,
}

/// Parameter gradients for one layer.
pub enum ParamGrads {
    None,
    Conv {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    Norm {
        gamma: Tensor,
        beta: Tensor,
    },
    Linear {
        weight: Tensor,
        bias: Option<Tensor>,
    },
}

/// Gradients aligned with `NetworkSpec::layers`.
pub struct Gradients {
    pub slots: Vec<ParamGrads>,
}

impl NetworkSpec {
    /// Training-mode forward: batch norm uses batch statistics and updates
    /// running stats in place. Returns logits, the backward context, and the
    /// post-layer activations of the captured ids.
    pub fn forward_train(
        &mut self,
        batch: &Tensor,
        capture: &BTreeSet<LayerId>,
    ) -> Result<(Tensor, TrainContext, BTreeMap<LayerId, Tensor>)> {
        for id in capture {
            self.layer_index(id)?;
        }
        self.check_input(batch)?;
        let sources = self.residual_sources();
        let mut saved: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        let mut captured = BTreeMap::new();

        let mut cur = batch.clone();
        for idx in 0..self.layers.len() {
            inputs.push(cur.clone());
            let (next, a) = self.apply_train(idx, &cur, &saved)?;
            cur = next;
            cur.ensure_finite(self.layers[idx].id.as_str())?;
            aux.push(a);
            if sources.contains(&idx) {
                saved.insert(idx, cur.clone());
            }
            if capture.contains(&self.layers[idx].id) {
                captured.insert(self.layers[idx].id.clone(), cur.clone());
            }
        }

        let n = batch.batch();
        let classes = cur.len() / n;
        let ctx = TrainContext {
            inputs,
            aux,
            batch: n,
            classes,
        };
        Ok((cur.reshaped(&[n, classes])?, ctx, captured))
    }

    fn apply_train(
        &mut self,
        idx: usize,
        input: &Tensor,
        saved: &BTreeMap<usize, Tensor>,
    ) -> Result<(Tensor, LayerAux)> {
        // Batch norm is the only kind that differs from inference or
        // mutates state; reuse the inference path for the rest.
        match &self.layers[idx].kind {
            LayerKind::BatchNorm(_) => {
                let bn = match &self.layers[idx].kind {
                    LayerKind::BatchNorm(bn) => bn,
                    _ => unreachable!(),
                };
                let (out, cache, new_mean, new_var) = ops::batchnorm_train_forward(
                    input,
                    bn.gamma.data(),
                    bn.beta.data(),
                    bn.running_mean.data(),
                    bn.running_var.data(),
                    bn.eps,
                    bn.momentum,
                );
                if let LayerKind::BatchNorm(bn) = &mut self.layers[idx].kind {
                    bn.running_mean = Tensor::from_vec(&[bn.channels], new_mean)?;
                    bn.running_var = Tensor::from_vec(&[bn.channels], new_var)?;
                }
                Ok((out, LayerAux::BatchNorm(cache)))
            }
            LayerKind::MaxPool { kernel, stride } => {
                let (out, argmax) = ops::maxpool_forward(input, *kernel, *stride);
                Ok((out, LayerAux::MaxPool(argmax)))
            }
            _ => {
                let layer = self.layers[idx].clone();
                Ok((self.apply_infer(&layer, input, saved)?, LayerAux::None))
            }
        }
    }

    /// Backpropagation through a recorded training pass.
    ///
    /// `taps` adds extra gradient onto named layers' outputs (used by the
    /// attention-transfer loss); `grad_capture` returns the gradient with
    /// respect to named layers' outputs (used by the first-order baseline).
    pub fn backward(
        &self,
        ctx: &TrainContext,
        grad_logits: &Tensor,
        taps: &BTreeMap<LayerId, Tensor>,
        grad_capture: &BTreeSet<LayerId>,
    ) -> Result<(Gradients, BTreeMap<LayerId, Tensor>)> {
        let n_layers = self.layers.len();
        let mut slots: Vec<ParamGrads> = (0..n_layers).map(|_| ParamGrads::None).collect();
        let mut captured_grads = BTreeMap::new();
        // Extra gradient flowing into a layer's output from residual skips.
        let mut pending: Vec<Option<Tensor>> = (0..n_layers).map(|_| None).collect();

        let mut grad = grad_logits
            .clone()
            .reshaped(&[ctx.batch, ctx.classes, 1, 1])?;

        for idx in (0..n_layers).rev() {
            let layer = &self.layers[idx];
            if let Some(extra) = pending[idx].take() {
                grad = ops::add(&grad, &extra);
            }
            if let Some(tap) = taps.get(&layer.id) {
                if tap.shape() != grad.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "tap at {}: {:?} vs {:?}",
                        layer.id,
                        tap.shape(),
                        grad.shape()
                    )));
                }
                grad = ops::add(&grad, tap);
            }
            if grad_capture.contains(&layer.id) {
                captured_grads.insert(layer.id.clone(), grad.clone());
            }

            let input = &ctx.inputs[idx];
            grad = match &layer.kind {
                LayerKind::Conv2d(c) => {
                    let grads = ops::conv_backward(
                        input,
                        &c.weight_matrix(),
                        c.bias.is_some(),
                        &c.geometry(),
                        &grad,
                    );
                    slots[idx] = ParamGrads::Conv {
                        weight: grads.weight,
                        bias: grads.bias,
                    };
                    grads.input
                }
                LayerKind::BatchNorm(bn) => {
                    let cache = match &ctx.aux[idx] {
                        LayerAux::BatchNorm(c) => c,
                        _ => return Err(Error::ShapeMismatch("missing batchnorm cache".into())),
                    };
                    let grads = ops::batchnorm_backward(cache, bn.gamma.data(), &grad);
                    slots[idx] = ParamGrads::Norm {
                        gamma: grads.gamma,
                        beta: grads.beta,
                    };
                    grads.input
                }
                LayerKind::Relu => ops::relu_backward(input, &grad),
                LayerKind::MaxPool { kernel, stride } => {
                    let argmax = match &ctx.aux[idx] {
                        LayerAux::MaxPool(a) => a,
                        _ => return Err(Error::ShapeMismatch("missing maxpool cache".into())),
                    };
                    ops::maxpool_backward(input.shape(), *kernel, *stride, argmax, &grad)
                }
                LayerKind::AvgPool { kernel, stride } => {
                    ops::avgpool_backward(input.shape(), *kernel, *stride, &grad)
                }
                LayerKind::GlobalAvgPool => ops::global_avgpool_backward(input.shape(), &grad),
                LayerKind::Linear(lin) => {
                    let grads =
                        ops::linear_backward(input, &lin.weight, lin.bias.is_some(), &grad);
                    slots[idx] = ParamGrads::Linear {
                        weight: grads.weight,
                        bias: grads.bias,
                    };
                    grads.input
                }
                LayerKind::Flatten => grad.reshaped(input.shape())?,
                LayerKind::ResidualAdd { source } => {
                    let src = self.layer_index(source)?;
                    let extra = match pending[src].take() {
                        Some(acc) => ops::add(&acc, &grad),
                        None => grad.clone(),
                    };
                    pending[src] = Some(extra);
                    grad
                }
            };
        }

        Ok((Gradients { slots }, captured_grads))
    }
}
