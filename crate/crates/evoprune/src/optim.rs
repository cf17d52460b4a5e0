//! Cross-entropy training with SGD (momentum + weight decay) and batched
//! deterministic evaluation.

use crate::data::{augment, AugmentPolicy, Dataset};
use crate::net::{Gradients, LayerKind, NetworkSpec, ParamGrads};
use crate::{Error, Result, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// The project-wide seeded generator.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A seeded generator on a named substream, for independent deterministic
/// stages of one run.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// `(epoch, multiplier)` pairs; the multiplier applies from that epoch on.
    pub schedule: Vec<(usize, f64)>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            schedule: Vec::new(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidArgument(
                "schedule epochs must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate in effect at `epoch` (0-based), after schedule steps.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.learning_rate;
        for &(e, m) in &self.schedule {
            if epoch >= e {
                lr *= m;
            }
        }
        lr
    }

    pub fn with_lr(&self, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: lr,
            schedule: Vec::new(),
            ..self.clone()
        }
    }
}

/// Momentum buffers aligned with the network's layers.
pub struct SgdState {
    velocity: Vec<Option<Vec<Tensor>>>,
}

impl SgdState {
    pub fn new(net: &NetworkSpec) -> Self {
        let velocity = net
            .layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Conv2d(c) => {
                    let mut v = vec![Tensor::zeros(c.weight.shape())];
                    if let Some(b) = &c.bias {
                        v.push(Tensor::zeros(b.shape()));
                    }
                    Some(v)
                }
                LayerKind::BatchNorm(bn) => Some(vec![
                    Tensor::zeros(bn.gamma.shape()),
                    Tensor::zeros(bn.beta.shape()),
                ]),
                LayerKind::Linear(lin) => {
                    let mut v = vec![Tensor::zeros(lin.weight.shape())];
                    if let Some(b) = &lin.bias {
                        v.push(Tensor::zeros(b.shape()));
                    }
                    Some(v)
                }
                _ => None,
            })
            .collect();
        SgdState { velocity }
    }

    /// One SGD step: `v = momentum*v + g + wd*w; w -= lr*v`.
    pub fn step(&mut self, net: &mut NetworkSpec, grads: &Gradients, opt: &OptimizerConfig) {
        let lr = opt.learning_rate;
        let mu = opt.momentum;
        let wd = opt.weight_decay;
        let update = |w: &mut Tensor, g: &Tensor, v: &mut Tensor| {
            for ((wv, gv), vv) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv + wd * *wv;
                *wv -= lr * *vv;
            }
        };
        for (idx, layer) in net.layers.iter_mut().enumerate() {
            match (&mut layer.kind, &grads.slots[idx]) {
                (LayerKind::Conv2d(c), ParamGrads::Conv { weight, bias }) => {
                    let vel = self.velocity[idx].as_mut().unwrap();
                    update(&mut c.weight, weight, &mut vel[0]);
                    if let (Some(b), Some(gb)) = (c.bias.as_mut(), bias.as_ref()) {
                        update(b, gb, &mut vel[1]);
                    }
                }
                (LayerKind::BatchNorm(bn), ParamGrads::Norm { gamma, beta }) => {
                    let vel = self.velocity[idx].as_mut().unwrap();
                    update(&mut bn.gamma, gamma, &mut vel[0]);
                    update(&mut bn.beta, beta, &mut vel[1]);
                }
                (LayerKind::Linear(lin), ParamGrads::Linear { weight, bias }) => {
                    let vel = self.velocity[idx].as_mut().unwrap();
                    update(&mut lin.weight, weight, &mut vel[0]);
                    if let (Some(b), Some(gb)) = (lin.bias.as_mut(), bias.as_ref()) {
                        update(b, gb, &mut vel[1]);
                    }
                }
                _ => {}
            }
        }
    }
}

/// Mean cross-entropy of softmaxed logits plus the gradient at the logits
/// (already scaled by `1/N`).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = labels.len();
    let k = logits.len() / n;
    let data = logits.data();
    let mut grad = Tensor::zeros(&[n, k]);
    let g = grad.data_mut();
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        let base = row * k;
        let row_logits = &data[base..base + k];
        let max = row_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row_logits {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        loss += -(row_logits[label] - max - log_denom);
        for j in 0..k {
            let p = (row_logits[j] - max).exp() / denom;
            g[base + j] = (p - if j == label { 1.0 } else { 0.0 }) * scale;
        }
    }
    (loss * scale, grad)
}

/// One pass over the training set with SGD. Shuffling, batching, and the
/// optional augmentation all draw from `rng`, so a fixed seed and data order
/// reproduce the resulting parameters exactly.
pub fn train_epoch(
    net: &mut NetworkSpec,
    data: &Dataset,
    opt: &OptimizerConfig,
    state: &mut SgdState,
    rng: &mut ChaCha8Rng,
    policy: Option<&AugmentPolicy>,
) -> Result<f64> {
    opt.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if net.classes()? != data.classes {
        return Err(Error::ShapeMismatch(format!(
            "network emits {} classes, dataset has {}",
            net.classes()?,
            data.classes
        )));
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);

    let empty = BTreeSet::new();
    let no_taps = BTreeMap::new();
    let mut total = 0.0;
    for (batch_index, chunk) in order.chunks(opt.batch_size).enumerate() {
        let (mut batch, labels) = data.gather(chunk);
        if let Some(p) = policy {
            batch = augment(&batch, p, rng)?;
        }
        let (logits, ctx, _) = net.forward_train(&batch, &empty)?;
        let (loss, grad_logits) = softmax_cross_entropy(&logits, &labels);
        if !loss.is_finite() {
            return Err(Error::Divergence { batch: batch_index });
        }
        let (grads, _) = net.backward(&ctx, &grad_logits, &no_taps, &empty)?;
        state.step(net, &grads, opt);
        total += loss * labels.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Multi-epoch convenience wrapper; applies the schedule and returns the
/// per-epoch mean losses.
pub fn fit(
    net: &mut NetworkSpec,
    data: &Dataset,
    opt: &OptimizerConfig,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    policy: Option<&AugmentPolicy>,
) -> Result<Vec<f64>> {
    let mut state = SgdState::new(net);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let epoch_opt = OptimizerConfig {
            learning_rate: opt.lr_at(epoch),
            schedule: Vec::new(),
            ..opt.clone()
        };
        losses.push(train_epoch(net, data, &epoch_opt, &mut state, rng, policy)?);
    }
    Ok(losses)
}

/// Fraction of samples whose argmax logit matches the label.
pub fn evaluate(net: &NetworkSpec, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let chunk_size = 256;
    let chunks: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(chunk_size)
        .map(|c| c.to_vec())
        .collect();
    let correct: usize = chunks
        .par_iter()
        .map(|chunk| {
            let (batch, labels) = data.gather(chunk);
            let (logits, _) = net.forward(&batch, &BTreeSet::new())?;
            let k = logits.len() / labels.len();
            let data_ = logits.data();
            Ok(labels
                .iter()
                .enumerate()
                .filter(|(row, &label)| {
                    let base = row * k;
                    let mut best = 0usize;
                    for j in 1..k {
                        if data_[base + j] > data_[base + best] {
                            best = j;
                        }
                    }
                    best == label
                })
                .count())
        })
        .sum::<Result<usize>>()?;
    Ok(correct as f64 / data.len() as f64)
}
