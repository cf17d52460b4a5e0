//! Attention-transfer fine-tuning against a frozen teacher.
//!
//! Teacher and student are aligned through attention maps, the channel-wise
//! mean of a feature map, so the channel counts may differ after pruning.
//! The training loss is the cross entropy plus `beta` times the sum over
//! paired layers of the Euclidean distance between L2-normalized flattened
//! maps (normalizer guarded with 1e-8).

use crate::data::Dataset;
use crate::net::{LayerId, LayerKind, NetworkSpec};
use crate::optim::{softmax_cross_entropy, OptimizerConfig, SgdState};
use crate::{Error, Result, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Weight of the attention term relative to the cross entropy.
    pub beta: f64,
    /// Teacher/student layer id pairs; `None` places one pair at the last
    /// activation of each resolution group.
    pub pairs: Option<Vec<(LayerId, LayerId)>>,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            beta: 1e3,
            pairs: None,
            epochs: 1,
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                ..OptimizerConfig::default()
            },
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::InvalidArgument("beta must be nonnegative".into()));
        }
        self.optimizer.validate()
    }
}

/// Channel-wise mean of an `N x C x H x W` feature map, as `N x H x W`.
pub fn attention_map(feature: &Tensor) -> Result<Tensor> {
    let [c, h, w] = feature.chw()?;
    let n = feature.batch();
    let spatial = h * w;
    let data = feature.data();
    let mut out = Tensor::zeros(&[n, h, w]);
    let o = out.data_mut();
    let norm = 1.0 / c as f64;
    for img in 0..n {
        let dst = img * spatial;
        for ch in 0..c {
            let src = img * c * spatial + ch * spatial;
            for s in 0..spatial {
                o[dst + s] += data[src + s];
            }
        }
        for s in 0..spatial {
            o[dst + s] *= norm;
        }
    }
    Ok(out)
}

/// Distance between per-sample L2-normalized flattened maps, averaged over
/// the batch.
pub fn attention_distance(teacher_map: &Tensor, student_map: &Tensor) -> Result<f64> {
    if teacher_map.shape() != student_map.shape() {
        return Err(Error::ShapeMismatch(format!(
            "attention maps {:?} vs {:?}",
            teacher_map.shape(),
            student_map.shape()
        )));
    }
    let n = teacher_map.shape()[0];
    let len = teacher_map.len() / n;
    let mut total = 0.0;
    for img in 0..n {
        let t = &teacher_map.data()[img * len..(img + 1) * len];
        let s = &student_map.data()[img * len..(img + 1) * len];
        let tn = l2(t) + NORM_EPS;
        let sn = l2(s) + NORM_EPS;
        let mut d2 = 0.0;
        for (tv, sv) in t.iter().zip(s) {
            let diff = tv / tn - sv / sn;
            d2 += diff * diff;
        }
        total += d2.sqrt();
    }
    Ok(total / n as f64)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The combined loss: `ce + beta * sum_j distance_j`.
pub fn at_loss(
    student_maps: &[Tensor],
    teacher_maps: &[Tensor],
    beta: f64,
    ce_loss: f64,
) -> Result<f64> {
    if student_maps.len() != teacher_maps.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} student maps vs {} teacher maps",
            student_maps.len(),
            teacher_maps.len()
        )));
    }
    let mut loss = ce_loss;
    for (s, t) in student_maps.iter().zip(teacher_maps) {
        loss += beta * attention_distance(t, s)?;
    }
    Ok(loss)
}

/// Gradient of `attention_distance` with respect to the student *feature
/// map* (not the attention map), scaled by `scale`. Returns an
/// `N x C x H x W` tensor matching the student feature.
pub fn attention_term_grad(
    teacher_map: &Tensor,
    student_feature: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    let student_map = attention_map(student_feature)?;
    if teacher_map.shape() != student_map.shape() {
        return Err(Error::ShapeMismatch(format!(
            "attention maps {:?} vs {:?}",
            teacher_map.shape(),
            student_map.shape()
        )));
    }
    let n = student_map.shape()[0];
    let len = student_map.len() / n;
    let [c, h, w] = student_feature.chw()?;
    let spatial = h * w;
    let mut grad = Tensor::zeros(student_feature.shape());

    for img in 0..n {
        let t = &teacher_map.data()[img * len..(img + 1) * len];
        let v = &student_map.data()[img * len..(img + 1) * len];
        let vnorm = l2(v);
        let s = vnorm + NORM_EPS;
        let tn = l2(t) + NORM_EPS;

        // u = v / s, d = |u - t/tn|; g_u = (u - tized)/d.
        let mut d2 = 0.0;
        let mut gu = vec![0.0; len];
        for i in 0..len {
            let diff = v[i] / s - t[i] / tn;
            gu[i] = diff;
            d2 += diff * diff;
        }
        let d = d2.sqrt();
        if d == 0.0 || vnorm == 0.0 {
            continue; // flat at the minimum / guarded zero map
        }
        for g in gu.iter_mut() {
            *g /= d;
        }
        // g_v = g_u/s - (g_u . v) v / (|v| s^2)
        let dot: f64 = gu.iter().zip(v).map(|(a, b)| a * b).sum();
        let gd = grad.data_mut();
        let per_channel = scale / (n as f64 * c as f64);
        for i in 0..len {
            let gv = gu[i] / s - dot * v[i] / (vnorm * s * s);
            // The map is the channel mean, so every channel shares gv / C,
            // and the batch mean contributes 1/N.
            let contribution = gv * per_channel;
            for ch in 0..c {
                gd[img * c * spatial + ch * spatial + i] += contribution;
            }
        }
    }
    Ok(grad)
}

/// One pair per resolution group: the layer feeding each pooling stage,
/// paired with itself (ids survive surgery).
pub fn default_attention_pairs(net: &NetworkSpec) -> Vec<(LayerId, LayerId)> {
    let mut pairs = Vec::new();
    let mut last: Option<&LayerId> = None;
    for layer in &net.layers {
        match layer.kind {
            LayerKind::MaxPool { .. } | LayerKind::AvgPool { .. } | LayerKind::GlobalAvgPool => {
                if let Some(id) = last.take() {
                    pairs.push((id.clone(), id.clone()));
                }
            }
            _ => last = Some(&layer.id),
        }
    }
    pairs
}

#[derive(Debug, Clone, Serialize)]
pub struct DistillEpoch {
    pub epoch: usize,
    pub ce: f64,
    pub at_term: f64,
    pub total: f64,
}

pub fn trajectory_csv(track: &[DistillEpoch]) -> String {
    let mut out = String::from("epoch,ce,at_term,total\n");
    for e in track {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.ce, e.at_term, e.total));
    }
    out
}

/// Fine-tunes the student under the combined loss while the teacher stays
/// frozen. With `beta == 0` (or no pairs) this reduces exactly to plain
/// cross-entropy fine-tuning.
pub fn finetune_kd(
    student: &mut NetworkSpec,
    teacher: &NetworkSpec,
    data: &Dataset,
    cfg: &DistillConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DistillEpoch>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pairs = match &cfg.pairs {
        Some(p) => p.clone(),
        None => default_attention_pairs(student),
    };
    let use_at = cfg.beta > 0.0 && !pairs.is_empty();

    if use_at {
        // Paired layers must exist and agree on spatial dimensions.
        let t_shapes = teacher.output_shapes()?;
        let s_shapes = student.output_shapes()?;
        for (t_id, s_id) in &pairs {
            let t_idx = teacher.layer_index(t_id)?;
            let s_idx = student.layer_index(s_id)?;
            let (ts, ss) = (t_shapes[t_idx], s_shapes[s_idx]);
            if ts[1] != ss[1] || ts[2] != ss[2] {
                return Err(Error::ShapeMismatch(format!(
                    "attention pair {t_id}/{s_id}: spatial {}x{} vs {}x{}",
                    ts[1], ts[2], ss[1], ss[2]
                )));
            }
        }
    }

    let teacher_capture: BTreeSet<LayerId> = pairs.iter().map(|(t, _)| t.clone()).collect();
    let student_capture: BTreeSet<LayerId> = pairs.iter().map(|(_, s)| s.clone()).collect();

    let mut state = SgdState::new(student);
    let mut track = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let opt = cfg.optimizer.with_lr(cfg.optimizer.lr_at(epoch));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);

        let mut ce_sum = 0.0;
        let mut at_sum = 0.0;
        for (batch_index, chunk) in order.chunks(opt.batch_size).enumerate() {
            let (batch, labels) = data.gather(chunk);

            if !use_at {
                let (logits, ctx, _) = student.forward_train(&batch, &BTreeSet::new())?;
                let (ce, grad_logits) = softmax_cross_entropy(&logits, &labels);
                if !ce.is_finite() {
                    return Err(Error::Divergence { batch: batch_index });
                }
                let (grads, _) =
                    student.backward(&ctx, &grad_logits, &BTreeMap::new(), &BTreeSet::new())?;
                state.step(student, &grads, &opt);
                ce_sum += ce * labels.len() as f64;
                continue;
            }

            let (_, teacher_trace) = teacher.forward(&batch, &teacher_capture)?;
            let (logits, ctx, student_trace) = student.forward_train(&batch, &student_capture)?;
            let (ce, grad_logits) = softmax_cross_entropy(&logits, &labels);

            let mut taps: BTreeMap<LayerId, Tensor> = BTreeMap::new();
            let mut at_term = 0.0;
            for (t_id, s_id) in &pairs {
                let t_map = attention_map(&teacher_trace[t_id])?;
                let s_feature = &student_trace[s_id];
                at_term += attention_distance(&t_map, &attention_map(s_feature)?)?;
                let tap = attention_term_grad(&t_map, s_feature, cfg.beta)?;
                match taps.get_mut(s_id) {
                    Some(existing) => {
                        for (a, b) in existing.data_mut().iter_mut().zip(tap.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        taps.insert(s_id.clone(), tap);
                    }
                }
            }
            let total = ce + cfg.beta * at_term;
            if !total.is_finite() {
                return Err(Error::Divergence { batch: batch_index });
            }
            let (grads, _) = student.backward(&ctx, &grad_logits, &taps, &BTreeSet::new())?;
            state.step(student, &grads, &opt);
            ce_sum += ce * labels.len() as f64;
            at_sum += at_term * labels.len() as f64;
        }

        let n = data.len() as f64;
        track.push(DistillEpoch {
            epoch,
            ce: ce_sum / n,
            at_term: at_sum / n,
            total: ce_sum / n + cfg.beta * at_sum / n,
        });
    }
    Ok(track)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DataSource, Split, SyntheticKind, SyntheticSpec};
    use crate::net::models;
    use crate::optim::{evaluate, fit, seeded_rng};
    use rand::Rng;

    fn blob_data(seed: u64) -> Dataset {
        let spec = SyntheticSpec {
            kind: SyntheticKind::Blobs,
            train: 64,
            test: 16,
            classes: 2,
            channels: 1,
            height: 8,
            width: 8,
            noise: 0.05,
            seed,
        };
        load_dataset(&DataSource::Synthetic(spec), Split::Train, None).unwrap()
    }

    #[test]
    fn identical_channels_collapse_to_one() {
        let mut f = Tensor::zeros(&[1, 3, 2, 2]);
        for ch in 0..3 {
            for s in 0..4 {
                f.data_mut()[ch * 4 + s] = s as f64 + 1.0;
            }
        }
        let map = attention_map(&f).unwrap();
        assert_eq!(map.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn single_channel_is_identity() {
        let f = Tensor::from_vec(&[1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let map = attention_map(&f).unwrap();
        assert_eq!(map.data(), f.data());
    }

    #[test]
    fn two_channel_mean() {
        let f = Tensor::from_vec(&[1, 2, 1, 1], vec![2.0, 4.0]).unwrap();
        let map = attention_map(&f).unwrap();
        assert_eq!(map.data(), &[3.0]);
    }

    #[test]
    fn attention_map_is_linear() {
        let mut rng = seeded_rng(5);
        for _ in 0..10 {
            let mut f = Tensor::zeros(&[2, 3, 4, 4]);
            for v in f.data_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
            let a: f64 = rng.gen_range(-3.0..3.0);
            let mut scaled = f.clone();
            for v in scaled.data_mut() {
                *v *= a;
            }
            let m1 = attention_map(&scaled).unwrap();
            let mut m2 = attention_map(&f).unwrap();
            for v in m2.data_mut() {
                *v *= a;
            }
            assert!(m1.max_abs_diff(&m2).unwrap() < 1e-12);
        }
    }

    #[test]
    fn at_loss_reduces_to_ce_when_beta_zero() {
        let m = Tensor::from_vec(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        let other = Tensor::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let loss = at_loss(&[m.clone()], &[other], 0.0, 0.77).unwrap();
        assert_eq!(loss, 0.77);
    }

    #[test]
    fn identical_maps_cost_nothing() {
        let m = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let loss = at_loss(&[m.clone()], &[m.clone()], 5.0, 0.3).unwrap();
        assert!((loss - 0.3).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_maps_cost_sqrt_two() {
        let s = Tensor::from_vec(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        let t = Tensor::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let loss = at_loss(&[s], &[t], 1.0, 0.0).unwrap();
        assert!((loss - 2f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn combined_loss_never_below_ce() {
        let mut rng = seeded_rng(6);
        for _ in 0..20 {
            let mut s = Tensor::zeros(&[1, 3, 3]);
            let mut t = Tensor::zeros(&[1, 3, 3]);
            for v in s.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let ce = rng.gen_range(0.0..2.0);
            let beta = rng.gen_range(0.0..10.0);
            assert!(at_loss(&[s.clone()], &[t.clone()], beta, ce).unwrap() >= ce);
        }
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(7);
        let mut feature = Tensor::zeros(&[2, 3, 3, 3]);
        for v in feature.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut t_feature = Tensor::zeros(&[2, 5, 3, 3]);
        for v in t_feature.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let t_map = attention_map(&t_feature).unwrap();
        let beta = 2.5;
        let grad = attention_term_grad(&t_map, &feature, beta).unwrap();

        let term = |f: &Tensor| {
            beta * attention_distance(&t_map, &attention_map(f).unwrap()).unwrap()
        };
        let h = 1e-4;
        for i in (0..feature.len()).step_by(7) {
            let mut plus = feature.clone();
            plus.data_mut()[i] += h;
            let mut minus = feature.clone();
            minus.data_mut()[i] -= h;
            let numeric = (term(&plus) - term(&minus)) / (2.0 * h);
            let analytic = grad.data()[i];
            let scale = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / scale < 1e-4,
                "index {i}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn beta_zero_matches_plain_fine_tuning_exactly() {
        let data = blob_data(31);
        let mut init_rng = seeded_rng(1);
        let mut student_a = models::desk_cnn(2, &mut init_rng);
        student_a.input_shape = [1, 8, 8];
        let mut student_b = student_a.clone();
        let teacher = student_a.clone();

        let opt = OptimizerConfig {
            learning_rate: 0.01,
            ..OptimizerConfig::default()
        };
        fit(&mut student_a, &data, &opt, 2, &mut seeded_rng(44), None).unwrap();

        let cfg = DistillConfig {
            beta: 0.0,
            pairs: None,
            epochs: 2,
            optimizer: opt,
        };
        finetune_kd(&mut student_b, &teacher, &data, &cfg, &mut seeded_rng(44)).unwrap();

        for (a, b) in student_a.layers.iter().zip(&student_b.layers) {
            if let (LayerKind::Conv2d(ca), LayerKind::Conv2d(cb)) = (&a.kind, &b.kind) {
                assert_eq!(ca.weight.data(), cb.weight.data());
            }
        }
    }

    #[test]
    fn matching_student_has_zero_attention_term_at_start() {
        // Norm-free architecture: the student's training-mode forward then
        // matches the teacher's inference exactly, so the term vanishes.
        let data = blob_data(32);
        let mut rng = seeded_rng(2);
        let layers = vec![
            models::conv_layer("conv1", 1, 4, 3, 1, true, &mut rng),
            models::relu_layer("relu1"),
            models::maxpool_layer("pool1"),
            models::conv_layer("conv2", 4, 8, 3, 1, true, &mut rng),
            models::relu_layer("relu2"),
            crate::net::Layer {
                id: LayerId::from("gap"),
                kind: LayerKind::GlobalAvgPool,
            },
            models::linear_layer("fc", 8, 2, &mut rng),
        ];
        let mut student = NetworkSpec::new([1, 8, 8], layers);
        let teacher = student.clone();
        let cfg = DistillConfig {
            beta: 10.0,
            pairs: None,
            epochs: 1,
            optimizer: OptimizerConfig {
                learning_rate: 1e-6,
                momentum: 0.0,
                weight_decay: 0.0,
                batch_size: 64,
                schedule: Vec::new(),
            },
        };
        // One batch covering the whole set: the logged attention term is the
        // step-0 value, which must vanish for identical weights.
        let track = finetune_kd(&mut student, &teacher, &data, &cfg, &mut seeded_rng(3)).unwrap();
        assert!(track[0].at_term.abs() < 1e-9, "at {}", track[0].at_term);
    }

    #[test]
    fn teacher_parameters_stay_bit_identical() {
        let data = blob_data(33);
        let mut rng = seeded_rng(4);
        let mut student = models::desk_cnn(2, &mut rng);
        student.input_shape = [1, 8, 8];
        let teacher = student.clone();
        let checksum = |net: &NetworkSpec| -> Vec<u64> {
            let mut out = Vec::new();
            for l in &net.layers {
                if let LayerKind::Conv2d(c) = &l.kind {
                    for v in c.weight.data() {
                        out.push(v.to_bits());
                    }
                }
            }
            out
        };
        let before = checksum(&teacher);
        let cfg = DistillConfig {
            beta: 100.0,
            epochs: 2,
            ..DistillConfig::default()
        };
        finetune_kd(&mut student, &teacher, &data, &cfg, &mut seeded_rng(5)).unwrap();
        assert_eq!(before, checksum(&teacher));
        // And the student actually moved.
        assert!(evaluate(&student, &data).is_ok());
    }

    #[test]
    fn default_pairs_sit_before_each_pooling_stage() {
        let mut rng = seeded_rng(6);
        let net = models::desk_cnn(10, &mut rng);
        let pairs = default_attention_pairs(&net);
        let ids: Vec<&str> = pairs.iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(ids, vec!["relu1", "relu2", "relu4"]);
    }

    #[test]
    fn mismatched_pair_shapes_are_rejected() {
        let data = blob_data(34);
        let mut rng = seeded_rng(7);
        let mut student = models::desk_cnn(2, &mut rng);
        student.input_shape = [1, 8, 8];
        let teacher = student.clone();
        let cfg = DistillConfig {
            beta: 1.0,
            // relu1 runs at 8x8, relu3 at 2x2.
            pairs: Some(vec![(LayerId::from("relu1"), LayerId::from("relu3"))]),
            epochs: 1,
            ..DistillConfig::default()
        };
        let err = finetune_kd(&mut student, &teacher, &data, &cfg, &mut seeded_rng(8));
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }
}
