//! Structural channel removal.
//!
//! A mask over the input channels of a consumer conv removes those channels
//! from its kernels, the matching filters (and bias) of the producing conv,
//! and the producer-side batch-norm parameters. The result stays dense.

use crate::genetic::Chromosome;
use crate::net::{LayerId, LayerKind, NetworkSpec};
use crate::{Error, Result, Tensor};

/// A (producer, consumer) conv pair whose shared channel dimension may be
/// pruned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrunePair {
    pub producer: LayerId,
    pub consumer: LayerId,
    /// Channel count of the shared dimension (producer filters).
    pub channels: usize,
}

/// Enumerates the prunable pairs in forward order.
///
/// A conv stops being a producer when its output crosses a residual add,
/// flatten, global pooling or linear layer, or when it feeds a residual
/// skip; in an identity-shortcut bottleneck exactly the first two convs
/// remain prunable and the classifier-facing conv never is.
pub fn prunable_pairs(net: &NetworkSpec) -> Vec<PrunePair> {
    // Convs whose output is referenced by a residual-add skip.
    let mut guarded = Vec::new();
    for layer in &net.layers {
        if let LayerKind::ResidualAdd { source } = &layer.kind {
            if let Ok(mut idx) = net.layer_index(source) {
                loop {
                    match &net.layers[idx].kind {
                        LayerKind::Conv2d(_) => {
                            guarded.push(net.layers[idx].id.clone());
                            break;
                        }
                        _ if idx == 0 => break,
                        _ => idx -= 1,
                    }
                }
            }
        }
    }

    let mut pairs = Vec::new();
    let mut producer: Option<(LayerId, usize)> = None;
    for layer in &net.layers {
        match &layer.kind {
            LayerKind::Conv2d(c) => {
                if let Some((prod, channels)) = producer.take() {
                    if !guarded.contains(&prod) {
                        pairs.push(PrunePair {
                            producer: prod,
                            consumer: layer.id.clone(),
                            channels,
                        });
                    }
                }
                producer = Some((layer.id.clone(), c.out_channels));
            }
            LayerKind::BatchNorm(_)
            | LayerKind::Relu
            | LayerKind::MaxPool { .. }
            | LayerKind::AvgPool { .. } => {}
            LayerKind::GlobalAvgPool
            | LayerKind::Linear(_)
            | LayerKind::Flatten
            | LayerKind::ResidualAdd { .. } => {
                producer = None;
            }
        }
    }
    pairs
}

fn filter_rows(t: &Tensor, kept: &[usize], row_len: usize) -> Tensor {
    let mut data = Vec::with_capacity(kept.len() * row_len);
    for &r in kept {
        data.extend_from_slice(&t.data()[r * row_len..(r + 1) * row_len]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = kept.len();
    Tensor::from_vec(&shape, data).expect("filtered rows")
}

fn filter_vec(t: &Tensor, kept: &[usize]) -> Tensor {
    let data = kept.iter().map(|&i| t.data()[i]).collect();
    Tensor::from_vec(&[kept.len()], data).expect("filtered vector")
}

/// Applies a keep-mask at `consumer`, returning an edited copy of the
/// network. An all-ones mask returns a bit-identical clone.
pub fn surgery(net: &NetworkSpec, consumer: &LayerId, mask: &Chromosome) -> Result<NetworkSpec> {
    let consumer_conv = net.conv(consumer)?;
    if mask.len() != consumer_conv.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "mask of {} bits for {} input channels of {}",
            mask.len(),
            consumer_conv.in_channels,
            consumer
        )));
    }
    if mask.popcount() == 0 {
        return Err(Error::InvalidArgument(format!(
            "mask would delete every channel of {consumer}"
        )));
    }
    let pair = prunable_pairs(net)
        .into_iter()
        .find(|p| &p.consumer == consumer)
        .ok_or_else(|| {
            Error::PruneBoundary(
                consumer.to_string(),
                "no prunable producer (block boundary or classifier-facing layer)".into(),
            )
        })?;

    let mut out = net.clone();
    if mask.popcount() == mask.len() {
        return Ok(out);
    }
    let kept = mask.kept();
    let producer_idx = out.layer_index(&pair.producer)?;
    let consumer_idx = out.layer_index(consumer)?;

    // Producer: drop filters.
    if let LayerKind::Conv2d(c) = &mut out.layers[producer_idx].kind {
        let row_len = c.in_channels * c.kernel * c.kernel;
        c.weight = filter_rows(&c.weight, &kept, row_len);
        if let Some(b) = &c.bias {
            c.bias = Some(filter_vec(b, &kept));
        }
        c.out_channels = kept.len();
    }

    // Producer-side norm layers between the pair: drop channels.
    for idx in producer_idx + 1..consumer_idx {
        if let LayerKind::BatchNorm(bn) = &mut out.layers[idx].kind {
            bn.gamma = filter_vec(&bn.gamma, &kept);
            bn.beta = filter_vec(&bn.beta, &kept);
            bn.running_mean = filter_vec(&bn.running_mean, &kept);
            bn.running_var = filter_vec(&bn.running_var, &kept);
            bn.channels = kept.len();
        }
    }

    // Consumer: drop kernel channels.
    if let LayerKind::Conv2d(c) = &mut out.layers[consumer_idx].kind {
        let k2 = c.kernel * c.kernel;
        let old_c = c.in_channels;
        let mut data = Vec::with_capacity(c.out_channels * kept.len() * k2);
        for f in 0..c.out_channels {
            for &ch in &kept {
                let start = (f * old_c + ch) * k2;
                data.extend_from_slice(&c.weight.data()[start..start + k2]);
            }
        }
        c.weight = Tensor::from_vec(&[c.out_channels, kept.len(), c.kernel, c.kernel], data)?;
        c.in_channels = kept.len();
    }

    out.output_shapes()?; // the edited graph must stay consistent
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::models;
    use crate::optim::seeded_rng;
    use crate::stats::model_stats;
    use std::collections::BTreeSet;

    fn mask_str(s: &str) -> Chromosome {
        Chromosome::from_bits(s.chars().map(|c| c == '1').collect())
    }

    #[test]
    fn figure_shapes_after_pruning_two_channels() {
        // Producer has 4 filters, consumer kernels 4 channels; pruning two
        // leaves 2 filters / 2-channel kernels.
        let mut rng = seeded_rng(1);
        let layers = vec![
            models::conv_layer("conv1", 3, 4, 3, 1, true, &mut rng),
            models::relu_layer("relu1"),
            models::conv_layer("conv2", 4, 6, 3, 1, true, &mut rng),
        ];
        let net = NetworkSpec::new([3, 8, 8], layers);
        let pruned = surgery(&net, &LayerId::from("conv2"), &mask_str("1010")).unwrap();
        let p = pruned.conv(&LayerId::from("conv1")).unwrap();
        let c = pruned.conv(&LayerId::from("conv2")).unwrap();
        assert_eq!(p.out_channels, 2);
        assert_eq!(p.weight.shape(), &[2, 3, 3, 3]);
        assert_eq!(p.bias.as_ref().unwrap().len(), 2);
        assert_eq!(c.in_channels, 2);
        assert_eq!(c.weight.shape(), &[6, 2, 3, 3]);
    }

    #[test]
    fn kept_weights_are_the_original_slices() {
        let mut rng = seeded_rng(2);
        let layers = vec![
            models::conv_layer("conv1", 1, 3, 3, 1, false, &mut rng),
            models::conv_layer("conv2", 3, 2, 3, 1, false, &mut rng),
        ];
        let net = NetworkSpec::new([1, 4, 4], layers);
        let pruned = surgery(&net, &LayerId::from("conv2"), &mask_str("101")).unwrap();
        let orig_p = net.conv(&LayerId::from("conv1")).unwrap();
        let new_p = pruned.conv(&LayerId::from("conv1")).unwrap();
        assert_eq!(new_p.weight.data()[..9], orig_p.weight.data()[..9]);
        assert_eq!(new_p.weight.data()[9..18], orig_p.weight.data()[18..27]);
        let orig_c = net.conv(&LayerId::from("conv2")).unwrap();
        let new_c = pruned.conv(&LayerId::from("conv2")).unwrap();
        // Channel 0 and 2 of each consumer filter.
        assert_eq!(new_c.weight.data()[..9], orig_c.weight.data()[..9]);
        assert_eq!(new_c.weight.data()[9..18], orig_c.weight.data()[18..27]);
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let mut rng = seeded_rng(3);
        let net = models::desk_cnn(10, &mut rng);
        let pruned = surgery(&net, &LayerId::from("conv2"), &Chromosome::ones(8)).unwrap();
        let a = net.conv(&LayerId::from("conv1")).unwrap();
        let b = pruned.conv(&LayerId::from("conv1")).unwrap();
        assert_eq!(a.weight.data(), b.weight.data());
    }

    #[test]
    fn pruning_zero_filters_leaves_logits_unchanged() {
        let mut rng = seeded_rng(4);
        let mut net = models::desk_cnn(10, &mut rng);
        // Zero two filters of conv2 and neutralize their batch-norm channel
        // response (running mean 0, beta 0 -> output exactly zero).
        if let LayerKind::Conv2d(c) = &mut net.layers[4].kind {
            assert_eq!(c.out_channels, 16);
            let row = c.in_channels * 9;
            for f in [3usize, 11] {
                for v in &mut c.weight.data_mut()[f * row..(f + 1) * row] {
                    *v = 0.0;
                }
            }
        }
        if let LayerKind::BatchNorm(bn) = &mut net.layers[5].kind {
            for f in [3usize, 11] {
                bn.running_mean.data_mut()[f] = 0.0;
                bn.beta.data_mut()[f] = 0.0;
            }
        }
        let mut mask = vec![true; 16];
        mask[3] = false;
        mask[11] = false;
        let pruned = surgery(&net, &LayerId::from("conv3"), &Chromosome::from_bits(mask)).unwrap();

        let mut input_rng = seeded_rng(5);
        let mut batch = Tensor::zeros(&[4, 1, 16, 16]);
        for v in batch.data_mut() {
            *v = rand::Rng::gen_range(&mut input_rng, -1.0..1.0);
        }
        let (a, _) = net.forward(&batch, &BTreeSet::new()).unwrap();
        let (b, _) = pruned.forward(&batch, &BTreeSet::new()).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    }

    #[test]
    fn stats_shrink_for_nontrivial_masks() {
        let mut rng = seeded_rng(6);
        let net = models::desk_cnn(10, &mut rng);
        let before = model_stats(&net).unwrap();
        let pruned = surgery(&net, &LayerId::from("conv3"), &mask_str("1111111100000000")).unwrap();
        let after = model_stats(&pruned).unwrap();
        assert!(after.params < before.params);
        assert!(after.flops < before.flops);
    }

    #[test]
    fn resnet_block_rules() {
        let mut rng = seeded_rng(7);
        let net = models::toy_resnet(4, &mut rng);
        let pairs = prunable_pairs(&net);
        let names: Vec<(&str, &str)> = pairs
            .iter()
            .map(|p| (p.producer.as_str(), p.consumer.as_str()))
            .collect();
        // Only the first two block convs act as producers; the stem feeds the
        // skip and the third conv feeds the add.
        assert_eq!(names, vec![("b1_conv1", "b1_conv2"), ("b1_conv2", "b1_conv3")]);

        // Pruning at the block entry is a boundary error.
        let err = surgery(&net, &LayerId::from("b1_conv1"), &mask_str("11110000"));
        assert!(matches!(err, Err(Error::PruneBoundary(..))));
    }

    #[test]
    fn last_conv_is_never_a_producer() {
        let mut rng = seeded_rng(8);
        let net = models::desk_cnn(10, &mut rng);
        let pairs = prunable_pairs(&net);
        assert!(pairs.iter().all(|p| p.producer.as_str() != "conv4"));
        assert_eq!(pairs.len(), 3);
    }

    #[test]
    fn wrong_mask_length_is_rejected() {
        let mut rng = seeded_rng(9);
        let net = models::desk_cnn(10, &mut rng);
        let err = surgery(&net, &LayerId::from("conv2"), &mask_str("1111"));
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }
}
