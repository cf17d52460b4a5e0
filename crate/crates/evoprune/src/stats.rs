//! Learnable-parameter and FLOP accounting.
//!
//! FLOPs count two operations per multiply-accumulate, over convolution and
//! linear layers only; pooling, norm and activation layers are free. With
//! that convention the classic VGG-16 at 224x224 lands at ~3.1e10.

use crate::net::{LayerKind, NetworkSpec};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelStats {
    pub params: u64,
    pub flops: u64,
}

/// Counts learnable values (conv/linear weights and biases, norm gamma and
/// beta) and inference FLOPs for the network's declared input shape.
pub fn model_stats(net: &NetworkSpec) -> Result<ModelStats> {
    let shapes = net.output_shapes()?;
    let mut params = 0u64;
    let mut flops = 0u64;
    for (idx, layer) in net.layers.iter().enumerate() {
        match &layer.kind {
            LayerKind::Conv2d(c) => {
                let weight = (c.out_channels * c.in_channels * c.kernel * c.kernel) as u64;
                params += weight + c.bias.as_ref().map_or(0, |b| b.len() as u64);
                let out = shapes[idx];
                let macs = weight * (out[1] * out[2]) as u64;
                flops += 2 * macs;
            }
            LayerKind::Linear(lin) => {
                let weight = (lin.in_features * lin.out_features) as u64;
                params += weight + lin.bias.as_ref().map_or(0, |b| b.len() as u64);
                flops += 2 * weight;
            }
            LayerKind::BatchNorm(bn) => {
                params += 2 * bn.channels as u64;
            }
            _ => {}
        }
    }
    Ok(ModelStats { params, flops })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::models;
    use crate::net::{Conv2d, Layer, LayerId, NetworkSpec};
    use crate::optim::seeded_rng;
    use crate::Tensor;

    #[test]
    fn single_conv_closed_form() {
        // One conv 3->1, K=3, no bias, input 3x32x32, padding 1.
        let layers = vec![Layer {
            id: LayerId::from("conv1"),
            kind: LayerKind::Conv2d(Conv2d {
                in_channels: 3,
                out_channels: 1,
                kernel: 3,
                stride: 1,
                padding: 1,
                weight: Tensor::zeros(&[1, 3, 3, 3]),
                bias: None,
            }),
        }];
        let net = NetworkSpec::new([3, 32, 32], layers);
        let stats = model_stats(&net).unwrap();
        assert_eq!(stats.params, 27);
        assert_eq!(stats.flops, 2 * 27 * 32 * 32);
    }

    #[test]
    fn vgg16_cifar_anchor() {
        let mut rng = seeded_rng(0);
        let net = models::vgg16_bn_gap(10, &mut rng);
        let stats = model_stats(&net).unwrap();
        let params = stats.params as f64;
        let flops = stats.flops as f64;
        assert!((params - 14.7e6).abs() / 14.7e6 < 0.02, "params {params}");
        assert!((flops - 6.26e8).abs() / 6.26e8 < 0.02, "flops {flops}");
    }

    #[test]
    fn vgg16_imagenet_matches_headline_flops() {
        let net = models::vgg16_imagenet();
        let stats = model_stats(&net).unwrap();
        let flops = stats.flops as f64;
        assert!((flops - 3.1e10).abs() / 3.1e10 < 0.02, "flops {flops}");
        // ~138M parameters, most of them in the FC layers.
        assert!((stats.params as f64 - 138.3e6).abs() / 138.3e6 < 0.01);
    }
}
