//! Reference architectures: the VGG-16 variants used for accounting anchors
//! and the small nets the desk-scale experiments run on.

use super::{BatchNorm, Conv2d, Layer, LayerId, LayerKind, Linear, NetworkSpec};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn he_conv(out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let data = (0..out_c * in_c * k * k)
        .map(|_| normal.sample(rng))
        .collect();
    Tensor::from_vec(&[out_c, in_c, k, k], data).unwrap()
}

fn he_linear(out_f: usize, in_f: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / in_f as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let data = (0..out_f * in_f).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(&[out_f, in_f], data).unwrap()
}

pub fn conv_layer(
    id: &str,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    padding: usize,
    bias: bool,
    rng: &mut impl Rng,
) -> Layer {
    Layer {
        id: LayerId::from(id),
        kind: LayerKind::Conv2d(Conv2d {
            in_channels: in_c,
            out_channels: out_c,
            kernel,
            stride: 1,
            padding,
            weight: he_conv(out_c, in_c, kernel, rng),
            bias: bias.then(|| Tensor::zeros(&[out_c])),
        }),
    }
}

pub fn bn_layer(id: &str, channels: usize) -> Layer {
    Layer {
        id: LayerId::from(id),
        kind: LayerKind::BatchNorm(BatchNorm {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }),
    }
}

pub fn relu_layer(id: &str) -> Layer {
    Layer {
        id: LayerId::from(id),
        kind: LayerKind::Relu,
    }
}

pub fn maxpool_layer(id: &str) -> Layer {
    Layer {
        id: LayerId::from(id),
        kind: LayerKind::MaxPool { kernel: 2, stride: 2 },
    }
}

pub fn linear_layer(id: &str, in_f: usize, out_f: usize, rng: &mut impl Rng) -> Layer {
    Layer {
        id: LayerId::from(id),
        kind: LayerKind::Linear(Linear {
            in_features: in_f,
            out_features: out_f,
            weight: he_linear(out_f, in_f, rng),
            bias: Some(Tensor::zeros(&[out_f])),
        }),
    }
}

/// VGG-16 with batch norm, a global-average-pooling head and a single
/// classifier layer, for 32x32 inputs. Conv layers carry no bias (the norm
/// absorbs it).
pub fn vgg16_bn_gap(classes: usize, rng: &mut impl Rng) -> NetworkSpec {
    let plan: &[&[usize]] = &[
        &[64, 64],
        &[128, 128],
        &[256, 256, 256],
        &[512, 512, 512],
        &[512, 512, 512],
    ];
    let mut layers = Vec::new();
    let mut in_c = 3;
    let mut conv_no = 0;
    for (stage, widths) in plan.iter().enumerate() {
        for &out_c in *widths {
            conv_no += 1;
            layers.push(conv_layer(
                &format!("conv{conv_no}"),
                in_c,
                out_c,
                3,
                1,
                false,
                rng,
            ));
            layers.push(bn_layer(&format!("bn{conv_no}"), out_c));
            layers.push(relu_layer(&format!("relu{conv_no}")));
            in_c = out_c;
        }
        layers.push(maxpool_layer(&format!("pool{}", stage + 1)));
    }
    layers.push(Layer {
        id: LayerId::from("gap"),
        kind: LayerKind::GlobalAvgPool,
    });
    layers.push(linear_layer("fc", 512, classes, rng));
    NetworkSpec::new([3, 32, 32], layers)
}

/// Classic VGG-16 (no norm layers, three fully-connected layers) at 224x224.
/// Parameters are zero-initialized; this builder exists for accounting, not
/// training.
pub fn vgg16_imagenet() -> NetworkSpec {
    let plan: &[&[usize]] = &[
        &[64, 64],
        &[128, 128],
        &[256, 256, 256],
        &[512, 512, 512],
        &[512, 512, 512],
    ];
    let mut layers = Vec::new();
    let mut in_c = 3;
    let mut conv_no = 0;
    for (stage, widths) in plan.iter().enumerate() {
        for &out_c in *widths {
            conv_no += 1;
            layers.push(Layer {
                id: LayerId::from(format!("conv{conv_no}").as_str()),
                kind: LayerKind::Conv2d(Conv2d {
                    in_channels: in_c,
                    out_channels: out_c,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    weight: Tensor::zeros(&[out_c, in_c, 3, 3]),
                    bias: Some(Tensor::zeros(&[out_c])),
                }),
            });
            layers.push(relu_layer(&format!("relu{conv_no}")));
            in_c = out_c;
        }
        layers.push(maxpool_layer(&format!("pool{}", stage + 1)));
    }
    layers.push(Layer {
        id: LayerId::from("flatten"),
        kind: LayerKind::Flatten,
    });
    for (i, (in_f, out_f)) in [(512 * 7 * 7, 4096), (4096, 4096), (4096, 1000)]
        .iter()
        .enumerate()
    {
        layers.push(Layer {
            id: LayerId::from(format!("fc{}", i + 1).as_str()),
            kind: LayerKind::Linear(Linear {
                in_features: *in_f,
                out_features: *out_f,
                weight: Tensor::zeros(&[*out_f, *in_f]),
                bias: Some(Tensor::zeros(&[*out_f])),
            }),
        });
        if i < 2 {
            layers.push(relu_layer(&format!("fc_relu{}", i + 1)));
        }
    }
    NetworkSpec::new([3, 224, 224], layers)
}

/// The 4-conv desk-scale network for 1x16x16 inputs.
pub fn desk_cnn(classes: usize, rng: &mut impl Rng) -> NetworkSpec {
    let mut layers = Vec::new();
    let widths = [8usize, 16, 32, 32];
    let mut in_c = 1;
    for (i, &out_c) in widths.iter().enumerate() {
        let n = i + 1;
        layers.push(conv_layer(&format!("conv{n}"), in_c, out_c, 3, 1, false, rng));
        layers.push(bn_layer(&format!("bn{n}"), out_c));
        layers.push(relu_layer(&format!("relu{n}")));
        if n <= 2 {
            layers.push(maxpool_layer(&format!("pool{n}")));
        }
        in_c = out_c;
    }
    layers.push(Layer {
        id: LayerId::from("gap"),
        kind: LayerKind::GlobalAvgPool,
    });
    layers.push(linear_layer("fc", 32, classes, rng));
    NetworkSpec::new([1, 16, 16], layers)
}

/// A single identity-shortcut bottleneck block behind a stem conv; exercises
/// the residual paths and the block pruning constraint.
pub fn toy_resnet(classes: usize, rng: &mut impl Rng) -> NetworkSpec {
    let mut layers = vec![
        conv_layer("stem_conv", 1, 8, 3, 1, false, rng),
        bn_layer("stem_bn", 8),
        relu_layer("stem_relu"),
        conv_layer("b1_conv1", 8, 8, 3, 1, false, rng),
        bn_layer("b1_bn1", 8),
        relu_layer("b1_relu1"),
        conv_layer("b1_conv2", 8, 8, 3, 1, false, rng),
        bn_layer("b1_bn2", 8),
        relu_layer("b1_relu2"),
        conv_layer("b1_conv3", 8, 8, 3, 1, false, rng),
        bn_layer("b1_bn3", 8),
    ];
    layers.push(Layer {
        id: LayerId::from("b1_add"),
        kind: LayerKind::ResidualAdd {
            source: LayerId::from("stem_relu"),
        },
    });
    layers.push(relu_layer("b1_relu"));
    layers.push(Layer {
        id: LayerId::from("gap"),
        kind: LayerKind::GlobalAvgPool,
    });
    layers.push(linear_layer("fc", 8, classes, rng));
    NetworkSpec::new([1, 8, 8], layers)
}

/// Builders for tiny fixtures used across the test suites.
pub mod test_nets {
    use super::*;

    /// One 1x1 conv whose weight is the identity mixing matrix.
    pub fn identity_conv(channels: usize) -> NetworkSpec {
        let mut weight = Tensor::zeros(&[channels, channels, 1, 1]);
        for c in 0..channels {
            weight.data_mut()[c * channels + c] = 1.0;
        }
        let layers = vec![Layer {
            id: LayerId::from("conv1"),
            kind: LayerKind::Conv2d(Conv2d {
                in_channels: channels,
                out_channels: channels,
                kernel: 1,
                stride: 1,
                padding: 0,
                weight,
                bias: Some(Tensor::zeros(&[channels])),
            }),
        }];
        NetworkSpec::new([channels, 2, 2], layers)
    }
}
