//! On-disk model containers: a directory holding `manifest.json` plus one
//! raw little-endian f32 blob per parameter tensor, row-major, named
//! `<layer-id>.<role>.bin`.

use crate::net::{BatchNorm, Conv2d, Layer, LayerId, LayerKind, Linear, NetworkSpec};
use crate::{Error, Result, Tensor};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dtype: String,
    input_shape: [usize; 3],
    layers: Vec<ManifestLayer>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
enum ManifestLayer {
    #[serde(rename = "conv2d")]
    Conv2d {
        id: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        id: String,
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    #[serde(rename = "relu")]
    Relu { id: String },
    #[serde(rename = "maxpool")]
    MaxPool {
        id: String,
        kernel: usize,
        stride: usize,
    },
    #[serde(rename = "avgpool")]
    AvgPool {
        id: String,
        kernel: usize,
        stride: usize,
    },
    #[serde(rename = "global-avg-pool")]
    GlobalAvgPool { id: String },
    #[serde(rename = "linear")]
    Linear {
        id: String,
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    #[serde(rename = "flatten")]
    Flatten { id: String },
    #[serde(rename = "residual-add")]
    ResidualAdd { id: String, source: String },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    layer: String,
    role: String,
    shape: Vec<usize>,
    file: String,
}

/// Writes a tensor as raw little-endian f32, row-major.
pub fn write_tensor_f32(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &v in tensor.data() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

/// Reads a raw little-endian f32 blob into a tensor of the given shape.
pub fn read_tensor_f32(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let expected: usize = shape.iter().product();
    let mut r = BufReader::new(File::open(path)?);
    let mut data = Vec::with_capacity(expected);
    for _ in 0..expected {
        let v = r.read_f32::<LittleEndian>().map_err(|_| Error::CorruptFile {
            path: path.display().to_string(),
            reason: format!("expected {expected} f32 values"),
        })?;
        data.push(v as f64);
    }
    // Trailing bytes mean the blob does not match the manifest.
    if r.read_u8().is_ok() {
        return Err(Error::CorruptFile {
            path: path.display().to_string(),
            reason: "blob longer than manifest shape".into(),
        });
    }
    Tensor::from_vec(shape, data)
}

fn param_file(id: &LayerId, role: &str) -> String {
    format!("{id}.{role}.bin")
}

/// Saves a network into `dir` (created if missing).
pub fn save_model(net: &NetworkSpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut layers = Vec::new();
    let mut params = Vec::new();
    let mut blobs: Vec<(String, &Tensor)> = Vec::new();

    let push_param = |id: &LayerId, role: &str, t: &Tensor, params: &mut Vec<ParamEntry>| {
        let file = param_file(id, role);
        params.push(ParamEntry {
            layer: id.to_string(),
            role: role.to_string(),
            shape: t.shape().to_vec(),
            file: file.clone(),
        });
        file
    };

    for layer in &net.layers {
        let id = layer.id.to_string();
        match &layer.kind {
            LayerKind::Conv2d(c) => {
                layers.push(ManifestLayer::Conv2d {
                    id: id.clone(),
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    padding: c.padding,
                    bias: c.bias.is_some(),
                });
                let f = push_param(&layer.id, "weight", &c.weight, &mut params);
                blobs.push((f, &c.weight));
                if let Some(b) = &c.bias {
                    let f = push_param(&layer.id, "bias", b, &mut params);
                    blobs.push((f, b));
                }
            }
            LayerKind::BatchNorm(bn) => {
                layers.push(ManifestLayer::BatchNorm {
                    id: id.clone(),
                    channels: bn.channels,
                    eps: bn.eps,
                    momentum: bn.momentum,
                });
                for (role, t) in [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("running_mean", &bn.running_mean),
                    ("running_var", &bn.running_var),
                ] {
                    let f = push_param(&layer.id, role, t, &mut params);
                    blobs.push((f, t));
                }
            }
            LayerKind::Relu => layers.push(ManifestLayer::Relu { id }),
            LayerKind::MaxPool { kernel, stride } => layers.push(ManifestLayer::MaxPool {
                id,
                kernel: *kernel,
                stride: *stride,
            }),
            LayerKind::AvgPool { kernel, stride } => layers.push(ManifestLayer::AvgPool {
                id,
                kernel: *kernel,
                stride: *stride,
            }),
            LayerKind::GlobalAvgPool => layers.push(ManifestLayer::GlobalAvgPool { id }),
            LayerKind::Linear(lin) => {
                layers.push(ManifestLayer::Linear {
                    id: id.clone(),
                    in_features: lin.in_features,
                    out_features: lin.out_features,
                    bias: lin.bias.is_some(),
                });
                let f = push_param(&layer.id, "weight", &lin.weight, &mut params);
                blobs.push((f, &lin.weight));
                if let Some(b) = &lin.bias {
                    let f = push_param(&layer.id, "bias", b, &mut params);
                    blobs.push((f, b));
                }
            }
            LayerKind::Flatten => layers.push(ManifestLayer::Flatten { id }),
            LayerKind::ResidualAdd { source } => layers.push(ManifestLayer::ResidualAdd {
                id,
                source: source.to_string(),
            }),
        }
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "f32".to_string(),
        input_shape: net.input_shape,
        layers,
        params,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    for (file, tensor) in blobs {
        write_tensor_f32(&dir.join(file), tensor)?;
    }
    Ok(())
}

/// Loads a network from a container directory.
pub fn load_model(dir: &Path) -> Result<NetworkSpec> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    if manifest.dtype != "f32" {
        return Err(Error::Manifest(format!("unsupported dtype {}", manifest.dtype)));
    }

    let lookup = |layer: &str, role: &str| -> Result<Tensor> {
        let entry = manifest
            .params
            .iter()
            .find(|p| p.layer == layer && p.role == role)
            .ok_or_else(|| Error::Manifest(format!("missing param {layer}.{role}")))?;
        read_tensor_f32(&dir.join(&entry.file), &entry.shape)
    };

    let mut layers = Vec::new();
    for ml in &manifest.layers {
        let layer = match ml {
            ManifestLayer::Conv2d {
                id,
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            } => {
                let weight = lookup(id, "weight")?;
                if weight.shape() != [*out_channels, *in_channels, *kernel, *kernel] {
                    return Err(Error::Manifest(format!("{id}: weight shape mismatch")));
                }
                Layer {
                    id: LayerId::from(id.as_str()),
                    kind: LayerKind::Conv2d(Conv2d {
                        in_channels: *in_channels,
                        out_channels: *out_channels,
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                        weight,
                        bias: if *bias { Some(lookup(id, "bias")?) } else { None },
                    }),
                }
            }
            ManifestLayer::BatchNorm {
                id,
                channels,
                eps,
                momentum,
            } => Layer {
                id: LayerId::from(id.as_str()),
                kind: LayerKind::BatchNorm(BatchNorm {
                    channels: *channels,
                    eps: *eps,
                    momentum: *momentum,
                    gamma: lookup(id, "gamma")?,
                    beta: lookup(id, "beta")?,
                    running_mean: lookup(id, "running_mean")?,
                    running_var: lookup(id, "running_var")?,
                }),
            },
            ManifestLayer::Relu { id } => Layer {
                id: LayerId::from(id.as_str()),
                kind: LayerKind::Relu,
            },
            ManifestLayer::MaxPool { id, kernel, stride } => Layer {
                id: LayerId::from(id.as_str()),
                kind: LayerKind::MaxPool {
                    kernel: *kernel,
                    stride: *stride,
                },
            },
            ManifestLayer::AvgPool { id, kernel, stride } => Layer {
                id: LayerId::from(id.as_str()),
                kind: LayerKind::AvgPool {
                    kernel: *kernel,
                    stride: *stride,
                },
            },
            ManifestLayer::GlobalAvgPool { id } => Layer {
                id: LayerId::from(id.as_str()),
                kind: LayerKind::GlobalAvgPool,
            },
            ManifestLayer::Linear {
                id,
                in_features,
                out_features,
                bias,
            } => {
                let weight = lookup(id, "weight")?;
                if weight.shape() != [*out_features, *in_features] {
                    return Err(Error::Manifest(format!("{id}: weight shape mismatch")));
                }
                Layer {
                    id: LayerId::from(id.as_str()),
                    kind: LayerKind::Linear(Linear {
                        in_features: *in_features,
                        out_features: *out_features,
                        weight,
                        bias: if *bias { Some(lookup(id, "bias")?) } else { None },
                    }),
                }
            }
            ManifestLayer::Flatten { id } => Layer {
                id: LayerId::from(id.as_str()),
                kind: LayerKind::Flatten,
            },
            ManifestLayer::ResidualAdd { id, source } => Layer {
                id: LayerId::from(id.as_str()),
                kind: LayerKind::ResidualAdd {
                    source: LayerId::from(source.as_str()),
                },
            },
        };
        layers.push(layer);
    }

    let net = NetworkSpec::new(manifest.input_shape, layers);
    net.output_shapes()?; // validate before handing back
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::models;
    use crate::optim::seeded_rng;

    #[test]
    fn save_load_round_trip_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeded_rng(3);
        let net = models::desk_cnn(10, &mut rng);
        save_model(&net, dir.path()).unwrap();
        let restored = load_model(dir.path()).unwrap();
        assert_eq!(restored.layers.len(), net.layers.len());
        // Values survive the f32 round trip to f32 precision.
        for (a, b) in net.layers.iter().zip(&restored.layers) {
            assert_eq!(a.id, b.id);
            if let (LayerKind::Conv2d(ca), LayerKind::Conv2d(cb)) = (&a.kind, &b.kind) {
                for (x, y) in ca.weight.data().iter().zip(cb.weight.data()) {
                    assert_eq!(*x as f32, *y as f32);
                }
            }
        }
    }

    #[test]
    fn save_twice_is_byte_identical() {
        let mut rng = seeded_rng(4);
        let net = models::toy_resnet(4, &mut rng);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_model(&net, d1.path()).unwrap();
        save_model(&net, d2.path()).unwrap();
        let m1 = std::fs::read(d1.path().join("manifest.json")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
        let w1 = std::fs::read(d1.path().join("stem_conv.weight.bin")).unwrap();
        let w2 = std::fs::read(d2.path().join("stem_conv.weight.bin")).unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeded_rng(5);
        let net = models::desk_cnn(2, &mut rng);
        save_model(&net, dir.path()).unwrap();
        let blob = dir.path().join("conv1.weight.bin");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_model(dir.path()),
            Err(Error::CorruptFile { .. })
        ));
    }
}
