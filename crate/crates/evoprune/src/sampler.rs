//! Input-volume sampling for a target convolution layer.
//!
//! Runs the network over a deterministic (augmentation-free) pipeline,
//! captures the layer's input feature map, and extracts flattened `C*K*K`
//! patches at randomly chosen spatial output positions together with the
//! layer's pre-activation responses at those positions.

use crate::container::{read_tensor_f32, write_tensor_f32};
use crate::data::Dataset;
use crate::net::{LayerId, NetworkSpec};
use crate::{Error, Result, Tensor};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Hard cap on the number of sampled volumes.
pub const MAX_VOLUMES: usize = 100_000;

/// Where one volume came from: dataset image index and output coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub image: u32,
    pub y: u32,
    pub x: u32,
}

/// Sampled input patches and reference responses for one conv layer.
#[derive(Debug, Clone)]
pub struct VolumeSet {
    pub layer: LayerId,
    /// `N x (C*K*K)`; each row is one flattened input patch.
    pub volumes: Tensor,
    /// `N x F`; pre-activation outputs of all filters at the sampled spots.
    pub ref_outputs: Tensor,
    pub provenance: Vec<SamplePoint>,
}

impl VolumeSet {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn patch_len(&self) -> usize {
        self.volumes.shape()[1]
    }

    pub fn filters(&self) -> usize {
        self.ref_outputs.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Fraction of the dataset's images to draw volumes from.
    pub image_fraction: f64,
    pub volumes_per_image: usize,
    pub max_volumes: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            image_fraction: 0.01,
            volumes_per_image: 10,
            max_volumes: MAX_VOLUMES,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.image_fraction > 0.0 && self.image_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "image_fraction {} outside (0, 1]",
                self.image_fraction
            )));
        }
        if self.volumes_per_image == 0 {
            return Err(Error::InvalidArgument("zero volumes per image".into()));
        }
        if self.max_volumes == 0 {
            return Err(Error::InvalidArgument("zero max volumes".into()));
        }
        Ok(())
    }
}

/// Draws volumes for `layer` from `data` through `net`.
///
/// The image subset is drawn once (without replacement, then kept in index
/// order), positions are uniform without replacement within each image, and
/// everything is deterministic under a fixed seed.
pub fn sample_volumes(
    net: &NetworkSpec,
    data: &Dataset,
    layer: &LayerId,
    cfg: &SampleConfig,
    rng: &mut impl Rng,
) -> Result<VolumeSet> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let conv = net.conv(layer)?.clone();
    let layer_idx = net.layer_index(layer)?;
    let shapes = net.output_shapes()?;
    let in_shape = if layer_idx == 0 {
        net.input_shape
    } else {
        shapes[layer_idx - 1]
    };
    let (oh, ow) = conv.geometry().out_hw(in_shape[1], in_shape[2]);
    let positions_per_image = oh * ow;
    if cfg.volumes_per_image > positions_per_image {
        return Err(Error::InvalidArgument(format!(
            "{} volumes per image but only {} positions",
            cfg.volumes_per_image, positions_per_image
        )));
    }

    // Image subset: drawn once, then visited in ascending order.
    let want_images = ((cfg.image_fraction * data.len() as f64).ceil() as usize).max(1);
    let mut all: Vec<usize> = (0..data.len()).collect();
    all.shuffle(rng);
    let mut chosen: Vec<usize> = all.into_iter().take(want_images).collect();
    chosen.sort_unstable();

    let total = (chosen.len() * cfg.volumes_per_image)
        .min(cfg.max_volumes)
        .min(MAX_VOLUMES);

    let d = conv.geometry().patch_len();
    let f = conv.out_channels;
    let mut volumes = Tensor::zeros(&[total, d]);
    let mut refs = Tensor::zeros(&[total, f]);
    let mut provenance = Vec::with_capacity(total);

    // The input feature map of this layer is the previous layer's output
    // (or the raw batch for the first layer).
    let capture: BTreeSet<LayerId> = if layer_idx == 0 {
        BTreeSet::new()
    } else {
        [net.layers[layer_idx - 1].id.clone()].into()
    };

    let mut row = 0usize;
    let chunk_size = 64;
    'outer: for chunk in chosen.chunks(chunk_size) {
        let (batch, _) = data.gather(chunk);
        let input_map = if layer_idx == 0 {
            batch.clone()
        } else {
            let (_, trace) = net.forward(&batch, &capture)?;
            trace
                .into_iter()
                .next()
                .map(|(_, t)| t)
                .expect("captured input map")
        };
        let [c, h, w] = input_map.chw()?;
        let map = input_map.data();
        let k = conv.kernel;
        let wmat = conv.weight_matrix();
        let wdata = wmat.data();

        for (local, &image_idx) in chunk.iter().enumerate() {
            // Positions without replacement within this image.
            let mut pos: Vec<usize> = (0..positions_per_image).collect();
            pos.shuffle(rng);
            for &p in pos.iter().take(cfg.volumes_per_image) {
                if row >= total {
                    break 'outer;
                }
                let oy = p / ow;
                let ox = p % ow;
                let iy0 = (oy * conv.stride) as isize - conv.padding as isize;
                let ix0 = (ox * conv.stride) as isize - conv.padding as isize;
                {
                    let vrow = &mut volumes.data_mut()[row * d..(row + 1) * d];
                    let base = local * c * h * w;
                    for ch in 0..c {
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                vrow[(ch * k + ky) * k + kx] =
                                    map[base + ch * h * w + iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
                // Reference response: explicit dot product per filter.
                {
                    let vrow = &volumes.data()[row * d..(row + 1) * d];
                    let rrow = &mut refs.data_mut()[row * f..(row + 1) * f];
                    for filter in 0..f {
                        let wrow = &wdata[filter * d..(filter + 1) * d];
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.data()[filter]);
                        for (wv, xv) in wrow.iter().zip(vrow) {
                            acc += wv * xv;
                        }
                        rrow[filter] = acc;
                    }
                }
                provenance.push(SamplePoint {
                    image: image_idx as u32,
                    y: oy as u32,
                    x: ox as u32,
                });
                row += 1;
            }
        }
    }

    let vs = VolumeSet {
        layer: layer.clone(),
        volumes,
        ref_outputs: refs,
        provenance,
    };
    verify_against_capture(net, data, &vs, layer_idx)?;
    Ok(vs)
}

/// Build-time invariant: stored responses must match the conv layer's
/// captured output at the sampled coordinates (relative 1e-5).
fn verify_against_capture(
    net: &NetworkSpec,
    data: &Dataset,
    vs: &VolumeSet,
    layer_idx: usize,
) -> Result<()> {
    if vs.is_empty() {
        return Ok(());
    }
    // Spot-check a bounded number of rows to keep sampling fast.
    let step = (vs.len() / 64).max(1);
    let layer_id = net.layers[layer_idx].id.clone();
    let capture: BTreeSet<LayerId> = [layer_id.clone()].into();
    for row in (0..vs.len()).step_by(step) {
        let p = vs.provenance[row];
        let (batch, _) = data.gather(&[p.image as usize]);
        let (_, trace) = net.forward(&batch, &capture)?;
        let out = &trace[&layer_id];
        let [f, oh, ow] = out.chw()?;
        debug_assert_eq!(f, vs.filters());
        for filter in 0..f {
            let got = vs.ref_outputs.data()[row * f + filter];
            let expect = out.data()[filter * oh * ow + p.y as usize * ow + p.x as usize];
            let scale = expect.abs().max(1.0);
            if (got - expect).abs() / scale > 1e-5 {
                return Err(Error::ShapeMismatch(format!(
                    "volume responses disagree with forward capture at row {row}: {got} vs {expect}"
                )));
            }
        }
    }
    Ok(())
}

/// Persists a volume set in the standard container scheme so a search can be
/// re-run without re-sampling.
pub fn save_volume_set(vs: &VolumeSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    #[derive(Serialize)]
    struct VsManifest<'a> {
        format_version: u32,
        layer: &'a str,
        samples: usize,
        patch_len: usize,
        filters: usize,
        volumes_file: &'a str,
        ref_outputs_file: &'a str,
        provenance_file: &'a str,
    }
    let manifest = VsManifest {
        format_version: crate::container::FORMAT_VERSION,
        layer: vs.layer.as_str(),
        samples: vs.len(),
        patch_len: vs.patch_len(),
        filters: vs.filters(),
        volumes_file: "volumes.bin",
        ref_outputs_file: "ref_outputs.bin",
        provenance_file: "provenance.bin",
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    write_tensor_f32(&dir.join("volumes.bin"), &vs.volumes)?;
    write_tensor_f32(&dir.join("ref_outputs.bin"), &vs.ref_outputs)?;
    let mut w = BufWriter::new(File::create(dir.join("provenance.bin"))?);
    for p in &vs.provenance {
        w.write_u32::<LittleEndian>(p.image)?;
        w.write_u32::<LittleEndian>(p.y)?;
        w.write_u32::<LittleEndian>(p.x)?;
    }
    Ok(())
}

pub fn load_volume_set(dir: &Path) -> Result<VolumeSet> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct VsManifest {
        format_version: u32,
        layer: String,
        samples: usize,
        patch_len: usize,
        filters: usize,
        volumes_file: String,
        ref_outputs_file: String,
        provenance_file: String,
    }
    let manifest: VsManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != crate::container::FORMAT_VERSION {
        return Err(Error::Manifest("unsupported format_version".into()));
    }
    let volumes = read_tensor_f32(
        &dir.join(&manifest.volumes_file),
        &[manifest.samples, manifest.patch_len],
    )?;
    let ref_outputs = read_tensor_f32(
        &dir.join(&manifest.ref_outputs_file),
        &[manifest.samples, manifest.filters],
    )?;
    let mut provenance = Vec::with_capacity(manifest.samples);
    let mut r = BufReader::new(File::open(dir.join(&manifest.provenance_file))?);
    for _ in 0..manifest.samples {
        provenance.push(SamplePoint {
            image: r.read_u32::<LittleEndian>()?,
            y: r.read_u32::<LittleEndian>()?,
            x: r.read_u32::<LittleEndian>()?,
        });
    }
    Ok(VolumeSet {
        layer: LayerId::from(manifest.layer.as_str()),
        volumes,
        ref_outputs,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DataSource, Split, SyntheticKind, SyntheticSpec};
    use crate::net::models;
    use crate::optim::seeded_rng;

    fn small_world() -> (NetworkSpec, Dataset) {
        let mut rng = seeded_rng(2);
        let mut net = models::desk_cnn(2, &mut rng);
        net.input_shape = [1, 8, 8];
        let spec = SyntheticSpec {
            kind: SyntheticKind::Blobs,
            train: 100,
            test: 10,
            classes: 2,
            channels: 1,
            height: 8,
            width: 8,
            noise: 0.05,
            seed: 77,
        };
        let data = load_dataset(&DataSource::Synthetic(spec), Split::Train, None).unwrap();
        (net, data)
    }

    #[test]
    fn full_fraction_single_volume_counts() {
        let (net, data) = small_world();
        let cfg = SampleConfig {
            image_fraction: 1.0,
            volumes_per_image: 1,
            max_volumes: MAX_VOLUMES,
        };
        let mut rng = seeded_rng(1);
        let vs = sample_volumes(&net, &data, &LayerId::from("conv2"), &cfg, &mut rng).unwrap();
        assert_eq!(vs.len(), 100);
        assert_eq!(vs.patch_len(), 8 * 3 * 3);
        assert_eq!(vs.filters(), 16);
    }

    #[test]
    fn paper_defaults_on_ten_thousand_images_yield_thousand() {
        // ceil(0.01 * 10_000) * 10 == 1_000 without touching the network.
        let cfg = SampleConfig::default();
        let n_images = (cfg.image_fraction * 10_000f64).ceil() as usize;
        assert_eq!(n_images * cfg.volumes_per_image, 1_000);

        // And the sampler itself honors the arithmetic on a smaller set.
        let (net, data) = small_world();
        let mut rng = seeded_rng(3);
        let cfg = SampleConfig {
            image_fraction: 0.1,
            volumes_per_image: 10,
            max_volumes: MAX_VOLUMES,
        };
        let vs = sample_volumes(&net, &data, &LayerId::from("conv1"), &cfg, &mut rng).unwrap();
        assert_eq!(vs.len(), 100);
    }

    #[test]
    fn patches_match_captured_feature_map_bitwise() {
        let (net, data) = small_world();
        let cfg = SampleConfig {
            image_fraction: 0.2,
            volumes_per_image: 4,
            max_volumes: MAX_VOLUMES,
        };
        let mut rng = seeded_rng(5);
        let layer = LayerId::from("conv3");
        let vs = sample_volumes(&net, &data, &layer, &cfg, &mut rng).unwrap();

        // Recompute the input map for each sampled image and compare windows.
        let prev = LayerId::from("pool2");
        let capture: BTreeSet<LayerId> = [prev.clone()].into();
        let conv = net.conv(&layer).unwrap();
        let k = conv.kernel;
        let d = vs.patch_len();
        for (row, p) in vs.provenance.iter().enumerate() {
            let (batch, _) = data.gather(&[p.image as usize]);
            let (_, trace) = net.forward(&batch, &capture).unwrap();
            let map = &trace[&prev];
            let [c, h, w] = map.chw().unwrap();
            let patch = &vs.volumes.data()[row * d..(row + 1) * d];
            for ch in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = p.y as isize + ky as isize - conv.padding as isize;
                        let ix = p.x as isize + kx as isize - conv.padding as isize;
                        let expect = if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            map.data()[ch * h * w + iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                        assert_eq!(patch[(ch * k + ky) * k + kx], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (net, data) = small_world();
        let cfg = SampleConfig {
            image_fraction: 0.3,
            volumes_per_image: 3,
            max_volumes: MAX_VOLUMES,
        };
        let layer = LayerId::from("conv2");
        let a = sample_volumes(&net, &data, &layer, &cfg, &mut seeded_rng(9)).unwrap();
        let b = sample_volumes(&net, &data, &layer, &cfg, &mut seeded_rng(9)).unwrap();
        assert_eq!(a.volumes.data(), b.volumes.data());
        assert_eq!(a.provenance, b.provenance);
    }

    #[test]
    fn cap_limits_total_volumes() {
        let (net, data) = small_world();
        let cfg = SampleConfig {
            image_fraction: 1.0,
            volumes_per_image: 4,
            max_volumes: 37,
        };
        let mut rng = seeded_rng(11);
        let vs = sample_volumes(&net, &data, &LayerId::from("conv2"), &cfg, &mut rng).unwrap();
        assert_eq!(vs.len(), 37);
    }

    #[test]
    fn non_conv_layer_is_rejected() {
        let (net, data) = small_world();
        let mut rng = seeded_rng(1);
        let err = sample_volumes(
            &net,
            &data,
            &LayerId::from("relu1"),
            &SampleConfig::default(),
            &mut rng,
        );
        assert!(matches!(err, Err(Error::NotConv(_))));
    }

    #[test]
    fn volume_set_round_trips_to_disk() {
        let (net, data) = small_world();
        let cfg = SampleConfig {
            image_fraction: 0.1,
            volumes_per_image: 2,
            max_volumes: MAX_VOLUMES,
        };
        let mut rng = seeded_rng(13);
        let vs = sample_volumes(&net, &data, &LayerId::from("conv2"), &cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_volume_set(&vs, dir.path()).unwrap();
        let restored = load_volume_set(dir.path()).unwrap();
        assert_eq!(restored.layer, vs.layer);
        assert_eq!(restored.provenance, vs.provenance);
        for (a, b) in vs.volumes.data().iter().zip(restored.volumes.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }
}
