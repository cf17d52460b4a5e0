//! Dataset ingestion, normalization and augmentation.
//!
//! Supported sources: IDX image/label pairs, CIFAR-10 binary batches, and a
//! seed-deterministic synthetic generator for desk-scale experiments. Pixels
//! are scaled to `[0, 1]` and then normalized per channel.

mod augment;
mod cifar;
mod idx;
mod synthetic;

pub use augment::{augment, AugmentPolicy};
pub use cifar::load_cifar_binary;
pub use idx::{load_idx_pair, write_idx_images, write_idx_labels};
pub use synthetic::{SyntheticKind, SyntheticSpec};

use crate::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine normalization of `[0, 1]`-scaled pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Computes per-channel statistics of a raw `[0, 1]` image tensor.
    pub fn from_images(images: &Tensor) -> Result<Self> {
        let [c, h, w] = images.chw()?;
        let n = images.batch();
        let spatial = h * w;
        let count = (n * spatial) as f64;
        let data = images.data();
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for img in 0..n {
                let base = img * c * spatial + ch * spatial;
                acc += data[base..base + spatial].iter().sum::<f64>();
            }
            mean[ch] = acc / count;
            let mut vacc = 0.0;
            for img in 0..n {
                let base = img * c * spatial + ch * spatial;
                for s in 0..spatial {
                    let d = data[base + s] - mean[ch];
                    vacc += d * d;
                }
            }
            // Constant channels would divide by zero; clamp and stay invertible.
            std[ch] = (vacc / count).sqrt().max(1e-6);
        }
        Ok(Normalization { mean, std })
    }

    pub fn normalize(&self, images: &mut Tensor) -> Result<()> {
        let [c, h, w] = images.chw()?;
        let n = images.batch();
        let spatial = h * w;
        let data = images.data_mut();
        for img in 0..n {
            for ch in 0..c {
                let base = img * c * spatial + ch * spatial;
                for s in 0..spatial {
                    data[base + s] = (data[base + s] - self.mean[ch]) / self.std[ch];
                }
            }
        }
        Ok(())
    }

    pub fn denormalize(&self, images: &mut Tensor) -> Result<()> {
        let [c, h, w] = images.chw()?;
        let n = images.batch();
        let spatial = h * w;
        let data = images.data_mut();
        for img in 0..n {
            for ch in 0..c {
                let base = img * c * spatial + ch * spatial;
                for s in 0..spatial {
                    data[base + s] = data[base + s] * self.std[ch] + self.mean[ch];
                }
            }
        }
        Ok(())
    }
}

/// An in-memory labeled image set, already normalized.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the images at `indices` into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.images.chw().expect("dataset images are 4-d");
        let stride = c * h * w;
        let src = self.images.data();
        let mut out = Tensor::zeros(&[indices.len(), c, h, w]);
        {
            let dst = out.data_mut();
            for (row, &i) in indices.iter().enumerate() {
                dst[row * stride..(row + 1) * stride]
                    .copy_from_slice(&src[i * stride..(i + 1) * stride]);
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (out, labels)
    }

    /// Takes the first `n` samples (used to carve subsets out of larger sets).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        let (images, labels) = self.gather(&indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }

    fn from_raw(
        images: Tensor,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
        stats: Option<Normalization>,
    ) -> Result<Dataset> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        images.ensure_finite("dataset images")?;
        let normalization = match stats {
            Some(s) => s,
            None => Normalization::from_images(&images)?,
        };
        let mut images = images;
        normalization.normalize(&mut images)?;
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
            normalization,
        })
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
    },
    CifarBinary {
        paths: Vec<PathBuf>,
    },
    Synthetic(SyntheticSpec),
}

/// Loads a dataset from any supported source. When `stats` is `None` the
/// normalization is computed from this split's own pixels.
pub fn load_dataset(
    source: &DataSource,
    split: Split,
    stats: Option<Normalization>,
) -> Result<Dataset> {
    match source {
        DataSource::Idx {
            images,
            labels,
            classes,
        } => {
            let (raw, label_vec) = load_idx_pair(images, labels)?;
            let inferred = classes
                .unwrap_or_else(|| label_vec.iter().copied().max().map_or(0, |m| m + 1));
            Dataset::from_raw(raw, label_vec, inferred, split, stats)
        }
        DataSource::CifarBinary { paths } => {
            let (raw, label_vec) = load_cifar_binary(paths)?;
            Dataset::from_raw(raw, label_vec, 10, split, stats)
        }
        DataSource::Synthetic(spec) => {
            let (raw, label_vec) = spec.generate(split)?;
            Dataset::from_raw(raw, label_vec, spec.classes, split, stats)
        }
    }
}
