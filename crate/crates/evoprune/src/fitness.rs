//! The two-step approximation fitness.
//!
//! For a conv layer with weights `W` (one row of length `D = C*K*K` per
//! filter) and sampled input volumes `X`, pruning a channel subset zeroes the
//! corresponding weight positions, a perturbation `dW_f = -W_f` there. The
//! second-order error is `dE = sum_f 1/2 dW_f' H dW_f` with the shared
//! `H = (1/N) sum_i X_i X_i'`; the exact layer-wise reconstruction error over
//! the same volumes equals `2 * dE`, which the tests pin as the module's
//! central cross-check.

use crate::container::{read_tensor_f32, write_tensor_f32};
use crate::genetic::Chromosome;
use crate::net::LayerId;
use crate::sampler::VolumeSet;
use crate::{Error, Result, Tensor};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// The per-layer quadratic form shared by every filter.
#[derive(Debug, Clone)]
pub struct HessianCache {
    pub layer: LayerId,
    pub dim: usize,
    pub samples: usize,
    /// `D x D`, row-major, bit-exactly symmetric.
    matrix: Vec<f64>,
}

impl HessianCache {
    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.dim, self.dim), &self.matrix).expect("hessian view")
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.dim + j]
    }
}

/// `H = (1/N) X' X` over the sampled volumes, accumulated in f64.
/// The upper triangle is mirrored onto the lower one so symmetry holds to
/// bit equality.
pub fn compute_hessian(vs: &VolumeSet) -> Result<HessianCache> {
    let n = vs.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty volume set".into()));
    }
    let d = vs.patch_len();
    let x = vs.volumes.as_mat(n, d);
    let mut h = x.t().dot(&x);
    h.mapv_inplace(|v| v / n as f64);
    let mut matrix = h.into_raw_vec_and_offset().0;
    for i in 0..d {
        for j in i + 1..d {
            matrix[j * d + i] = matrix[i * d + j];
        }
    }
    Ok(HessianCache {
        layer: vs.layer.clone(),
        dim: d,
        samples: n,
        matrix,
    })
}

/// Second-order estimate of the reconstruction error caused by a mask:
/// `dE = sum_f 1/2 dW_f' H dW_f`, where `dW_f` is `-W_f` on the pruned
/// channels' positions and zero elsewhere.
pub fn taylor_error(h: &HessianCache, weights: &Tensor, mask: &Chromosome) -> Result<f64> {
    let d = h.dim;
    if weights.len() % d != 0 {
        return Err(Error::ShapeMismatch(format!(
            "weights of {} values vs hessian dim {}",
            weights.len(),
            d
        )));
    }
    let filters = weights.len() / d;
    let k2 = d / mask.len();
    if k2 * mask.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "mask of {} channels vs hessian dim {}",
            mask.len(),
            d
        )));
    }

    // Positions covered by pruned channels.
    let pruned: Vec<usize> = mask
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, &keep)| !keep)
        .flat_map(|(c, _)| c * k2..(c + 1) * k2)
        .collect();
    if pruned.is_empty() {
        return Ok(0.0);
    }

    let wdata = weights.data();
    let mut total = 0.0;
    for f in 0..filters {
        let w = &wdata[f * d..(f + 1) * d];
        let mut acc = 0.0;
        for &i in &pruned {
            let wi = w[i];
            if wi == 0.0 {
                continue;
            }
            let hrow = &h.matrix[i * d..(i + 1) * d];
            let mut inner = 0.0;
            for &j in &pruned {
                inner += hrow[j] * w[j];
            }
            acc += wi * inner;
        }
        total += 0.5 * acc;
    }
    Ok(total)
}

/// Exact mean squared reconstruction error over the volume set, summed over
/// filters: masked channels are zeroed out of the weights, responses are
/// recomputed, and the squared differences to the stored references are
/// averaged over samples.
pub fn direct_error(
    vs: &VolumeSet,
    weights: &Tensor,
    bias: Option<&Tensor>,
    mask: &Chromosome,
) -> Result<f64> {
    let n = vs.len();
    let d = vs.patch_len();
    let f = vs.filters();
    if weights.len() != f * d {
        return Err(Error::ShapeMismatch(format!(
            "weights of {} values vs {} x {}",
            weights.len(),
            f,
            d
        )));
    }
    let k2 = d / mask.len();
    if k2 * mask.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "mask of {} channels vs patch len {}",
            mask.len(),
            d
        )));
    }

    // Masked weight matrix.
    let mut masked = weights.clone();
    {
        let wdata = masked.data_mut();
        for filter in 0..f {
            for (c, &keep) in mask.bits().iter().enumerate() {
                if !keep {
                    for p in c * k2..(c + 1) * k2 {
                        wdata[filter * d + p] = 0.0;
                    }
                }
            }
        }
    }

    let x = vs.volumes.as_mat(n, d);
    let w = masked.as_mat(f, d);
    let mut pred = x.dot(&w.t()); // N x F
    if let Some(b) = bias {
        for mut row in pred.rows_mut() {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    let refs = vs.ref_outputs.as_mat(n, f);
    let mut total = 0.0;
    for (p, r) in pred.iter().zip(refs.iter()) {
        let diff = p - r;
        total += diff * diff;
    }
    Ok(total / n as f64)
}

/// Maps errors (lower is better) onto nonnegative fitness (higher is
/// better): `fitness_n = (E_max - E_n) + 0.01 * (E_max - E_min)`. When all
/// errors coincide the formula degenerates to zero everywhere, so a uniform
/// positive vector is returned instead.
pub fn population_fitness(errors: &[f64]) -> Vec<f64> {
    assert!(!errors.is_empty(), "fitness of an empty population");
    let max = errors.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = errors.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == min {
        return vec![1.0; errors.len()];
    }
    let floor = 0.01 * (max - min);
    errors.iter().map(|e| (max - e) + floor).collect()
}

/// Persists a Hessian in the standard tensor container.
pub fn save_hessian(h: &HessianCache, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    #[derive(Serialize)]
    struct HManifest<'a> {
        format_version: u32,
        layer: &'a str,
        dim: usize,
        samples: usize,
        matrix_file: &'a str,
    }
    let manifest = HManifest {
        format_version: crate::container::FORMAT_VERSION,
        layer: h.layer.as_str(),
        dim: h.dim,
        samples: h.samples,
        matrix_file: "hessian.bin",
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    let t = Tensor::from_vec(&[h.dim, h.dim], h.matrix.clone())?;
    write_tensor_f32(&dir.join("hessian.bin"), &t)
}

pub fn load_hessian(dir: &Path) -> Result<HessianCache> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct HManifest {
        format_version: u32,
        layer: String,
        dim: usize,
        samples: usize,
        matrix_file: String,
    }
    let manifest: HManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != crate::container::FORMAT_VERSION {
        return Err(Error::Manifest("unsupported format_version".into()));
    }
    let t = read_tensor_f32(
        &dir.join(&manifest.matrix_file),
        &[manifest.dim, manifest.dim],
    )?;
    Ok(HessianCache {
        layer: LayerId::from(manifest.layer.as_str()),
        dim: manifest.dim,
        samples: manifest.samples,
        matrix: t.into_data(),
    })
}

/// Builds a [`HessianCache`] directly from a matrix; meant for fixtures.
pub fn hessian_from_matrix(layer: LayerId, dim: usize, matrix: Vec<f64>) -> HessianCache {
    assert_eq!(matrix.len(), dim * dim);
    HessianCache {
        layer,
        dim,
        samples: 0,
        matrix,
    }
}

/// Builds a [`VolumeSet`] from raw rows; meant for fixtures.
pub fn volume_set_from_rows(
    layer: LayerId,
    rows: Vec<Vec<f64>>,
    weights: &Tensor,
    bias: Option<&Tensor>,
) -> Result<VolumeSet> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    let f = weights.len() / d;
    let mut volumes = Tensor::zeros(&[n, d]);
    let mut refs = Tensor::zeros(&[n, f]);
    for (i, row) in rows.iter().enumerate() {
        volumes.data_mut()[i * d..(i + 1) * d].copy_from_slice(row);
        for filter in 0..f {
            let w = &weights.data()[filter * d..(filter + 1) * d];
            let mut acc = bias.map_or(0.0, |b| b.data()[filter]);
            for (wv, xv) in w.iter().zip(row) {
                acc += wv * xv;
            }
            refs.data_mut()[i * f + filter] = acc;
        }
    }
    Ok(VolumeSet {
        layer,
        volumes,
        ref_outputs: refs,
        provenance: (0..n)
            .map(|i| crate::sampler::SamplePoint {
                image: i as u32,
                y: 0,
                x: 0,
            })
            .collect(),
    })
}
