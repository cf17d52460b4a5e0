//! Numeric kernels for the layer zoo: im2col convolution, batch norm,
//! pooling, linear. All kernels are deterministic; reductions run in a
//! fixed order so repeated passes are bit-identical.

use crate::tensor::Tensor;
use ndarray::{Array2, ArrayView2};

/// Static description of a convolution, without its parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    /// Flattened patch length `C * K * K`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unrolls conv input windows into a `(N*Ho*Wo) x (C*K*K)` matrix.
/// Out-of-bounds positions read as zero padding. Column order matches the
/// row-major `F x C x K x K` weight layout.
pub fn im2col(input: &Tensor, geo: &ConvGeometry) -> Array2<f64> {
    let (n, c, h, w) = activation_dims(input);
    debug_assert_eq!(c, geo.in_channels);
    let (oh, ow) = geo.out_hw(h, w);
    let d = geo.patch_len();
    let rows = n * oh * ow;
    let mut cols = Array2::<f64>::zeros((rows, d));
    let data = input.data();
    let k = geo.kernel;

    for img in 0..n {
        let in_base = img * c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (img * oh + oy) * ow + ox;
                let mut out = cols.row_mut(row);
                let iy0 = (oy * geo.stride) as isize - geo.padding as isize;
                let ix0 = (ox * geo.stride) as isize - geo.padding as isize;
                for ch in 0..c {
                    let ch_base = in_base + ch * h * w;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_base = ch_base + iy as usize * w;
                        let col_base = (ch * k + ky) * k;
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[col_base + kx] = data[row_base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a `(N*Ho*Wo) x (C*K*K)` gradient matrix back onto the input.
pub fn col2im_add(grad_cols: &ArrayView2<'_, f64>, geo: &ConvGeometry, grad_input: &mut Tensor) {
    let (n, c, h, w) = activation_dims(grad_input);
    let (oh, ow) = geo.out_hw(h, w);
    let k = geo.kernel;
    let data = grad_input.data_mut();

    for img in 0..n {
        let in_base = img * c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (img * oh + oy) * ow + ox;
                let src = grad_cols.row(row);
                let iy0 = (oy * geo.stride) as isize - geo.padding as isize;
                let ix0 = (ox * geo.stride) as isize - geo.padding as isize;
                for ch in 0..c {
                    let ch_base = in_base + ch * h * w;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_base = ch_base + iy as usize * w;
                        let col_base = (ch * k + ky) * k;
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            data[row_base + ix as usize] += src[col_base + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. `weight` is `F x (C*K*K)` row-major.
pub fn conv_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geo: &ConvGeometry) -> Tensor {
    let (n, _c, h, w) = activation_dims(input);
    let (oh, ow) = geo.out_hw(h, w);
    let f = geo.out_channels;
    let d = geo.patch_len();

    let cols = im2col(input, geo);
    let wmat = weight.as_mat(f, d);
    // (N*Ho*Wo) x F
    let out2 = cols.dot(&wmat.t());

    let mut output = Tensor::zeros(&[n, f, oh, ow]);
    let out = output.data_mut();
    let spatial = oh * ow;
    for img in 0..n {
        for oc in 0..f {
            let b = bias.map_or(0.0, |t| t.data()[oc]);
            let dst = img * f * spatial + oc * spatial;
            for s in 0..spatial {
                out[dst + s] = out2[[img * spatial + s, oc]] + b;
            }
        }
    }
    output
}

pub struct ConvGrads {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub input: Tensor,
}

pub fn conv_backward(
    input: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    geo: &ConvGeometry,
    grad_output: &Tensor,
) -> ConvGrads {
    let (n, _c, h, w) = activation_dims(input);
    let (oh, ow) = geo.out_hw(h, w);
    let f = geo.out_channels;
    let d = geo.patch_len();
    let spatial = oh * ow;

    // Gather grad_output into the (N*Ho*Wo) x F layout of the forward GEMM.
    let mut g2 = Array2::<f64>::zeros((n * spatial, f));
    let gdata = grad_output.data();
    for img in 0..n {
        for oc in 0..f {
            let src = img * f * spatial + oc * spatial;
            for s in 0..spatial {
                g2[[img * spatial + s, oc]] = gdata[src + s];
            }
        }
    }

    let cols = im2col(input, geo);
    let grad_w2 = g2.t().dot(&cols); // F x D
    let grad_weight = Tensor::from_vec(
        weight.shape(),
        grad_w2.iter().copied().collect(),
    )
    .expect("conv weight grad shape");

    let grad_bias = if has_bias {
        let mut gb = vec![0.0; f];
        for (oc, slot) in gb.iter_mut().enumerate() {
            *slot = g2.column(oc).iter().sum();
        }
        Some(Tensor::from_vec(&[f], gb).unwrap())
    } else {
        None
    };

    let wmat = weight.as_mat(f, d);
    let grad_cols = g2.dot(&wmat); // (N*Ho*Wo) x D
    let mut grad_input = Tensor::zeros(input.shape());
    col2im_add(&grad_cols.view(), geo, &mut grad_input);

    ConvGrads {
        weight: grad_weight,
        bias: grad_bias,
        input: grad_input,
    }
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Tensor {
    let mut grad = grad_output.clone();
    for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    grad
}

/// Batch-norm statistics saved by the training forward pass.
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Training-mode batch norm: normalizes with batch statistics and returns the
/// new running stats (biased mean, unbiased variance blended by `momentum`).
pub fn batchnorm_train_forward(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
    momentum: f64,
) -> (Tensor, BnCache, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = activation_dims(input);
    let m = (n * h * w) as f64;
    let data = input.data();
    let spatial = h * w;

    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for img in 0..n {
            let base = img * c * spatial + ch * spatial;
            for s in 0..spatial {
                acc += data[base + s];
            }
        }
        mean[ch] = acc / m;
        let mut vacc = 0.0;
        for img in 0..n {
            let base = img * c * spatial + ch * spatial;
            for s in 0..spatial {
                let d = data[base + s] - mean[ch];
                vacc += d * d;
            }
        }
        var[ch] = vacc / m;
    }

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    {
        let xh = xhat.data_mut();
        let o = out.data_mut();
        for img in 0..n {
            for ch in 0..c {
                let base = img * c * spatial + ch * spatial;
                for s in 0..spatial {
                    let v = (data[base + s] - mean[ch]) * inv_std[ch];
                    xh[base + s] = v;
                    o[base + s] = gamma[ch] * v + beta[ch];
                }
            }
        }
    }

    // Unbiased variance feeds the running estimate.
    let bessel = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
    let new_mean: Vec<f64> = running_mean
        .iter()
        .zip(&mean)
        .map(|(r, b)| (1.0 - momentum) * r + momentum * b)
        .collect();
    let new_var: Vec<f64> = running_var
        .iter()
        .zip(&var)
        .map(|(r, b)| (1.0 - momentum) * r + momentum * b * bessel)
        .collect();

    (out, BnCache { xhat, inv_std }, new_mean, new_var)
}

/// Inference-mode batch norm using running statistics.
pub fn batchnorm_infer_forward(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Tensor {
    let (n, c, h, w) = activation_dims(input);
    let spatial = h * w;
    let data = input.data();
    let mut out = Tensor::zeros(input.shape());
    let o = out.data_mut();
    for ch in 0..c {
        let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
        let shift = beta[ch] - scale * running_mean[ch];
        for img in 0..n {
            let base = img * c * spatial + ch * spatial;
            for s in 0..spatial {
                o[base + s] = scale * data[base + s] + shift;
            }
        }
    }
    out
}

pub struct BnGrads {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub input: Tensor,
}

pub fn batchnorm_backward(cache: &BnCache, gamma: &[f64], grad_output: &Tensor) -> BnGrads {
    let (n, c, h, w) = activation_dims(&cache.xhat);
    let m = (n * h * w) as f64;
    let spatial = h * w;
    let xh = cache.xhat.data();
    let go = grad_output.data();

    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let mut dg = 0.0;
        let mut db = 0.0;
        for img in 0..n {
            let base = img * c * spatial + ch * spatial;
            for s in 0..spatial {
                dg += go[base + s] * xh[base + s];
                db += go[base + s];
            }
        }
        dgamma[ch] = dg;
        dbeta[ch] = db;
    }

    let mut grad_input = Tensor::zeros(cache.xhat.shape());
    let gi = grad_input.data_mut();
    for ch in 0..c {
        let k = gamma[ch] * cache.inv_std[ch] / m;
        for img in 0..n {
            let base = img * c * spatial + ch * spatial;
            for s in 0..spatial {
                let dxhat_scaled = m * go[base + s] - dbeta[ch] - xh[base + s] * dgamma[ch];
                gi[base + s] = k * dxhat_scaled;
            }
        }
    }

    BnGrads {
        gamma: Tensor::from_vec(&[c], dgamma).unwrap(),
        beta: Tensor::from_vec(&[c], dbeta).unwrap(),
        input: grad_input,
    }
}

/// Max pooling; returns the output and per-output argmax (flat input offset
/// within the image) for gradient routing.
pub fn maxpool_forward(input: &Tensor, kernel: usize, stride: usize) -> (Tensor, Vec<u32>) {
    let (n, c, h, w) = activation_dims(input);
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let data = input.data();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let o = out.data_mut();

    let mut oi = 0;
    for img in 0..n {
        for ch in 0..c {
            let base = img * c * h * w + ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let at = (oy * stride + ky) * w + (ox * stride + kx);
                            let v = data[base + at];
                            if v > best {
                                best = v;
                                best_at = at;
                            }
                        }
                    }
                    o[oi] = best;
                    argmax[oi] = best_at as u32;
                    oi += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward(
    input_shape: &[usize],
    kernel: usize,
    stride: usize,
    argmax: &[u32],
    grad_output: &Tensor,
) -> Tensor {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut grad_input = Tensor::zeros(input_shape);
    let gi = grad_input.data_mut();
    let go = grad_output.data();

    let mut oi = 0;
    for img in 0..n {
        for ch in 0..c {
            let base = img * c * h * w + ch * h * w;
            for _ in 0..oh * ow {
                gi[base + argmax[oi] as usize] += go[oi];
                oi += 1;
            }
        }
    }
    grad_input
}

pub fn avgpool_forward(input: &Tensor, kernel: usize, stride: usize) -> Tensor {
    let (n, c, h, w) = activation_dims(input);
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let data = input.data();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let o = out.data_mut();
    let norm = 1.0 / (kernel * kernel) as f64;

    let mut oi = 0;
    for img in 0..n {
        for ch in 0..c {
            let base = img * c * h * w + ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            acc += data[base + (oy * stride + ky) * w + (ox * stride + kx)];
                        }
                    }
                    o[oi] = acc * norm;
                    oi += 1;
                }
            }
        }
    }
    out
}

pub fn avgpool_backward(
    input_shape: &[usize],
    kernel: usize,
    stride: usize,
    grad_output: &Tensor,
) -> Tensor {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut grad_input = Tensor::zeros(input_shape);
    let gi = grad_input.data_mut();
    let go = grad_output.data();
    let norm = 1.0 / (kernel * kernel) as f64;

    let mut oi = 0;
    for img in 0..n {
        for ch in 0..c {
            let base = img * c * h * w + ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = go[oi] * norm;
                    oi += 1;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            gi[base + (oy * stride + ky) * w + (ox * stride + kx)] += g;
                        }
                    }
                }
            }
        }
    }
    grad_input
}

pub fn global_avgpool_forward(input: &Tensor) -> Tensor {
    let (n, c, h, w) = activation_dims(input);
    let spatial = h * w;
    let norm = 1.0 / spatial as f64;
    let data = input.data();
    let mut out = Tensor::zeros(&[n, c, 1, 1]);
    let o = out.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let base = img * c * spatial + ch * spatial;
            o[img * c + ch] = data[base..base + spatial].iter().sum::<f64>() * norm;
        }
    }
    out
}

pub fn global_avgpool_backward(input_shape: &[usize], grad_output: &Tensor) -> Tensor {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let spatial = h * w;
    let norm = 1.0 / spatial as f64;
    let mut grad_input = Tensor::zeros(input_shape);
    let gi = grad_input.data_mut();
    let go = grad_output.data();
    for img in 0..n {
        for ch in 0..c {
            let g = go[img * c + ch] * norm;
            let base = img * c * spatial + ch * spatial;
            for s in 0..spatial {
                gi[base + s] = g;
            }
        }
    }
    grad_input
}

/// Linear forward over flattened `N x (F,1,1)` activations.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let n = input.batch();
    let in_f = input.len() / n;
    let out_f = weight.shape()[0];
    let x = input.as_mat(n, in_f);
    let w = weight.as_mat(out_f, in_f);
    let mut y = x.dot(&w.t());
    if let Some(b) = bias {
        for mut row in y.rows_mut() {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Tensor::from_vec(&[n, out_f, 1, 1], y.into_raw_vec_and_offset().0).unwrap()
}

pub struct LinearGrads {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub input: Tensor,
}

pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    grad_output: &Tensor,
) -> LinearGrads {
    let n = input.batch();
    let in_f = input.len() / n;
    let out_f = weight.shape()[0];
    let x = input.as_mat(n, in_f);
    let w = weight.as_mat(out_f, in_f);
    let gy = grad_output.as_mat(n, out_f);

    let gw = gy.t().dot(&x);
    let grad_weight = Tensor::from_vec(weight.shape(), gw.into_raw_vec_and_offset().0).unwrap();
    let grad_bias = if has_bias {
        let mut gb = vec![0.0; out_f];
        for (oc, slot) in gb.iter_mut().enumerate() {
            *slot = gy.column(oc).iter().sum();
        }
        Some(Tensor::from_vec(&[out_f], gb).unwrap())
    } else {
        None
    };
    let gx = gy.dot(&w);
    let grad_input = Tensor::from_vec(input.shape(), gx.into_raw_vec_and_offset().0).unwrap();

    LinearGrads {
        weight: grad_weight,
        bias: grad_bias,
        input: grad_input,
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = a.clone();
    for (v, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *v += bv;
    }
    out
}

fn activation_dims(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    debug_assert_eq!(s.len(), 4, "activations are N x C x H x W");
    (s[0], s[1], s[2], s[3])
}
