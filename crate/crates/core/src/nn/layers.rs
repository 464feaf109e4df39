//! Forward and backward kernels for the backbone's building blocks.

use super::tensor::{gemm, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Unfolds `input` into a `(cin·k³) × voxels` matrix for a stride-1,
/// zero-padded ("same") convolution with odd kernel size `k`.
///
/// Each row is the channel shifted by one tap offset. The shift is a single
/// flat copy; voxels whose source lies outside the volume are zeroed after.
fn im2col(input: &Tensor, k: usize) -> Vec<f64> {
    let [nx, ny, nz] = input.dims;
    let n = input.voxels();
    let r = (k / 2) as isize;
    let mut cols: Vec<f64> = Vec::with_capacity(input.channels * k * k * k * n);
    for ci in 0..input.channels {
        let src = input.channel(ci);
        for kz in 0..k as isize {
            for ky in 0..k as isize {
                for kx in 0..k as isize {
                    let (dx, dy, dz) = (kx - r, ky - r, kz - r);
                    let off = dx + nx as isize * (dy + ny as isize * dz);
                    let start = cols.len();
                    let shift = off.unsigned_abs().min(n);
                    if off >= 0 {
                        cols.extend_from_slice(&src[shift..]);
                        cols.resize(start + n, 0.0);
                    } else {
                        cols.resize(start + shift, 0.0);
                        cols.extend_from_slice(&src[..n - shift]);
                    }
                    let plane = &mut cols[start..];
                    let valid = |c: usize, d: isize, len: usize| {
                        let s = c as isize + d;
                        s >= 0 && s < len as isize
                    };
                    for z in 0..nz {
                        let slab = &mut plane[z * nx * ny..(z + 1) * nx * ny];
                        if !valid(z, dz, nz) {
                            slab.fill(0.0);
                            continue;
                        }
                        for y in 0..ny {
                            let row = &mut slab[y * nx..(y + 1) * nx];
                            if !valid(y, dy, ny) {
                                row.fill(0.0);
                                continue;
                            }
                            if dx < 0 {
                                row[..dx.unsigned_abs().min(nx)].fill(0.0);
                            } else {
                                row[nx.saturating_sub(dx as usize)..].fill(0.0);
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// `cin × cout × k³` kernel that convolves output gradients back to input
/// gradients: transposed channels, spatially reversed taps.
fn flipped(weight: &[f64], cout: usize, cin: usize, k: usize) -> Vec<f64> {
    let k3 = k * k * k;
    let mut out = vec![0.0; weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..k3 {
                out[(ci * cout + co) * k3 + (k3 - 1 - t)] = weight[(co * cin + ci) * k3 + t];
            }
        }
    }
    out
}

/// Same-padded stride-1 convolution. `weight` is `cout × cin × k³`.
pub(crate) fn conv_forward(input: &Tensor, weight: &[f64], cout: usize, k: usize) -> Tensor {
    let n = input.voxels();
    let rows = input.channels * k * k * k;
    let mut out = Tensor::zeros(cout, input.dims);
    if k == 1 {
        gemm(cout, rows, n, weight, false, &input.data, false, 0.0, &mut out.data);
    } else {
        let cols = im2col(input, k);
        gemm(cout, rows, n, weight, false, &cols, false, 0.0, &mut out.data);
    }
    out
}

/// Accumulates the weight gradient into `dweight` and returns the input
/// gradient when `need_input` is set.
pub(crate) fn conv_backward(
    input: &Tensor,
    weight: &[f64],
    dout: &Tensor,
    k: usize,
    dweight: &mut [f64],
    need_input: bool,
) -> Option<Tensor> {
    let n = input.voxels();
    let cout = dout.channels;
    let rows = input.channels * k * k * k;
    let owned;
    let cols: &[f64] = if k == 1 {
        &input.data
    } else {
        owned = im2col(input, k);
        &owned
    };
    gemm(cout, n, rows, &dout.data, false, cols, true, 1.0, dweight);
    if !need_input {
        return None;
    }
    if k == 1 {
        let mut din = Tensor::zeros(input.channels, input.dims);
        gemm(rows, cout, n, weight, true, &dout.data, false, 0.0, &mut din.data);
        return Some(din);
    }
    let w = flipped(weight, cout, input.channels, k);
    Some(conv_forward(dout, &w, input.channels, k))
}

fn half(dims: [usize; 3]) -> [usize; 3] {
    [dims[0] / 2, dims[1] / 2, dims[2] / 2]
}

/// Rearranges non-overlapping 2³ blocks: row `c·8 + o`, column = coarse voxel.
fn blocks_gather(input: &Tensor) -> (Vec<f64>, [usize; 3]) {
    let coarse = half(input.dims);
    let [cx, cy, cz] = coarse;
    let [nx, ny, _] = input.dims;
    let m = cx * cy * cz;
    let mut cols = vec![0.0; input.channels * 8 * m];
    for c in 0..input.channels {
        let src = input.channel(c);
        for o in 0..8 {
            let (ox, oy, oz) = (o & 1, (o >> 1) & 1, o >> 2);
            let dst = &mut cols[(c * 8 + o) * m..(c * 8 + o + 1) * m];
            for z in 0..cz {
                for y in 0..cy {
                    let srow = nx * ((2 * y + oy) + ny * (2 * z + oz));
                    let drow = cx * (y + cy * z);
                    for x in 0..cx {
                        dst[drow + x] = src[srow + 2 * x + ox];
                    }
                }
            }
        }
    }
    (cols, coarse)
}

/// Adjoint of [`blocks_gather`].
fn blocks_scatter(cols: &[f64], channels: usize, fine: [usize; 3]) -> Tensor {
    let [cx, cy, cz] = half(fine);
    let [nx, ny, _] = fine;
    let m = cx * cy * cz;
    let mut out = Tensor::zeros(channels, fine);
    for c in 0..channels {
        let dst = out.channel_mut(c);
        for o in 0..8 {
            let (ox, oy, oz) = (o & 1, (o >> 1) & 1, o >> 2);
            let src = &cols[(c * 8 + o) * m..(c * 8 + o + 1) * m];
            for z in 0..cz {
                for y in 0..cy {
                    let drow = nx * ((2 * y + oy) + ny * (2 * z + oz));
                    let srow = cx * (y + cy * z);
                    for x in 0..cx {
                        dst[drow + 2 * x + ox] = src[srow + x];
                    }
                }
            }
        }
    }
    out
}

/// Stride-2 2³ convolution. `weight` is `cout × cin × 8`.
pub(crate) fn down_forward(input: &Tensor, weight: &[f64], cout: usize) -> Tensor {
    let (cols, coarse) = blocks_gather(input);
    let mut out = Tensor::zeros(cout, coarse);
    let m = out.voxels();
    gemm(cout, input.channels * 8, m, weight, false, &cols, false, 0.0, &mut out.data);
    out
}

pub(crate) fn down_backward(
    input: &Tensor,
    weight: &[f64],
    dout: &Tensor,
    dweight: &mut [f64],
) -> Tensor {
    let (cols, _) = blocks_gather(input);
    let m = dout.voxels();
    let rows = input.channels * 8;
    gemm(dout.channels, m, rows, &dout.data, false, &cols, true, 1.0, dweight);
    let mut dcols = vec![0.0; rows * m];
    gemm(rows, dout.channels, m, weight, true, &dout.data, false, 0.0, &mut dcols);
    blocks_scatter(&dcols, input.channels, input.dims)
}

/// Stride-2 2³ transposed convolution. `weight` is `(cout·8) × cin`.
pub(crate) fn up_forward(input: &Tensor, weight: &[f64], cout: usize) -> Tensor {
    let m = input.voxels();
    let mut cols = vec![0.0; cout * 8 * m];
    gemm(cout * 8, input.channels, m, weight, false, &input.data, false, 0.0, &mut cols);
    let fine = [input.dims[0] * 2, input.dims[1] * 2, input.dims[2] * 2];
    blocks_scatter(&cols, cout, fine)
}

pub(crate) fn up_backward(
    input: &Tensor,
    weight: &[f64],
    dout: &Tensor,
    dweight: &mut [f64],
    need_input: bool,
) -> Option<Tensor> {
    let (dcols, _) = blocks_gather(dout);
    let m = input.voxels();
    let rows = dout.channels * 8;
    gemm(rows, m, input.channels, &dcols, false, &input.data, true, 1.0, dweight);
    if !need_input {
        return None;
    }
    let mut din = Tensor::zeros(input.channels, input.dims);
    gemm(input.channels, rows, m, weight, true, &dcols, false, 0.0, &mut din.data);
    Some(din)
}

/// Per-channel normalized activations and inverse standard deviations.
pub(crate) struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Instance normalization with affine scale and shift.
pub(crate) fn norm_forward(input: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, NormCache) {
    let n = input.voxels() as f64;
    let mut xhat = input.clone();
    let mut out = Tensor::zeros(input.channels, input.dims);
    let mut inv_std = Vec::with_capacity(input.channels);
    for c in 0..input.channels {
        let x = xhat.channel_mut(c);
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        x.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv_std.push(is);
        let (g, b) = (gamma[c], beta[c]);
        out.channel_mut(c)
            .iter_mut()
            .zip(xhat.channel(c))
            .for_each(|(o, &h)| *o = g * h + b);
    }
    (out, NormCache { xhat, inv_std })
}

pub(crate) fn norm_backward(
    cache: &NormCache,
    gamma: &[f64],
    dout: &Tensor,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Tensor {
    let n = dout.voxels() as f64;
    let mut din = Tensor::zeros(dout.channels, dout.dims);
    for c in 0..dout.channels {
        let dy = dout.channel(c);
        let xh = cache.xhat.channel(c);
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for (&d, &h) in dy.iter().zip(xh) {
            sum_dy += d;
            sum_dy_xh += d * h;
        }
        dgamma[c] += sum_dy_xh;
        dbeta[c] += sum_dy;
        let g = gamma[c];
        let scale = g * cache.inv_std[c] / n;
        din.channel_mut(c)
            .iter_mut()
            .zip(dy.iter().zip(xh))
            .for_each(|(o, (&d, &h))| *o = scale * (n * d - sum_dy - h * sum_dy_xh));
    }
    din
}

#[inline]
pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Derivative of [`elu`] expressed through its output.
#[inline]
pub(crate) fn elu_grad_from_output(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        y + 1.0
    }
}
