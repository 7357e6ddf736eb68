//! Independent oracles shared by the integration tests.
//!
//! Everything here recomputes results from first principles — straight loops
//! and explicit matrices — deliberately sharing no code path with the crate's
//! GEMM-backed kernels.
#![allow(dead_code)]

use clearmap_core::{KernelBank, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(c, h, w, data).unwrap()
}

pub fn random_bank(
    rng: &mut ChaCha8Rng,
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
) -> KernelBank {
    let weights = (0..out_channels * in_channels * kh * kw)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let bias = (0..out_channels).map(|_| rng.random_range(-0.5..0.5)).collect();
    KernelBank::from_parts(out_channels, in_channels, kh, kw, weights, bias).unwrap()
}

/// Naive quadruple-loop cross-correlation with zero padding.
pub fn naive_conv2d(input: &Tensor, bank: &KernelBank, stride: usize, padding: usize) -> Tensor {
    let (channels, height, width) = input.shape();
    let (kh, kw) = bank.kernel_size();
    assert_eq!(channels, bank.in_channels());
    let oh = (height + 2 * padding - kh) / stride + 1;
    let ow = (width + 2 * padding - kw) / stride + 1;
    let mut out = Tensor::zeros(bank.out_channels(), oh, ow);
    for k in 0..bank.out_channels() {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bank.bias()[k];
                for c in 0..channels {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= height as isize || ix >= width as isize {
                                continue;
                            }
                            acc += input.get(c, iy as usize, ix as usize)
                                * bank.weight(k, c, ky, kx);
                        }
                    }
                }
                out.set(k, oy, ox, acc);
            }
        }
    }
    out
}

/// The convolution's linear part as an explicit dense matrix of shape
/// `(K*OH*OW) x (C*H*W)`, row-major.
pub fn conv_as_dense_matrix(
    bank: &KernelBank,
    in_shape: (usize, usize, usize),
    stride: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let (channels, height, width) = in_shape;
    let (kh, kw) = bank.kernel_size();
    let oh = (height + 2 * padding - kh) / stride + 1;
    let ow = (width + 2 * padding - kw) / stride + 1;
    let rows = bank.out_channels() * oh * ow;
    let cols = channels * height * width;
    let mut matrix = vec![0.0; rows * cols];
    for k in 0..bank.out_channels() {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (k * oh + oy) * ow + ox;
                for c in 0..channels {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= height as isize || ix >= width as isize {
                                continue;
                            }
                            let col = (c * height + iy as usize) * width + ix as usize;
                            matrix[row * cols + col] += bank.weight(k, c, ky, kx);
                        }
                    }
                }
            }
        }
    }
    (matrix, rows, cols)
}

/// `M^T y` for a row-major `rows x cols` matrix.
pub fn matrix_transpose_apply(matrix: &[f64], rows: usize, cols: usize, y: &[f64]) -> Vec<f64> {
    assert_eq!(y.len(), rows);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += matrix[r * cols + c] * y[r];
        }
    }
    out
}

/// `M x` for a row-major `rows x cols` matrix.
pub fn matrix_apply(matrix: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), cols);
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        for c in 0..cols {
            out[r] += matrix[r * cols + c] * x[c];
        }
    }
    out
}

/// Exhaustive window-scan max pooling; returns values and argmax flat
/// indices (first occurrence in row-major order).
pub fn brute_force_maxpool(
    input: &Tensor,
    window: usize,
    stride: usize,
) -> (Tensor, Vec<usize>) {
    let (channels, height, width) = input.shape();
    let oh = (height - window) / stride + 1;
    let ow = (width - window) / stride + 1;
    let mut out = Tensor::zeros(channels, oh, ow);
    let mut switches = Vec::new();
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for y in oy * stride..oy * stride + window {
                    for x in ox * stride..ox * stride + window {
                        if input.get(c, y, x) > best {
                            best = input.get(c, y, x);
                            best_idx = y * width + x;
                        }
                    }
                }
                out.set(c, oy, ox, best);
                switches.push(best_idx);
            }
        }
    }
    (out, switches)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
}

/// Largest elementwise difference between two equally shaped tensors.
pub fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0_f64, |m, (&x, &y)| m.max((x - y).abs()))
}
