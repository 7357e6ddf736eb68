//! Dense tensors and the numerical kernels everything else composes:
//! convolution, its transpose, max pooling with recorded switches, unpooling,
//! ReLU, global average pooling and softmax.
//!
//! Conventions, fixed across the crate:
//! - tensors are (channels, height, width), row-major within a channel,
//!   channels outermost, `f64` throughout;
//! - `conv2d_forward` computes cross-correlation (no kernel flip) with zero
//!   padding;
//! - `conv2d_transpose` is the exact linear adjoint of `conv2d_forward`, bias
//!   excluded.
//!
//! All operations are pure; none of them spawn threads.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor dimensions must be positive, got {channels}x{height}x{width}")]
    EmptyShape {
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("data length {got} does not match shape {channels}x{height}x{width} = {expected}")]
    DataLength {
        channels: usize,
        height: usize,
        width: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("input has {input} channels but the kernel bank expects {expected}")]
    ChannelMismatch { input: usize, expected: usize },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("{kh}x{kw} kernel does not fit {height}x{width} input with padding {padding}")]
    KernelTooLarge {
        kh: usize,
        kw: usize,
        height: usize,
        width: usize,
        padding: usize,
    },
    #[error("response shape {got:?} does not match the forward output {expected:?} implied by the requested output shape")]
    ResponseShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("pooling window {window} exceeds spatial extent {height}x{width}")]
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },
    #[error("switch index {index} outside target plane of {len} cells (corrupt trace)")]
    SwitchOutOfRange { index: usize, len: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
}

/// Dense (channels, height, width) array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// All-zero tensor. Dimensions must be positive.
    pub fn zeros(channels: usize, height: usize, width: usize) -> Tensor {
        assert!(channels > 0 && height > 0 && width > 0, "zero tensor dimension");
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Build from raw row-major data, validating length and finiteness.
    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Tensor, TensorError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(TensorError::EmptyShape {
                channels,
                height,
                width,
            });
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(TensorError::DataLength {
                channels,
                height,
                width,
                expected,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of cells in one channel plane.
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.plane_len();
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Elementwise scaling, returning a new tensor.
    pub fn scaled(&self, alpha: f64) -> Tensor {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= alpha;
        }
        out
    }
}

/// A full bank of convolution kernels plus one bias per output channel.
///
/// Weights are laid out `[out_channel][in_channel][ky][kx]`, row-major, which
/// doubles as the `K x (C*kh*kw)` matrix used by the GEMM-backed kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl KernelBank {
    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> KernelBank {
        assert!(
            out_channels > 0 && in_channels > 0 && kh > 0 && kw > 0,
            "zero kernel dimension"
        );
        KernelBank {
            out_channels,
            in_channels,
            kh,
            kw,
            weights: vec![0.0; out_channels * in_channels * kh * kw],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn from_parts(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<KernelBank, TensorError> {
        let expected = out_channels * in_channels * kh * kw;
        if out_channels == 0 || in_channels == 0 || kh == 0 || kw == 0 {
            return Err(TensorError::EmptyShape {
                channels: out_channels,
                height: kh,
                width: kw,
            });
        }
        if weights.len() != expected || bias.len() != out_channels {
            return Err(TensorError::DataLength {
                channels: out_channels,
                height: kh,
                width: kw,
                expected,
                got: weights.len(),
            });
        }
        if let Some(index) = weights
            .iter()
            .chain(bias.iter())
            .position(|v| !v.is_finite())
        {
            return Err(TensorError::NonFinite { index });
        }
        Ok(KernelBank {
            out_channels,
            in_channels,
            kh,
            kw,
            weights,
            bias,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    #[inline]
    pub fn weight(&self, k: usize, c: usize, i: usize, j: usize) -> f64 {
        self.weights[((k * self.in_channels + c) * self.kh + i) * self.kw + j]
    }

    /// Kernel slice for one output channel, `in_channels*kh*kw` long.
    pub fn kernel(&self, k: usize) -> &[f64] {
        let len = self.in_channels * self.kh * self.kw;
        &self.weights[k * len..(k + 1) * len]
    }
}

/// Recorded argmax locations of one max-pooling layer.
///
/// Shape matches the pooled output; each entry is the flat `y * in_w + x`
/// index into the corresponding pre-pool channel plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchMap {
    channels: usize,
    height: usize,
    width: usize,
    indices: Vec<usize>,
}

impl SwitchMap {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        self.indices[(c * self.height + y) * self.width + x]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Output shape of `conv2d_forward` for the given input shape and parameters.
pub fn conv2d_output_shape(
    input_shape: (usize, usize, usize),
    kernels: &KernelBank,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize), TensorError> {
    let (channels, height, width) = input_shape;
    if channels != kernels.in_channels {
        return Err(TensorError::ChannelMismatch {
            input: channels,
            expected: kernels.in_channels,
        });
    }
    if stride == 0 {
        return Err(TensorError::ZeroStride);
    }
    let (kh, kw) = (kernels.kh, kernels.kw);
    if height + 2 * padding < kh || width + 2 * padding < kw {
        return Err(TensorError::KernelTooLarge {
            kh,
            kw,
            height,
            width,
            padding,
        });
    }
    let oh = (height + 2 * padding - kh) / stride + 1;
    let ow = (width + 2 * padding - kw) / stride + 1;
    Ok((kernels.out_channels, oh, ow))
}

/// `C = A * B + beta * C` with row-major contiguous `a: m x k`, `b: k x n`,
/// `c: m x n`.
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C = A^T * B + beta * C` where `a` is stored row-major as `k x m`.
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C = A * B^T + beta * C` where `b` is stored row-major as `n x k`.
pub(crate) fn gemm_nt(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unrolled patch matrix: rows indexed by `(c, ky, kx)`, columns by output
/// position, zero-filled where the padded window leaves the input.
pub(crate) fn im2col(
    input: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (channels, height, width) = input.shape();
    let cols_n = oh * ow;
    let mut cols = vec![0.0; channels * kh * kw * cols_n];
    for c in 0..channels {
        let plane = input.channel(c);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * cols_n;
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    if iy < padding || iy >= height + padding {
                        continue;
                    }
                    let iy = iy - padding;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = ox * stride + kx;
                        if ix < padding || ix >= width + padding {
                            continue;
                        }
                        cols[dst + ox] = plane[iy * width + (ix - padding)];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-add patch rows back into an image.
pub(crate) fn col2im(
    cols: &[f64],
    shape: (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Tensor {
    let (channels, height, width) = shape;
    let mut out = Tensor::zeros(channels, height, width);
    let cols_n = oh * ow;
    let plane = height * width;
    for c in 0..channels {
        let base = c * plane;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * cols_n;
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    if iy < padding || iy >= height + padding {
                        continue;
                    }
                    let iy = iy - padding;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = ox * stride + kx;
                        if ix < padding || ix >= width + padding {
                            continue;
                        }
                        out.data[base + iy * width + (ix - padding)] += cols[src + ox];
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation of `input` with every kernel in the bank, plus bias.
///
/// `output[k] = bias[k] + sum_c input[c] . weights[k][c]`, zero padding,
/// output spatial dims `(H + 2p - kh)/stride + 1` by `(W + 2p - kw)/stride + 1`.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &KernelBank,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    let (k_out, oh, ow) = conv2d_output_shape(input.shape(), kernels, stride, padding)?;
    let cols = im2col(input, kernels.kh, kernels.kw, stride, padding, oh, ow);
    let reduce = kernels.in_channels * kernels.kh * kernels.kw;
    let mut out = vec![0.0; k_out * oh * ow];
    gemm_nn(k_out, reduce, oh * ow, &kernels.weights, &cols, 0.0, &mut out);
    for k in 0..k_out {
        let b = kernels.bias[k];
        if b != 0.0 {
            for v in &mut out[k * oh * ow..(k + 1) * oh * ow] {
                *v += b;
            }
        }
    }
    Tensor::from_vec(k_out, oh, ow, out)
}

/// Exact adjoint of the linear part of `conv2d_forward`: for all `x`, `y`,
/// `<conv2d_forward(x) - bias, y> == <x, conv2d_transpose(y)>`.
///
/// `out_shape` is the shape of the forward input being reconstructed; the
/// response must have the forward output shape it implies. Biases are ignored.
pub fn conv2d_transpose(
    response: &Tensor,
    kernels: &KernelBank,
    stride: usize,
    padding: usize,
    out_shape: (usize, usize, usize),
) -> Result<Tensor, TensorError> {
    let expected = conv2d_output_shape(out_shape, kernels, stride, padding)?;
    if response.shape() != expected {
        return Err(TensorError::ResponseShapeMismatch {
            expected,
            got: response.shape(),
        });
    }
    let (_, oh, ow) = expected;
    let reduce = kernels.in_channels * kernels.kh * kernels.kw;
    let mut cols = vec![0.0; reduce * oh * ow];
    gemm_tn(
        reduce,
        kernels.out_channels,
        oh * ow,
        &kernels.weights,
        response.data(),
        0.0,
        &mut cols,
    );
    Ok(col2im(
        &cols, out_shape, kernels.kh, kernels.kw, stride, padding, oh, ow,
    ))
}

/// Max pooling, recording the argmax location of every window.
///
/// Ties are broken by the first occurrence in row-major window scan order.
pub fn maxpool_forward(
    input: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, SwitchMap), TensorError> {
    if stride == 0 || window == 0 {
        return Err(TensorError::ZeroStride);
    }
    let (channels, height, width) = input.shape();
    if window > height || window > width {
        return Err(TensorError::WindowTooLarge {
            window,
            height,
            width,
        });
    }
    let oh = (height - window) / stride + 1;
    let ow = (width - window) / stride + 1;
    let mut out = Tensor::zeros(channels, oh, ow);
    let mut indices = vec![0usize; channels * oh * ow];
    for c in 0..channels {
        let plane = input.channel(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = oy * stride;
                let x0 = ox * stride;
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = y0 * width + x0;
                for y in y0..y0 + window {
                    for x in x0..x0 + window {
                        let v = plane[y * width + x];
                        if v > best {
                            best = v;
                            best_idx = y * width + x;
                        }
                    }
                }
                out.set(c, oy, ox, best);
                indices[(c * oh + oy) * ow + ox] = best_idx;
            }
        }
    }
    Ok((
        out,
        SwitchMap {
            channels,
            height: oh,
            width: ow,
            indices,
        },
    ))
}

/// Place each pooled value back at its recorded switch location; every other
/// cell is zero.
pub fn unpool(
    pooled: &Tensor,
    switches: &SwitchMap,
    out_shape: (usize, usize, usize),
) -> Result<Tensor, TensorError> {
    if pooled.shape() != switches.shape() {
        return Err(TensorError::ShapeMismatch {
            expected: switches.shape(),
            got: pooled.shape(),
        });
    }
    let (channels, height, width) = out_shape;
    if channels != pooled.channels() {
        return Err(TensorError::ShapeMismatch {
            expected: out_shape,
            got: pooled.shape(),
        });
    }
    let plane = height * width;
    let mut out = Tensor::zeros(channels, height, width);
    for c in 0..channels {
        for y in 0..pooled.height() {
            for x in 0..pooled.width() {
                let idx = switches.index(c, y, x);
                if idx >= plane {
                    return Err(TensorError::SwitchOutOfRange { index: idx, len: plane });
                }
                out.data[c * plane + idx] = pooled.get(c, y, x);
            }
        }
    }
    Ok(out)
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Per-channel spatial mean.
pub fn global_avg_pool(input: &Tensor) -> Vec<f64> {
    let plane = input.plane_len() as f64;
    (0..input.channels())
        .map(|c| input.channel(c).iter().sum::<f64>() / plane)
        .collect()
}

/// Numerically stable softmax (max subtraction before exponentiation).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
