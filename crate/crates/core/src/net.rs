//! Network description and construction.
//!
//! Architectures are data, not code: a straight-line network is described by a
//! small line-oriented text format (see [`parse_network_spec`]) listing an
//! input shape, a stack of conv / max-pool layers, then global average
//! pooling and softmax. [`Network`] binds a parsed [`NetworkSpec`] to one
//! [`KernelBank`] per conv layer, and [`Network::forward`] records the full
//! [`ForwardTrace`] (activations, pooling switches, logits, probabilities)
//! that back-projection later consumes.
//!
//! Conv layers use stride 1 and "same" zero padding of `k / 2`, so spatial
//! extent only changes at pooling layers. Every conv except the last is
//! followed by ReLU; the last is linear, has one kernel per class, and feeds
//! global average pooling directly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use thiserror::Error;

use crate::tensor::{
    conv2d_forward, conv2d_output_shape, global_avg_pool, maxpool_forward, relu, softmax,
    KernelBank, SwitchMap, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no layers")]
    NoLayers,
    #[error("network invalid: {0}")]
    Invalid(String),
    #[error("input shape mismatch: network expects {expected:?}, image is {got:?}")]
    InputShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One layer of a straight-line network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        kh: usize,
        kw: usize,
        out_channels: usize,
        relu: bool,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Softmax,
}

/// Validated architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    input_shape: (usize, usize, usize),
    layers: Vec<LayerSpec>,
    num_classes: usize,
}

fn parse_count(line: usize, token: &str, what: &str) -> Result<usize, NetError> {
    let value: usize = token.parse().map_err(|_| NetError::Parse {
        line,
        message: format!("{what} must be a positive integer, got `{token}`"),
    })?;
    if value == 0 {
        return Err(NetError::Parse {
            line,
            message: format!("{what} must be positive"),
        });
    }
    Ok(value)
}

/// Parse and validate a network description.
///
/// Format, one directive per line (`#` starts a comment, blank lines are
/// ignored):
///
/// ```text
/// input <channels> <height> <width>
/// conv <kH> <kW> <out_channels> [relu|linear]    # relu if omitted
/// maxpool <window> <stride>
/// gap [classes]
/// softmax [classes]
/// ```
///
/// `input` must come first; `gap` then `softmax` must terminate the network.
/// The optional class count on `gap`/`softmax` is checked against the final
/// conv layer's `out_channels`, which otherwise defines the class count.
/// Kernels must be square (padding is the scalar `k / 2`).
pub fn parse_network_spec(text: &str) -> Result<NetworkSpec, NetError> {
    let mut input_shape: Option<(usize, usize, usize)> = None;
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut layer_lines: Vec<usize> = Vec::new();
    let mut declared_classes: Option<(usize, usize)> = None; // (count, line)
    let mut saw_gap = false;
    let mut saw_softmax = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let arity = |n: usize| -> Result<(), NetError> {
            if tokens.len() - 1 == n {
                Ok(())
            } else {
                Err(NetError::Parse {
                    line,
                    message: format!(
                        "`{}` takes {} argument(s), got {}",
                        tokens[0],
                        n,
                        tokens.len() - 1
                    ),
                })
            }
        };
        if saw_softmax {
            return Err(NetError::Parse {
                line,
                message: "no layers may follow softmax".into(),
            });
        }
        if input_shape.is_none() && tokens[0] != "input" {
            return Err(NetError::Parse {
                line,
                message: format!("first directive must be `input`, got `{}`", tokens[0]),
            });
        }
        match tokens[0] {
            "input" => {
                if input_shape.is_some() {
                    return Err(NetError::Parse {
                        line,
                        message: "duplicate `input` directive".into(),
                    });
                }
                arity(3)?;
                input_shape = Some((
                    parse_count(line, tokens[1], "input channels")?,
                    parse_count(line, tokens[2], "input height")?,
                    parse_count(line, tokens[3], "input width")?,
                ));
            }
            "conv" => {
                if saw_gap {
                    return Err(NetError::Parse {
                        line,
                        message: "conv layer after gap".into(),
                    });
                }
                if tokens.len() - 1 != 3 && tokens.len() - 1 != 4 {
                    return Err(NetError::Parse {
                        line,
                        message: format!(
                            "`conv` takes 3 or 4 arguments, got {}",
                            tokens.len() - 1
                        ),
                    });
                }
                let kh = parse_count(line, tokens[1], "kernel height")?;
                let kw = parse_count(line, tokens[2], "kernel width")?;
                if kh != kw {
                    return Err(NetError::Parse {
                        line,
                        message: format!("non-square {kh}x{kw} kernels are not supported"),
                    });
                }
                let out_channels = parse_count(line, tokens[3], "output channels")?;
                let relu = match tokens.get(4) {
                    None | Some(&"relu") => true,
                    Some(&"linear") => false,
                    Some(other) => {
                        return Err(NetError::Parse {
                            line,
                            message: format!(
                                "conv activation must be `relu` or `linear`, got `{other}`"
                            ),
                        })
                    }
                };
                layers.push(LayerSpec::Conv {
                    kh,
                    kw,
                    out_channels,
                    relu,
                });
                layer_lines.push(line);
            }
            "maxpool" => {
                if saw_gap {
                    return Err(NetError::Parse {
                        line,
                        message: "maxpool layer after gap".into(),
                    });
                }
                arity(2)?;
                layers.push(LayerSpec::MaxPool {
                    window: parse_count(line, tokens[1], "pool window")?,
                    stride: parse_count(line, tokens[2], "pool stride")?,
                });
                layer_lines.push(line);
            }
            "gap" | "softmax" => {
                let kind = tokens[0];
                if tokens.len() > 2 {
                    return Err(NetError::Parse {
                        line,
                        message: format!("`{kind}` takes at most 1 argument"),
                    });
                }
                if kind == "gap" {
                    if saw_gap {
                        return Err(NetError::Parse {
                            line,
                            message: "duplicate `gap` directive".into(),
                        });
                    }
                    saw_gap = true;
                    layers.push(LayerSpec::GlobalAvgPool);
                } else {
                    if !saw_gap {
                        return Err(NetError::Parse {
                            line,
                            message: "`softmax` must follow `gap`".into(),
                        });
                    }
                    saw_softmax = true;
                    layers.push(LayerSpec::Softmax);
                }
                layer_lines.push(line);
                if let Some(token) = tokens.get(1) {
                    let n = parse_count(line, token, "class count")?;
                    if let Some((prev, _)) = declared_classes {
                        if prev != n {
                            return Err(NetError::Parse {
                                line,
                                message: format!(
                                    "class count {n} contradicts earlier declaration {prev}"
                                ),
                            });
                        }
                    }
                    declared_classes = Some((n, line));
                }
            }
            other => {
                return Err(NetError::Parse {
                    line,
                    message: format!("unknown layer kind `{other}`"),
                });
            }
        }
    }

    let input_shape = input_shape.ok_or(NetError::NoLayers)?;
    if !layers.iter().any(|l| matches!(l, LayerSpec::Conv { .. })) {
        return Err(NetError::Invalid("network has no conv layers".into()));
    }
    if !saw_softmax {
        return Err(NetError::Invalid(
            "network must end with `gap` then `softmax`".into(),
        ));
    }
    let last_conv_idx = layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Conv { .. }))
        .expect("conv presence checked above");
    let (last_out, last_relu) = match layers[last_conv_idx] {
        LayerSpec::Conv {
            out_channels, relu, ..
        } => (out_channels, relu),
        _ => unreachable!(),
    };
    if last_conv_idx + 2 != layers.len() - 1 {
        return Err(NetError::Parse {
            line: layer_lines[last_conv_idx + 1],
            message: "only `gap` then `softmax` may follow the last conv layer".into(),
        });
    }
    if last_relu {
        return Err(NetError::Invalid(
            "last conv layer must be `linear` (feeds global average pooling directly)".into(),
        ));
    }
    if let Some((declared, line)) = declared_classes {
        if declared != last_out {
            return Err(NetError::Parse {
                line,
                message: format!(
                    "declared class count {declared} does not match last conv layer's {last_out} output channels"
                ),
            });
        }
    }

    let spec = NetworkSpec {
        input_shape,
        layers,
        num_classes: last_out,
    };
    // Walk the shape chain once so pooling on too-small inputs fails here,
    // with a line number, instead of at forward time.
    let mut shape = spec.input_shape;
    for (i, layer) in spec.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Conv { kh, out_channels, .. } => {
                let bank = KernelBank::zeros(out_channels, shape.0, kh, kh);
                shape = conv2d_output_shape(shape, &bank, 1, kh / 2).map_err(|e| {
                    NetError::Parse {
                        line: layer_lines[i],
                        message: e.to_string(),
                    }
                })?;
            }
            LayerSpec::MaxPool { window, .. } => {
                if window > shape.1 || window > shape.2 {
                    return Err(NetError::Parse {
                        line: layer_lines[i],
                        message: format!(
                            "pool window {window} exceeds {}x{} feature map",
                            shape.1, shape.2
                        ),
                    });
                }
            }
            LayerSpec::GlobalAvgPool | LayerSpec::Softmax => {}
        }
        if let LayerSpec::MaxPool { window, stride } = *layer {
            shape = (
                shape.0,
                (shape.1 - window) / stride + 1,
                (shape.2 - window) / stride + 1,
            );
        }
    }
    Ok(spec)
}

impl NetworkSpec {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Conv and max-pool layers only, in order (the part of the network that
    /// transforms tensors; excludes gap/softmax).
    pub fn tensor_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::MaxPool { .. }))
    }

    pub fn conv_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count()
    }

    /// Shape entering each tensor layer, followed by the final feature-map
    /// shape; length = tensor layer count + 1.
    pub fn shape_chain(&self) -> Vec<(usize, usize, usize)> {
        let mut chain = vec![self.input_shape];
        let mut shape = self.input_shape;
        for layer in self.tensor_layers() {
            shape = match *layer {
                LayerSpec::Conv { kh, out_channels, .. } => {
                    let (h, w) = (shape.1 + 2 * (kh / 2) - kh + 1, shape.2 + 2 * (kh / 2) - kh + 1);
                    (out_channels, h, w)
                }
                LayerSpec::MaxPool { window, stride } => (
                    shape.0,
                    (shape.1 - window) / stride + 1,
                    (shape.2 - window) / stride + 1,
                ),
                _ => unreachable!(),
            };
            chain.push(shape);
        }
        chain
    }

    /// Canonical re-serialization: one directive per line, activation and
    /// class count explicit. Parsing the result reproduces `self` exactly;
    /// the weight-file hash is taken over this text.
    pub fn canonical_text(&self) -> String {
        let (c, h, w) = self.input_shape;
        let mut out = format!("input {c} {h} {w}\n");
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv {
                    kh,
                    kw,
                    out_channels,
                    relu,
                } => {
                    let act = if relu { "relu" } else { "linear" };
                    writeln!(out, "conv {kh} {kw} {out_channels} {act}").unwrap();
                }
                LayerSpec::MaxPool { window, stride } => {
                    writeln!(out, "maxpool {window} {stride}").unwrap();
                }
                LayerSpec::GlobalAvgPool => writeln!(out, "gap {}", self.num_classes).unwrap(),
                LayerSpec::Softmax => writeln!(out, "softmax {}", self.num_classes).unwrap(),
            }
        }
        out
    }

    /// SHA-256 of `canonical_text`, identifying the architecture in weight
    /// files.
    pub fn sha256(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.into()
    }
}

/// A spec bound to parameters: one kernel bank per conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<KernelBank>,
}

/// Everything recorded during one forward pass: the input, each tensor
/// layer's post-activation output, each pool's switches, and the head's
/// logits and probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    input: Tensor,
    activations: Vec<Tensor>,
    switches: Vec<SwitchMap>,
    logits: Vec<f64>,
    probabilities: Vec<f64>,
}

impl ForwardTrace {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    /// Post-activation output of tensor layer `i` (conv output after ReLU
    /// where applicable, or pooled map).
    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    pub fn switches(&self) -> &[SwitchMap] {
        &self.switches
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Output of the last conv layer (the per-class response maps feeding
    /// global average pooling).
    pub fn final_feature_map(&self) -> &Tensor {
        self.activations.last().expect("trace has at least one layer")
    }
}

impl Network {
    /// He-normal initialization (std `sqrt(2 / fan_in)`), zero biases,
    /// reproducible from the seed.
    pub fn he_init(spec: NetworkSpec, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.conv_count());
        let mut in_channels = spec.input_shape.0;
        for layer in &spec.layers {
            if let LayerSpec::Conv {
                kh, kw, out_channels, ..
            } = *layer
            {
                let fan_in = (in_channels * kh * kw) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                let weights = (0..out_channels * in_channels * kh * kw)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                let bias = vec![0.0; out_channels];
                params.push(
                    KernelBank::from_parts(out_channels, in_channels, kh, kw, weights, bias)
                        .expect("shapes consistent by construction"),
                );
                in_channels = out_channels;
            }
        }
        Network { spec, params }
    }

    /// All weights and biases zero.
    pub fn zeroed(spec: NetworkSpec) -> Network {
        let mut params = Vec::with_capacity(spec.conv_count());
        let mut in_channels = spec.input_shape.0;
        for layer in &spec.layers {
            if let LayerSpec::Conv {
                kh, kw, out_channels, ..
            } = *layer
            {
                params.push(KernelBank::zeros(out_channels, in_channels, kh, kw));
                in_channels = out_channels;
            }
        }
        Network { spec, params }
    }

    /// Bind existing parameters, validating every bank's shape against the
    /// spec chain.
    pub fn from_params(spec: NetworkSpec, params: Vec<KernelBank>) -> Result<Network, NetError> {
        if params.len() != spec.conv_count() {
            return Err(NetError::Invalid(format!(
                "expected {} kernel banks, got {}",
                spec.conv_count(),
                params.len()
            )));
        }
        let mut in_channels = spec.input_shape.0;
        let mut bank_idx = 0;
        for layer in &spec.layers {
            if let LayerSpec::Conv {
                kh, kw, out_channels, ..
            } = *layer
            {
                let bank = &params[bank_idx];
                let expected = (out_channels, in_channels, kh, kw);
                let got = (
                    bank.out_channels(),
                    bank.in_channels(),
                    bank.kernel_size().0,
                    bank.kernel_size().1,
                );
                if expected != got {
                    return Err(NetError::Invalid(format!(
                        "conv layer {bank_idx}: expected bank shape {expected:?}, got {got:?}"
                    )));
                }
                in_channels = out_channels;
                bank_idx += 1;
            }
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[KernelBank] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [KernelBank] {
        &mut self.params
    }

    /// Run the network on one image, recording the complete trace.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardTrace, NetError> {
        if image.shape() != self.spec.input_shape {
            return Err(NetError::InputShape {
                expected: self.spec.input_shape,
                got: image.shape(),
            });
        }
        let mut activations = Vec::new();
        let mut switches = Vec::new();
        let mut bank_idx = 0;
        {
            let mut current = image;
            for layer in &self.spec.layers {
                match *layer {
                    LayerSpec::Conv { kh, relu: gated, .. } => {
                        let bank = &self.params[bank_idx];
                        bank_idx += 1;
                        let mut out = conv2d_forward(current, bank, 1, kh / 2)?;
                        if gated {
                            out = relu(&out);
                        }
                        activations.push(out);
                    }
                    LayerSpec::MaxPool { window, stride } => {
                        let (out, switch) = maxpool_forward(current, window, stride)?;
                        activations.push(out);
                        switches.push(switch);
                    }
                    LayerSpec::GlobalAvgPool | LayerSpec::Softmax => break,
                }
                current = activations.last().expect("just pushed");
            }
        }
        let logits = global_avg_pool(activations.last().expect("at least one conv layer"));
        let probabilities = softmax(&logits);
        Ok(ForwardTrace {
            input: image.clone(),
            activations,
            switches,
            logits,
            probabilities,
        })
    }

    /// Predicted class and its probability; ties break to the lowest index.
    pub fn predict(&self, image: &Tensor) -> Result<(usize, f64), NetError> {
        let trace = self.forward(image)?;
        Ok(argmax_prediction(trace.probabilities()))
    }
}

/// Index and value of the maximum probability, ties to the lowest index.
pub fn argmax_prediction(probabilities: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > probabilities[best] {
            best = i;
        }
    }
    (best, probabilities[best])
}
