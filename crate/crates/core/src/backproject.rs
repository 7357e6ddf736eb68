//! Back-projection of class-specific responses to input space.
//!
//! The final conv layer of these networks has one kernel per class, so its
//! output channels are per-class response maps. Walking those responses
//! backwards — transposed convolution through each conv layer, switch-based
//! unpooling through each max-pool — yields an input-sized attentive response
//! map per class: which pixels drove that class's response.
//!
//! Two modes are provided. `Linear` runs the exact adjoint chain, so the
//! per-class maps sum to the full unmasked back-projection. `Rectified`
//! additionally clamps the backward signal to non-negative at every position
//! where the forward pass applied a ReLU, the deconvnet convention, which
//! produces the sharper maps used for visualization. Biases never enter the
//! backward path.

use rayon::prelude::*;
use thiserror::Error;

use crate::net::{ForwardTrace, LayerSpec, Network};
use crate::tensor::{conv2d_transpose, relu, unpool, SwitchMap, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum BackprojectError {
    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("trace does not match network: {0}")]
    TraceMismatch(String),
    #[error("response stack must be non-empty")]
    EmptyStack,
    #[error("response stack maps disagree in shape: {first:?} vs {offender:?}")]
    MixedShapes {
        first: (usize, usize, usize),
        offender: (usize, usize, usize),
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Backward nonlinearity convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResponseMode {
    /// Exact adjoint chain; per-class maps sum to the full back-projection.
    Linear,
    /// ReLU applied to the backward signal at every forward-ReLU position.
    #[default]
    Rectified,
}

/// One input-shaped attentive response map per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseStack {
    maps: Vec<Tensor>,
    mode: ResponseMode,
}

impl ResponseStack {
    /// Assemble a stack, requiring at least one map and uniform shapes.
    pub fn new(maps: Vec<Tensor>, mode: ResponseMode) -> Result<ResponseStack, BackprojectError> {
        let first = maps.first().ok_or(BackprojectError::EmptyStack)?.shape();
        if let Some(offender) = maps.iter().find(|m| m.shape() != first) {
            return Err(BackprojectError::MixedShapes {
                first,
                offender: offender.shape(),
            });
        }
        Ok(ResponseStack { maps, mode })
    }

    pub fn num_classes(&self) -> usize {
        self.maps.len()
    }

    pub fn mode(&self) -> ResponseMode {
        self.mode
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn map(&self, class: usize) -> &Tensor {
        &self.maps[class]
    }

    /// Shape shared by every map.
    pub fn map_shape(&self) -> (usize, usize, usize) {
        self.maps[0].shape()
    }

    /// Single-channel spatial view of one class map: single-channel maps pass
    /// through signed and unchanged; multi-channel maps collapse by per-pixel
    /// maximum of absolute values.
    pub fn spatial_map(&self, class: usize) -> Tensor {
        let map = &self.maps[class];
        let (channels, height, width) = map.shape();
        if channels == 1 {
            return map.clone();
        }
        let plane = height * width;
        let mut out = vec![0.0; plane];
        for c in 0..channels {
            for (o, &v) in out.iter_mut().zip(map.channel(c)) {
                let mag = v.abs();
                if mag > *o {
                    *o = mag;
                }
            }
        }
        Tensor::from_vec(1, height, width, out).expect("finite by construction")
    }
}

fn check_trace(net: &Network, trace: &ForwardTrace) -> Result<(), BackprojectError> {
    let chain = net.spec().shape_chain();
    if trace.input().shape() != chain[0] {
        return Err(BackprojectError::TraceMismatch(format!(
            "input shape {:?} vs expected {:?}",
            trace.input().shape(),
            chain[0]
        )));
    }
    if trace.activations().len() != chain.len() - 1 {
        return Err(BackprojectError::TraceMismatch(format!(
            "{} recorded activations for {} tensor layers",
            trace.activations().len(),
            chain.len() - 1
        )));
    }
    for (i, act) in trace.activations().iter().enumerate() {
        if act.shape() != chain[i + 1] {
            return Err(BackprojectError::TraceMismatch(format!(
                "layer {} activation shape {:?} vs expected {:?}",
                i,
                act.shape(),
                chain[i + 1]
            )));
        }
    }
    let pools = net
        .spec()
        .tensor_layers()
        .filter(|l| matches!(l, LayerSpec::MaxPool { .. }))
        .count();
    if trace.switches().len() != pools {
        return Err(BackprojectError::TraceMismatch(format!(
            "{} switch maps for {} pooling layers",
            trace.switches().len(),
            pools
        )));
    }
    Ok(())
}

/// Back-project an arbitrary final-feature-map response down to input space,
/// reusing the pooling switches of a recorded pass.
///
/// This is the shared backward walk under [`attentive_response`] and
/// [`full_back_projection`]; it is exposed so synthetic responses can be
/// projected through a fixed trace.
pub fn back_project_response(
    net: &Network,
    response: &Tensor,
    switches: &[SwitchMap],
    mode: ResponseMode,
) -> Result<Tensor, BackprojectError> {
    let chain = net.spec().shape_chain();
    let expected = *chain.last().expect("chain never empty");
    if response.shape() != expected {
        return Err(BackprojectError::TraceMismatch(format!(
            "response shape {:?} vs final feature map {:?}",
            response.shape(),
            expected
        )));
    }
    let layers: Vec<&LayerSpec> = net.spec().tensor_layers().collect();
    let mut signal = response.clone();
    let mut bank_idx = net.params().len();
    let mut switch_idx = switches.len();
    for (i, layer) in layers.iter().enumerate().rev() {
        match **layer {
            LayerSpec::Conv { kh, relu: gated, .. } => {
                bank_idx -= 1;
                if gated && mode == ResponseMode::Rectified {
                    signal = relu(&signal);
                }
                signal = conv2d_transpose(&signal, &net.params()[bank_idx], 1, kh / 2, chain[i])?;
            }
            LayerSpec::MaxPool { .. } => {
                if switch_idx == 0 {
                    return Err(BackprojectError::TraceMismatch(
                        "fewer switch maps than pooling layers".into(),
                    ));
                }
                switch_idx -= 1;
                signal = unpool(&signal, &switches[switch_idx], chain[i])?;
            }
            LayerSpec::GlobalAvgPool | LayerSpec::Softmax => unreachable!(),
        }
    }
    Ok(signal)
}

/// Attentive response map for one class: the final feature map with every
/// channel except `class` zeroed, walked down to input space.
///
/// Zeroing the non-`class` response channels before the first transposed
/// convolution is equivalent to transposing with a kernel bank whose kernels
/// are all zero except the one at `class`.
pub fn attentive_response(
    net: &Network,
    trace: &ForwardTrace,
    class: usize,
    mode: ResponseMode,
) -> Result<Tensor, BackprojectError> {
    let num_classes = net.spec().num_classes();
    if class >= num_classes {
        return Err(BackprojectError::ClassOutOfRange { class, num_classes });
    }
    check_trace(net, trace)?;
    let final_map = trace.final_feature_map();
    let (channels, height, width) = final_map.shape();
    let mut masked = Tensor::zeros(channels, height, width);
    masked.data_mut()[class * height * width..(class + 1) * height * width]
        .copy_from_slice(final_map.channel(class));
    back_project_response(net, &masked, trace.switches(), mode)
}

/// The unmasked back-projection of the entire final feature map; in linear
/// mode this equals the sum of all per-class attentive responses.
pub fn full_back_projection(
    net: &Network,
    trace: &ForwardTrace,
    mode: ResponseMode,
) -> Result<Tensor, BackprojectError> {
    check_trace(net, trace)?;
    back_project_response(net, trace.final_feature_map(), trace.switches(), mode)
}

/// All per-class attentive response maps; `stack.map(c)` is bitwise equal to
/// `attentive_response(net, trace, c, mode)`.
pub fn attentive_response_all(
    net: &Network,
    trace: &ForwardTrace,
    mode: ResponseMode,
) -> Result<ResponseStack, BackprojectError> {
    check_trace(net, trace)?;
    let maps = (0..net.spec().num_classes())
        .into_par_iter()
        .map(|c| attentive_response(net, trace, c, mode))
        .collect::<Result<Vec<_>, _>>()?;
    ResponseStack::new(maps, mode)
}
