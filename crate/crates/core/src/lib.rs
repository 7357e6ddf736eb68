//! All-convolutional image classifiers with per-class response
//! back-projection.
//!
//! The networks here end in a conv layer with one kernel per class followed
//! by global average pooling and softmax, so the final feature maps are
//! per-class response maps. [`backproject`] walks those responses back to
//! pixel space through transposed convolutions and switch-based unpooling,
//! yielding an input-sized attentive response map per class; [`viz`] composes
//! them into class/response visualizations; [`occlusion`] measures how much
//! accuracy depends on the strongest response regions.
//!
//! Module map:
//! - [`tensor`]: dense tensors and numerical kernels (conv, transposed conv,
//!   pooling with switches, unpooling, ReLU, GAP, softmax);
//! - [`net`]: textual architecture format, forward pass, trace recording;
//! - [`train`]: SGD with backprop, deterministic for a fixed seed;
//! - [`backproject`]: per-class response maps in linear or rectified mode;
//! - [`viz`]: composite maps, binary heatmaps/maps, overlays, legend;
//! - [`occlusion`]: strong-feature masks and the occlusion experiment;
//! - [`io`]: IDX datasets, CLRW weight files, PPM (and optional PNG) output.
//!
//! Bundled architectures: [`MNIST_NETSPEC`], [`SVHN_NETSPEC`],
//! [`DOGS_NETSPEC`].

pub mod backproject;
pub mod io;
pub mod net;
pub mod occlusion;
pub mod tensor;
pub mod train;
pub mod viz;

pub use backproject::{
    attentive_response, attentive_response_all, back_project_response, full_back_projection,
    BackprojectError, ResponseMode, ResponseStack,
};
pub use io::{
    load_idx_images, load_idx_pair, load_response_stack, load_weights, read_ppm,
    save_response_stack, save_weights, write_image, Dataset, IoError,
};
#[cfg(feature = "png")]
pub use io::write_image_png;
pub use net::{
    argmax_prediction, parse_network_spec, ForwardTrace, LayerSpec, NetError, Network, NetworkSpec,
};
pub use occlusion::{
    apply_occlusion, run_occlusion_experiment, strong_feature_mask, FillRule, Mask,
    OcclusionConfig, OcclusionError, OcclusionMode, OcclusionReport,
};
pub use tensor::{
    conv2d_forward, conv2d_output_shape, conv2d_transpose, global_avg_pool, maxpool_forward, relu,
    softmax, unpool, KernelBank, SwitchMap, Tensor, TensorError,
};
pub use train::{
    evaluate_accuracy, initial_network, loss_and_gradients, train, EpochMetrics, TrainConfig,
    TrainError, WeightInit,
};
pub use viz::{
    binary_heatmap, binary_map, compose_clear, dominant_class_map, dominant_response_map, hot_ramp,
    hsv_to_rgb, legend, overlay, ClassMap, ClearMap, ColorMap, RgbImage, VizError,
    DEFAULT_BINARY_THRESHOLD,
};

/// 28×28 grayscale, 10 classes: four 3×3/32 convs, one 2×2 pool, a 3×3/64
/// conv, then the linear 1×1/10 class layer.
pub const MNIST_NETSPEC: &str = include_str!("../netspecs/mnist.net");

/// 32×32 RGB, 10 classes: nine convs with two 2×2 pools.
pub const SVHN_NETSPEC: &str = include_str!("../netspecs/svhn.net");

/// 224×224 RGB, 10 classes: VGG-16-style conv stack; expressible and
/// loadable, but far beyond desk-scale training.
pub const DOGS_NETSPEC: &str = include_str!("../netspecs/dogs.net");
