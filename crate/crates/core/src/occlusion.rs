//! Occlusion experiment: how much of a classifier's accuracy rides on the
//! "strong features" — the pixels most responsible for the true class's
//! response?
//!
//! For each image, the true class's rectified attentive response map is
//! thresholded at a fraction of its per-image maximum to form a mask. The
//! image is then re-classified twice: once keeping only the masked pixels and
//! once with them removed (replaced per fill rule). A well-focused classifier
//! keeps most of its accuracy with only the strong features and loses far
//! more without them.

use rayon::prelude::*;
use std::fmt;
use thiserror::Error;

use crate::backproject::{attentive_response_all, BackprojectError, ResponseMode, ResponseStack};
use crate::io::Dataset;
use crate::net::{argmax_prediction, NetError, Network};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OcclusionError {
    #[error("threshold fraction must lie in (0,1), got {0}")]
    InvalidThreshold(f64),
    #[error("mask is {got:?} but image spatial dims are {expected:?}")]
    MaskDimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} of image {index} out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Backproject(#[from] BackprojectError),
}

/// What to write into occluded pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillRule {
    /// Write 0.0 — the background of black-background datasets.
    BackgroundZero,
    /// Write `level / 255` into every channel.
    GrayPatch(u8),
}

impl FillRule {
    fn value(self) -> f64 {
        match self {
            FillRule::BackgroundZero => 0.0,
            FillRule::GrayPatch(level) => level as f64 / 255.0,
        }
    }
}

/// Which side of the mask gets replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcclusionMode {
    /// Replace everything outside the mask.
    KeepStrongOnly,
    /// Replace everything inside the mask.
    RemoveStrong,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionConfig {
    threshold_frac: f64,
    fill_rule: FillRule,
    mode: OcclusionMode,
}

impl OcclusionConfig {
    pub fn new(
        threshold_frac: f64,
        fill_rule: FillRule,
        mode: OcclusionMode,
    ) -> Result<OcclusionConfig, OcclusionError> {
        if !threshold_frac.is_finite() || threshold_frac <= 0.0 || threshold_frac >= 1.0 {
            return Err(OcclusionError::InvalidThreshold(threshold_frac));
        }
        Ok(OcclusionConfig {
            threshold_frac,
            fill_rule,
            mode,
        })
    }

    pub fn threshold_frac(&self) -> f64 {
        self.threshold_frac
    }

    pub fn fill_rule(&self) -> FillRule {
        self.fill_rule
    }

    pub fn mode(&self) -> OcclusionMode {
        self.mode
    }

    /// Same threshold and fill, different side of the mask.
    pub fn with_mode(self, mode: OcclusionMode) -> OcclusionConfig {
        OcclusionConfig { mode, ..self }
    }
}

/// Boolean pixel mask over a spatial grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    selected: Vec<bool>,
}

impl Mask {
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.selected[y * self.width + x]
    }

    /// Number of selected pixels.
    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// True when every pixel selected here is also selected in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.shape() == other.shape()
            && self
                .selected
                .iter()
                .zip(&other.selected)
                .all(|(&a, &b)| !a || b)
    }
}

/// Pixels whose positive true-class response reaches `threshold_frac` of the
/// per-image maximum positive response; empty when the map is nowhere
/// positive.
///
/// # Panics
/// If `true_class` is out of range for the stack.
pub fn strong_feature_mask(
    stack: &ResponseStack,
    true_class: usize,
    threshold_frac: f64,
) -> Mask {
    let map = stack.spatial_map(true_class);
    let (_, height, width) = map.shape();
    let max_positive = map.data().iter().cloned().fold(0.0_f64, f64::max);
    let selected = if max_positive > 0.0 {
        let cut = threshold_frac * max_positive;
        map.data().iter().map(|&v| v.max(0.0) >= cut).collect()
    } else {
        vec![false; height * width]
    };
    Mask {
        height,
        width,
        selected,
    }
}

/// Replace pixels on the configured side of the mask with the fill value, in
/// every channel.
pub fn apply_occlusion(
    image: &Tensor,
    mask: &Mask,
    config: &OcclusionConfig,
) -> Result<Tensor, OcclusionError> {
    let (channels, height, width) = image.shape();
    if mask.shape() != (height, width) {
        return Err(OcclusionError::MaskDimensionMismatch {
            expected: (height, width),
            got: mask.shape(),
        });
    }
    let fill = config.fill_rule.value();
    let mut out = image.clone();
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let inside = mask.get(y, x);
                let replace = match config.mode {
                    OcclusionMode::KeepStrongOnly => !inside,
                    OcclusionMode::RemoveStrong => inside,
                };
                if replace {
                    out.set(c, y, x, fill);
                }
            }
        }
    }
    Ok(out)
}

/// Accuracies of the unmodified, strong-only, and strong-removed variants of
/// a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionReport {
    pub accuracy_full: f64,
    pub accuracy_strong_only: f64,
    pub accuracy_without_strong: f64,
    pub n_images: usize,
}

impl fmt::Display for OcclusionReport {
    /// Aligned three-row percentage table followed by machine-readable
    /// `key=value` lines.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "experiment                 accuracy")?;
        writeln!(f, "full image                   {:6.2}", 100.0 * self.accuracy_full)?;
        writeln!(
            f,
            "with only strong features    {:6.2}",
            100.0 * self.accuracy_strong_only
        )?;
        writeln!(
            f,
            "without strong features      {:6.2}",
            100.0 * self.accuracy_without_strong
        )?;
        writeln!(f, "accuracy_full={:.6}", self.accuracy_full)?;
        writeln!(f, "accuracy_strong_only={:.6}", self.accuracy_strong_only)?;
        writeln!(
            f,
            "accuracy_without_strong={:.6}",
            self.accuracy_without_strong
        )?;
        write!(f, "n_images={}", self.n_images)
    }
}

/// Classify every image three ways — unmodified, strong features only,
/// strong features removed — and report the three accuracies.
///
/// The mask for each image comes from the rectified-mode response of the
/// image's true label; `config.mode` is ignored here since both occlusion
/// modes are evaluated.
pub fn run_occlusion_experiment(
    net: &Network,
    dataset: &Dataset,
    config: &OcclusionConfig,
) -> Result<OcclusionReport, OcclusionError> {
    if dataset.is_empty() {
        return Err(OcclusionError::EmptyDataset);
    }
    let num_classes = net.spec().num_classes();
    if let Some((index, &label)) = dataset
        .labels()
        .iter()
        .enumerate()
        .find(|(_, &l)| l >= num_classes)
    {
        return Err(OcclusionError::LabelOutOfRange {
            index,
            label,
            num_classes,
        });
    }
    let keep = config.with_mode(OcclusionMode::KeepStrongOnly);
    let remove = config.with_mode(OcclusionMode::RemoveStrong);
    let counts = dataset
        .images()
        .par_iter()
        .zip(dataset.labels().par_iter())
        .map(|(image, &label)| -> Result<(u32, u32, u32), OcclusionError> {
            let trace = net.forward(image)?;
            let full = argmax_prediction(trace.probabilities()).0 == label;
            let stack = attentive_response_all(net, &trace, ResponseMode::Rectified)?;
            let mask = strong_feature_mask(&stack, label, config.threshold_frac);
            let strong = net.predict(&apply_occlusion(image, &mask, &keep)?)?.0 == label;
            let without = net.predict(&apply_occlusion(image, &mask, &remove)?)?.0 == label;
            Ok((full as u32, strong as u32, without as u32))
        })
        .try_reduce(
            || (0, 0, 0),
            |a, b| Ok((a.0 + b.0, a.1 + b.1, a.2 + b.2)),
        )?;
    let n = dataset.len() as f64;
    Ok(OcclusionReport {
        accuracy_full: counts.0 as f64 / n,
        accuracy_strong_only: counts.1 as f64 / n,
        accuracy_without_strong: counts.2 as f64 / n,
        n_images: dataset.len(),
    })
}
