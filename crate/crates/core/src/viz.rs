//! Rendering of response stacks: composite class/response maps, the binary
//! heatmap and binary map baselines, overlays and the class-color legend.
//!
//! The composite map encodes, per pixel, the dominant class (the class whose
//! attentive response is largest there) as hue and the dominant response
//! level as brightness, composed in HSV with full saturation and converted to
//! RGB. Response values are max-normalized per image; negative responses
//! render black.

use thiserror::Error;

use crate::backproject::ResponseStack;
use crate::tensor::Tensor;

/// Default threshold fraction for [`binary_map`].
pub const DEFAULT_BINARY_THRESHOLD: f64 = 0.2;

#[derive(Debug, Error)]
pub enum VizError {
    #[error("{name} {value} outside range {range}")]
    ComponentOutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("spatial dimensions {got:?} do not match {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("hues must be injective: classes {a} and {b} share hue {hue}")]
    DuplicateHue { a: usize, b: usize, hue: f64 },
}

/// 8-bit RGB raster, row-major, origin top-left.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    /// All-black image.
    pub fn new(width: usize, height: usize) -> RgbImage {
        RgbImage {
            width,
            height,
            pixels: vec![0; 3 * width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (u8, u8, u8) {
        let i = 3 * (y * self.width + x);
        (self.pixels[i], self.pixels[i + 1], self.pixels[i + 2])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: (u8, u8, u8)) {
        let i = 3 * (y * self.width + x);
        self.pixels[i] = rgb.0;
        self.pixels[i + 1] = rgb.1;
        self.pixels[i + 2] = rgb.2;
    }
}

/// Injective class-to-hue assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorMap {
    hues: Vec<f64>,
}

impl ColorMap {
    /// Evenly spaced hues `c / n`, stable across images so class colors are
    /// comparable.
    pub fn evenly_spaced(num_classes: usize) -> ColorMap {
        ColorMap {
            hues: (0..num_classes)
                .map(|c| c as f64 / num_classes as f64)
                .collect(),
        }
    }

    /// Explicit hue table; each hue must lie in `[0,1)` and be distinct.
    pub fn from_hues(hues: Vec<f64>) -> Result<ColorMap, VizError> {
        for (i, &h) in hues.iter().enumerate() {
            if !(0.0..1.0).contains(&h) {
                return Err(VizError::ComponentOutOfRange {
                    name: "hue",
                    value: h,
                    range: "[0,1)",
                });
            }
            for (j, &g) in hues.iter().enumerate().take(i) {
                if g == h {
                    return Err(VizError::DuplicateHue { a: j, b: i, hue: h });
                }
            }
        }
        Ok(ColorMap { hues })
    }

    pub fn num_classes(&self) -> usize {
        self.hues.len()
    }

    pub fn hue(&self, class: usize) -> Result<f64, VizError> {
        self.hues
            .get(class)
            .copied()
            .ok_or(VizError::ClassOutOfRange {
                class,
                num_classes: self.hues.len(),
            })
    }
}

/// Per-pixel class assignment over a spatial grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    height: usize,
    width: usize,
    classes: Vec<usize>,
}

impl ClassMap {
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> usize {
        self.classes[y * self.width + x]
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }
}

/// Dominant class plus dominant response, gathered from one stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ClearMap {
    class_map: ClassMap,
    response: Tensor,
    num_classes: usize,
}

impl ClearMap {
    /// Compute both constituents from a stack; the response map is gathered
    /// at the computed class map, so the two are consistent by construction.
    pub fn from_stack(stack: &ResponseStack) -> ClearMap {
        let class_map = dominant_class_map(stack);
        let response = dominant_response_map(stack, &class_map)
            .expect("class map from the same stack is always valid");
        ClearMap {
            class_map,
            response,
            num_classes: stack.num_classes(),
        }
    }

    pub fn class_map(&self) -> &ClassMap {
        &self.class_map
    }

    /// Single-channel response map, same spatial shape as the class map.
    pub fn response(&self) -> &Tensor {
        &self.response
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Per-pixel argmax over the stack's spatial class maps; ties break to the
/// lowest class index.
pub fn dominant_class_map(stack: &ResponseStack) -> ClassMap {
    let spatial: Vec<Tensor> = (0..stack.num_classes())
        .map(|c| stack.spatial_map(c))
        .collect();
    let (_, height, width) = spatial[0].shape();
    let mut classes = vec![0usize; height * width];
    for (p, slot) in classes.iter_mut().enumerate() {
        let mut best = spatial[0].data()[p];
        for (c, map) in spatial.iter().enumerate().skip(1) {
            let v = map.data()[p];
            if v > best {
                best = v;
                *slot = c;
            }
        }
    }
    ClassMap {
        height,
        width,
        classes,
    }
}

/// Gather each pixel's response from the map of its assigned class.
pub fn dominant_response_map(
    stack: &ResponseStack,
    class_map: &ClassMap,
) -> Result<Tensor, VizError> {
    let spatial: Vec<Tensor> = (0..stack.num_classes())
        .map(|c| stack.spatial_map(c))
        .collect();
    let (_, height, width) = spatial[0].shape();
    if class_map.shape() != (height, width) {
        return Err(VizError::DimensionMismatch {
            expected: (height, width),
            got: class_map.shape(),
        });
    }
    let mut data = vec![0.0; height * width];
    for (p, slot) in data.iter_mut().enumerate() {
        let class = class_map.classes[p];
        let map = spatial.get(class).ok_or(VizError::ClassOutOfRange {
            class,
            num_classes: stack.num_classes(),
        })?;
        *slot = map.data()[p];
    }
    Ok(Tensor::from_vec(1, height, width, data).expect("gathered from finite maps"))
}

#[inline]
fn to_byte(unit: f64) -> u8 {
    (unit * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Standard hexcone HSV to RGB conversion, components rounded half-up to
/// bytes. `h` in `[0,1)`, `s` and `v` in `[0,1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Result<(u8, u8, u8), VizError> {
    if !h.is_finite() || !(0.0..1.0).contains(&h) {
        return Err(VizError::ComponentOutOfRange {
            name: "hue",
            value: h,
            range: "[0,1)",
        });
    }
    if !s.is_finite() || !(0.0..=1.0).contains(&s) {
        return Err(VizError::ComponentOutOfRange {
            name: "saturation",
            value: s,
            range: "[0,1]",
        });
    }
    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
        return Err(VizError::ComponentOutOfRange {
            name: "value",
            value: v,
            range: "[0,1]",
        });
    }
    let h6 = h * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    Ok((to_byte(r), to_byte(g), to_byte(b)))
}

/// Piecewise-linear hot ramp: black at 0, red at 1/3, yellow at 2/3, white
/// at 1. Input is clamped to `[0,1]`.
pub fn hot_ramp(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    (
        to_byte((3.0 * t).min(1.0)),
        to_byte((3.0 * t - 1.0).clamp(0.0, 1.0)),
        to_byte((3.0 * t - 2.0).clamp(0.0, 1.0)),
    )
}

/// Render a composite map: hue from the per-pixel class, brightness from the
/// max-normalized positive response (all-black when no response is positive).
pub fn compose_clear(clear: &ClearMap, colors: &ColorMap) -> Result<RgbImage, VizError> {
    if colors.num_classes() < clear.num_classes() {
        return Err(VizError::ClassOutOfRange {
            class: clear.num_classes() - 1,
            num_classes: colors.num_classes(),
        });
    }
    let (height, width) = clear.class_map().shape();
    let max_positive = clear
        .response()
        .data()
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max);
    let mut image = RgbImage::new(width, height);
    if max_positive <= 0.0 {
        return Ok(image);
    }
    for y in 0..height {
        for x in 0..width {
            let v = (clear.response().get(0, y, x).max(0.0)) / max_positive;
            let hue = colors.hue(clear.class_map().get(y, x))?;
            image.set(x, y, hsv_to_rgb(hue, 1.0, v)?);
        }
    }
    Ok(image)
}

/// Normalized non-negative view of one class's spatial map: positive part
/// divided by the maximum positive value (all zeros when nothing is
/// positive).
fn normalized_positive(map: &Tensor) -> Vec<f64> {
    let max_positive = map.data().iter().cloned().fold(0.0_f64, f64::max);
    if max_positive <= 0.0 {
        return vec![0.0; map.plane_len()];
    }
    map.data()
        .iter()
        .map(|&v| v.max(0.0) / max_positive)
        .collect()
}

/// Per-pixel maximum over the spatial maps of every class except
/// `true_class`.
fn against_map(stack: &ResponseStack, true_class: usize) -> Tensor {
    let (_, height, width) = stack.spatial_map(0).shape();
    let mut data = vec![f64::NEG_INFINITY; height * width];
    for c in 0..stack.num_classes() {
        if c == true_class {
            continue;
        }
        let map = stack.spatial_map(c);
        for (slot, &v) in data.iter_mut().zip(map.data()) {
            if v > *slot {
                *slot = v;
            }
        }
    }
    Tensor::from_vec(1, height, width, data).expect("at least one other class")
}

fn check_binary_args(stack: &ResponseStack, true_class: usize) -> Result<(), VizError> {
    let n = stack.num_classes();
    if n < 2 {
        return Err(VizError::TooFewClasses(n));
    }
    if true_class >= n {
        return Err(VizError::ClassOutOfRange {
            class: true_class,
            num_classes: n,
        });
    }
    Ok(())
}

/// Two-channel evidence rendering: the true class's normalized response on
/// the hot ramp, the strongest other-class response as green; per pixel the
/// larger normalized magnitude wins (ties go to the true class). Optionally
/// alpha-blended over a base image.
pub fn binary_heatmap(
    stack: &ResponseStack,
    true_class: usize,
    base: Option<(&Tensor, f64)>,
) -> Result<RgbImage, VizError> {
    check_binary_args(stack, true_class)?;
    let for_norm = normalized_positive(&stack.spatial_map(true_class));
    let against_norm = normalized_positive(&against_map(stack, true_class));
    let (_, height, width) = stack.spatial_map(true_class).shape();
    let mut image = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let rgb = if for_norm[p] >= against_norm[p] {
                hot_ramp(for_norm[p])
            } else {
                (0, to_byte(against_norm[p]), 0)
            };
            image.set(x, y, rgb);
        }
    }
    match base {
        Some((tensor, alpha)) => overlay(tensor, &image, alpha),
        None => Ok(image),
    }
}

/// Hard-decision variant: red where the true class's normalized response
/// beats the against-response and the threshold, blue where the reverse,
/// black elsewhere.
pub fn binary_map(
    stack: &ResponseStack,
    true_class: usize,
    threshold: f64,
) -> Result<RgbImage, VizError> {
    check_binary_args(stack, true_class)?;
    if !threshold.is_finite() || !(0.0..1.0).contains(&threshold) {
        return Err(VizError::ComponentOutOfRange {
            name: "threshold",
            value: threshold,
            range: "[0,1)",
        });
    }
    let for_norm = normalized_positive(&stack.spatial_map(true_class));
    let against_norm = normalized_positive(&against_map(stack, true_class));
    let (_, height, width) = stack.spatial_map(true_class).shape();
    let mut image = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let rgb = if for_norm[p] > against_norm[p] && for_norm[p] > threshold {
                (255, 0, 0)
            } else if against_norm[p] > for_norm[p] && against_norm[p] > threshold {
                (0, 0, 255)
            } else {
                (0, 0, 0)
            };
            image.set(x, y, rgb);
        }
    }
    Ok(image)
}

/// Blend a map over the grayscaled base image:
/// `(1 - alpha) * gray(base) + alpha * map`, per channel. The base collapses
/// to grayscale by channel mean, clamped to `[0,1]`.
pub fn overlay(base: &Tensor, map: &RgbImage, alpha: f64) -> Result<RgbImage, VizError> {
    if !alpha.is_finite() || !(0.0..=1.0).contains(&alpha) {
        return Err(VizError::ComponentOutOfRange {
            name: "alpha",
            value: alpha,
            range: "[0,1]",
        });
    }
    let (channels, height, width) = base.shape();
    if (map.height(), map.width()) != (height, width) {
        return Err(VizError::DimensionMismatch {
            expected: (height, width),
            got: (map.height(), map.width()),
        });
    }
    let mut out = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let mut gray = 0.0;
            for c in 0..channels {
                gray += base.get(c, y, x);
            }
            gray = (gray / channels as f64).clamp(0.0, 1.0) * 255.0;
            let (r, g, b) = map.get(x, y);
            let blend = |m: u8| ((1.0 - alpha) * gray + alpha * m as f64).round().clamp(0.0, 255.0) as u8;
            out.set(x, y, (blend(r), blend(g), blend(b)));
        }
    }
    Ok(out)
}

const SWATCH: usize = 16;
const LEGEND_HEIGHT: usize = 24;
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

/// Horizontal legend strip: one full-saturation swatch per class with the
/// class index printed beneath it.
pub fn legend(colors: &ColorMap) -> Result<RgbImage, VizError> {
    let n = colors.num_classes();
    let mut image = RgbImage::new(SWATCH * n.max(1), LEGEND_HEIGHT);
    for class in 0..n {
        let rgb = hsv_to_rgb(colors.hue(class)?, 1.0, 1.0)?;
        let x0 = class * SWATCH;
        for y in 0..SWATCH {
            for x in 0..SWATCH {
                image.set(x0 + x, y, rgb);
            }
        }
        for y in SWATCH..LEGEND_HEIGHT {
            for x in 0..SWATCH {
                image.set(x0 + x, y, (255, 255, 255));
            }
        }
        let digits: Vec<usize> = class
            .to_string()
            .bytes()
            .map(|b| (b - b'0') as usize)
            .collect();
        let text_width = digits.len() * 4 - 1;
        let mut cx = x0 + (SWATCH.saturating_sub(text_width)) / 2;
        for digit in digits {
            for (dy, row) in DIGITS[digit].iter().enumerate() {
                for dx in 0..3 {
                    if row & (0b100 >> dx) != 0 {
                        image.set(cx + dx, SWATCH + 2 + dy, (0, 0, 0));
                    }
                }
            }
            cx += 4;
        }
    }
    Ok(image)
}
