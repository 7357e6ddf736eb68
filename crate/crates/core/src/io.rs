//! Dataset ingestion (IDX), weight persistence, response-stack dumps and
//! image emission.
//!
//! Weight files ("CLRW") carry a version, the SHA-256 of the architecture's
//! canonical text, and per-layer shape headers followed by little-endian
//! IEEE-754 payloads. Doubles are written; single-precision payloads are
//! accepted on load and widened. Response stacks reuse the same container
//! with a `RESP` section tag instead of `WGHT`.
//!
//! Images are written as binary PPM (P6), byte-exact `P6\n<w> <h>\n255\n`
//! followed by RGB triples, so renderings can be pinned as golden bytes.
//! PNG output is available behind the `png` feature.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::backproject::{BackprojectError, ResponseMode, ResponseStack};
use crate::net::{NetError, Network, NetworkSpec};
use crate::tensor::{KernelBank, Tensor, TensorError};
use crate::viz::RgbImage;

const WEIGHT_MAGIC: &[u8; 4] = b"CLRW";
const WEIGHT_VERSION: u32 = 1;
const SECTION_WEIGHTS: &[u8; 4] = b"WGHT";
const SECTION_RESPONSES: &[u8; 4] = b"RESP";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic 0x{got:08x}, expected 0x{expected:08x}")]
    IdxMagic {
        path: PathBuf,
        expected: u32,
        got: u32,
    },
    #[error("{path}: truncated {what}")]
    Truncated { path: PathBuf, what: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: not a CLRW file")]
    WeightMagic { path: PathBuf },
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: unsupported scalar width {width} (expected 4 or 8)")]
    UnsupportedScalarWidth { path: PathBuf, width: u8 },
    #[error("{path}: expected section {expected:?}, found {got:?}")]
    WrongSection {
        path: PathBuf,
        expected: String,
        got: String,
    },
    #[error("{path}: architecture hash does not match the provided network spec")]
    HashMismatch { path: PathBuf },
    #[error("{path}: file lists {got} conv layers, spec has {expected}")]
    LayerCount {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("cannot write an image with zero width or height")]
    EmptyImage,
    #[error("{path}: malformed PPM: {reason}")]
    MalformedPpm { path: PathBuf, reason: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Backproject(#[from] BackprojectError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Images with labels, pixel values already scaled to `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    images: Vec<Tensor>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Vec<Tensor>,
        labels: Vec<usize>,
    ) -> Result<Dataset, IoError> {
        if images.len() != labels.len() {
            return Err(IoError::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// The first `limit` examples (or all of them, if fewer).
    pub fn truncated(&self, limit: usize) -> Dataset {
        let n = limit.min(self.len());
        Dataset {
            name: self.name.clone(),
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32, IoError> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| IoError::Truncated {
            path: path.to_path_buf(),
            what: what.into(),
        })?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Load an images/labels IDX file pair into a dataset.
///
/// Headers are big-endian: images carry magic `0x00000803` then count, rows,
/// cols; labels carry magic `0x00000801` then count. Pixel bytes are scaled
/// by `1/255` into single-channel tensors. The dataset name is the image
/// file's stem.
/// Load just the image half of an IDX pair, for commands that work on
/// unlabeled images.
pub fn load_idx_images(images_path: &Path) -> Result<Vec<Tensor>, IoError> {
    let image_bytes = fs::read(images_path).map_err(io_err(images_path))?;

    let magic = read_be_u32(&image_bytes, 0, images_path, "header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IoError::IdxMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let count = read_be_u32(&image_bytes, 4, images_path, "header")? as usize;
    let rows = read_be_u32(&image_bytes, 8, images_path, "header")? as usize;
    let cols = read_be_u32(&image_bytes, 12, images_path, "header")? as usize;
    let payload = &image_bytes[16..];
    if payload.len() != count * rows * cols {
        return Err(IoError::Truncated {
            path: images_path.to_path_buf(),
            what: format!(
                "pixel payload: {} bytes for {count} images of {rows}x{cols}",
                payload.len()
            ),
        });
    }

    let plane = rows * cols;
    Ok((0..count)
        .map(|i| {
            let data = payload[i * plane..(i + 1) * plane]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect();
            Tensor::from_vec(1, rows, cols, data).expect("byte pixels are finite")
        })
        .collect())
}

pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<Dataset, IoError> {
    let images = load_idx_images(images_path)?;
    let label_bytes = fs::read(labels_path).map_err(io_err(labels_path))?;

    let magic = read_be_u32(&label_bytes, 0, labels_path, "header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IoError::IdxMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let label_count = read_be_u32(&label_bytes, 4, labels_path, "header")? as usize;
    let label_payload = &label_bytes[8..];
    if label_payload.len() != label_count {
        return Err(IoError::Truncated {
            path: labels_path.to_path_buf(),
            what: format!("label payload: {} bytes for {label_count} labels", label_payload.len()),
        });
    }
    if images.len() != label_count {
        return Err(IoError::CountMismatch {
            images: images.len(),
            labels: label_count,
        });
    }

    let labels = label_payload.iter().map(|&b| b as usize).collect();
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Dataset::new(name, images, labels)
}

fn write_file_header(
    out: &mut impl Write,
    section: &[u8; 4],
    hash: &[u8; 32],
) -> std::io::Result<()> {
    out.write_all(WEIGHT_MAGIC)?;
    out.write_all(&WEIGHT_VERSION.to_le_bytes())?;
    out.write_all(&[8u8])?;
    out.write_all(hash)?;
    out.write_all(section)
}

/// Serialize all network parameters with the architecture hash.
pub fn save_weights(net: &Network, path: &Path) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let write = |e| io_err(path)(e);
    write_file_header(&mut out, SECTION_WEIGHTS, &net.spec().sha256()).map_err(write)?;
    out.write_all(&(net.params().len() as u32).to_le_bytes())
        .map_err(write)?;
    for bank in net.params() {
        let (kh, kw) = bank.kernel_size();
        for dim in [bank.out_channels(), bank.in_channels(), kh, kw] {
            out.write_all(&(dim as u32).to_le_bytes()).map_err(write)?;
        }
        for &w in bank.weights() {
            out.write_all(&w.to_le_bytes()).map_err(write)?;
        }
        for &b in bank.bias() {
            out.write_all(&b.to_le_bytes()).map_err(write)?;
        }
    }
    out.flush().map_err(write)
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IoError> {
        let slice = self
            .bytes
            .get(self.offset..self.offset + n)
            .ok_or_else(|| IoError::Truncated {
                path: self.path.to_path_buf(),
                what: what.into(),
            })?;
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn scalars(&mut self, n: usize, width: u8, what: &str) -> Result<Vec<f64>, IoError> {
        let raw = self.take(n * width as usize, what)?;
        Ok(match width {
            8 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            _ => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        })
    }
}

fn read_file_header<'a>(
    reader: &mut Reader<'a>,
    expected_section: &[u8; 4],
) -> Result<([u8; 32], u8), IoError> {
    let path = reader.path.to_path_buf();
    if reader.take(4, "magic")? != WEIGHT_MAGIC {
        return Err(IoError::WeightMagic { path });
    }
    let version = reader.u32("version")?;
    if version != WEIGHT_VERSION {
        return Err(IoError::UnsupportedVersion { path, version });
    }
    let width = reader.take(1, "scalar width")?[0];
    if width != 4 && width != 8 {
        return Err(IoError::UnsupportedScalarWidth { path, width });
    }
    let hash: [u8; 32] = reader.take(32, "architecture hash")?.try_into().unwrap();
    let section = reader.take(4, "section tag")?;
    if section != expected_section {
        return Err(IoError::WrongSection {
            path,
            expected: String::from_utf8_lossy(expected_section).into_owned(),
            got: String::from_utf8_lossy(section).into_owned(),
        });
    }
    Ok((hash, width))
}

/// Load parameters for `spec`, verifying the stored architecture hash unless
/// `allow_hash_mismatch` is set. Bank shapes are always validated.
pub fn load_weights(
    spec: &NetworkSpec,
    path: &Path,
    allow_hash_mismatch: bool,
) -> Result<Network, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut reader = Reader {
        bytes: &bytes,
        offset: 0,
        path,
    };
    let (hash, width) = read_file_header(&mut reader, SECTION_WEIGHTS)?;
    if !allow_hash_mismatch && hash != spec.sha256() {
        return Err(IoError::HashMismatch {
            path: path.to_path_buf(),
        });
    }
    let layer_count = reader.u32("layer count")? as usize;
    if layer_count != spec.conv_count() {
        return Err(IoError::LayerCount {
            path: path.to_path_buf(),
            expected: spec.conv_count(),
            got: layer_count,
        });
    }
    let mut banks = Vec::with_capacity(layer_count);
    for layer in 0..layer_count {
        let what = format!("conv layer {layer}");
        let out_channels = reader.u32(&what)? as usize;
        let in_channels = reader.u32(&what)? as usize;
        let kh = reader.u32(&what)? as usize;
        let kw = reader.u32(&what)? as usize;
        let weights = reader.scalars(
            out_channels * in_channels * kh * kw,
            width,
            &format!("conv layer {layer} weights"),
        )?;
        let bias = reader.scalars(out_channels, width, &format!("conv layer {layer} biases"))?;
        banks.push(KernelBank::from_parts(
            out_channels,
            in_channels,
            kh,
            kw,
            weights,
            bias,
        )?);
    }
    Ok(Network::from_params(spec.clone(), banks)?)
}

/// Dump a response stack in the CLRW container (section `RESP`), tagged with
/// the producing architecture's hash.
pub fn save_response_stack(
    stack: &ResponseStack,
    spec: &NetworkSpec,
    path: &Path,
) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let write = |e| io_err(path)(e);
    write_file_header(&mut out, SECTION_RESPONSES, &spec.sha256()).map_err(write)?;
    out.write_all(&(stack.num_classes() as u32).to_le_bytes())
        .map_err(write)?;
    let mode = match stack.mode() {
        ResponseMode::Linear => 0u8,
        ResponseMode::Rectified => 1u8,
    };
    out.write_all(&[mode]).map_err(write)?;
    for map in stack.maps() {
        let (c, h, w) = map.shape();
        for dim in [c, h, w] {
            out.write_all(&(dim as u32).to_le_bytes()).map_err(write)?;
        }
        for &v in map.data() {
            out.write_all(&v.to_le_bytes()).map_err(write)?;
        }
    }
    out.flush().map_err(write)
}

/// Read back a response stack along with the architecture hash it was
/// produced under.
pub fn load_response_stack(path: &Path) -> Result<(ResponseStack, [u8; 32]), IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut reader = Reader {
        bytes: &bytes,
        offset: 0,
        path,
    };
    let (hash, width) = read_file_header(&mut reader, SECTION_RESPONSES)?;
    let num_maps = reader.u32("map count")? as usize;
    let mode = match reader.take(1, "response mode")?[0] {
        0 => ResponseMode::Linear,
        _ => ResponseMode::Rectified,
    };
    let mut maps = Vec::with_capacity(num_maps);
    for i in 0..num_maps {
        let what = format!("map {i}");
        let c = reader.u32(&what)? as usize;
        let h = reader.u32(&what)? as usize;
        let w = reader.u32(&what)? as usize;
        let data = reader.scalars(c * h * w, width, &format!("map {i} data"))?;
        maps.push(Tensor::from_vec(c, h, w, data)?);
    }
    Ok((ResponseStack::new(maps, mode)?, hash))
}

/// Write a binary PPM (P6), byte-exact and deterministic.
pub fn write_image(img: &RgbImage, path: &Path) -> Result<(), IoError> {
    if img.width() == 0 || img.height() == 0 {
        return Err(IoError::EmptyImage);
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    out.write_all(format!("P6\n{} {}\n255\n", img.width(), img.height()).as_bytes())
        .map_err(io_err(path))?;
    out.write_all(img.pixels()).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

/// Parse a binary PPM as emitted by [`write_image`] (tolerating arbitrary
/// whitespace and `#` comments in the header, per the format).
pub fn read_ppm(path: &Path) -> Result<RgbImage, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let malformed = |reason: &str| IoError::MalformedPpm {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(malformed("missing P6 signature"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comment lines.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(malformed("truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| malformed("header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(malformed("only maxval 255 is supported"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed("missing single whitespace after maxval")),
    }
    let expected = 3 * width * height;
    let payload = bytes
        .get(pos..pos + expected)
        .ok_or_else(|| malformed("truncated pixel payload"))?;
    let mut img = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let i = 3 * (y * width + x);
            img.set(x, y, (payload[i], payload[i + 1], payload[i + 2]));
        }
    }
    Ok(img)
}

/// Write the image as an 8-bit RGB PNG.
#[cfg(feature = "png")]
pub fn write_image_png(img: &RgbImage, path: &Path) -> Result<(), IoError> {
    if img.width() == 0 || img.height() == 0 {
        return Err(IoError::EmptyImage);
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        img.width() as u32,
        img.height() as u32,
    );
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| png_err(path, e))?;
    writer
        .write_image_data(img.pixels())
        .map_err(|e| png_err(path, e))?;
    Ok(())
}

#[cfg(feature = "png")]
fn png_err(path: &Path, e: png::EncodingError) -> IoError {
    match e {
        png::EncodingError::IoError(source) => IoError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => IoError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(other.to_string()),
        },
    }
}
