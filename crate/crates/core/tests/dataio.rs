//! I/O tests against hand-assembled byte fixtures: IDX image/label pairs
//! built field by field, weight containers round-tripped bitwise and
//! corrupted surgically, and byte-exact PPM output.

mod common;

use clearmap_core::{
    attentive_response_all, load_idx_pair, load_response_stack, load_weights, parse_network_spec,
    read_ppm, save_response_stack, save_weights, Dataset, IoError, Network, ResponseMode,
    RgbImage, Tensor,
};
use common::*;
use std::fs;
use std::path::Path;
use tempfile::TempDir;

fn write_idx_images(path: &Path, magic: u32, count: u32, rows: u32, cols: u32, pixels: &[u8]) {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&magic.to_be_bytes());
    bytes.extend_from_slice(&count.to_be_bytes());
    bytes.extend_from_slice(&rows.to_be_bytes());
    bytes.extend_from_slice(&cols.to_be_bytes());
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).unwrap();
}

fn write_idx_labels(path: &Path, magic: u32, count: u32, labels: &[u8]) {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&magic.to_be_bytes());
    bytes.extend_from_slice(&count.to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes).unwrap();
}

#[test]
fn idx_pair_loads_and_scales_pixels() {
    let dir = TempDir::new().unwrap();
    let images = dir.path().join("train-images");
    let labels = dir.path().join("train-labels");
    write_idx_images(
        &images,
        0x0000_0803,
        2,
        2,
        2,
        &[0, 51, 128, 255, 10, 20, 30, 40],
    );
    write_idx_labels(&labels, 0x0000_0801, 2, &[7, 3]);
    let dataset = load_idx_pair(&images, &labels).unwrap();
    assert_eq!(dataset.len(), 2);
    assert_eq!(dataset.name(), "train-images");
    assert_eq!(dataset.labels(), &[7, 3]);
    let first = dataset.image(0);
    assert_eq!(first.shape(), (1, 2, 2));
    assert_eq!(first.get(0, 0, 0), 0.0);
    assert_eq!(first.get(0, 0, 1), 51.0 / 255.0);
    assert_eq!(first.get(0, 1, 0), 128.0 / 255.0);
    assert_eq!(first.get(0, 1, 1), 1.0);
    assert_eq!(dataset.image(1).get(0, 0, 0), 10.0 / 255.0);
}

#[test]
fn idx_magic_and_size_errors_are_distinct() {
    let dir = TempDir::new().unwrap();
    let images = dir.path().join("images");
    let labels = dir.path().join("labels");

    write_idx_images(&images, 0x0000_0804, 1, 1, 1, &[0]);
    write_idx_labels(&labels, 0x0000_0801, 1, &[0]);
    assert!(matches!(
        load_idx_pair(&images, &labels),
        Err(IoError::IdxMagic { got: 0x0000_0804, .. })
    ));

    write_idx_images(&images, 0x0000_0803, 2, 2, 2, &[0; 7]);
    assert!(matches!(
        load_idx_pair(&images, &labels),
        Err(IoError::Truncated { .. })
    ));

    write_idx_images(&images, 0x0000_0803, 2, 1, 1, &[0, 0]);
    write_idx_labels(&labels, 0x0000_0801, 3, &[0, 0, 0]);
    assert!(matches!(
        load_idx_pair(&images, &labels),
        Err(IoError::CountMismatch { images: 2, labels: 3 })
    ));

    write_idx_labels(&labels, 0x0000_0802, 2, &[0, 0]);
    assert!(matches!(
        load_idx_pair(&images, &labels),
        Err(IoError::IdxMagic { .. })
    ));
}

#[test]
fn dataset_truncation_keeps_a_prefix() {
    let images: Vec<Tensor> = (0..5).map(|_| Tensor::zeros(1, 2, 2)).collect();
    let dataset = Dataset::new("five", images, vec![0, 1, 2, 3, 4]).unwrap();
    let cut = dataset.truncated(3);
    assert_eq!(cut.len(), 3);
    assert_eq!(cut.labels(), &[0, 1, 2]);
    assert_eq!(dataset.truncated(99).len(), 5);
}

fn sample_net(seed: u64) -> Network {
    let spec = parse_network_spec(
        "input 1 6 6\nconv 3 3 4 relu\nmaxpool 2 2\nconv 1 1 3 linear\ngap\nsoftmax\n",
    )
    .unwrap();
    Network::he_init(spec, seed)
}

#[test]
fn weights_round_trip_bitwise_and_bytes_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let net = sample_net(5);
    let path_a = dir.path().join("a.clrw");
    let path_b = dir.path().join("b.clrw");
    save_weights(&net, &path_a).unwrap();
    save_weights(&net, &path_b).unwrap();
    assert_eq!(fs::read(&path_a).unwrap(), fs::read(&path_b).unwrap());

    let loaded = load_weights(net.spec(), &path_a, false).unwrap();
    assert_eq!(loaded.params(), net.params());
}

#[test]
fn wrong_spec_is_caught_by_the_architecture_hash() {
    let dir = TempDir::new().unwrap();
    let net = sample_net(6);
    let path = dir.path().join("w.clrw");
    save_weights(&net, &path).unwrap();

    // Same bank shapes, different activation on the first conv: the layer
    // table matches but the hash must not.
    let other = parse_network_spec(
        "input 1 6 6\nconv 3 3 4 linear\nmaxpool 2 2\nconv 1 1 3 linear\ngap\nsoftmax\n",
    )
    .unwrap();
    assert!(matches!(
        load_weights(&other, &path, false),
        Err(IoError::HashMismatch { .. })
    ));
    let forced = load_weights(&other, &path, true).unwrap();
    assert_eq!(forced.params(), net.params());

    // Different conv count fails on the layer table even when the hash check
    // is disabled.
    let shallower =
        parse_network_spec("input 1 6 6\nconv 1 1 3 linear\ngap\nsoftmax\n").unwrap();
    assert!(matches!(
        load_weights(&shallower, &path, true),
        Err(IoError::LayerCount { expected: 1, got: 2, .. })
    ));
}

#[test]
fn truncated_weight_file_names_the_failing_layer() {
    let dir = TempDir::new().unwrap();
    let net = sample_net(7);
    let path = dir.path().join("cut.clrw");
    save_weights(&net, &path).unwrap();
    let full = fs::read(&path).unwrap();
    // Keep the header, layer count, and all of layer 0, then cut into layer
    // 1's weight block. Header: 4+4+1+32+4 = 45; count: 4; layer 0:
    // 16 + (4*1*3*3 + 4) * 8 = 336; layer 1 dims: 16.
    let cut = 45 + 4 + 336 + 16 + 8;
    fs::write(&path, &full[..cut]).unwrap();
    match load_weights(net.spec(), &path, false) {
        Err(IoError::Truncated { what, .. }) => {
            assert_eq!(what, "conv layer 1 weights");
        }
        other => panic!("expected truncation error, got {other:?}"),
    }
}

#[test]
fn header_corruption_is_reported_precisely() {
    let dir = TempDir::new().unwrap();
    let net = sample_net(8);
    let path = dir.path().join("hdr.clrw");

    save_weights(&net, &path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_weights(net.spec(), &path, false),
        Err(IoError::WeightMagic { .. })
    ));

    save_weights(&net, &path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes[4] = 9;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_weights(net.spec(), &path, false),
        Err(IoError::UnsupportedVersion { version: 9, .. })
    ));

    save_weights(&net, &path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes[8] = 2;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_weights(net.spec(), &path, false),
        Err(IoError::UnsupportedScalarWidth { width: 2, .. })
    ));
}

/// A weight file assembled by hand with 4-byte scalars loads with every
/// value widened exactly.
#[test]
fn single_precision_weight_files_are_widened() {
    let spec = parse_network_spec("input 1 2 2\nconv 1 1 2 linear\ngap\nsoftmax\n").unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("f32.clrw");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"CLRW");
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.push(4);
    bytes.extend_from_slice(&spec.sha256());
    bytes.extend_from_slice(b"WGHT");
    bytes.extend_from_slice(&1u32.to_le_bytes());
    for dim in [2u32, 1, 1, 1] {
        bytes.extend_from_slice(&dim.to_le_bytes());
    }
    for w in [0.5f32, -0.25] {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    for b in [1.5f32, 0.1] {
        bytes.extend_from_slice(&b.to_le_bytes());
    }
    fs::write(&path, &bytes).unwrap();

    let net = load_weights(&spec, &path, false).unwrap();
    assert_eq!(net.params()[0].weights(), &[0.5, -0.25]);
    assert_eq!(net.params()[0].bias()[0], 1.5);
    assert_eq!(net.params()[0].bias()[1], 0.1f32 as f64);
}

#[test]
fn response_stack_round_trips_with_spec_hash() {
    let dir = TempDir::new().unwrap();
    let net = sample_net(9);
    let mut r = rng(1);
    let trace = net.forward(&random_tensor(&mut r, 1, 6, 6)).unwrap();
    for mode in [ResponseMode::Linear, ResponseMode::Rectified] {
        let stack = attentive_response_all(&net, &trace, mode).unwrap();
        let path = dir.path().join("stack.clrw");
        save_response_stack(&stack, net.spec(), &path).unwrap();
        let (loaded, hash) = load_response_stack(&path).unwrap();
        assert_eq!(hash, net.spec().sha256());
        assert_eq!(loaded.mode(), mode);
        assert_eq!(loaded.num_classes(), stack.num_classes());
        for (a, b) in loaded.maps().iter().zip(stack.maps()) {
            assert_eq!(a.data(), b.data());
            assert_eq!(a.shape(), b.shape());
        }
    }
}

#[test]
fn section_tags_keep_weights_and_responses_apart() {
    let dir = TempDir::new().unwrap();
    let net = sample_net(10);
    let weights = dir.path().join("w.clrw");
    save_weights(&net, &weights).unwrap();
    assert!(matches!(
        load_response_stack(&weights),
        Err(IoError::WrongSection { .. })
    ));

    let mut r = rng(2);
    let trace = net.forward(&random_tensor(&mut r, 1, 6, 6)).unwrap();
    let stack = attentive_response_all(&net, &trace, ResponseMode::Rectified).unwrap();
    let responses = dir.path().join("r.clrw");
    save_response_stack(&stack, net.spec(), &responses).unwrap();
    assert!(matches!(
        load_weights(net.spec(), &responses, false),
        Err(IoError::WrongSection { .. })
    ));
}

#[test]
fn ppm_bytes_match_the_golden_header() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("red.ppm");
    let mut img = RgbImage::new(1, 1);
    img.set(0, 0, (255, 0, 0));
    clearmap_core::write_image(&img, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes, b"P6\n1 1\n255\n\xff\x00\x00");
    assert_eq!(bytes.len(), 14);
}

#[test]
fn ppm_write_read_round_trip() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("img.ppm");
    let mut img = RgbImage::new(3, 2);
    for (i, (x, y)) in (0..3).flat_map(|x| (0..2).map(move |y| (x, y))).enumerate() {
        img.set(x, y, (i as u8 * 40, 255 - i as u8, 7));
    }
    clearmap_core::write_image(&img, &path).unwrap();
    let back = read_ppm(&path).unwrap();
    assert_eq!(back.pixels(), img.pixels());
    assert_eq!((back.width(), back.height()), (3, 2));

    assert!(matches!(
        clearmap_core::write_image(&RgbImage::new(0, 4), &path),
        Err(IoError::EmptyImage)
    ));
}

#[test]
fn ppm_reader_tolerates_comments_and_rejects_other_maxvals() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("odd.ppm");
    fs::write(
        &path,
        b"P6 # binary pixmap\n# a comment line\n 2\t1 \n255\nabcdef",
    )
    .unwrap();
    let img = read_ppm(&path).unwrap();
    assert_eq!((img.width(), img.height()), (2, 1));
    assert_eq!(img.get(0, 0), (b'a', b'b', b'c'));
    assert_eq!(img.get(1, 0), (b'd', b'e', b'f'));

    fs::write(&path, b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").unwrap();
    assert!(matches!(
        read_ppm(&path),
        Err(IoError::MalformedPpm { .. })
    ));
    fs::write(&path, b"P5\n1 1\n255\n\x00").unwrap();
    assert!(read_ppm(&path).is_err());
    fs::write(&path, b"P6\n2 2\n255\n\x00").unwrap();
    assert!(read_ppm(&path).is_err());
}
