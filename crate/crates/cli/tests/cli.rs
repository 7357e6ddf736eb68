//! End-to-end tests of the `clearmap` binary on a hand-built fixture: a
//! single 1x1 linear conv whose two kernels are -1 and +1 (bias 0 and -0.1),
//! so every logit, map, and rendered pixel is computable by hand.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clearmap_core::{parse_network_spec, save_weights, KernelBank, Network};
use tempfile::TempDir;

const SPEC_TEXT: &str = "input 1 4 4\nconv 1 1 2 linear\ngap\nsoftmax\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clearmap"))
}

fn write_idx_images(path: &Path, images: &[[u8; 16]]) {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&4u32.to_be_bytes());
    bytes.extend_from_slice(&4u32.to_be_bytes());
    for image in images {
        bytes.extend_from_slice(image);
    }
    fs::write(path, bytes).unwrap();
}

fn write_idx_labels(path: &Path, labels: &[u8]) {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes).unwrap();
}

struct Fixture {
    #[allow(dead_code)]
    dir: TempDir,
    spec: PathBuf,
    weights: PathBuf,
    images: PathBuf,
    labels: PathBuf,
}

/// Three 4x4 images: all-black (mean 0, class 0), all-white (mean 1,
/// class 1), half-white (mean 0.5, class 1). The net predicts class 1 iff
/// the mean pixel exceeds 0.05, so the labels below make it exact.
fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("tiny.net");
    fs::write(&spec, SPEC_TEXT).unwrap();

    let parsed = parse_network_spec(SPEC_TEXT).unwrap();
    let bank = KernelBank::from_parts(2, 1, 1, 1, vec![-1.0, 1.0], vec![0.0, -0.1]).unwrap();
    let net = Network::from_params(parsed, vec![bank]).unwrap();
    let weights = dir.path().join("tiny.clrw");
    save_weights(&net, &weights).unwrap();

    let images = dir.path().join("images.idx");
    let mut half = [0u8; 16];
    half[..8].fill(255);
    write_idx_images(&images, &[[0u8; 16], [255u8; 16], half]);
    let labels = dir.path().join("labels.idx");
    write_idx_labels(&labels, &[0, 1, 1]);

    Fixture {
        dir,
        spec,
        weights,
        images,
        labels,
    }
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).unwrap()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8(output.stderr.clone()).unwrap()
}

fn dir_entries(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

fn ppm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    bytes
}

#[test]
fn eval_reports_exact_accuracy() {
    let f = fixture();
    let output = bin()
        .args(["eval", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .arg("--labels")
        .arg(&f.labels)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    assert_eq!(stdout_of(&output), "acc 1.000\n");
}

#[test]
fn eval_rounds_fractional_accuracy() {
    let f = fixture();
    write_idx_labels(&f.labels, &[0, 1, 0]);
    let output = bin()
        .args(["eval", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .arg("--labels")
        .arg(&f.labels)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert_eq!(stdout_of(&output), "acc 0.667\n");
}

#[test]
fn usage_errors_exit_1_with_usage_text() {
    let missing = bin().arg("eval").output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr_of(&missing).contains("Usage"));

    let unknown = bin().arg("frobnicate").output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));

    let f = fixture();
    let bad_range = bin()
        .args(["clear", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .args(["--range", "2:1", "--out-dir"])
        .arg(f.dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(bad_range.status.code(), Some(1));
    assert!(stderr_of(&bad_range).contains("--range"));

    let bad_alpha = bin()
        .args(["clear", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .args(["--alpha", "7", "--out-dir"])
        .arg(f.dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(bad_alpha.status.code(), Some(1));

    let bad_threads = bin()
        .env("CLEARMAP_THREADS", "many")
        .args(["eval", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .arg("--labels")
        .arg(&f.labels)
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(1));
    assert!(stderr_of(&bad_threads).contains("CLEARMAP_THREADS"));
}

#[test]
fn data_errors_exit_2() {
    let f = fixture();

    let missing_file = bin()
        .args(["eval", "--spec"])
        .arg(f.dir.path().join("absent.net"))
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .arg("--labels")
        .arg(&f.labels)
        .output()
        .unwrap();
    assert_eq!(missing_file.status.code(), Some(2));

    let bad_spec = f.dir.path().join("broken.net");
    fs::write(&bad_spec, "input 1 4 4\nconv 3\n").unwrap();
    let parse = bin()
        .args(["eval", "--spec"])
        .arg(&bad_spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .arg("--labels")
        .arg(&f.labels)
        .output()
        .unwrap();
    assert_eq!(parse.status.code(), Some(2));
    assert!(stderr_of(&parse).contains("line 2"));

    // Weights saved under a different architecture: the hash must reject
    // even though the kernel bank shapes line up.
    let other_spec = f.dir.path().join("other.net");
    fs::write(&other_spec, "input 1 8 8\nconv 1 1 2 linear\ngap\nsoftmax\n").unwrap();
    let mismatch = bin()
        .args(["eval", "--spec"])
        .arg(&other_spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .arg("--labels")
        .arg(&f.labels)
        .output()
        .unwrap();
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(stderr_of(&mismatch).contains("hash"));

    let out_of_range = bin()
        .args(["clear", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .args(["--index", "9", "--out-dir"])
        .arg(f.dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out_of_range.status.code(), Some(2));

    let mut weight_bytes = fs::read(&f.weights).unwrap();
    let nan = f64::NAN.to_le_bytes();
    let start = weight_bytes.len() - 8;
    weight_bytes[start..].copy_from_slice(&nan);
    let corrupt = f.dir.path().join("nan.clrw");
    fs::write(&corrupt, weight_bytes).unwrap();
    let nan_weights = bin()
        .args(["eval", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&corrupt)
        .arg("--images")
        .arg(&f.images)
        .arg("--labels")
        .arg(&f.labels)
        .output()
        .unwrap();
    assert_eq!(nan_weights.status.code(), Some(2));
}

#[test]
fn clear_index_0_emits_exactly_the_two_files() {
    let f = fixture();
    let out_dir = f.dir.path().join("maps");
    let output = bin()
        .args(["clear", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .args(["--index", "0", "--out-dir"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    assert_eq!(stdout_of(&output), "image 0 class 0\n");
    assert_eq!(dir_entries(&out_dir), ["clear_0000.ppm", "legend.ppm"]);

    // All-black input: both response channels are non-positive everywhere
    // (0 and -0.1), so the composite is all black.
    let clear = fs::read(out_dir.join("clear_0000.ppm")).unwrap();
    assert_eq!(clear, ppm(4, 4, &[0u8; 48]));

    let legend = fs::read(out_dir.join("legend.ppm")).unwrap();
    assert_eq!(legend, include_bytes!("golden/legend_2class.ppm"));
}

#[test]
fn clear_renders_hand_computed_pixels() {
    let f = fixture();
    let out_dir = f.dir.path().join("maps");
    let output = bin()
        .args(["clear", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    assert_eq!(
        stdout_of(&output),
        "image 0 class 0\nimage 1 class 1\nimage 2 class 1\n"
    );
    assert_eq!(
        dir_entries(&out_dir),
        [
            "clear_0000.ppm",
            "clear_0001.ppm",
            "clear_0002.ppm",
            "legend.ppm"
        ]
    );

    // All-white input: back-projecting channel 0's response -1 through its
    // -1 kernel gives +1 everywhere, beating channel 1's 0.9; class 0 (red)
    // wins at full brightness.
    let white = fs::read(out_dir.join("clear_0001.ppm")).unwrap();
    let red: Vec<u8> = [255, 0, 0].repeat(16);
    assert_eq!(white, ppm(4, 4, &red));

    // Half-white input: white pixels re-project to (1.0, 0.9) -> red at full
    // brightness; black pixels to (0.0, -0.1) -> class 0 at zero response.
    let half = fs::read(out_dir.join("clear_0002.ppm")).unwrap();
    let mut expected = [255, 0, 0].repeat(8);
    expected.extend_from_slice(&[0u8; 24]);
    assert_eq!(half, ppm(4, 4, &expected));
}

#[test]
fn clear_range_selects_half_open_prefix() {
    let f = fixture();
    let out_dir = f.dir.path().join("maps");
    let output = bin()
        .args(["clear", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .args(["--range", "0:2", "--out-dir"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert_eq!(
        dir_entries(&out_dir),
        ["clear_0000.ppm", "clear_0001.ppm", "legend.ppm"]
    );

    let beyond = bin()
        .args(["clear", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .args(["--range", "0:9", "--out-dir"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(beyond.status.code(), Some(2));
}

#[test]
fn heatmap_emits_evidence_and_decision_maps() {
    let f = fixture();
    let out_dir = f.dir.path().join("heat");
    let output = bin()
        .args(["heatmap", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .args(["--index", "1", "--out-dir"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    assert_eq!(stdout_of(&output), "image 1 class 1\n");
    assert_eq!(dir_entries(&out_dir), ["binary_0001.ppm", "heatmap_0001.ppm"]);

    // Predicted class 1 normalizes to 1.0 everywhere and ties with the
    // against-evidence; ties go to the reference class, so the heatmap is
    // the hot ramp's white, while the strict decision map stays black.
    let heat = fs::read(out_dir.join("heatmap_0001.ppm")).unwrap();
    assert_eq!(heat, ppm(4, 4, &[255u8; 48]));
    let decision = fs::read(out_dir.join("binary_0001.ppm")).unwrap();
    assert_eq!(decision, ppm(4, 4, &[0u8; 48]));
}

#[test]
fn overlay_blends_with_the_input_image() {
    let f = fixture();
    let out_dir = f.dir.path().join("maps");
    let output = bin()
        .args(["clear", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .args(["--index", "1", "--overlay", "--alpha", "0.5", "--out-dir"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    // Base gray is 255 (all-white input), map is pure red: blended pixel is
    // (255, 128, 128).
    let blended = fs::read(out_dir.join("clear_0001.ppm")).unwrap();
    assert_eq!(blended, ppm(4, 4, &[255, 128, 128].repeat(16)));
}

#[test]
fn linear_mode_flag_is_accepted() {
    let f = fixture();
    let out_dir = f.dir.path().join("maps");
    let output = bin()
        .args(["clear", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .args(["--index", "0", "--mode", "linear", "--out-dir"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
}

#[test]
fn occlude_prints_the_three_row_report() {
    let f = fixture();
    let output = bin()
        .args(["occlude", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&f.weights)
        .arg("--images")
        .arg(&f.images)
        .arg("--labels")
        .arg(&f.labels)
        .args(["--threshold", "0.5", "--fill", "zero", "--limit", "3"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    let text = stdout_of(&output);
    assert!(text.contains("full image"));
    assert!(text.contains("with only strong features"));
    assert!(text.contains("without strong features"));
    assert!(text.contains("accuracy_full=1.000000"));
    assert!(text.contains("n_images=3"));
}

#[test]
fn occlude_flag_validation() {
    let f = fixture();
    let run = |threshold: &str, fill: &str| {
        bin()
            .args(["occlude", "--spec"])
            .arg(&f.spec)
            .arg("--weights")
            .arg(&f.weights)
            .arg("--images")
            .arg(&f.images)
            .arg("--labels")
            .arg(&f.labels)
            .args(["--threshold", threshold, "--fill", fill, "--limit", "3"])
            .output()
            .unwrap()
    };
    assert_eq!(run("1.5", "zero").status.code(), Some(1));
    assert_eq!(run("0.5", "gray:300").status.code(), Some(1));
    assert_eq!(run("0.5", "mirror").status.code(), Some(1));
    assert_eq!(run("0.5", "gray:128").status.code(), Some(0));
}

#[test]
fn train_writes_weights_and_epoch_lines() {
    let f = fixture();
    let out = f.dir.path().join("trained.clrw");
    let output = bin()
        .args(["train", "--spec"])
        .arg(&f.spec)
        .arg("--train-images")
        .arg(&f.images)
        .arg("--train-labels")
        .arg(&f.labels)
        .args(["--epochs", "2", "--lr", "0.05", "--batch", "3", "--seed", "1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    let text = stdout_of(&output);
    assert!(text.contains("epoch 1 loss "));
    assert!(text.contains("epoch 2 loss "));
    assert!(out.exists());

    let eval = bin()
        .args(["eval", "--spec"])
        .arg(&f.spec)
        .arg("--weights")
        .arg(&out)
        .arg("--images")
        .arg(&f.images)
        .arg("--labels")
        .arg(&f.labels)
        .output()
        .unwrap();
    assert_eq!(eval.status.code(), Some(0), "{}", stderr_of(&eval));
    assert!(stdout_of(&eval).starts_with("acc "));

    let bad_lr = bin()
        .args(["train", "--spec"])
        .arg(&f.spec)
        .arg("--train-images")
        .arg(&f.images)
        .arg("--train-labels")
        .arg(&f.labels)
        .args(["--lr", "-1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(bad_lr.status.code(), Some(1));
}

/// Rebuild the golden files from the current rendering output. Run with
/// `cargo test -p clearmap-cli --test cli -- --ignored regenerate_goldens`
/// and commit the diff only after checking the change is intended.
#[test]
#[ignore]
fn regenerate_goldens() {
    let legend = clearmap_core::legend(&clearmap_core::ColorMap::evenly_spaced(2)).unwrap();
    let path = Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/golden/legend_2class.ppm"
    ));
    clearmap_core::write_image(&legend, path).unwrap();
}

#[test]
fn repeated_runs_are_byte_identical_for_any_thread_count() {
    let f = fixture();
    let read_all = |dir: &Path| -> Vec<(String, Vec<u8>)> {
        dir_entries(dir)
            .into_iter()
            .map(|name| {
                let bytes = fs::read(dir.join(&name)).unwrap();
                (name, bytes)
            })
            .collect()
    };
    let mut outputs = Vec::new();
    for (label, threads) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let out_dir = f.dir.path().join(label);
        let output = bin()
            .env("CLEARMAP_THREADS", threads)
            .args(["clear", "--spec"])
            .arg(&f.spec)
            .arg("--weights")
            .arg(&f.weights)
            .arg("--images")
            .arg(&f.images)
            .arg("--out-dir")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
        outputs.push((stdout_of(&output), read_all(&out_dir)));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}
