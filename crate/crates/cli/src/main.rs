//! `clearmap` — train all-conv classifiers and render class-enhanced
//! response maps.
//!
//! Subcommands: `train`, `eval`, `clear`, `heatmap`, `occlude`. Exit codes:
//! 0 success, 1 usage error, 2 data error, 3 numeric failure. The
//! `CLEARMAP_THREADS` environment variable pins the worker thread count
//! (results are identical for any count; 1 keeps everything on the calling
//! thread).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use clearmap_core::{
    argmax_prediction, attentive_response_all, binary_heatmap, binary_map, compose_clear,
    evaluate_accuracy, initial_network, legend, load_idx_images, load_idx_pair, load_weights,
    overlay, parse_network_spec, run_occlusion_experiment, save_weights, train, write_image,
    BackprojectError, ClearMap, ColorMap, FillRule, IoError, NetError, NetworkSpec,
    OcclusionConfig, OcclusionError, OcclusionMode, ResponseMode, TensorError, TrainConfig,
    TrainError, VizError, DEFAULT_BINARY_THRESHOLD,
};

#[derive(Parser)]
#[command(
    name = "clearmap",
    version,
    about = "Train all-conv classifiers and render class-enhanced response maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a spec file and save its weights.
    Train(TrainArgs),
    /// Report accuracy of saved weights on a labeled image set.
    Eval(EvalArgs),
    /// Render composite class-response maps for selected images.
    Clear(MapArgs),
    /// Render binary evidence heatmaps and decision maps for selected images.
    Heatmap(MapArgs),
    /// Measure how much accuracy rides on the strong features.
    Occlude(OccludeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Network description file.
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
    /// IDX image file for training.
    #[arg(long, value_name = "FILE")]
    train_images: PathBuf,
    /// IDX label file for training.
    #[arg(long, value_name = "FILE")]
    train_labels: PathBuf,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Mini-batch size.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Seed for weight init and shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the trained weights.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
    #[arg(long, value_name = "FILE")]
    weights: PathBuf,
    #[arg(long, value_name = "FILE")]
    images: PathBuf,
    #[arg(long, value_name = "FILE")]
    labels: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Rectified,
    Linear,
}

impl From<Mode> for ResponseMode {
    fn from(mode: Mode) -> ResponseMode {
        match mode {
            Mode::Rectified => ResponseMode::Rectified,
            Mode::Linear => ResponseMode::Linear,
        }
    }
}

#[derive(Args)]
struct MapArgs {
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
    #[arg(long, value_name = "FILE")]
    weights: PathBuf,
    /// IDX image file (labels are not needed; maps use the predicted class).
    #[arg(long, value_name = "FILE")]
    images: PathBuf,
    /// Single image index to render.
    #[arg(long, value_name = "N", conflicts_with = "range")]
    index: Option<usize>,
    /// Half-open index range `A:B` to render; all images when omitted.
    #[arg(long, value_name = "A:B")]
    range: Option<String>,
    /// Backward nonlinearity convention.
    #[arg(long, value_enum, default_value_t = Mode::Rectified)]
    mode: Mode,
    /// Directory for the emitted images (created if missing).
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Blend each map over the grayscaled input image.
    #[arg(long)]
    overlay: bool,
    /// Overlay blend factor in [0,1].
    #[arg(long, default_value_t = 0.5, value_name = "V")]
    alpha: f64,
}

#[derive(Args)]
struct OccludeArgs {
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
    #[arg(long, value_name = "FILE")]
    weights: PathBuf,
    #[arg(long, value_name = "FILE")]
    images: PathBuf,
    #[arg(long, value_name = "FILE")]
    labels: PathBuf,
    /// Strong-feature threshold as a fraction of the per-image peak, in (0,1).
    #[arg(long, value_name = "V")]
    threshold: f64,
    /// Occluded-pixel fill: `zero` or `gray:<byte>`.
    #[arg(long, value_name = "RULE")]
    fill: String,
    /// Evaluate only the first N images.
    #[arg(long, value_name = "N")]
    limit: usize,
}

/// Failure category carrying the process exit code.
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

fn non_finite(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. })
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> CliError {
        match &e {
            NetError::Tensor(t) if non_finite(t) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match &e {
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            TrainError::Diverged(_) => CliError::Numeric(e.to_string()),
            TrainError::Tensor(t) if non_finite(t) => CliError::Numeric(e.to_string()),
            TrainError::Net(NetError::Tensor(t)) if non_finite(t) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BackprojectError> for CliError {
    fn from(e: BackprojectError) -> CliError {
        match &e {
            BackprojectError::Tensor(t) if non_finite(t) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<VizError> for CliError {
    fn from(e: VizError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<OcclusionError> for CliError {
    fn from(e: OcclusionError) -> CliError {
        match &e {
            OcclusionError::InvalidThreshold(_) => CliError::Usage(e.to_string()),
            OcclusionError::Net(NetError::Tensor(t)) if non_finite(t) => {
                CliError::Numeric(e.to_string())
            }
            OcclusionError::Backproject(BackprojectError::Tensor(t)) if non_finite(t) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let requested = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if requested {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Clear(args) => cmd_clear(args),
        Command::Heatmap(args) => cmd_heatmap(args),
        Command::Occlude(args) => cmd_occlude(args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("CLEARMAP_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "CLEARMAP_THREADS must be a positive integer, got {value:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Data(format!("thread pool: {e}")))
}

fn load_spec(path: &Path) -> Result<NetworkSpec, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    parse_network_spec(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let spec = load_spec(&args.spec)?;
    let config = TrainConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        batch_size: args.batch,
        epochs: args.epochs,
        seed: args.seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    let dataset = load_idx_pair(&args.train_images, &args.train_labels)?;
    let net = initial_network(spec, &config);
    let (trained, _) = train(net, &dataset, &config, |_, metrics| {
        println!("{metrics}");
        true
    })?;
    save_weights(&trained, &args.out)?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let spec = load_spec(&args.spec)?;
    let net = load_weights(&spec, &args.weights, false)?;
    let dataset = load_idx_pair(&args.images, &args.labels)?;
    let accuracy = evaluate_accuracy(&net, &dataset)?;
    println!("acc {accuracy:.3}");
    Ok(())
}

/// Resolve `--index`/`--range` against the image count; everything when
/// neither is given.
fn selected_indices(args: &MapArgs, count: usize) -> Result<Vec<usize>, CliError> {
    if let Some(index) = args.index {
        if index >= count {
            return Err(CliError::Data(format!(
                "--index {index} out of range for {count} images"
            )));
        }
        return Ok(vec![index]);
    }
    if let Some(text) = &args.range {
        let (a, b) = text
            .split_once(':')
            .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
            .filter(|&(a, b)| a < b)
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "--range must look like A:B with A < B, got {text:?}"
                ))
            })?;
        if b > count {
            return Err(CliError::Data(format!(
                "--range {text} out of range for {count} images"
            )));
        }
        return Ok((a..b).collect());
    }
    Ok((0..count).collect())
}

fn check_alpha(args: &MapArgs) -> Result<(), CliError> {
    if args.alpha.is_finite() && (0.0..=1.0).contains(&args.alpha) {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "--alpha must lie in [0,1], got {}",
            args.alpha
        )))
    }
}

fn cmd_clear(args: MapArgs) -> Result<(), CliError> {
    check_alpha(&args)?;
    let spec = load_spec(&args.spec)?;
    let net = load_weights(&spec, &args.weights, false)?;
    let images = load_idx_images(&args.images)?;
    let indices = selected_indices(&args, images.len())?;
    fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out_dir.display())))?;
    let colors = ColorMap::evenly_spaced(spec.num_classes());
    for &i in &indices {
        let image = &images[i];
        let trace = net.forward(image)?;
        let (class, _) = argmax_prediction(trace.probabilities());
        let stack = attentive_response_all(&net, &trace, args.mode.into())?;
        let mut rendered = compose_clear(&ClearMap::from_stack(&stack), &colors)?;
        if args.overlay {
            rendered = overlay(image, &rendered, args.alpha)?;
        }
        write_image(&rendered, &args.out_dir.join(format!("clear_{i:04}.ppm")))?;
        println!("image {i} class {class}");
    }
    write_image(&legend(&colors)?, &args.out_dir.join("legend.ppm"))?;
    Ok(())
}

fn cmd_heatmap(args: MapArgs) -> Result<(), CliError> {
    check_alpha(&args)?;
    let spec = load_spec(&args.spec)?;
    let net = load_weights(&spec, &args.weights, false)?;
    let images = load_idx_images(&args.images)?;
    let indices = selected_indices(&args, images.len())?;
    fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out_dir.display())))?;
    for &i in &indices {
        let image = &images[i];
        let trace = net.forward(image)?;
        let (class, _) = argmax_prediction(trace.probabilities());
        let stack = attentive_response_all(&net, &trace, args.mode.into())?;
        let base = args.overlay.then_some((image, args.alpha));
        let heat = binary_heatmap(&stack, class, base)?;
        write_image(&heat, &args.out_dir.join(format!("heatmap_{i:04}.ppm")))?;
        let map = binary_map(&stack, class, DEFAULT_BINARY_THRESHOLD)?;
        write_image(&map, &args.out_dir.join(format!("binary_{i:04}.ppm")))?;
        println!("image {i} class {class}");
    }
    Ok(())
}

fn parse_fill(text: &str) -> Result<FillRule, CliError> {
    if text == "zero" {
        return Ok(FillRule::BackgroundZero);
    }
    text.strip_prefix("gray:")
        .and_then(|level| level.parse::<u8>().ok())
        .map(FillRule::GrayPatch)
        .ok_or_else(|| {
            CliError::Usage(format!(
                "--fill must be `zero` or `gray:<byte>`, got {text:?}"
            ))
        })
}

fn cmd_occlude(args: OccludeArgs) -> Result<(), CliError> {
    let fill = parse_fill(&args.fill)?;
    let config = OcclusionConfig::new(args.threshold, fill, OcclusionMode::RemoveStrong)?;
    let spec = load_spec(&args.spec)?;
    let net = load_weights(&spec, &args.weights, false)?;
    let dataset = load_idx_pair(&args.images, &args.labels)?.truncated(args.limit);
    let report = run_occlusion_experiment(&net, &dataset, &config)?;
    println!("{report}");
    Ok(())
}
