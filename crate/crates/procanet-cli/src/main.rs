//! Command line frontend: synthetic data generation, training, evaluation,
//! tiled prediction, gradient checking, and a conv micro-benchmark.
//!
//! Exit codes: 0 success, 2 usage (bad flags), 3 I/O, 4 validation,
//! 5 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use procanet_core::data::{
    build_patch_set, load_raster, load_scene_dir, save_raster, save_scene, scene_file_names,
    ScenePair, EVAL_STRIDE, PATCH, TRAIN_STRIDE,
};
use procanet_core::gradcheck::{gradcheck_network, well_conditioned_net, GradCheckConfig};
use procanet_core::infer::{confusion_over_patchset, predict_stitch};
use procanet_core::kernels::{conv2d_fast, conv2d_naive, ConvKernel};
use procanet_core::metrics::MetricsReport;
use procanet_core::model::{ModelConfig, ProcaNet};
use procanet_core::synth::synth_scene;
use procanet_core::tensor::Tensor;
use procanet_core::train::{fit, split_indices, FitConfig, FitData};
use procanet_core::weights::load_weights;
use procanet_core::Error as CoreError;

const EXIT_IO: u8 = 3;
const EXIT_VALIDATION: u8 = 4;
const EXIT_NUMERIC: u8 = 5;

#[derive(Parser)]
#[command(name = "procanet", version, about = "Dual-encoder water segmentation toolkit")]
struct Cli {
    /// Seed for all randomized work; equal seeds reproduce runs bitwise.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Worker threads (0 = auto). Results never depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Write deterministic synthetic scene pairs into a directory.
    Synth {
        /// Number of scene pairs (scene i uses seed + i).
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a scene directory (65/35 train/validation split by seed).
    Train {
        /// Directory of scene_*.mbr / scene_*_label.mbr pairs.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 25)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 16)]
        base_channels: usize,
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long, value_enum, default_value_t = OnOff::On)]
        attention: OnOff,
        /// Comma-separated band names for the first encoder.
        #[arg(long, default_value = "R,G,B,NIR")]
        encoder1_bands: String,
        /// Comma-separated band names for the second encoder, or "none".
        #[arg(long, default_value = "NIR")]
        encoder2_bands: String,
        /// Peak learning rate of the restart schedule.
        #[arg(long, default_value_t = procanet_core::optim::BASE_LR)]
        lr_max: f64,
        /// Output directory for run.json, train_log.jsonl and checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on scenes and write a metrics JSON.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        /// Scene directory; with a run.json beside the weights, only that
        /// run's validation scenes are used, otherwise every scene.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a mask for one raster with non-overlapping 128x128 tiles.
    Predict {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients of a small network against finite
    /// differences; nonzero exit on failure.
    Gradcheck,
    /// Time the direct and im2col convolution routes on a fixed shape.
    Bench,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::Io(_) => EXIT_IO,
            CoreError::NonFinite { .. } | CoreError::GradientMismatch { .. } => EXIT_NUMERIC,
            _ => EXIT_VALIDATION,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::validation(format!("json: {e}"))
    }
}

type CliResult<T> = Result<T, Failure>;

/// Everything needed to rerun or evaluate a training run; written to
/// run.json in the output directory before training starts.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    tool_version: String,
    seed: u64,
    data_dir: PathBuf,
    out_dir: PathBuf,
    model: ModelConfig,
    epochs: usize,
    batch: usize,
    lr_max: f64,
    train_scenes: Vec<String>,
    val_scenes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_scene_indices: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_scene_indices: Option<Vec<usize>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // First initialization wins; reruns within one process cannot happen.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            count,
            width,
            height,
            out,
        } => cmd_synth(cli.seed, count, width, height, &out),
        Command::Train {
            data,
            epochs,
            batch,
            base_channels,
            levels,
            attention,
            encoder1_bands,
            encoder2_bands,
            lr_max,
            out,
        } => cmd_train(TrainArgs {
            seed: cli.seed,
            data,
            epochs,
            batch,
            base_channels,
            levels,
            attention: attention == OnOff::On,
            encoder1_bands,
            encoder2_bands,
            lr_max,
            out,
        }),
        Command::Eval {
            weights,
            input,
            out,
        } => cmd_eval(&weights, &input, &out),
        Command::Predict {
            weights,
            input,
            out,
        } => cmd_predict(&weights, &input, &out),
        Command::Gradcheck => cmd_gradcheck(cli.seed),
        Command::Bench => cmd_bench(cli.seed),
    }
}

fn cmd_synth(seed: u64, count: usize, width: usize, height: usize, out: &Path) -> CliResult<()> {
    if count == 0 {
        return Err(Failure::validation("--count must be positive"));
    }
    std::fs::create_dir_all(out)?;
    for i in 0..count {
        let scene = synth_scene(seed + i as u64, width, height)?;
        save_scene(out, i, &scene)?;
    }
    println!("wrote {count} scene pairs ({width}x{height}) to {}", out.display());
    Ok(())
}

struct TrainArgs {
    seed: u64,
    data: PathBuf,
    epochs: usize,
    batch: usize,
    base_channels: usize,
    levels: usize,
    attention: bool,
    encoder1_bands: String,
    encoder2_bands: String,
    lr_max: f64,
    out: PathBuf,
}

fn parse_bands(arg: &str) -> CliResult<Vec<String>> {
    let bands: Vec<String> = arg
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    if bands.is_empty() {
        return Err(Failure::validation(format!("no band names in {arg:?}")));
    }
    Ok(bands)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let encoder1_bands = parse_bands(&args.encoder1_bands)?;
    let encoder2_bands = if args.encoder2_bands.eq_ignore_ascii_case("none") {
        None
    } else {
        Some(parse_bands(&args.encoder2_bands)?)
    };
    let model = ModelConfig {
        levels: args.levels,
        base_channels: args.base_channels,
        encoder1_bands,
        encoder2_bands,
        attention: args.attention,
        seed: args.seed,
    };

    let scenes = load_scene_dir(&args.data)?;
    if scenes.len() < 2 {
        return Err(Failure::validation(format!(
            "need at least 2 scenes to split train/validation, found {}",
            scenes.len()
        )));
    }
    let (train_idx, val_idx) = split_indices(scenes.len(), args.seed);

    std::fs::create_dir_all(&args.out)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: args.seed,
        data_dir: args.data.clone(),
        out_dir: args.out.clone(),
        model: model.clone(),
        epochs: args.epochs,
        batch: args.batch,
        lr_max: args.lr_max,
        train_scenes: train_idx.iter().map(|&i| scene_file_names(i).0).collect(),
        val_scenes: val_idx.iter().map(|&i| scene_file_names(i).0).collect(),
        train_scene_indices: Some(train_idx.clone()),
        val_scene_indices: Some(val_idx.clone()),
    };
    std::fs::write(
        args.out.join("run.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    let pick = |idx: &[usize]| -> Vec<ScenePair> {
        idx.iter().map(|&i| scenes[i].clone()).collect()
    };
    let train_scenes = pick(&train_idx);
    let val_scenes = pick(&val_idx);
    let train_set = build_patch_set(&train_scenes, PATCH, TRAIN_STRIDE, true)?;
    let val_set = build_patch_set(&val_scenes, PATCH, EVAL_STRIDE, false)?;

    let mut net: ProcaNet<f32> = ProcaNet::init(&model)?;
    let data = FitData {
        train_scenes: &train_scenes,
        train_set: &train_set,
        val_scenes: &val_scenes,
        val_set: &val_set,
        bands1: &model.encoder1_bands,
        bands2: model.encoder2_bands.as_deref(),
    };
    let fit_cfg = FitConfig {
        epochs: args.epochs,
        batch: args.batch,
        seed: args.seed,
        lr_max: args.lr_max,
        out_dir: Some(args.out.clone()),
        ..FitConfig::default()
    };
    let report = fit(&fit_cfg, &mut net, &data)?;
    println!(
        "trained {} epochs on {} patches ({} params); best val IoU {:.6} at epoch {}",
        args.epochs,
        train_set.len(),
        net.param_count(),
        report.best_val_iou,
        report.best_epoch
    );
    println!("artifacts in {}", args.out.display());
    Ok(())
}

/// Band names for each encoder: from the run manifest when one sits next to
/// the weights, otherwise inferred from the channel counts.
fn resolve_bands(
    weights: &Path,
    net: &ProcaNet<f32>,
) -> CliResult<(Vec<String>, Option<Vec<String>>, Option<RunManifest>)> {
    let sidecar = weights.parent().map(|d| d.join("run.json"));
    if let Some(path) = sidecar.filter(|p| p.is_file()) {
        let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        return Ok((
            manifest.model.encoder1_bands.clone(),
            manifest.model.encoder2_bands.clone(),
            Some(manifest),
        ));
    }
    let defaults = |n: usize| -> CliResult<Vec<String>> {
        match n {
            1 => Ok(vec!["NIR".into()]),
            3 => Ok(["R", "G", "B"].map(String::from).to_vec()),
            4 => Ok(["R", "G", "B", "NIR"].map(String::from).to_vec()),
            _ => Err(Failure::validation(format!(
                "cannot infer band names for {n} channels; place run.json next to the weights"
            ))),
        }
    };
    let bands1 = defaults(net.in_channels())?;
    let bands2 = net.in_channels2().map(defaults).transpose()?;
    Ok((bands1, bands2, None))
}

fn cmd_eval(weights: &Path, input: &Path, out: &Path) -> CliResult<()> {
    let net: ProcaNet<f32> = load_weights(weights)?;
    let (bands1, bands2, manifest) = resolve_bands(weights, &net)?;
    let scenes = load_scene_dir(input)?;
    if scenes.is_empty() {
        return Err(Failure::validation(format!(
            "no scene pairs found in {}",
            input.display()
        )));
    }

    // Evaluate the run's own validation scenes when the manifest names a
    // subset that exists here; otherwise every scene in the directory.
    let selected: Vec<ScenePair> = match manifest
        .as_ref()
        .and_then(|m| m.val_scene_indices.clone())
        .filter(|idx| !idx.is_empty() && idx.iter().all(|&i| i < scenes.len()))
    {
        Some(idx) => idx.iter().map(|&i| scenes[i].clone()).collect(),
        None => scenes,
    };

    let set = build_patch_set(&selected, PATCH, EVAL_STRIDE, false)?;
    let counts = confusion_over_patchset(&net, &selected, &set, &bands1, bands2.as_deref(), 1.0, 8)?;
    let report = MetricsReport::from_counts(&counts)?;
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(out, &json)?;
    println!("{json}");
    Ok(())
}

fn cmd_predict(weights: &Path, input: &Path, out: &Path) -> CliResult<()> {
    let net: ProcaNet<f32> = load_weights(weights)?;
    let (bands1, bands2, _) = resolve_bands(weights, &net)?;
    let raster = load_raster(input)?;
    let mask = predict_stitch(&net, &raster, &bands1, bands2.as_deref(), 1.0)?;
    save_raster(&mask, out)?;
    let covered = mask.data().iter().filter(|&&v| v != 255.0).count();
    println!(
        "wrote {}x{} mask to {} ({covered} of {} pixels covered)",
        mask.width(),
        mask.height(),
        out.display(),
        mask.data().len()
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> CliResult<()> {
    let cfg = ModelConfig {
        base_channels: 4,
        levels: 2,
        seed,
        ..ModelConfig::default()
    };
    let mut net: ProcaNet<f64> = well_conditioned_net(&cfg)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let x1 = Tensor::<f64>::uniform([1, 4, 16, 16], 0.0, 1.0, &mut rng);
    let x2 = Tensor::<f64>::uniform([1, 1, 16, 16], 0.0, 1.0, &mut rng);
    let target = Tensor::from_vec([1, 1, 16, 16], vec![1.0; 256])?;
    let check = GradCheckConfig::default();
    let report = gradcheck_network(&mut net, &x1, Some(&x2), &target, &check)?;
    println!(
        "checked {} coordinates at h={:.0e}: {} failures, max rel err {:.3e}",
        report.checked, report.h, report.failures, report.max_rel_err
    );
    if let Some(w) = &report.worst {
        println!("worst: {} (analytic {:.6e}, numeric {:.6e})", w.name, w.analytic, w.numeric);
    }
    if report.passed() {
        println!("gradcheck PASS");
        Ok(())
    } else {
        Err(Failure::numeric(format!(
            "gradcheck FAIL: {} of {} coordinates over tolerance {}",
            report.failures, report.checked, report.tol
        )))
    }
}

fn cmd_bench(seed: u64) -> CliResult<()> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let x = Tensor::<f32>::uniform([1, 16, 128, 128], -1.0, 1.0, &mut rng);
    let weight = (0..16 * 16 * 9).map(|_| 0.05f32).collect();
    let bias = vec![0.0f32; 16];
    let k = ConvKernel::new(16, 16, 3, weight, bias)?;

    // One warmup each, then timed loops; both routes must agree bitwise.
    let fast_out = conv2d_fast(&x, &k)?;
    let naive_out = conv2d_naive(&x, &k)?;
    if fast_out != naive_out {
        return Err(Failure::numeric("fast and naive outputs disagree"));
    }

    let time = |f: &dyn Fn() -> CliResult<()>, iters: u32| -> CliResult<f64> {
        let t0 = Instant::now();
        for _ in 0..iters {
            f()?;
        }
        Ok(t0.elapsed().as_secs_f64() / f64::from(iters))
    };
    let fast_s = time(&|| conv2d_fast(&x, &k).map(|_| ()).map_err(Into::into), 10)?;
    let naive_s = time(&|| conv2d_naive(&x, &k).map(|_| ()).map_err(Into::into), 3)?;

    let macs = 16.0 * 16.0 * 9.0 * 128.0 * 128.0;
    println!("conv 16->16 3x3 on 1x16x128x128:");
    println!("  route   ms/iter   GMAC/s");
    println!("  naive   {:8.2}  {:7.2}", naive_s * 1e3, macs / naive_s / 1e9);
    println!("  fast    {:8.2}  {:7.2}", fast_s * 1e3, macs / fast_s / 1e9);
    println!("speedup: {:.2}x", naive_s / fast_s);
    Ok(())
}
