//! Command-line entry point wiring synthesis, training, coding, and
//! evaluation into reproducible workflows.
//!
//! Conventions shared by every subcommand:
//! - Flags mirror config-file keys one-to-one: `--max-iter 500` and a JSON
//!   config `{"max_iter": 500}` name the same setting, and an explicit flag
//!   always wins over the file (pass the file with `--config`).
//! - Seeds resolve as: flag, then config file, then the `BLURVC_SEED`
//!   environment variable, then the built-in default.
//! - Outputs are written atomically (temp file + rename), so an interrupted
//!   run never leaves a half-written artifact, and reruns with identical
//!   inputs and seed produce byte-identical outputs.
//! - Exit codes: 0 success, 2 usage, 3 I/O or malformed data, 4 container
//!   was coded by a different model, 5 training divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use crate::blocks::{checkpoint, BlockConfig, Model};
use crate::codec::adapters::{INTRA_AE_ADAPTER_ID, RAW_ADAPTER_ID};
use crate::codec::container::Container;
use crate::codec::{decode_video, encode_video, CodecMode};
use crate::data_synth::{
    build_manifest, read_manifest, synthesize_clip, toy, validate_manifest, BlurSynthesisParams,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_rd_points, db_per_bpp, psnr, rd_curve, read_metrics_csv, temporal_smoothness,
    write_metrics_csv, write_rd_csv, write_rd_svg, write_smoothness_csv, write_smoothness_svg,
    MetricsRow,
};
use crate::flow_warp::LucasKanade;
use crate::img::{list_clip_dirs, load_clip_dir, save_clip_dir, Clip};
use crate::losses::{ms_ssim_value, DistortionKind};
use crate::train::cascade::{
    pretrain_deblurrer, train_cascade, CascadeConfig, CascadeOrder, CascadeRegime,
    CascadeRunConfig,
};
use crate::train::intra::{train_intra, IntraTrainConfig};
use crate::train::{run_training, ScheduleConfig, TrainOptions};

// ---------------------------------------------------------------------------
// Argument definitions
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "blurvc",
    version,
    about = "Neural video codec for blurry footage: synthesize data, train, code, evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn high-fps clips into (blurry, sharp) training pairs plus a manifest.
    Synthesize(SynthesizeArgs),
    /// Train the codec (or one of its auxiliary tasks) on synthesized pairs.
    Train(TrainArgs),
    /// Encode a PNG clip directory into a bitstream file.
    Encode(EncodeArgs),
    /// Decode a bitstream file back into a PNG clip directory.
    Decode(DecodeArgs),
    /// Measure a decoded clip against a reference: rate, PSNR, MS-SSIM.
    Eval(EvalArgs),
    /// Aggregate metrics CSVs into a rate-distortion curve.
    Rdcurve(RdcurveArgs),
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root directory of high-fps input clips (one PNG-sequence subdirectory per clip).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Generate this many procedural test clips instead of reading --in.
    #[arg(long)]
    toy_clips: Option<usize>,
    /// Frame count for generated clips.
    #[arg(long)]
    frames: Option<usize>,
    /// Square frame size for generated clips.
    #[arg(long)]
    size: Option<usize>,
    /// Frame rate of the high-fps input.
    #[arg(long)]
    fps: Option<f64>,
    /// Frames averaged per blurry output frame (odd).
    #[arg(long)]
    n: Option<usize>,
    /// Frames skipped between averaging windows.
    #[arg(long)]
    m: Option<usize>,
    /// Base seed for generated clips.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
enum TaskArg {
    /// Full staged training of the codec.
    Main,
    /// Train the learned intra (keyframe) autoencoder on a trained model.
    Intra,
    /// Pretrain the enhancement network alone as a standalone deblurrer.
    DeblurPretrain,
    /// Deblur-then-code cascade trained end to end on the combined objective.
    CascadeJoint,
    /// Deblur-then-code cascade trained with separate per-stage losses.
    CascadeIntermediate,
}

#[derive(ValueEnum, Clone, Copy, Debug, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
enum DistortionArg {
    Mse,
    Msssim,
}

#[derive(ValueEnum, Clone, Copy, Debug, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ArchArg {
    /// Full-size blocks.
    Desk,
    /// Miniature blocks for smoke tests.
    Tiny,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthesized dataset root (with manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Which training task to run.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Block sizing.
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    /// Starting checkpoint (required for intra and cascade tasks).
    #[arg(long)]
    start: Option<PathBuf>,
    /// Rate-distortion weight on the final reconstruction.
    #[arg(long)]
    lambda_d: Option<f64>,
    /// Distortion measure for the final objective.
    #[arg(long, value_enum)]
    distortion: Option<DistortionArg>,
    /// End of the enhancement-only phase (iterations).
    #[arg(long)]
    a: Option<u64>,
    /// End of the motion phase.
    #[arg(long)]
    b: Option<u64>,
    /// End of the compensation phase.
    #[arg(long)]
    c: Option<u64>,
    /// Total iterations of the staged schedule.
    #[arg(long)]
    max_iter: Option<u64>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Iterations at which the learning rate divides by 10 (comma-separated).
    #[arg(long, value_delimiter = ',')]
    lr_decay_points: Option<Vec<u64>>,
    /// Initial enhancement-weight scale.
    #[arg(long)]
    s0: Option<f64>,
    /// Enhancement-weight decrement.
    #[arg(long)]
    s_step: Option<f64>,
    /// Iterations between enhancement-weight decrements.
    #[arg(long)]
    s_every: Option<u64>,
    /// Lower bound on the enhancement-weight scale.
    #[arg(long)]
    s_floor: Option<f64>,
    /// Samples per iteration.
    #[arg(long)]
    batch: Option<usize>,
    /// Square crop size of each sample.
    #[arg(long)]
    crop: Option<usize>,
    /// Sampling seed (schedule RNG).
    #[arg(long)]
    seed: Option<u64>,
    /// Parameter-initialization seed.
    #[arg(long)]
    model_seed: Option<u64>,
    /// Pooling size of the attention error map.
    #[arg(long)]
    pool_k: Option<usize>,
    /// Rank scale of the attention error map.
    #[arg(long)]
    rank_scale: Option<f64>,
    /// Iterations for intra/deblur-pretrain/cascade tasks.
    #[arg(long)]
    iters: Option<u64>,
    /// Combined rate-distortion weight of the joint cascade (and the intra task).
    #[arg(long)]
    lambda: Option<f64>,
    /// Codec-fidelity weight of the intermediate cascade.
    #[arg(long)]
    lambda_c: Option<f64>,
    /// Frame rate assumed for the dataset clips.
    #[arg(long)]
    fps: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    /// Reconstruct enhanced (deblurred) frames.
    Enhance,
    /// Reconstruct the blurry input, spending no enhancement bits.
    Preserve,
}

#[derive(ValueEnum, Clone, Copy, Debug, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
enum AdapterArg {
    /// Fixed 8-bit keyframe coding.
    Raw,
    /// Learned keyframe autoencoder (must be trained, see `train --task intra`).
    Learned,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Input clip directory (PNG sequence).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output bitstream file.
    #[arg(long)]
    out: PathBuf,
    /// What the decoder should reconstruct.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Frames per keyframe group.
    #[arg(long)]
    gop: Option<u16>,
    /// Keyframe coder.
    #[arg(long, value_enum)]
    intra_adapter: Option<AdapterArg>,
    /// Frame rate of the input clip.
    #[arg(long)]
    fps: Option<f64>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model checkpoint (must match the one that encoded the stream).
    #[arg(long)]
    model: PathBuf,
    /// Input bitstream file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output clip directory (PNG sequence).
    #[arg(long)]
    out: PathBuf,
    /// Frame rate stamped on the decoded clip.
    #[arg(long)]
    fps: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Decoded clip directory.
    #[arg(long)]
    decoded: PathBuf,
    /// Reference clip directory to measure against.
    #[arg(long)]
    reference: PathBuf,
    /// Bitstream the decoded clip came from (for the rate column).
    #[arg(long)]
    bitstream: PathBuf,
    /// Clip label for the metrics row (default: decoded directory name).
    #[arg(long)]
    clip: Option<String>,
    /// Rate-distortion weight label for the metrics row.
    #[arg(long)]
    lambda_d: Option<f64>,
    /// Mode label for the metrics row.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Metrics CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Append to an existing metrics CSV instead of replacing it.
    #[arg(long)]
    append: bool,
    /// Ground-truth clip directory for the temporal-smoothness histogram.
    #[arg(long)]
    smoothness_gt: Option<PathBuf>,
    /// Smoothness histogram CSV (requires --smoothness-gt).
    #[arg(long)]
    smoothness_out: Option<PathBuf>,
    /// Smoothness histogram SVG plot (requires --smoothness-gt).
    #[arg(long)]
    smoothness_plot: Option<PathBuf>,
    /// Frame rate assumed for the clip directories.
    #[arg(long)]
    fps: Option<f64>,
    /// Worker threads for the per-frame quality metrics.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct RdcurveArgs {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metrics CSVs to aggregate (one or more).
    #[arg(long, num_args = 1.., required = true)]
    metrics: Vec<PathBuf>,
    /// Keep only rows with this mode label.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Output curve CSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional SVG plot of the curve.
    #[arg(long)]
    plot: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Config-file merging
// ---------------------------------------------------------------------------

/// The parsed `--config` JSON: a flat object whose keys equal flag names.
struct FileConfig(Option<serde_json::Value>);

impl FileConfig {
    fn load(path: &Option<PathBuf>) -> Result<FileConfig> {
        let Some(path) = path else { return Ok(FileConfig(None)) };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("bad config {}: {e}", path.display())))?;
        if !value.is_object() {
            return Err(Error::Format(format!(
                "config {} must be a JSON object of flag-named keys",
                path.display()
            )));
        }
        Ok(FileConfig(Some(value)))
    }

    /// Look up `key`; absent keys are `None`, present-but-mistyped keys fail.
    fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        let Some(obj) = &self.0 else { return Ok(None) };
        match obj.get(key) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| Error::Format(format!("config key '{key}': {e}"))),
        }
    }
}

/// Flag wins, then the config file, then the default.
fn setting<T: DeserializeOwned>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> Result<T> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(file.get(key)?.unwrap_or(default)),
    }
}

/// Seeds additionally fall back to the BLURVC_SEED environment variable.
fn seed_setting(flag: Option<u64>, file: &FileConfig, key: &str, default: u64) -> Result<u64> {
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(v) = file.get(key)? {
        return Ok(v);
    }
    match std::env::var("BLURVC_SEED") {
        Ok(raw) => raw
            .parse::<u64>()
            .map_err(|_| Error::InvalidInput(format!("BLURVC_SEED must be an integer, got '{raw}'"))),
        Err(_) => Ok(default),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Write `bytes` to `path` atomically (temp file in the same directory, then
/// rename), creating parent directories as needed.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(tmp.path(), bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Run `work(i)` for `i in 0..count` on up to `workers` threads, preserving
/// index order in the result. The first error cancels the remaining work.
fn parallel_indexed<T, F>(count: usize, workers: usize, work: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = workers.clamp(1, count.max(1));
    if workers <= 1 {
        return (0..count).map(work).collect();
    }
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let stop = AtomicBool::new(false);
    std::thread::scope(|scope| {
        for w in 0..workers {
            let (slots, first_error, stop, work) = (&slots, &first_error, &stop, &work);
            scope.spawn(move || {
                let mut i = w;
                while i < count && !stop.load(Ordering::Relaxed) {
                    match work(i) {
                        Ok(v) => slots.lock().unwrap()[i] = Some(v),
                        Err(e) => {
                            stop.store(true, Ordering::Relaxed);
                            first_error.lock().unwrap().get_or_insert(e);
                        }
                    }
                    i += workers;
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    Ok(slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|s| s.expect("all slots filled when no worker errored"))
        .collect())
}

fn load_model(path: &Path) -> Result<Model> {
    checkpoint::load(path)
}

/// Load the (blurry, sharp) pairs a manifest describes, verifying checksums.
fn load_dataset(root: &Path, fps: f64) -> Result<Vec<(Clip, Clip)>> {
    let manifest_path = root.join("manifest.json");
    let manifest = read_manifest(&manifest_path)?;
    let corrupted = validate_manifest(&manifest, root)?;
    if !corrupted.is_empty() {
        return Err(Error::Format(format!(
            "dataset {} failed checksum validation for {} pair(s)",
            root.display(),
            corrupted.len()
        )));
    }
    manifest
        .pairs
        .iter()
        .map(|entry| {
            let blurry = load_clip_dir(&root.join(&entry.blurry_dir), fps)?;
            let sharp = load_clip_dir(&root.join(&entry.sharp_dir), fps)?;
            Ok((blurry, sharp))
        })
        .collect()
}

impl ModeArg {
    fn to_codec(self) -> CodecMode {
        match self {
            ModeArg::Enhance => CodecMode::Enhance,
            ModeArg::Preserve => CodecMode::Preserve,
        }
    }

    fn label(self) -> &'static str {
        match self {
            ModeArg::Enhance => "enhance",
            ModeArg::Preserve => "preserve",
        }
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn run_synthesize(args: SynthesizeArgs) -> Result<()> {
    let file = FileConfig::load(&args.config)?;
    let n = setting(args.n, &file, "n", 5)?;
    let m = setting(args.m, &file, "m", 5)?;
    let fps = setting(args.fps, &file, "fps", 240.0)?;
    let workers = setting(args.workers, &file, "workers", 1)?;
    let seed = seed_setting(args.seed, &file, "seed", 1)?;
    let toy_clips = setting(args.toy_clips, &file, "toy_clips", 0)?;
    let input = match args.input {
        Some(p) => Some(p),
        None => file.get::<PathBuf>("in")?,
    };
    let params = BlurSynthesisParams::new(n, m)?;

    // Collect named high-fps inputs: given clips, or procedural ones.
    let clips: Vec<(String, Clip)> = if let Some(root) = &input {
        let dirs = list_clip_dirs(root)?;
        if dirs.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no clip directories under {}",
                root.display()
            )));
        }
        parallel_indexed(dirs.len(), workers, |i| {
            let name = dirs[i]
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("clip_{i:03}"));
            Ok((name, load_clip_dir(&dirs[i], fps)?))
        })?
    } else if toy_clips > 0 {
        let frames = setting(args.frames, &file, "frames", 67)?;
        let size = setting(args.size, &file, "size", 64)?;
        (0..toy_clips)
            .map(|i| (format!("toy_{i:03}"), toy::generate_hfr_clip(seed + i as u64, frames, size, size, fps)))
            .collect()
    } else {
        return Err(Error::InvalidInput(
            "synthesize needs --in <dir> or --toy-clips <count>".into(),
        ));
    };

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let pairs = parallel_indexed(clips.len(), workers, |i| {
        let (name, hfr) = &clips[i];
        let (blurry, sharp) = synthesize_clip(hfr, &params)?;
        let blurry_dir = args.out.join(name).join("blurry");
        let sharp_dir = args.out.join(name).join("sharp");
        save_clip_dir(&blurry_dir, &blurry)?;
        save_clip_dir(&sharp_dir, &sharp)?;
        Ok((blurry_dir, sharp_dir, blurry.len(), name.clone()))
    })?;

    // Manifest entries are stored relative to the dataset root so the whole
    // directory can be moved; checksums are taken from the written files.
    let abs: Vec<(PathBuf, PathBuf, usize)> =
        pairs.iter().map(|(b, s, count, _)| (b.clone(), s.clone(), *count)).collect();
    let mut manifest = build_manifest(&abs, &params)?;
    for (entry, (_, _, _, name)) in manifest.pairs.iter_mut().zip(&pairs) {
        entry.blurry_dir = format!("{name}/blurry");
        entry.sharp_dir = format!("{name}/sharp");
    }
    let manifest_path = args.out.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    write_atomic(&manifest_path, body.as_bytes())?;

    println!(
        "synthesized {} clip pair(s) (n={n}, m={m}, fps {fps} -> {}) into {}",
        pairs.len(),
        fps / params.kappa() as f64,
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(&args.config)?;
    let task = setting(args.task, &file, "task", TaskArg::Main)?;
    let arch = setting(args.arch, &file, "arch", ArchArg::Desk)?;
    let fps = setting(args.fps, &file, "fps", 24.0)?;
    let lambda_d = setting(args.lambda_d, &file, "lambda_d", 1.0e5)?;
    let config = match arch {
        ArchArg::Desk => BlockConfig::desk(),
        ArchArg::Tiny => BlockConfig::tiny(),
    };
    let corpus = load_dataset(&args.data, fps)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let desk = ScheduleConfig::desk();
    let schedule = ScheduleConfig {
        a: setting(args.a, &file, "a", desk.a)?,
        b: setting(args.b, &file, "b", desk.b)?,
        c: setting(args.c, &file, "c", desk.c)?,
        max_iter: setting(args.max_iter, &file, "max_iter", desk.max_iter)?,
        lr: setting(args.lr, &file, "lr", desk.lr)?,
        lr_decay_points: setting(args.lr_decay_points, &file, "lr_decay_points", desk.lr_decay_points.clone())?,
        s0: setting(args.s0, &file, "s0", desk.s0)?,
        s_step: setting(args.s_step, &file, "s_step", desk.s_step)?,
        s_every: setting(args.s_every, &file, "s_every", desk.s_every)?,
        s_floor: setting(args.s_floor, &file, "s_floor", desk.s_floor)?,
        batch: setting(args.batch, &file, "batch", desk.batch)?,
        crop: setting(args.crop, &file, "crop", desk.crop)?,
        seed: seed_setting(args.seed, &file, "seed", desk.seed)?,
    };
    let iters = setting(args.iters, &file, "iters", 2000)?;
    let lambda = setting(args.lambda, &file, "lambda", 1.0e5)?;

    match task {
        TaskArg::Main => {
            let opts = TrainOptions {
                schedule,
                lambda_d,
                distortion: match setting(args.distortion, &file, "distortion", DistortionArg::Mse)? {
                    DistortionArg::Mse => DistortionKind::Mse,
                    DistortionArg::Msssim => DistortionKind::OneMinusMsSsim,
                },
                pool_k: setting(args.pool_k, &file, "pool_k", 8)?,
                rank_scale: setting(args.rank_scale, &file, "rank_scale", 1.0)?,
                model_seed: setting(args.model_seed, &file, "model_seed", 7)?,
            };
            let outcome = run_training(&corpus, &config, &opts, &LucasKanade::default(), &args.out)?;
            let last = outcome.checkpoints.last().expect("training writes checkpoints");
            println!("trained {} iterations; final checkpoint {}", opts.schedule.max_iter, last.display());
        }
        TaskArg::Intra => {
            let start = args
                .start
                .ok_or_else(|| Error::InvalidInput("--task intra requires --start <checkpoint>".into()))?;
            let mut model = load_model(&start)?;
            let cfg = IntraTrainConfig {
                iters,
                lr: schedule.lr,
                lambda,
                batch: schedule.batch,
                crop: schedule.crop,
                seed: schedule.seed,
            };
            let frames: Vec<_> = corpus.iter().flat_map(|(b, _)| b.frames.iter().cloned()).collect();
            let steps = train_intra(&frames, &mut model, &cfg)?;
            let path = args.out.join("ckpt_final.bvck");
            checkpoint::save(&model, &path)?;
            println!("trained intra coder for {} iterations; checkpoint {}", steps.len(), path.display());
        }
        TaskArg::DeblurPretrain => {
            let mut model = Model::new(config, setting(args.model_seed, &file, "model_seed", 7)?);
            let run = CascadeRunConfig {
                iters,
                lr: schedule.lr,
                batch: schedule.batch,
                crop: schedule.crop,
                seed: schedule.seed,
            };
            let losses = pretrain_deblurrer(&corpus, &mut model, &run)?;
            let path = args.out.join("ckpt_final.bvck");
            checkpoint::save(&model, &path)?;
            println!("pretrained deblurrer for {} iterations; checkpoint {}", losses.len(), path.display());
        }
        TaskArg::CascadeJoint | TaskArg::CascadeIntermediate => {
            let start = args.start.ok_or_else(|| {
                Error::InvalidInput("cascade tasks require --start <pretrained checkpoint>".into())
            })?;
            let start = load_model(&start)?;
            let cfg = CascadeConfig {
                order: CascadeOrder::DeblurThenCode,
                regime: match task {
                    TaskArg::CascadeJoint => CascadeRegime::Joint,
                    _ => CascadeRegime::Intermediate,
                },
                lambda_d,
                lambda_c: setting(args.lambda_c, &file, "lambda_c", 1.0e5)?,
                lambda,
            };
            let run = CascadeRunConfig {
                iters,
                lr: schedule.lr,
                batch: schedule.batch,
                crop: schedule.crop,
                seed: schedule.seed,
            };
            let outcome = train_cascade(&corpus, start, &cfg, &run, &LucasKanade::default(), &args.out)?;
            let path = args.out.join("ckpt_final.bvck");
            checkpoint::save(&outcome.model, &path)?;
            println!(
                "trained cascade for {} iterations; checkpoint {}; log {}",
                run.iters,
                path.display(),
                outcome.log_path.display()
            );
        }
    }
    Ok(())
}

fn run_encode(args: EncodeArgs) -> Result<()> {
    let file = FileConfig::load(&args.config)?;
    let mode = setting(args.mode, &file, "mode", ModeArg::Enhance)?;
    let gop = setting(args.gop, &file, "gop", 16)?;
    let fps = setting(args.fps, &file, "fps", 24.0)?;
    let adapter = match setting(args.intra_adapter, &file, "intra_adapter", AdapterArg::Raw)? {
        AdapterArg::Raw => RAW_ADAPTER_ID,
        AdapterArg::Learned => INTRA_AE_ADAPTER_ID,
    };
    let model = load_model(&args.model)?;
    let clip = load_clip_dir(&args.input, fps)?;
    let encoded = encode_video(&model, &clip, mode.to_codec(), gop, adapter, &LucasKanade::default())?;

    let mut bytes = Vec::new();
    encoded.container.write_to(&mut bytes)?;
    write_atomic(&args.out, &bytes)?;
    println!(
        "encoded {} frames ({}) in {} bytes, {:.4} bpp -> {}",
        clip.len(),
        mode.label(),
        bytes.len(),
        encoded.container.bpp(),
        args.out.display()
    );
    Ok(())
}

fn run_decode(args: DecodeArgs) -> Result<()> {
    let file = FileConfig::load(&args.config)?;
    let fps = setting(args.fps, &file, "fps", 24.0)?;
    let model = load_model(&args.model)?;
    let bytes = fs::read(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let container = Container::read_from(&mut bytes.as_slice())?;
    let frames = decode_video(&model, &container)?;
    let count = frames.len();
    save_clip_dir(&args.out, &Clip::new(frames, fps))?;
    println!("decoded {count} frames -> {}", args.out.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let file = FileConfig::load(&args.config)?;
    let fps = setting(args.fps, &file, "fps", 24.0)?;
    let workers = setting(args.workers, &file, "workers", 1)?;
    let mode = setting(args.mode, &file, "mode", ModeArg::Enhance)?;
    let lambda_d = setting(args.lambda_d, &file, "lambda_d", 0.0)?;
    let clip_label = match args.clip {
        Some(c) => c,
        None => match file.get::<String>("clip")? {
            Some(c) => c,
            None => args
                .decoded
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "clip".into()),
        },
    };

    let decoded = load_clip_dir(&args.decoded, fps)?;
    let reference = load_clip_dir(&args.reference, fps)?;
    if decoded.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "decoded has {} frames, reference has {}",
            decoded.len(),
            reference.len()
        )));
    }
    let container_bytes = fs::read(&args.bitstream).map_err(|e| Error::io(&args.bitstream, e))?;
    let container = Container::read_from(&mut container_bytes.as_slice())?;
    container.validate()?;

    let per_frame = parallel_indexed(decoded.len(), workers, |i| {
        let a = decoded.frames[i].view();
        let b = reference.frames[i].view();
        Ok((psnr(&a, &b)?, ms_ssim_value(&a, &b)?))
    })?;
    let count = per_frame.len() as f64;
    let mean_psnr = per_frame.iter().map(|(p, _)| p).sum::<f64>() / count;
    let mean_msssim = per_frame.iter().map(|(_, m)| m).sum::<f64>() / count;

    let row = MetricsRow {
        clip: clip_label,
        lambda_d,
        mode: mode.label().to_string(),
        bpp: container.bpp(),
        psnr: mean_psnr,
        msssim: mean_msssim,
    };
    let mut rows = if args.append && args.out.exists() {
        let existing = fs::read(&args.out).map_err(|e| Error::io(&args.out, e))?;
        read_metrics_csv(existing.as_slice())?
    } else {
        Vec::new()
    };
    rows.push(row);
    let mut body = Vec::new();
    write_metrics_csv(&mut body, &rows)?;
    write_atomic(&args.out, &body)?;
    println!(
        "{}: {:.4} bpp, {:.3} dB, MS-SSIM {:.5} -> {}",
        rows.last().unwrap().clip,
        rows.last().unwrap().bpp,
        mean_psnr,
        mean_msssim,
        args.out.display()
    );

    if let Some(gt_dir) = &args.smoothness_gt {
        let gt = load_clip_dir(gt_dir, fps)?;
        let hist = temporal_smoothness(&decoded, &gt, &LucasKanade::default())?;
        let out = args
            .smoothness_out
            .clone()
            .unwrap_or_else(|| args.out.with_file_name("smoothness.csv"));
        let mut body = Vec::new();
        write_smoothness_csv(&mut body, &hist)?;
        write_atomic(&out, &body)?;
        println!("smoothness histogram ({} bins) -> {}", hist.bins.len(), out.display());
        if let Some(plot) = &args.smoothness_plot {
            let mut svg = Vec::new();
            write_smoothness_svg(&mut svg, &hist)?;
            write_atomic(plot, &svg)?;
        }
    } else if args.smoothness_out.is_some() || args.smoothness_plot.is_some() {
        return Err(Error::InvalidInput(
            "--smoothness-out/--smoothness-plot require --smoothness-gt".into(),
        ));
    }
    Ok(())
}

fn run_rdcurve(args: RdcurveArgs) -> Result<()> {
    let file = FileConfig::load(&args.config)?;
    let mode = setting(args.mode, &file, "mode", ModeArg::Enhance)?;
    let mut rows = Vec::new();
    for path in &args.metrics {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        rows.extend(read_metrics_csv(bytes.as_slice())?);
    }
    let total = rows.len();
    rows.retain(|r| r.mode == mode.label());
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no '{}' rows among the {total} metric rows read",
            mode.label()
        )));
    }
    let points = aggregate_rd_points(&rows);
    let curve = rd_curve(&points)?;
    let slope = db_per_bpp(&curve)?;

    let mut body = Vec::new();
    write_rd_csv(&mut body, &curve)?;
    write_atomic(&args.out, &body)?;
    if let Some(plot) = &args.plot {
        let mut svg = Vec::new();
        write_rd_svg(&mut svg, &curve)?;
        write_atomic(plot, &svg)?;
    }
    println!(
        "rd curve: {} point(s) from {} row(s), {:.2} dB/bpp between quality extremes -> {}",
        curve.len(),
        rows.len(),
        slope,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthesize(a) => run_synthesize(a),
        Command::Train(a) => run_train(a),
        Command::Encode(a) => run_encode(a),
        Command::Decode(a) => run_decode(a),
        Command::Eval(a) => run_eval(a),
        Command::Rdcurve(a) => run_rdcurve(a),
    }
}

/// Exit code for a failed run; see the module docs for the mapping.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) => 2,
        Error::Io { .. } | Error::Format(_) => 3,
        Error::ModelMismatch(_) => 4,
        Error::Divergence { .. } => 5,
    }
}

/// Parse `argv` and run; returns the process exit code.
pub fn main_entry<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed; real
            // usage errors print to stderr and exit 2.
            let is_usage_error = e.use_stderr();
            let _ = e.print();
            return if is_usage_error { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
