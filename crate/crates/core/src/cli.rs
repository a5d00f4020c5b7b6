//! The `gesture-diff` command line.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and missing-input
//! errors, 1 for everything else. Failures print one JSON object on stderr.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde_json::{json, Value};

use crate::audio::{detect_audio_beats, load_wav, FeatureConfig};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{
    cached_clip_features, clip_dirs, load_dataset, read_clip, read_json, write_clip, write_json, DrivingFile,
    DRIVING_FILE,
    MANIFEST_FILE,
};
use crate::diffusion::PredictionMode;
use crate::error::{Error, Result};
use crate::generator::{generate_from_checkpoint, GenerationRequest};
use crate::metrics::{
    beat_consistency, detect_motion_beats_with, diversity, tile_windows, train_autoencoder, Autoencoder,
    MetricReport,
};
use crate::tps::{preview_sequence, render_overlay, ImageGrid};
use crate::trainer::{
    make_synthetic_dataset, window_dataset_with_features, write_synthetic_dataset, Trainer, FINAL_CHECKPOINT,
};
use crate::types::{GestureClip, KeypointFrame};

pub const THREADS_ENV: &str = "GESTURE_DIFF_THREADS";
pub const GENERATION_FILE: &str = "generation.json";
pub const EVAL_FILE: &str = "metrics.json";
pub const AUTOENCODER_FILE: &str = "autoencoder.json";
pub const SOURCE_OVERLAY_FILE: &str = "source_overlay.png";

#[derive(Debug, Parser)]
#[command(name = "gesture-diff", version, about = "Audio-driven keypoint gesture diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one value, e.g. `--set train.lr=1e-3` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic audio-coupled dataset
    MakeSynthetic {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a denoiser on a dataset directory
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<PredictionMode>,
        /// Continue from a checkpoint that carries optimizer state
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate keypoints for an audio file from one source pose
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        /// Clip directory (first frame), JSON list of [x, y], or driving.json
        #[arg(long)]
        source_keypoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Guidance scale
        #[arg(long)]
        s: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Diversity and beat consistency of generated clips
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Reference dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Generated clip directories, or directories of clips (repeatable)
        #[arg(long, required = true)]
        generated: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Reuse a trained autoencoder instead of fitting one
        #[arg(long)]
        autoencoder: Option<PathBuf>,
    },
    /// Warp a source image along a driving sequence
    Preview {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        driving: PathBuf,
        #[arg(long)]
        source_keypoints: PathBuf,
        /// PNG source image; a checkerboard canvas is used when omitted
        #[arg(long)]
        source_image: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
    },
}

fn resolve(cfg: &ConfigArgs) -> Result<RunConfig> {
    if let Some(p) = &cfg.config {
        require(p)?;
    }
    RunConfig::resolve(cfg.config.as_deref(), &cfg.overrides)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)))
    }
}

/// Exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json { .. } => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

/// The single stderr line printed on failure.
pub fn error_line(e: &Error) -> String {
    let mut v = json!({ "error": e.kind(), "message": e.to_string() });
    if let Some(p) = e.path() {
        v["path"] = Value::String(p.display().to_string());
    }
    v.to_string()
}

/// Sizes the global rayon pool from `GESTURE_DIFF_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeSynthetic { cfg, out, seed } => {
            let mut rc = resolve(&cfg)?;
            if let Some(s) = seed {
                rc.synthetic.seed = s;
            }
            cmd_make_synthetic(&rc, &out)
        }
        Command::Train {
            cfg,
            data,
            out,
            seed,
            mode,
            resume,
        } => {
            let mut rc = resolve(&cfg)?;
            if let Some(s) = seed {
                rc.train.seed = s;
            }
            if let Some(m) = mode {
                rc.train.prediction_mode = m;
            }
            cmd_train(rc, &data, &out, resume.as_deref())
        }
        Command::Generate {
            cfg,
            checkpoint,
            audio,
            source_keypoints,
            out,
            s,
            seed,
        } => {
            let mut rc = resolve(&cfg)?;
            if let Some(s) = s {
                rc.sampler.guidance_scale = s;
            }
            if let Some(seed) = seed {
                rc.generate.seed = seed;
            }
            cmd_generate(&rc, &checkpoint, &audio, &source_keypoints, &out)
        }
        Command::Eval {
            cfg,
            data,
            generated,
            out,
            autoencoder,
        } => cmd_eval(resolve(&cfg)?, &data, &generated, &out, autoencoder.as_deref()),
        Command::Preview {
            cfg,
            driving,
            source_keypoints,
            source_image,
            out,
            lambda,
        } => {
            let mut rc = resolve(&cfg)?;
            if let Some(l) = lambda {
                rc.preview.lambda = l;
            }
            cmd_preview(&rc, &driving, &source_keypoints, source_image.as_deref(), &out)
        }
    }
}

pub fn cmd_make_synthetic(rc: &RunConfig, out: &Path) -> Result<()> {
    let clips = make_synthetic_dataset(&rc.synthetic)?;
    write_synthetic_dataset(out, &clips)?;
    rc.write(out)?;
    println!("{}", json!({ "dataset": out, "clips": clips.len() }));
    Ok(())
}

pub fn cmd_train(mut rc: RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    require(data)?;
    if let Some(p) = resume {
        require(p)?;
    }
    let ds = load_dataset(data)?;
    rc.sync_model(ds.stats.num_keypoints());
    let fc = FeatureConfig::default();
    let feats = ds
        .dirs
        .iter()
        .zip(&ds.clips)
        .map(|(d, c)| cached_clip_features(d, c, &fc))
        .collect::<Result<Vec<_>>>()?;
    let windows = window_dataset_with_features(&ds.clips, &feats, &ds.stats, &rc.train)?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.model.config() != &rc.model {
                log::warn!("resuming with the checkpoint's model configuration");
            }
            let mut t = Trainer::resume(ckpt, windows)?;
            t.config_mut().max_steps = rc.train.max_steps;
            rc.model = *t.model().config();
            rc.train = *t.config();
            t
        }
        None => Trainer::new(rc.model, rc.train, rc.schedule, ds.stats.clone(), windows)?,
    };
    rc.write(out)?;
    let records = trainer.train(Some(out))?;
    let last = records.last().map(|r| r.loss);
    println!(
        "{}",
        json!({ "checkpoint": out.join(FINAL_CHECKPOINT), "steps": trainer.step(), "final_loss": last })
    );
    Ok(())
}

/// Reads one source pose from a clip directory, a JSON list of `[x, y]`
/// pairs, or a driving file (its first frame).
pub fn load_source_keypoints(path: &Path) -> Result<KeypointFrame> {
    require(path)?;
    if path.is_dir() {
        let clip = read_clip(path)?;
        return Ok(clip.keypoints.frame(0));
    }
    let v: Value = read_json(path)?;
    if v.is_array() {
        let coords: Vec<[f64; 2]> = serde_json::from_value(v).map_err(|e| Error::json(path, e))?;
        return Ok(KeypointFrame::new(coords));
    }
    let d: DrivingFile = serde_json::from_value(v).map_err(|e| Error::json(path, e))?;
    let first = d
        .frames
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("{}: driving file has no frames", path.display())))?;
    Ok(KeypointFrame::new(first.clone()))
}

pub fn cmd_generate(rc: &RunConfig, checkpoint: &Path, audio: &Path, source: &Path, out: &Path) -> Result<()> {
    require(checkpoint)?;
    require(audio)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let wav = load_wav(audio)?;
    let src = load_source_keypoints(source)?;
    let mut req = GenerationRequest::new(src, wav.clone(), rc.generate.seed);
    req.guidance_s = rc.sampler.guidance_scale;
    req.clamp_x0 = rc.sampler.clamp_x0;
    let g = generate_from_checkpoint(&ckpt, &req)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rc = *rc;
    rc.model = *ckpt.model.config();
    rc.schedule = ckpt.schedule;
    rc.write(out)?;
    DrivingFile::from_sequence(&g.keypoints).write(&out.join(DRIVING_FILE))?;
    let clip = GestureClip {
        id: "generated".into(),
        keypoints: g.keypoints.clone(),
        audio: wav,
    };
    write_clip(out, &clip)?;
    write_json(
        &out.join(GENERATION_FILE),
        &json!({
            "seed": req.seed,
            "guidance_s": req.guidance_s,
            "segment_starts": g.segment_starts,
            "timestamps": g.timestamps,
        }),
    )?;
    println!("{}", json!({ "driving": out.join(DRIVING_FILE), "frames": g.keypoints.len() }));
    Ok(())
}

fn generated_dirs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        require(p)?;
        if p.join(MANIFEST_FILE).is_file() {
            out.push(p.clone());
        } else {
            out.extend(clip_dirs(p)?);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

pub fn cmd_eval(
    mut rc: RunConfig,
    data: &Path,
    generated: &[PathBuf],
    out: &Path,
    autoencoder: Option<&Path>,
) -> Result<()> {
    require(data)?;
    let ds = load_dataset(data)?;
    rc.sync_model(ds.stats.num_keypoints());
    let n = rc.train.num_frames;
    let windows = |clips: &[GestureClip]| -> Result<Vec<Array2<f64>>> {
        let mut w = Vec::new();
        for c in clips {
            w.extend(tile_windows(ds.stats.normalize_array(c.keypoints.as_array())?.view(), n));
        }
        Ok(w)
    };
    let reference = windows(&ds.clips)?;
    if reference.is_empty() {
        return Err(Error::EmptyDataset);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let (ae, report) = match autoencoder {
        Some(p) => {
            require(p)?;
            let ae = Autoencoder::load(p)?;
            rc.autoencoder = *ae.config();
            (ae, None)
        }
        None => {
            let (ae, r) = train_autoencoder(&reference, &rc.autoencoder)?;
            ae.save(&out.join(AUTOENCODER_FILE))?;
            (ae, Some(r))
        }
    };

    let gen_clips = generated_dirs(generated)?
        .iter()
        .map(|d| read_clip(d))
        .collect::<Result<Vec<_>>>()?;
    let gen_windows = windows(&gen_clips)?;
    if gen_windows.is_empty() {
        return Err(Error::InvalidArgument(format!("generated clips are shorter than {n} frames")));
    }
    let gv: Vec<_> = gen_windows.iter().map(|w| w.view()).collect();
    let rv: Vec<_> = reference.iter().map(|w| w.view()).collect();
    let div = diversity(&gv, &rv, &ae, rc.eval.max_pairs, rc.eval.seed)?;

    let mut bcs = Vec::new();
    for c in &gen_clips {
        let audio = detect_audio_beats(&c.audio);
        if audio.is_empty() {
            log::warn!("clip '{}' has no audio beats; left out of BC", c.id);
            continue;
        }
        let motion = detect_motion_beats_with(&c.keypoints, &rc.eval.motion)?;
        bcs.push(beat_consistency(&audio, &motion, rc.eval.sigma_bc)?);
    }
    if bcs.is_empty() {
        return Err(Error::InvalidArgument("no generated clip has audio beats".into()));
    }
    let bc = bcs.iter().sum::<f64>() / bcs.len() as f64;
    rc.write(out)?;
    let metrics = MetricReport {
        div,
        bc,
        num_clips: gen_clips.len(),
        config: json!({ "eval": rc.eval, "autoencoder": rc.autoencoder, "autoencoder_report": report }),
    };
    write_json(&out.join(EVAL_FILE), &metrics)?;
    println!("{}", json!({ "div": div, "bc": bc, "num_clips": gen_clips.len() }));
    Ok(())
}

fn checkerboard(width: usize, height: usize) -> Result<ImageGrid> {
    ImageGrid::from_fn(width, height, 3, |x, y, _| if (x / 16 + y / 16) % 2 == 0 { 0.25 } else { 0.75 })
}

pub fn cmd_preview(rc: &RunConfig, driving: &Path, source_kp: &Path, image: Option<&Path>, out: &Path) -> Result<()> {
    require(driving)?;
    let seq = DrivingFile::read(driving)?.to_sequence()?;
    let src = load_source_keypoints(source_kp)?;
    let img = match image {
        Some(p) => {
            require(p)?;
            ImageGrid::load_png(p)?
        }
        None => checkerboard(rc.preview.width, rc.preview.height)?,
    };
    let meta = preview_sequence(&img, &src, &seq, out, rc.preview.lambda)?;
    let (overlay, _) = render_overlay(&src, &img);
    overlay.save_png(&out.join(SOURCE_OVERLAY_FILE))?;
    rc.write(out)?;
    println!(
        "{}",
        json!({ "frames": meta.num_frames - meta.skipped_frames.len(), "skipped": meta.skipped_frames.len() })
    );
    Ok(())
}
