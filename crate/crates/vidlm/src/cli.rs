//! Command-line front end: one binary, seven subcommands covering the whole
//! workflow from dataset synthesis through training to generation and
//! evaluation. Every command is deterministic given (config, seed).
//!
//! Artifacts live under the `--out` directory with fixed names (dataset,
//! codecs, checkpoints, logs), so commands compose without path plumbing:
//!
//! ```text
//! vidlm gen-data    --out runs/demo
//! vidlm train-codec --out runs/demo
//! vidlm train       --out runs/demo --steps 300
//! vidlm generate    --out runs/demo --task t2v --prompt "a red square moves left slowly"
//! vidlm eval        --out runs/demo --generated runs/demo/gen-t2v-0 --reference runs/demo/dataset.vlcs
//! ```
//!
//! `--config` names a TOML experiment file; bare relative names are also
//! looked up under `$VIDLM_CONFIG_DIR`. Missing sections fall back to the
//! desk-scale defaults, so an empty file is a valid experiment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::codec::{
    downsample, train_audio_codec, train_video_codec, AudioCodecConfig, CodecConfig, KMeansOpts,
    VideoClip,
};
use crate::error::{Error, Result};
use crate::eval::{frechet_distance, motion_fidelity, FeatureProjector, FrechetStats, FEATURE_DIM};
use crate::io::{
    append_log, checkpoint_from_lm, checkpoint_from_sr, lm_from_checkpoint, optimizer_state,
    read_audio_codec, read_checkpoint, read_clipset, read_toml, read_video_codec,
    sr_from_checkpoint, write_audio_codec, write_checkpoint, write_clipset, write_gif, write_toml,
    write_video_codec, write_video_grid, ClipRecord, ClipSet,
};
use crate::lm::{LanguageModel, ModelConfig, SamplerConfig};
use crate::pipeline::{extend, generate, ChainStage, GenerationRequest, ModelBundle, StageInput};
use crate::scheduler::Curriculum;
use crate::sequence::{task_spec, TaskKind};
use crate::superres::{SrConfig, SrModel};
use crate::synth::{make_dataset, SynthConfig};
use crate::train::{
    build_sr_examples, build_training_set, ClipView, SrTrainer, TrainOpts, Trainer,
};
use crate::vocab::{build_layout, VocabConfig, VocabLayout};

pub const CONFIG_DIR_ENV: &str = "VIDLM_CONFIG_DIR";

// ---------------------------------------------------------------------------
// Experiment configuration

/// The full experiment description. Every section has a desk-scale default,
/// so a config file only needs the sections it changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    pub video_codec: CodecConfig,
    pub audio_codec: AudioCodecConfig,
    pub synth: SynthConfig,
    pub kmeans: KMeansOpts,
    pub data: DataSection,
    pub train: TrainSection,
    pub sr: SrConfig,
    pub sr_train: SrTrainSection,
    pub sampler: SamplerConfig,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub clips: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tasks: Vec<String>,
    pub checkpoint_every: usize,
    /// Switch to high-quality-only data at this step (defaults to the
    /// standard two-phase image/video split when absent).
    pub finetune_start: Option<usize>,
    /// Train the base model on 2x spatially shrunk clips, leaving the full
    /// resolution to the upsampler.
    pub half_res: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SrTrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub feature_seed: u64,
}

impl Default for DataSection {
    fn default() -> DataSection {
        DataSection { clips: 64 }
    }
}

impl Default for TrainSection {
    fn default() -> TrainSection {
        TrainSection {
            steps: 300,
            batch_size: 4,
            lr: 3e-3,
            tasks: vec!["t2i".to_string(), "t2v".to_string()],
            checkpoint_every: 100,
            finetune_start: None,
            half_res: false,
        }
    }
}

impl Default for SrTrainSection {
    fn default() -> SrTrainSection {
        SrTrainSection { steps: 200, batch_size: 4, lr: 2e-3 }
    }
}

impl Default for EvalSection {
    fn default() -> EvalSection {
        EvalSection { feature_seed: 99 }
    }
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            vocab: VocabConfig::desk(),
            model: ModelConfig::desk(),
            video_codec: CodecConfig::desk(),
            audio_codec: AudioCodecConfig::desk(),
            synth: SynthConfig::desk(),
            kmeans: KMeansOpts::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            sr: desk_sr_for_synth(),
            sr_train: SrTrainSection::default(),
            sampler: SamplerConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Upsampler sized for the desk dataset: half-resolution latents up to the
/// full-resolution grid of a 17x32x32 clip.
fn desk_sr_for_synth() -> SrConfig {
    SrConfig {
        lr_shape: (5, 2, 2),
        hr_shape: (5, 4, 4),
        self_windows: [(1, 4, 2), (1, 2, 4), (5, 2, 2)],
        cross_windows: [(1, 2, 1), (1, 1, 2), (5, 1, 1)],
        ..SrConfig::desk()
    }
}

/// Locate and parse the experiment file: the path as given, else relative to
/// `$VIDLM_CONFIG_DIR`; no path at all means the built-in desk defaults.
pub fn resolve_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(p) = path else {
        if let Ok(dir) = std::env::var(CONFIG_DIR_ENV) {
            let fallback = Path::new(&dir).join("default.toml");
            if fallback.exists() {
                return read_toml(&fallback);
            }
        }
        return Ok(ExperimentConfig::default());
    };
    if p.exists() {
        return read_toml(p);
    }
    if p.is_relative() {
        if let Ok(dir) = std::env::var(CONFIG_DIR_ENV) {
            let under = Path::new(&dir).join(p);
            if under.exists() {
                return read_toml(&under);
            }
        }
    }
    Err(Error::config(format!(
        "config file {} not found (also tried ${CONFIG_DIR_ENV})",
        p.display()
    )))
}

// ---------------------------------------------------------------------------
// Argument grammar

#[derive(Debug, Parser)]
#[command(name = "vidlm", version, about = "Token video generation workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Synthesize the caption-paired moving-shape dataset.
    GenData(GenDataArgs),
    /// Fit the video and audio token codecs on the dataset.
    TrainCodec(TrainCodecArgs),
    /// Train the multi-task token model with grouped alternating batches.
    Train(TrainArgs),
    /// Train the token upsampler on full/half resolution pairs.
    TrainSr(TrainSrArgs),
    /// Generate clips from a trained model, optionally chaining tasks.
    Generate(GenerateArgs),
    /// Continue an input clip out to a target duration.
    Extend(ExtendArgs),
    /// Score a generated set against a reference set.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment TOML; bare names also resolve under $VIDLM_CONFIG_DIR.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for all artifacts of this run.
    #[arg(long, default_value = "runs/desk")]
    out: PathBuf,
    /// Master seed; reruns with the same config and seed are bit-identical.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Override the clip count from the config.
    #[arg(long)]
    clips: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainCodecArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset path (defaults to <out>/dataset.vlcs).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Rewrite the dataset with token grids filled in.
    #[arg(long)]
    tokenize: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Override the step budget from the config.
    #[arg(long)]
    steps: Option<usize>,
    /// Resume from this checkpoint, continuing its step counter exactly.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Dataset path (defaults to <out>/dataset.vlcs).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainSrArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    steps: Option<usize>,
    /// Resume from this checkpoint, continuing its step counter exactly.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Task tag: t2v, t2i, i2v, fp, inpaint, outpaint, stylize, a2v, v2a, avcont, uncond.
    #[arg(long, default_value = "t2v")]
    task: String,
    #[arg(long)]
    prompt: Option<String>,
    /// Steers sampling away from this text instead of the learned null.
    #[arg(long)]
    negative: Option<String>,
    /// Comma-separated follow-up tasks fed the previous stage's output.
    #[arg(long)]
    chain: Option<String>,
    /// Frame count (defaults to the dataset clip length; single-frame tasks to 1).
    #[arg(long)]
    frames: Option<usize>,
    /// Text guidance scale for sampling (and for the upsampler when active).
    #[arg(long)]
    guidance_text: Option<f64>,
    /// Low-resolution guidance scale for the upsampler.
    #[arg(long)]
    guidance_lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Conditioning clip for tasks that take one (i2v, fp, stylize, ...).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Which clip of --input to use.
    #[arg(long, default_value_t = 0)]
    input_index: usize,
    /// Run the token upsampler on the final stage (requires a trained upsampler).
    #[arg(long)]
    use_sr: bool,
}

#[derive(Debug, Args)]
struct ExtendArgs {
    #[command(flatten)]
    common: Common,
    /// Clip set holding the video to continue.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    input_index: usize,
    /// Target duration in seconds.
    #[arg(long)]
    seconds: f64,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Generated clips: a .vlcs file or a directory searched recursively.
    #[arg(long)]
    generated: PathBuf,
    /// Reference clips: a .vlcs file or a directory searched recursively.
    #[arg(long)]
    reference: PathBuf,
}

// ---------------------------------------------------------------------------
// Entry point

/// Parse and run; returns the process exit code (0 ok, 2 config, 3 data).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let res = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::TrainCodec(a) => cmd_train_codec(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::TrainSr(a) => cmd_train_sr(a),
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Extend(a) => cmd_extend(a),
        Cmd::Eval(a) => cmd_eval(a),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

fn dataset_path(out: &Path) -> PathBuf {
    out.join("dataset.vlcs")
}

fn video_codec_path(out: &Path) -> PathBuf {
    out.join("video.vlvc")
}

fn audio_codec_path(out: &Path) -> PathBuf {
    out.join("audio.vlac")
}

fn lm_path(out: &Path) -> PathBuf {
    out.join("lm.vlck")
}

fn sr_path(out: &Path) -> PathBuf {
    out.join("sr.vlck")
}

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn load_dataset(explicit: Option<&Path>, out: &Path) -> Result<ClipSet> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| dataset_path(out));
    if !path.exists() {
        return Err(Error::config(format!(
            "dataset {} not found; run gen-data first",
            path.display()
        )));
    }
    read_clipset(&path)
}

fn check_layout(found: u64, layout: &VocabLayout, context: &str) -> Result<()> {
    if found != layout.fingerprint() {
        return Err(Error::Fingerprint {
            expected: layout.fingerprint(),
            found,
            context: context.to_string(),
        });
    }
    Ok(())
}

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_sigint(_: libc::c_int) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

/// Route Ctrl-C to a flag the training loops poll between batches, so a
/// checkpoint always lands on a step boundary.
fn install_interrupt_flag() {
    unsafe {
        let mut sa: libc::sigaction = std::mem::zeroed();
        sa.sa_sigaction = on_sigint as extern "C" fn(libc::c_int) as usize;
        libc::sigemptyset(&mut sa.sa_mask);
        libc::sigaction(libc::SIGINT, &sa, std::ptr::null_mut());
    }
}

// ---------------------------------------------------------------------------
// gen-data

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = resolve_config(a.common.config.as_deref())?;
    let layout = build_layout(&cfg.vocab)?;
    ensure_out(&a.common.out)?;
    let n = a.clips.unwrap_or(cfg.data.clips);
    let clips = make_dataset(&cfg.synth, n, a.common.seed)?;
    let held = clips.iter().filter(|c| c.split == crate::synth::Split::Held).count();
    let hq = clips.iter().filter(|c| c.hq).count();
    let set = ClipSet {
        layout_fp: layout.fingerprint(),
        sample_rate: cfg.synth.sample_rate,
        clips: clips.iter().map(ClipRecord::from_synth).collect(),
    };
    let path = dataset_path(&a.common.out);
    write_clipset(&path, &set)?;
    println!(
        "wrote {}: {n} clips of {}x{}x{} ({held} held out, {hq} high-quality)",
        path.display(),
        cfg.synth.frames,
        cfg.synth.height,
        cfg.synth.width
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-codec

fn cmd_train_codec(a: TrainCodecArgs) -> Result<()> {
    let cfg = resolve_config(a.common.config.as_deref())?;
    let layout = build_layout(&cfg.vocab)?;
    ensure_out(&a.common.out)?;
    let mut set = load_dataset(a.data.as_deref(), &a.common.out)?;
    check_layout(set.layout_fp, &layout, "dataset vocabulary")?;

    let videos: Vec<VideoClip> = set.clips.iter().map(|c| c.video.clone()).collect();
    let waves: Vec<Vec<f64>> =
        set.clips.iter().filter_map(|c| c.audio.clone()).collect();
    let t0 = Instant::now();
    let vc = train_video_codec(&cfg.video_codec, &videos, &cfg.kmeans, a.common.seed)?;
    let vc_path = video_codec_path(&a.common.out);
    write_video_codec(&vc_path, &vc)?;
    println!("wrote {} (fingerprint {:016x})", vc_path.display(), vc.fingerprint());

    if waves.is_empty() {
        println!("no audio tracks; skipping the audio codec");
    } else {
        let ac = train_audio_codec(&cfg.audio_codec, &waves, &cfg.kmeans, a.common.seed ^ 1)?;
        let ac_path = audio_codec_path(&a.common.out);
        write_audio_codec(&ac_path, &ac)?;
        println!("wrote {} (fingerprint {:016x})", ac_path.display(), ac.fingerprint());
        if a.tokenize {
            for rec in &mut set.clips {
                rec.video_tokens = Some(vc.tokenize_video(&rec.video, &layout)?);
                if let Some(w) = &rec.audio {
                    rec.audio_tokens = Some(ac.tokenize_audio(w, &layout)?);
                }
            }
            let path = a.data.clone().unwrap_or_else(|| dataset_path(&a.common.out));
            write_clipset(&path, &set)?;
            println!("rewrote {} with token grids", path.display());
        }
    }
    println!("codec training took {:.1?}", t0.elapsed());
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn parse_tasks(names: &[String]) -> Result<Vec<TaskKind>> {
    names.iter().map(|s| s.parse()).collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(a.common.config.as_deref())?;
    let layout = build_layout(&cfg.vocab)?;
    ensure_out(&a.common.out)?;
    let mut set = load_dataset(a.data.as_deref(), &a.common.out)?;
    check_layout(set.layout_fp, &layout, "dataset vocabulary")?;
    let vc = read_video_codec(&video_codec_path(&a.common.out))?;
    let ac = read_audio_codec(&audio_codec_path(&a.common.out))?;

    if cfg.train.half_res {
        for rec in &mut set.clips {
            rec.video = downsample(&rec.video, 2)?;
        }
    }
    let tasks = parse_tasks(&cfg.train.tasks)?;
    let t0 = Instant::now();
    let training = build_training_set(
        set.clips.iter().map(ClipView::from),
        &tasks,
        &layout,
        &vc,
        &ac,
    )?;
    println!(
        "{} examples in {} groups ({:.1?} to tokenize)",
        training.len(),
        training.groups.len(),
        t0.elapsed()
    );

    let steps = a.steps.unwrap_or(cfg.train.steps);
    let curriculum = match cfg.train.finetune_start {
        Some(start) => Curriculum::with_finetune(steps, start)?,
        None => Curriculum::two_stage(steps),
    };
    let opts = TrainOpts {
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        seed: a.common.seed,
    };

    let resume_ck = match &a.resume {
        Some(path) => Some(read_checkpoint(path)?),
        None => None,
    };
    let model = match &resume_ck {
        Some(ck) => {
            if ck.kind != "lm" {
                return Err(Error::data(format!(
                    "checkpoint kind {} cannot resume base model training",
                    ck.kind
                )));
            }
            let model = lm_from_checkpoint(ck)?;
            check_layout(model.layout().fingerprint(), &layout, "resume checkpoint vocabulary")?;
            println!("resuming from step {} ({})", ck.step, a.resume.as_ref().unwrap().display());
            model
        }
        None => LanguageModel::new(cfg.model.clone(), layout.clone(), a.common.seed)?,
    };
    println!("model: {} parameters", model.param_count());

    let mut trainer = Trainer::new(model, training, curriculum, opts)?;
    if let Some(ck) = &resume_ck {
        let Some((m, v, step)) = optimizer_state(ck, trainer.model().params())? else {
            return Err(Error::data(
                "checkpoint has no optimizer state; cannot resume exactly".to_string(),
            ));
        };
        debug_assert_eq!(step as u64, ck.step);
        trainer.restore(m, v, step)?;
    }

    install_interrupt_flag();
    let log_path = a.common.out.join("train.log");
    let ck_path = lm_path(&a.common.out);
    let mut last_phase = usize::MAX;
    let t0 = Instant::now();
    while !trainer.is_done() {
        if INTERRUPTED.load(Ordering::SeqCst) {
            let ck = checkpoint_from_lm(
                trainer.model(),
                trainer.step_index() as u64,
                Some(trainer.optimizer()),
            );
            write_checkpoint(&ck_path, &ck)?;
            println!(
                "interrupted at step {}; checkpoint saved to {}",
                trainer.step_index(),
                ck_path.display()
            );
            return Ok(());
        }
        let entry = trainer.step()?;
        append_log(&log_path, &entry)?;
        if entry.phase != last_phase {
            println!("step {}: phase {} begins", entry.step, entry.phase);
            last_phase = entry.phase;
        }
        let done = trainer.step_index();
        if done % cfg.train.checkpoint_every == 0 || done == steps {
            let ck = checkpoint_from_lm(trainer.model(), done as u64, Some(trainer.optimizer()));
            write_checkpoint(&ck_path, &ck)?;
        }
        if done % 50 == 0 || done == steps {
            println!(
                "step {done}/{steps} group {} loss {:.4} ({:.1?})",
                entry.group,
                entry.loss,
                t0.elapsed()
            );
        }
    }
    println!("finished {steps} steps; checkpoint at {}", ck_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-sr

fn cmd_train_sr(a: TrainSrArgs) -> Result<()> {
    let cfg = resolve_config(a.common.config.as_deref())?;
    let layout = build_layout(&cfg.vocab)?;
    ensure_out(&a.common.out)?;
    let set = load_dataset(a.data.as_deref(), &a.common.out)?;
    check_layout(set.layout_fp, &layout, "dataset vocabulary")?;
    let vc = read_video_codec(&video_codec_path(&a.common.out))?;

    let t0 = Instant::now();
    let examples = build_sr_examples(set.clips.iter().map(ClipView::from), &layout, &vc)?;
    println!("{} resolution pairs ({:.1?} to tokenize)", examples.len(), t0.elapsed());

    let steps = a.steps.unwrap_or(cfg.sr_train.steps);
    let opts = TrainOpts {
        batch_size: cfg.sr_train.batch_size,
        lr: cfg.sr_train.lr,
        seed: a.common.seed,
    };
    let resume_ck = match &a.resume {
        Some(path) => Some(read_checkpoint(path)?),
        None => None,
    };
    let model = match &resume_ck {
        Some(ck) => {
            if ck.kind != "sr" {
                return Err(Error::data(format!(
                    "checkpoint kind {} cannot resume upsampler training",
                    ck.kind
                )));
            }
            let model = sr_from_checkpoint(ck)?;
            check_layout(model.layout().fingerprint(), &layout, "resume checkpoint vocabulary")?;
            println!("resuming from step {}", ck.step);
            model
        }
        None => SrModel::new(cfg.sr.clone(), layout.clone(), a.common.seed)?,
    };

    let mut trainer = SrTrainer::new(model, examples, steps, opts)?;
    if let Some(ck) = &resume_ck {
        let Some((m, v, step)) = optimizer_state(ck, trainer.model().params())? else {
            return Err(Error::data(
                "checkpoint has no optimizer state; cannot resume exactly".to_string(),
            ));
        };
        trainer.restore(m, v, step)?;
    }

    install_interrupt_flag();
    let log_path = a.common.out.join("sr-train.log");
    let ck_path = sr_path(&a.common.out);
    let t0 = Instant::now();
    while !trainer.is_done() {
        if INTERRUPTED.load(Ordering::SeqCst) {
            let ck = checkpoint_from_sr(
                trainer.model(),
                trainer.step_index() as u64,
                Some(trainer.optimizer()),
            );
            write_checkpoint(&ck_path, &ck)?;
            println!("interrupted at step {}; checkpoint saved", trainer.step_index());
            return Ok(());
        }
        let entry = trainer.step()?;
        append_log(&log_path, &entry)?;
        let done = trainer.step_index();
        if done % cfg.train.checkpoint_every == 0 || done == steps {
            let ck = checkpoint_from_sr(trainer.model(), done as u64, Some(trainer.optimizer()));
            write_checkpoint(&ck_path, &ck)?;
        }
        if done % 50 == 0 || done == steps {
            println!("step {done}/{steps} loss {:.4} ({:.1?})", entry.loss, t0.elapsed());
        }
    }
    println!("finished {steps} steps; checkpoint at {}", ck_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// generate

fn load_bundle(cfg: &ExperimentConfig, out: &Path, with_sr: bool) -> Result<ModelBundle> {
    let _ = cfg;
    let ck = read_checkpoint(&lm_path(out))?;
    let lm = lm_from_checkpoint(&ck)?;
    let video_codec = read_video_codec(&video_codec_path(out))?;
    let audio_codec = read_audio_codec(&audio_codec_path(out))?;
    let sr = if with_sr {
        let path = sr_path(out);
        if !path.exists() {
            return Err(Error::config(format!(
                "--use-sr needs an upsampler checkpoint at {}; run train-sr",
                path.display()
            )));
        }
        Some(sr_from_checkpoint(&read_checkpoint(&path)?)?)
    } else {
        None
    };
    let bundle = ModelBundle { lm, video_codec, audio_codec, sr };
    bundle.validate()?;
    Ok(bundle)
}

fn load_stage_input(path: Option<&Path>, index: usize) -> Result<(StageInput, Option<String>)> {
    let Some(p) = path else { return Ok((StageInput::default(), None)) };
    let set = read_clipset(p)?;
    let rec = set.clips.get(index).ok_or_else(|| {
        Error::data(format!("{} has {} clips, no index {index}", p.display(), set.clips.len()))
    })?;
    Ok((
        StageInput { video: Some(rec.video.clone()), audio: rec.audio.clone() },
        Some(rec.caption.clone()),
    ))
}

#[derive(Debug, Serialize)]
struct GenMeta {
    task: String,
    chain: Vec<String>,
    prompt: Option<String>,
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    layout_fp: String,
    video_codec_fp: String,
    audio_codec_fp: String,
    visual_tokens: usize,
    sr_tokens: usize,
    audio_samples: usize,
    elapsed_ms: u64,
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let cfg = resolve_config(a.common.config.as_deref())?;
    let bundle = load_bundle(&cfg, &a.common.out, a.use_sr)?;
    let kind: TaskKind = a.task.parse()?;

    let chain_names: Vec<String> = match &a.chain {
        Some(s) => s
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect(),
        None => Vec::new(),
    };
    let mut chain = Vec::new();
    for name in &chain_names {
        let stage_kind: TaskKind = name.parse()?;
        chain.push(ChainStage {
            task: name.clone(),
            prompt: if task_spec(stage_kind).uses_text { a.prompt.clone() } else { None },
            frames: None,
        });
    }

    // The request is sized by the dataset geometry; the upsampler doubles
    // the spatial side, so its runs start from the half-resolution grid.
    let (mut height, mut width) = (cfg.synth.height, cfg.synth.width);
    if a.use_sr {
        (height, width) = (height / 2, width / 2);
    }
    let frames = a.frames.unwrap_or(if task_spec(kind).open_ended { 1 } else { cfg.synth.frames });
    let sampler = SamplerConfig {
        temperature: a.temperature.unwrap_or(cfg.sampler.temperature),
        top_k: a.top_k.unwrap_or(cfg.sampler.top_k),
        guidance: a.guidance_text.unwrap_or(cfg.sampler.guidance),
        seed: a.common.seed,
    };
    let req = GenerationRequest {
        task: a.task.clone(),
        // Text routes only to the stages whose task reads it.
        prompt: if task_spec(kind).uses_text { a.prompt.clone() } else { None },
        negative_prompt: a.negative.clone(),
        prompt_rewrite: None,
        frames,
        height,
        width,
        input: a.input.as_ref().map(|p| p.display().to_string()),
        sampler,
        use_sr: a.use_sr,
        sr_guidance_text: a.guidance_text,
        sr_guidance_lr: a.guidance_lr,
        res_tag: None,
        source_tag: None,
        chain,
    };
    let (input, _) = load_stage_input(a.input.as_deref(), a.input_index)?;

    let t0 = Instant::now();
    let clip = generate(&bundle, &req, &input)?;
    let elapsed = t0.elapsed();

    let tag = if chain_names.is_empty() {
        a.task.clone()
    } else {
        format!("{}+{}", a.task, chain_names.join("+"))
    };
    let dir = a.common.out.join(format!("gen-{tag}-{}", a.common.seed));
    ensure_out(&dir)?;
    write_toml(&dir.join("request.toml"), &req)?;

    if let Some(video) = &clip.video {
        let record = ClipRecord {
            caption: clip.prompt.clone().unwrap_or_default(),
            hq: false,
            split: crate::synth::Split::Held,
            scene: None,
            video: video.clone(),
            audio: clip.audio.clone(),
            video_tokens: clip.sr_tokens.clone().or_else(|| clip.base_tokens.clone()),
            audio_tokens: None,
        };
        let set = ClipSet {
            layout_fp: bundle.lm.layout().fingerprint(),
            sample_rate: bundle.audio_codec.config().sample_rate,
            clips: vec![record],
        };
        write_clipset(&dir.join("clip.vlcs"), &set)?;
        write_gif(&dir.join("clip.gif"), video)?;
    }
    if let Some(grid) = &clip.base_tokens {
        write_video_grid(&dir.join("tokens.vlgr"), grid)?;
    }
    if let Some(grid) = &clip.sr_tokens {
        write_video_grid(&dir.join("tokens-sr.vlgr"), grid)?;
    }

    let meta = GenMeta {
        task: a.task.clone(),
        chain: chain_names,
        prompt: clip.prompt.clone(),
        seed: a.common.seed,
        frames,
        height,
        width,
        layout_fp: format!("{:016x}", bundle.lm.layout().fingerprint()),
        video_codec_fp: format!("{:016x}", bundle.video_codec.fingerprint()),
        audio_codec_fp: format!("{:016x}", bundle.audio_codec.fingerprint()),
        visual_tokens: clip.base_tokens.as_ref().map_or(0, |g| g.len()),
        sr_tokens: clip.sr_tokens.as_ref().map_or(0, |g| g.len()),
        audio_samples: clip.audio.as_ref().map_or(0, Vec::len),
        elapsed_ms: elapsed.as_millis() as u64,
    };
    write_toml(&dir.join("meta.toml"), &meta)?;

    match &clip.video {
        Some(v) => println!(
            "wrote {}: {} frames of {}x{} in {:.1?}",
            dir.display(),
            v.t(),
            v.h(),
            v.w(),
            elapsed
        ),
        None => println!(
            "wrote {}: audio only ({} samples) in {:.1?}",
            dir.display(),
            meta.audio_samples,
            elapsed
        ),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// extend

fn cmd_extend(a: ExtendArgs) -> Result<()> {
    let cfg = resolve_config(a.common.config.as_deref())?;
    let bundle = load_bundle(&cfg, &a.common.out, false)?;
    let set = read_clipset(&a.input)?;
    let rec = set.clips.get(a.input_index).ok_or_else(|| {
        Error::data(format!(
            "{} has {} clips, no index {}",
            a.input.display(),
            set.clips.len(),
            a.input_index
        ))
    })?;

    let sampler = SamplerConfig {
        temperature: a.temperature.unwrap_or(cfg.sampler.temperature),
        top_k: a.top_k.unwrap_or(cfg.sampler.top_k),
        guidance: 1.0,
        seed: a.common.seed,
    };
    let t0 = Instant::now();
    let video = extend(&bundle, &rec.video, None, a.seconds, &sampler)?;
    let dir = a.common.out.join(format!("extend-{}", a.common.seed));
    ensure_out(&dir)?;
    let out_set = ClipSet {
        layout_fp: bundle.lm.layout().fingerprint(),
        sample_rate: set.sample_rate,
        clips: vec![ClipRecord {
            caption: rec.caption.clone(),
            hq: false,
            split: crate::synth::Split::Held,
            scene: None,
            video: video.clone(),
            audio: None,
            video_tokens: None,
            audio_tokens: None,
        }],
    };
    write_clipset(&dir.join("clip.vlcs"), &out_set)?;
    write_gif(&dir.join("clip.gif"), &video)?;
    println!(
        "extended {} -> {} frames ({:.1}s at {} fps) in {:.1?}; wrote {}",
        rec.video.t(),
        video.t(),
        video.t() as f64 / video.fps as f64,
        video.fps,
        t0.elapsed(),
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

/// A clip set on disk plus the task tag of the request that produced it,
/// when one is recorded alongside.
fn collect_sets(path: &Path) -> Result<Vec<(PathBuf, Option<String>)>> {
    let mut found = Vec::new();
    if path.is_file() {
        found.push((path.to_path_buf(), sibling_task(path)));
        return Ok(found);
    }
    if !path.is_dir() {
        return Err(Error::config(format!("{} is neither a file nor a directory", path.display())));
    }
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> =
            std::fs::read_dir(&dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "vlcs") {
                found.push((p.clone(), sibling_task(&p)));
            }
        }
    }
    found.sort();
    Ok(found)
}

fn sibling_task(clip_path: &Path) -> Option<String> {
    #[derive(Deserialize)]
    struct TaskOnly {
        task: String,
    }
    let req = clip_path.parent()?.join("request.toml");
    let parsed: TaskOnly = read_toml(&req).ok()?;
    Some(parsed.task)
}

#[derive(Default)]
struct SetSummary {
    clips: usize,
    visual_tokens: usize,
    audio_tokens: usize,
    untokenized: usize,
    matched: usize,
    parsed: usize,
}

fn summarize(
    sets: &[(PathBuf, Option<String>)],
    projector: &FeatureProjector,
) -> Result<(FrechetStats, SetSummary, Vec<(String, SetSummary, FrechetStats)>)> {
    let mut stats = FrechetStats::new(FEATURE_DIM);
    let mut total = SetSummary::default();
    let mut by_task: Vec<(String, SetSummary, FrechetStats)> = Vec::new();
    for (path, task) in sets {
        let set = read_clipset(path)?;
        let label = task.clone().unwrap_or_else(|| "unlabeled".to_string());
        let slot = match by_task.iter().position(|(t, _, _)| *t == label) {
            Some(i) => i,
            None => {
                by_task.push((label, SetSummary::default(), FrechetStats::new(FEATURE_DIM)));
                by_task.len() - 1
            }
        };
        for rec in &set.clips {
            let feats = projector.features(&rec.video)?;
            stats.push(&feats)?;
            by_task[slot].2.push(&feats)?;
            for s in [&mut total, &mut by_task[slot].1] {
                s.clips += 1;
                match (&rec.video_tokens, &rec.audio_tokens) {
                    (None, None) => s.untokenized += 1,
                    (v, a) => {
                        s.visual_tokens += v.as_ref().map_or(0, |g| g.len());
                        s.audio_tokens += a.as_ref().map_or(0, |g| g.tokens.len());
                    }
                }
                if !rec.caption.is_empty() {
                    if let Ok(hit) = motion_fidelity(&rec.video, &rec.caption) {
                        s.parsed += 1;
                        if hit {
                            s.matched += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((stats, total, by_task))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = resolve_config(a.common.config.as_deref())?;
    ensure_out(&a.common.out)?;
    let projector = FeatureProjector::new(cfg.eval.feature_seed);

    let gen_sets = collect_sets(&a.generated)?;
    let ref_sets = collect_sets(&a.reference)?;
    if gen_sets.is_empty() || ref_sets.is_empty() {
        return Err(Error::data("evaluation needs non-empty generated and reference sets".to_string()));
    }
    let (gen_stats, gen_sum, by_task) = summarize(&gen_sets, &projector)?;
    let (ref_stats, ref_sum, _) = summarize(&ref_sets, &projector)?;

    let mut report = String::new();
    let _ = writeln!(report, "reference: {} clips from {} file(s)", ref_sum.clips, ref_sets.len());
    let _ = writeln!(report, "generated: {} clips from {} file(s)", gen_sum.clips, gen_sets.len());
    match frechet_distance(&ref_stats, &gen_stats) {
        Ok(d) => {
            let _ = writeln!(
                report,
                "frechet distance: {d:.6} (reliable: {})",
                gen_stats.is_reliable() && ref_stats.is_reliable()
            );
        }
        Err(e) => {
            let _ = writeln!(report, "frechet distance: n/a ({e})");
        }
    }
    match gen_sum.parsed {
        0 => {
            let _ = writeln!(report, "motion fidelity: no captioned clips");
        }
        n => {
            let _ = writeln!(
                report,
                "motion fidelity: {}/{} = {:.1}%",
                gen_sum.matched,
                n,
                100.0 * gen_sum.matched as f64 / n as f64
            );
        }
    }
    let _ = writeln!(
        report,
        "tokens: generated visual {} audio {} (untokenized clips {}); reference visual {} audio {} (untokenized clips {})",
        gen_sum.visual_tokens,
        gen_sum.audio_tokens,
        gen_sum.untokenized,
        ref_sum.visual_tokens,
        ref_sum.audio_tokens,
        ref_sum.untokenized
    );
    let _ = writeln!(report, "per task:");
    for (label, s, stats) in &by_task {
        let frechet = frechet_distance(&ref_stats, stats)
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|_| "n/a".to_string());
        let fidelity = if s.parsed > 0 {
            format!("{}/{} = {:.1}%", s.matched, s.parsed, 100.0 * s.matched as f64 / s.parsed as f64)
        } else {
            "n/a".to_string()
        };
        let _ = writeln!(
            report,
            "  {label}: {} clips, fidelity {fidelity}, frechet {frechet}, visual tokens {}, audio tokens {}",
            s.clips, s.visual_tokens, s.audio_tokens
        );
    }

    print!("{report}");
    let report_path = a.common.out.join("eval-report.txt");
    std::fs::write(&report_path, &report)?;
    println!("report written to {}", report_path.display());
    Ok(())
}
