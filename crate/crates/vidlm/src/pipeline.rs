//! Generation orchestration: a request plus a model bundle in, pixels out.
//!
//! Every stage follows the same road: encode the conditioning into tokens,
//! build the task prefix, decode autoregressively, optionally upsample the
//! token grid, then detokenize. Long videos come from repeated frame
//! prediction over a re-tokenized pixel tail, and task chains feed each
//! stage's decoded pixels into the next stage's encoder, so every stage sees
//! the same kind of input it would see at training time.

use ndarray::{Array3, Array4, Axis};

use crate::codec::{
    apply_mask, latent_shape, pack_structure, MaskRegion, TokenGrid, VideoClip,
    DEFAULT_FLOW_SCALE, MASK_FILL,
};
use crate::error::{Error, Result};
use crate::eval::dominant_motion;
use crate::lm::{generate_tokens_guided, LanguageModel, SamplerConfig};
use crate::sequence::{build_sequence, decode_script, task_spec, SequenceInputs, TaskKind};
use crate::superres::{SrModel, SrSampler};
use crate::synth::tokenize_caption;
use crate::util::Fingerprint;
use crate::vocab::TokenId;

// ---------------------------------------------------------------------------
// Model bundle

/// Everything generation needs. All models must agree on the vocabulary.
pub struct ModelBundle {
    pub lm: LanguageModel,
    pub video_codec: crate::codec::VideoCodec,
    pub audio_codec: crate::codec::AudioCodec,
    pub sr: Option<SrModel>,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        let lc = self.lm.layout().config();
        if lc.visual_count as usize != self.video_codec.config().code_count {
            return Err(Error::config(format!(
                "vocabulary has {} visual ids, video codec {} codes",
                lc.visual_count,
                self.video_codec.config().code_count
            )));
        }
        if lc.audio_levels as usize != self.audio_codec.config().levels
            || lc.audio_codes_per_level as usize != self.audio_codec.config().code_count
        {
            return Err(Error::config(format!(
                "vocabulary has {}x{} audio ids, audio codec {}x{}",
                lc.audio_levels,
                lc.audio_codes_per_level,
                self.audio_codec.config().levels,
                self.audio_codec.config().code_count
            )));
        }
        if let Some(sr) = &self.sr {
            if sr.layout().fingerprint() != self.lm.layout().fingerprint() {
                return Err(Error::Fingerprint {
                    expected: self.lm.layout().fingerprint(),
                    found: sr.layout().fingerprint(),
                    context: "upsampler vocabulary".to_string(),
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Requests

/// One follow-up stage of a request; consumes the previous stage's output.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ChainStage {
    pub task: String,
    #[serde(default)]
    pub prompt: Option<String>,
    /// Target frame count; defaults to the incoming clip's length.
    #[serde(default)]
    pub frames: Option<usize>,
}

/// A complete generation request; serializable as a config file.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GenerationRequest {
    pub task: String,
    #[serde(default)]
    pub prompt: Option<String>,
    /// Replaces the guidance base side instead of the learned null text.
    #[serde(default)]
    pub negative_prompt: Option<String>,
    /// Overrides the prompt fed to the model; the original stays on record.
    #[serde(default)]
    pub prompt_rewrite: Option<String>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Input clip path; resolved by the caller, ignored by `generate`.
    #[serde(default)]
    pub input: Option<String>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub use_sr: bool,
    /// Override the upsampler's text guidance scale for this request.
    #[serde(default)]
    pub sr_guidance_text: Option<f64>,
    /// Override the upsampler's low-res guidance scale for this request.
    #[serde(default)]
    pub sr_guidance_lr: Option<f64>,
    #[serde(default)]
    pub res_tag: Option<u8>,
    #[serde(default)]
    pub source_tag: Option<u8>,
    #[serde(default)]
    pub chain: Vec<ChainStage>,
}

/// Conditioning data for one stage.
#[derive(Debug, Clone, Default)]
pub struct StageInput {
    pub video: Option<VideoClip>,
    pub audio: Option<Vec<f64>>,
}

/// The decoded result of a request, with its token grids kept around.
#[derive(Debug, Clone)]
pub struct GeneratedClip {
    pub video: Option<VideoClip>,
    pub audio: Option<Vec<f64>>,
    pub base_tokens: Option<TokenGrid>,
    pub sr_tokens: Option<TokenGrid>,
    /// The prompt that actually conditioned the model.
    pub prompt: Option<String>,
}

fn stage_seed(base: u64, stage: usize) -> u64 {
    let mut f = Fingerprint::new("gen-stage");
    f.push_u64(base).push_u64(stage as u64);
    f.finish()
}

// ---------------------------------------------------------------------------
// Structure estimation

/// Estimate flow and depth from pixels: the dominant motion is painted as a
/// constant velocity over foreground pixels (zero elsewhere), and depth is a
/// luminance proxy. On rendered scenes this reproduces the analytic flow's
/// support and direction.
pub fn estimate_structure(clip: &VideoClip) -> Result<(Array4<f64>, Array3<f64>)> {
    let (t, h, w, _) = clip.frames.dim();
    let (vx, vy) = dominant_motion(clip).unwrap_or((0.0, 0.0));
    // Background reference: per-channel median of the first frame.
    let mut bg = [0.0f64; 3];
    for (c, slot) in bg.iter_mut().enumerate() {
        let mut vals: Vec<f64> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| clip.frames[[0, y, x, c]])
            .collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        *slot = vals[vals.len() / 2];
    }
    let mut flow = Array4::zeros((t, h, w, 2));
    let mut depth = Array3::zeros((t, h, w));
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let px = |c: usize| clip.frames[[ti, y, x, c]];
                let fg: f64 = (0..3).map(|c| (px(c) - bg[c]).abs()).sum();
                if fg > 0.15 {
                    flow[[ti, y, x, 0]] = vx;
                    flow[[ti, y, x, 1]] = vy;
                }
                depth[[ti, y, x]] = 0.2989 * px(0) + 0.5870 * px(1) + 0.1140 * px(2);
            }
        }
    }
    Ok((flow, depth))
}

// ---------------------------------------------------------------------------
// Single-stage generation

struct StagePlan<'a> {
    kind: TaskKind,
    prompt: Option<&'a str>,
    negative: Option<&'a str>,
    frames: usize,
    height: usize,
    width: usize,
    use_sr: bool,
    sr_guidance_text: Option<f64>,
    sr_guidance_lr: Option<f64>,
    res_tag: Option<u8>,
    source_tag: Option<u8>,
    sampler: SamplerConfig,
}

fn caption_ids(models: &ModelBundle, text: &str) -> Result<Vec<TokenId>> {
    tokenize_caption(models.lm.layout(), text)
}

fn require_video<'a>(input: &'a StageInput, kind: TaskKind) -> Result<&'a VideoClip> {
    input
        .video
        .as_ref()
        .ok_or_else(|| Error::data(format!("task {kind} needs an input clip")))
}

/// Trim a conditioning grid to the leading one-second context window, the
/// same slice continuation examples train on. Shorter grids pass through.
fn context_rows(grid: TokenGrid, cfg: &crate::codec::CodecConfig) -> TokenGrid {
    let ctx_latent = 1 + (overlap_frames(cfg) - 1) / cfg.temporal_factor;
    if grid.shape.0 > ctx_latent {
        split_grid(&grid, ctx_latent).expect("ctx_latent is positive and below t").0
    } else {
        grid
    }
}

fn run_stage(models: &ModelBundle, plan: &StagePlan<'_>, input: &StageInput) -> Result<GeneratedClip> {
    let layout = models.lm.layout().clone();
    let vc = &models.video_codec;
    let ac = &models.audio_codec;
    let spec = task_spec(plan.kind);

    if spec.open_ended && plan.frames != 1 {
        return Err(Error::config(format!(
            "task {} produces a single frame, not {}",
            plan.kind, plan.frames
        )));
    }

    let text_ids = match (spec.uses_text, plan.prompt) {
        (true, Some(p)) => Some(caption_ids(models, p)?),
        (true, None) => Err(Error::data(format!("task {} needs a prompt", plan.kind)))?,
        (false, Some(_)) => Err(Error::config(format!(
            "task {} does not take a prompt",
            plan.kind
        )))?,
        (false, None) => None,
    };
    let negative_ids = match plan.negative {
        Some(n) if spec.uses_text => Some(caption_ids(models, n)?),
        Some(_) => {
            return Err(Error::config(format!(
                "task {} has no text channel for a negative prompt",
                plan.kind
            )))
        }
        None => None,
    };

    // Conditioning tokens, task by task. Where the conditioning is a true
    // temporal prefix of the target (the image for image-to-video, the
    // context window for continuation), its tokens are also teacher-forced
    // into the output: the causal codec makes a clip's leading latent
    // frames identical to the prefix tokenized alone, so training sees the
    // same copy-then-continue structure that forcing reproduces here.
    let mut visual_in: Option<TokenGrid> = None;
    let mut audio_in: Option<crate::codec::AudioTokens> = None;
    let mut forced: Vec<u32> = Vec::new();
    match plan.kind {
        TaskKind::Uncond | TaskKind::TextToVideo | TaskKind::TextToImage => {}
        TaskKind::ImageToVideo => {
            let v = require_video(input, plan.kind)?;
            let grid = vc.tokenize_image(&v.first_frame(), &layout)?;
            forced = grid.tokens.clone();
            visual_in = Some(grid);
        }
        TaskKind::FramePrediction => {
            let v = require_video(input, plan.kind)?;
            let ctx = context_rows(vc.tokenize_video(v, &layout)?, vc.config());
            forced = ctx.tokens.clone();
            visual_in = Some(ctx);
        }
        TaskKind::Inpaint => {
            let v = require_video(input, plan.kind)?;
            let masked = apply_mask(v, MaskRegion::CenterBox, MASK_FILL);
            visual_in = Some(vc.tokenize_video(&masked, &layout)?);
        }
        TaskKind::Outpaint => {
            let v = require_video(input, plan.kind)?;
            let masked = apply_mask(v, MaskRegion::OutsideCenterBox, MASK_FILL);
            visual_in = Some(vc.tokenize_video(&masked, &layout)?);
        }
        TaskKind::Stylize => {
            let v = require_video(input, plan.kind)?;
            let (flow, depth) = estimate_structure(v)?;
            let packed = pack_structure(&flow, &depth, DEFAULT_FLOW_SCALE, v.fps)?;
            visual_in = Some(vc.tokenize_video(&packed, &layout)?);
        }
        TaskKind::AudioToVideo => {
            let a = input
                .audio
                .as_ref()
                .ok_or_else(|| Error::data("audio-to-video needs input audio".to_string()))?;
            audio_in = Some(ac.tokenize_audio(a, &layout)?);
        }
        TaskKind::VideoToAudio => {
            let v = require_video(input, plan.kind)?;
            visual_in = Some(vc.tokenize_video(v, &layout)?);
        }
        TaskKind::AudioVideoContinue => {
            let v = require_video(input, plan.kind)?;
            let ctx = context_rows(vc.tokenize_video(v, &layout)?, vc.config());
            forced = ctx.tokens.clone();
            visual_in = Some(ctx);
            let a = input
                .audio
                .as_ref()
                .ok_or_else(|| Error::data("continuation needs input audio".to_string()))?;
            let ctx_samples = ((overlap_frames(vc.config()) as f64 / vc.config().fps as f64)
                * ac.config().sample_rate as f64)
                .round() as usize;
            let head = &a[..ctx_samples.min(a.len())];
            audio_in = Some(ac.tokenize_audio(head, &layout)?);
        }
    }

    // Output sizes.
    let (visual_count, latent) = if spec.visual_out {
        let shape = latent_shape(vc.config(), plan.frames, plan.height, plan.width)?;
        (shape.0 * shape.1 * shape.2, Some(shape))
    } else {
        (0, None)
    };
    let audio_frames = if spec.audio_out {
        let seconds = plan.frames as f64 / vc.config().fps as f64;
        let samples = (seconds * ac.config().sample_rate as f64).round() as usize;
        ac.config().frame_count(samples)
    } else {
        0
    };
    let levels = layout.config().audio_levels;

    let prefix = build_sequence(
        &layout,
        plan.kind,
        &SequenceInputs {
            text: text_ids.as_deref(),
            visual_in: visual_in.as_ref(),
            audio_in: audio_in.as_ref(),
            visual_out: None,
            audio_out: None,
            res: plan.res_tag,
            source: plan.source_tag,
        },
    )?;
    let baseline = match &negative_ids {
        Some(neg) => Some(build_sequence(
            &layout,
            plan.kind,
            &SequenceInputs {
                text: Some(neg),
                visual_in: visual_in.as_ref(),
                audio_in: audio_in.as_ref(),
                visual_out: None,
                audio_out: None,
                res: plan.res_tag,
                source: plan.source_tag,
            },
        )?),
        None => None,
    };

    let script = decode_script(plan.kind, visual_count, audio_frames, levels)?;
    if forced.len() > visual_count {
        return Err(Error::shape(format!(
            "teacher-forced prefix of {} tokens exceeds the {} visual outputs",
            forced.len(),
            visual_count
        )));
    }
    let out = generate_tokens_guided(
        &models.lm,
        &prefix,
        baseline.as_ref(),
        &forced,
        &script[forced.len()..],
        &plan.sampler,
    )?;

    // Split the flat output back into modalities.
    let mut cursor = 0;
    let base_tokens = if spec.visual_out {
        let latent = latent.unwrap();
        let grid = TokenGrid {
            shape: latent,
            tokens: out[..visual_count].to_vec(),
            codec_fp: vc.fingerprint(),
        };
        cursor = visual_count;
        if !spec.open_ended {
            cursor += 1; // closer
        }
        Some(grid)
    } else {
        None
    };
    let audio_tokens = if spec.audio_out {
        if spec.visual_out {
            cursor += 1; // second-modality opener
        }
        let n = audio_frames * levels as usize;
        let toks = out[cursor..cursor + n].to_vec();
        Some(crate::codec::AudioTokens {
            levels: levels as usize,
            frames: audio_frames,
            tokens: toks,
            codec_fp: ac.fingerprint(),
        })
    } else {
        None
    };

    let (sr_tokens, video) = match &base_tokens {
        Some(grid) => {
            if plan.use_sr {
                let sr = models
                    .sr
                    .as_ref()
                    .ok_or_else(|| Error::config("request asks for upsampling but the bundle has no upsampler".to_string()))?;
                let mut sr_sampler =
                    SrSampler::from_config(sr.config(), stage_seed(plan.sampler.seed, usize::MAX));
                if let Some(s) = plan.sr_guidance_text {
                    sr_sampler.guidance_text = s;
                }
                if let Some(s) = plan.sr_guidance_lr {
                    sr_sampler.guidance_lr = s;
                }
                let hr = sr.sample(grid, text_ids.as_deref(), &sr_sampler)?;
                let video = vc.detokenize_video(&hr, &layout)?;
                (Some(hr), Some(video))
            } else {
                (None, Some(vc.detokenize_video(grid, &layout)?))
            }
        }
        None => (None, None),
    };
    let audio = match &audio_tokens {
        Some(toks) => Some(ac.detokenize_audio(toks, &layout)?),
        None => None,
    };

    Ok(GeneratedClip {
        video,
        audio,
        base_tokens,
        sr_tokens,
        prompt: plan.prompt.map(str::to_string),
    })
}

// ---------------------------------------------------------------------------
// Public entry points

/// Run a request, including any chained follow-up stages. Deterministic in
/// the request (each stage derives its own seed from the sampler seed).
pub fn generate(models: &ModelBundle, req: &GenerationRequest, input: &StageInput) -> Result<GeneratedClip> {
    models.validate()?;
    let kind: TaskKind = req.task.parse()?;
    let effective = req.prompt_rewrite.as_deref().or(req.prompt.as_deref());
    let plan = StagePlan {
        kind,
        prompt: effective,
        negative: req.negative_prompt.as_deref(),
        frames: req.frames,
        height: req.height,
        width: req.width,
        use_sr: req.use_sr && req.chain.is_empty(),
        sr_guidance_text: req.sr_guidance_text,
        sr_guidance_lr: req.sr_guidance_lr,
        res_tag: req.res_tag,
        source_tag: req.source_tag,
        sampler: SamplerConfig {
            seed: stage_seed(req.sampler.seed, 0),
            ..req.sampler.clone()
        },
    };
    let mut current = run_stage(models, &plan, input)?;
    for (i, stage) in req.chain.iter().enumerate() {
        let next_input = StageInput {
            video: current.video.clone(),
            audio: current.audio.clone(),
        };
        if next_input.video.is_none() && next_input.audio.is_none() {
            return Err(Error::data(format!(
                "chain stage {} has no upstream output to consume",
                i + 1
            )));
        }
        let kind: TaskKind = stage.task.parse()?;
        let (frames, height, width) = match &next_input.video {
            Some(v) => (stage.frames.unwrap_or(v.t()), v.h(), v.w()),
            None => (
                stage.frames.ok_or_else(|| {
                    Error::config(format!("chain stage {} needs an explicit frame count", i + 1))
                })?,
                req.height,
                req.width,
            ),
        };
        let plan = StagePlan {
            kind,
            prompt: stage.prompt.as_deref(),
            negative: None,
            frames,
            height,
            width,
            // Upsampling applies to the chain's final product only.
            use_sr: req.use_sr && i + 1 == req.chain.len(),
            sr_guidance_text: req.sr_guidance_text,
            sr_guidance_lr: req.sr_guidance_lr,
            res_tag: None,
            source_tag: None,
            sampler: SamplerConfig {
                seed: stage_seed(req.sampler.seed, i + 1),
                ..req.sampler.clone()
            },
        };
        current = run_stage(models, &plan, &next_input)?;
    }
    Ok(current)
}

/// Run an explicit stage list against an initial input. An empty list is
/// the identity on the input.
pub fn chain(
    models: &ModelBundle,
    stages: &[ChainStage],
    input: &StageInput,
    target: (usize, usize, usize),
    sampler: &SamplerConfig,
) -> Result<GeneratedClip> {
    let Some((first, rest)) = stages.split_first() else {
        return Ok(GeneratedClip {
            video: input.video.clone(),
            audio: input.audio.clone(),
            base_tokens: None,
            sr_tokens: None,
            prompt: None,
        });
    };
    let req = GenerationRequest {
        task: first.task.clone(),
        prompt: first.prompt.clone(),
        negative_prompt: None,
        prompt_rewrite: None,
        frames: first.frames.unwrap_or(target.0),
        height: target.1,
        width: target.2,
        input: None,
        sampler: sampler.clone(),
        use_sr: false,
        sr_guidance_text: None,
        sr_guidance_lr: None,
        res_tag: None,
        source_tag: None,
        chain: rest.to_vec(),
    };
    generate(models, &req, input)
}

// ---------------------------------------------------------------------------
// Long-video extension

/// Split a grid along time; both halves keep the codec fingerprint and are
/// meant for sequence building, not for decoding on their own.
pub fn split_grid(grid: &TokenGrid, t_head: usize) -> Result<(TokenGrid, TokenGrid)> {
    let (t, h, w) = grid.shape;
    if t_head == 0 || t_head >= t {
        return Err(Error::shape(format!("cannot split {t} latent frames at {t_head}")));
    }
    let cut = t_head * h * w;
    Ok((
        TokenGrid {
            shape: (t_head, h, w),
            tokens: grid.tokens[..cut].to_vec(),
            codec_fp: grid.codec_fp,
        },
        TokenGrid {
            shape: (t - t_head, h, w),
            tokens: grid.tokens[cut..].to_vec(),
            codec_fp: grid.codec_fp,
        },
    ))
}

/// Pixel frames one conditioning window covers: the smallest 1+k*tf ≥ fps,
/// one second of video aligned to the codec's frame grouping.
pub fn overlap_frames(cfg: &crate::codec::CodecConfig) -> usize {
    let tf = cfg.temporal_factor;
    1 + tf * (cfg.fps as usize).saturating_sub(1).div_ceil(tf)
}

/// Grow a clip to `total_seconds` by repeated frame prediction: re-tokenize
/// the last second of pixels, decode the next latent frames, and append the
/// newly covered pixels. Frames already present are never touched, so the
/// overlap stays bit-identical. The result length lands within one segment
/// above the target.
pub fn extend(
    models: &ModelBundle,
    clip: &VideoClip,
    prompt: Option<&str>,
    total_seconds: f64,
    sampler: &SamplerConfig,
) -> Result<VideoClip> {
    models.validate()?;
    if prompt.is_some() {
        return Err(Error::config(
            "frame prediction has no text channel; extension takes no prompt".to_string(),
        ));
    }
    let cfg = models.video_codec.config().clone();
    if clip.fps != cfg.fps {
        return Err(Error::data(format!(
            "clip is {} fps, codec wants {}",
            clip.fps, cfg.fps
        )));
    }
    let overlap = overlap_frames(&cfg);
    if clip.t() < overlap {
        return Err(Error::data(format!(
            "extension needs at least {overlap} frames of context, clip has {}",
            clip.t()
        )));
    }
    let target = (total_seconds * cfg.fps as f64).round() as usize;
    if target < clip.t() {
        return Err(Error::data(format!(
            "target of {target} frames is shorter than the {}-frame input",
            clip.t()
        )));
    }
    let tf = cfg.temporal_factor;
    let segment = 1 + 4 * tf; // the training clip length
    let ctx_latent = 1 + (overlap - 1) / tf;
    let seg_latent = 1 + (segment - 1) / tf;
    let layout = models.lm.layout().clone();
    let levels = layout.config().audio_levels;

    let mut frames = clip.frames.clone();
    let mut step = 0usize;
    while frames.dim().0 < target {
        let t = frames.dim().0;
        let tail = frames.slice(ndarray::s![t - overlap.., .., .., ..]).to_owned();
        let tail_clip = VideoClip::new(tail, cfg.fps)?;
        let ctx = models.video_codec.tokenize_video(&tail_clip, &layout)?;
        debug_assert_eq!(ctx.shape.0, ctx_latent);
        let (_, h_l, w_l) = ctx.shape;
        let prefix = build_sequence(
            &layout,
            TaskKind::FramePrediction,
            &SequenceInputs {
                visual_in: Some(&ctx),
                ..Default::default()
            },
        )?;
        let script = decode_script(TaskKind::FramePrediction, seg_latent * h_l * w_l, 0, levels)?;
        let step_sampler = SamplerConfig {
            seed: stage_seed(sampler.seed, step),
            ..sampler.clone()
        };
        let out = generate_tokens_guided(
            &models.lm,
            &prefix,
            None,
            &ctx.tokens,
            &script[ctx.tokens.len()..],
            &step_sampler,
        )?;
        let full = TokenGrid {
            shape: (seg_latent, h_l, w_l),
            tokens: out[..seg_latent * h_l * w_l].to_vec(),
            codec_fp: models.video_codec.fingerprint(),
        };
        let decoded = models.video_codec.detokenize_video(&full, &layout)?;
        let fresh = decoded.frames.slice(ndarray::s![overlap.., .., .., ..]).to_owned();
        frames.append(Axis(0), fresh.view()).map_err(|e| {
            Error::shape(format!("appending extension frames: {e}"))
        })?;
        step += 1;
    }
    VideoClip::new(frames, cfg.fps)
}
