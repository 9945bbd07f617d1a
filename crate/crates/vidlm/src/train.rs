//! Training orchestration: clips in, length-grouped token sequences out,
//! then schedule-driven optimizer steps with exact resume.
//!
//! Every clip contributes one sequence per task in the mix. Examples land
//! in groups keyed by exact sequence length, the curriculum weights the
//! groups, and each step trains one homogeneous batch, so no position is
//! ever padding. Batch draws derive from (seed, step) alone, which makes a
//! resumed run bit-identical to an uninterrupted one.

use rand::Rng;

use crate::codec::{
    apply_mask, downsample, AudioCodec, MaskRegion, VideoClip, VideoCodec, MASK_FILL,
};
use crate::error::{Error, Result};
use crate::io::{ClipRecord, TrainLogEntry};
use crate::lm::LanguageModel;
use crate::nn::{AdamW, Store};
use crate::pipeline::{estimate_structure, overlap_frames, split_grid};
use crate::scheduler::{build_groups, Curriculum, GroupMember, Scheduler, TaskGroup};
use crate::sequence::{build_sequence, task_spec, SequenceExample, SequenceInputs, TaskKind};
use crate::superres::{SrExample, SrModel};
use crate::synth::{tokenize_caption, Split, SynthClip};
use crate::util::{seeded_rng, Fingerprint};
use crate::vocab::VocabLayout;

// ---------------------------------------------------------------------------
// Clip views

/// Borrowed view of one training clip, however it is stored.
#[derive(Debug, Clone, Copy)]
pub struct ClipView<'a> {
    pub caption: &'a str,
    pub video: &'a VideoClip,
    pub audio: Option<&'a [f64]>,
    pub hq: bool,
    pub held_out: bool,
}

impl<'a> From<&'a SynthClip> for ClipView<'a> {
    fn from(c: &'a SynthClip) -> ClipView<'a> {
        ClipView {
            caption: &c.caption,
            video: &c.video,
            audio: Some(&c.audio),
            hq: c.hq,
            held_out: c.split == Split::Held,
        }
    }
}

impl<'a> From<&'a ClipRecord> for ClipView<'a> {
    fn from(c: &'a ClipRecord) -> ClipView<'a> {
        ClipView {
            caption: &c.caption,
            video: &c.video,
            audio: c.audio.as_deref(),
            hq: c.hq,
            held_out: c.split == Split::Held,
        }
    }
}

// ---------------------------------------------------------------------------
// Example building

/// Everything the trainer draws from: examples grouped by exact length.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub groups: Vec<TaskGroup>,
    pub examples: Vec<SequenceExample>,
    /// Example indices per group, parallel to `groups`.
    pub by_group: Vec<Vec<usize>>,
    /// The high-quality subset of `by_group`, for finetune phases.
    pub hq_by_group: Vec<Vec<usize>>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn require_audio<'a>(clip: &ClipView<'a>, kind: TaskKind) -> Result<&'a [f64]> {
    clip.audio
        .ok_or_else(|| Error::data(format!("task {kind} needs clips with audio")))
}

/// Build the task's conditioning and target token sets for one clip, plus
/// the shape record that determines its group.
fn task_example(
    clip: &ClipView<'_>,
    kind: TaskKind,
    layout: &VocabLayout,
    vc: &VideoCodec,
    ac: &AudioCodec,
) -> Result<(SequenceExample, GroupMember)> {
    let spec = task_spec(kind);
    let video = clip.video;
    let text = if spec.uses_text {
        Some(tokenize_caption(layout, clip.caption)?)
    } else {
        None
    };

    // Continuation tasks condition on the leading second; the causal codec
    // guarantees those rows equal the full grid's prefix, so the target can
    // stay the complete grid (copy the prefix, then continue).
    let ctx_rows = |full: &crate::codec::TokenGrid| -> Result<crate::codec::TokenGrid> {
        let overlap = overlap_frames(vc.config());
        if video.t() <= overlap {
            return Err(Error::config(format!(
                "task {kind} needs clips longer than the {overlap}-frame context window, got {}",
                video.t()
            )));
        }
        let ctx_latent = 1 + (overlap - 1) / vc.config().temporal_factor;
        Ok(split_grid(full, ctx_latent)?.0)
    };

    let mut visual_in = None;
    let mut audio_in = None;
    let mut visual_out = None;
    let mut audio_out = None;
    match kind {
        TaskKind::Uncond => {
            visual_out = Some(vc.tokenize_video(video, layout)?);
        }
        TaskKind::TextToVideo => {
            visual_out = Some(vc.tokenize_video(video, layout)?);
        }
        TaskKind::TextToImage => {
            visual_out = Some(vc.tokenize_image(&video.first_frame(), layout)?);
        }
        TaskKind::ImageToVideo => {
            visual_in = Some(vc.tokenize_image(&video.first_frame(), layout)?);
            visual_out = Some(vc.tokenize_video(video, layout)?);
        }
        TaskKind::FramePrediction => {
            let full = vc.tokenize_video(video, layout)?;
            visual_in = Some(ctx_rows(&full)?);
            visual_out = Some(full);
        }
        TaskKind::Inpaint => {
            let masked = apply_mask(video, MaskRegion::CenterBox, MASK_FILL);
            visual_in = Some(vc.tokenize_video(&masked, layout)?);
            visual_out = Some(vc.tokenize_video(video, layout)?);
        }
        TaskKind::Outpaint => {
            let masked = apply_mask(video, MaskRegion::OutsideCenterBox, MASK_FILL);
            visual_in = Some(vc.tokenize_video(&masked, layout)?);
            visual_out = Some(vc.tokenize_video(video, layout)?);
        }
        TaskKind::Stylize => {
            // Condition on estimated structure, the same signal generation
            // computes from an arbitrary input clip.
            let (flow, depth) = estimate_structure(video)?;
            let packed = crate::codec::pack_structure(
                &flow,
                &depth,
                crate::codec::DEFAULT_FLOW_SCALE,
                video.fps,
            )?;
            visual_in = Some(vc.tokenize_video(&packed, layout)?);
            visual_out = Some(vc.tokenize_video(video, layout)?);
        }
        TaskKind::AudioToVideo => {
            let audio = require_audio(clip, kind)?;
            audio_in = Some(ac.tokenize_audio(audio, layout)?);
            visual_out = Some(vc.tokenize_video(video, layout)?);
        }
        TaskKind::VideoToAudio => {
            let audio = require_audio(clip, kind)?;
            visual_in = Some(vc.tokenize_video(video, layout)?);
            audio_out = Some(ac.tokenize_audio(audio, layout)?);
        }
        TaskKind::AudioVideoContinue => {
            let audio = require_audio(clip, kind)?;
            let full = vc.tokenize_video(video, layout)?;
            visual_in = Some(ctx_rows(&full)?);
            visual_out = Some(full);
            let overlap = overlap_frames(vc.config());
            let ctx_samples = ((overlap as f64 / vc.config().fps as f64)
                * ac.config().sample_rate as f64)
                .round() as usize;
            if audio.len() <= ctx_samples {
                return Err(Error::config(format!(
                    "task {kind} needs audio longer than the {ctx_samples}-sample context"
                )));
            }
            audio_in = Some(ac.tokenize_audio(&audio[..ctx_samples], layout)?);
            audio_out = Some(ac.tokenize_audio(audio, layout)?);
        }
    }

    let member = GroupMember {
        task: kind,
        text_slots: text.as_ref().map_or(0, Vec::len),
        visual_in: visual_in.as_ref().map(|g| g.shape),
        visual_out: visual_out.as_ref().map(|g| g.shape),
        audio_in_frames: audio_in.as_ref().map(|a| a.frames),
        audio_out_frames: audio_out.as_ref().map(|a| a.frames),
        has_res: false,
        has_source: false,
    };
    let seq = build_sequence(
        layout,
        kind,
        &SequenceInputs {
            text: text.as_deref(),
            visual_in: visual_in.as_ref(),
            audio_in: audio_in.as_ref(),
            visual_out: visual_out.as_ref(),
            audio_out: audio_out.as_ref(),
            res: None,
            source: None,
        },
    )?;
    Ok((seq, member))
}

/// Tokenize every non-held-out clip under every task in the mix and group
/// the results by exact sequence length.
pub fn build_training_set<'a, I>(
    clips: I,
    tasks: &[TaskKind],
    layout: &VocabLayout,
    vc: &VideoCodec,
    ac: &AudioCodec,
) -> Result<TrainingSet>
where
    I: IntoIterator<Item = ClipView<'a>>,
{
    if tasks.is_empty() {
        return Err(Error::config("training needs at least one task".to_string()));
    }
    let mut examples = Vec::new();
    let mut built: Vec<(usize, GroupMember, bool)> = Vec::new();
    let mut members: Vec<GroupMember> = Vec::new();
    for clip in clips {
        if clip.held_out {
            continue;
        }
        for &kind in tasks {
            let (seq, member) = task_example(&clip, kind, layout, vc, ac)?;
            if !members.contains(&member) {
                members.push(member.clone());
            }
            built.push((examples.len(), member, clip.hq));
            examples.push(seq);
        }
    }
    if examples.is_empty() {
        return Err(Error::data("no training clips (everything held out?)".to_string()));
    }
    let levels = layout.config().audio_levels;
    let groups = build_groups(&members, levels)?;
    let mut by_group = vec![Vec::new(); groups.len()];
    let mut hq_by_group = vec![Vec::new(); groups.len()];
    for (idx, member, hq) in built {
        let len = member.seq_len(levels);
        debug_assert_eq!(len, examples[idx].len());
        let gi = groups
            .iter()
            .position(|g| g.seq_len == len)
            .expect("every member length has a group");
        by_group[gi].push(idx);
        if hq {
            hq_by_group[gi].push(idx);
        }
    }
    Ok(TrainingSet { groups, examples, by_group, hq_by_group })
}

// ---------------------------------------------------------------------------
// Trainer

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainOpts {
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts { batch_size: 4, lr: 3e-3, seed: 0 }
    }
}

/// Per-step RNG stream: a pure function of (seed, step), so interrupted
/// and resumed runs see exactly the draws a straight run would.
fn step_rng(seed: u64, step: usize, tag: &str) -> rand_chacha::ChaCha8Rng {
    let mut f = Fingerprint::new(tag);
    f.push_u64(seed).push_u64(step as u64);
    seeded_rng(f.finish(), tag)
}

fn phase_index(curriculum: &Curriculum, step: usize) -> usize {
    curriculum
        .phases
        .iter()
        .position(|p| step >= p.start && step < p.end)
        .unwrap_or(0)
}

pub struct Trainer {
    model: LanguageModel,
    opt: AdamW,
    sched: Scheduler,
    set: TrainingSet,
    opts: TrainOpts,
}

impl Trainer {
    pub fn new(
        model: LanguageModel,
        set: TrainingSet,
        curriculum: Curriculum,
        opts: TrainOpts,
    ) -> Result<Trainer> {
        if opts.batch_size == 0 {
            return Err(Error::config("batch size must be positive".to_string()));
        }
        for seq in &set.examples {
            if seq.len() > model.config().max_seq_len {
                return Err(Error::shape(format!(
                    "example of {} tokens exceeds the model's {} positions",
                    seq.len(),
                    model.config().max_seq_len
                )));
            }
        }
        let opt = AdamW::new(model.params(), opts.lr, curriculum.total_steps);
        let sched = Scheduler::new(set.groups.clone(), curriculum, opts.seed)?;
        Ok(Trainer { model, opt, sched, set, opts })
    }

    pub fn model(&self) -> &LanguageModel {
        &self.model
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn set(&self) -> &TrainingSet {
        &self.set
    }

    pub fn step_index(&self) -> usize {
        self.sched.step()
    }

    pub fn is_done(&self) -> bool {
        self.sched.is_done()
    }

    pub fn into_parts(self) -> (LanguageModel, AdamW) {
        (self.model, self.opt)
    }

    /// Jump to `step` with restored optimizer moments: the schedule replays
    /// its draws, and batch randomness is per-step, so training continues
    /// exactly where the checkpoint left off.
    pub fn restore(&mut self, m: Store, v: Store, step: usize) -> Result<()> {
        self.opt.restore_state(m, v, step);
        self.sched.advance_to(step)
    }

    /// One scheduled batch: draw the group, sample members, update.
    pub fn step(&mut self) -> Result<TrainLogEntry> {
        let drawn = self.sched.next_group()?;
        let pool: &[usize] = if drawn.hq_only {
            &self.set.hq_by_group[drawn.group]
        } else {
            &self.set.by_group[drawn.group]
        };
        let label = self.sched.groups()[drawn.group].label();
        if pool.is_empty() {
            return Err(Error::config(format!(
                "group {label} has no {}examples to draw",
                if drawn.hq_only { "high-quality " } else { "" }
            )));
        }
        let mut rng = step_rng(self.opts.seed, drawn.step, "train-step");
        let picks: Vec<usize> = if pool.len() >= self.opts.batch_size {
            rand::seq::index::sample(&mut rng, pool.len(), self.opts.batch_size)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        } else {
            (0..self.opts.batch_size)
                .map(|_| pool[rng.random_range(0..pool.len())])
                .collect()
        };
        let batch: Vec<&SequenceExample> = picks.iter().map(|&i| &self.set.examples[i]).collect();
        let loss = self.model.train_step(&mut self.opt, &batch, &mut rng)?;
        Ok(TrainLogEntry {
            step: drawn.step as u64,
            phase: phase_index(self.sched.curriculum(), drawn.step),
            group: label,
            loss,
        })
    }
}

// ---------------------------------------------------------------------------
// Upsampler training

/// Pair each clip's full-resolution token grid with the grid of its 2x
/// spatially shrunk rendering, plus the caption.
pub fn build_sr_examples<'a, I>(
    clips: I,
    layout: &VocabLayout,
    vc: &VideoCodec,
) -> Result<Vec<SrExample>>
where
    I: IntoIterator<Item = ClipView<'a>>,
{
    let mut out = Vec::new();
    for clip in clips {
        if clip.held_out {
            continue;
        }
        let hr = vc.tokenize_video(clip.video, layout)?;
        let lr = vc.tokenize_video(&downsample(clip.video, 2)?, layout)?;
        let text = tokenize_caption(layout, clip.caption)?;
        out.push(SrExample { hr, lr, text });
    }
    if out.is_empty() {
        return Err(Error::data("no upsampler training clips".to_string()));
    }
    Ok(out)
}

pub struct SrTrainer {
    model: SrModel,
    opt: AdamW,
    examples: Vec<SrExample>,
    opts: TrainOpts,
    step: usize,
    total_steps: usize,
}

impl SrTrainer {
    pub fn new(
        model: SrModel,
        examples: Vec<SrExample>,
        total_steps: usize,
        opts: TrainOpts,
    ) -> Result<SrTrainer> {
        if examples.is_empty() {
            return Err(Error::data("no upsampler training examples".to_string()));
        }
        if opts.batch_size == 0 || total_steps == 0 {
            return Err(Error::config("batch size and steps must be positive".to_string()));
        }
        let opt = AdamW::new(model.params(), opts.lr, total_steps);
        Ok(SrTrainer { model, opt, examples, opts, step: 0, total_steps })
    }

    pub fn model(&self) -> &SrModel {
        &self.model
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn into_parts(self) -> (SrModel, AdamW) {
        (self.model, self.opt)
    }

    pub fn restore(&mut self, m: Store, v: Store, step: usize) -> Result<()> {
        if step > self.total_steps {
            return Err(Error::data(format!(
                "cannot resume at step {step} of a {}-step run",
                self.total_steps
            )));
        }
        self.opt.restore_state(m, v, step);
        self.step = step;
        Ok(())
    }

    pub fn step(&mut self) -> Result<TrainLogEntry> {
        if self.is_done() {
            return Err(Error::data(format!(
                "step {} beyond the {}-step run",
                self.step, self.total_steps
            )));
        }
        let mut rng = step_rng(self.opts.seed, self.step, "sr-train-step");
        let n = self.examples.len();
        let batch: Vec<SrExample> = if n >= self.opts.batch_size {
            rand::seq::index::sample(&mut rng, n, self.opts.batch_size)
                .into_iter()
                .map(|i| self.examples[i].clone())
                .collect()
        } else {
            (0..self.opts.batch_size)
                .map(|_| self.examples[rng.random_range(0..n)].clone())
                .collect()
        };
        let loss = self.model.train_step(&mut self.opt, &batch, &mut rng)?;
        let entry = TrainLogEntry {
            step: self.step as u64,
            phase: 0,
            group: "sr".to_string(),
            loss,
        };
        self.step += 1;
        Ok(entry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{train_video_codec, CodecConfig, KMeansOpts};
    use crate::io::{checkpoint_from_lm, lm_from_checkpoint, restore_optimizer};
    use crate::lm::ModelConfig;
    use crate::sequence::Role;
    use crate::superres::SrConfig;
    use crate::synth::{make_dataset, SynthConfig};
    use crate::vocab::{build_layout, VocabConfig};

    fn tiny_vocab() -> VocabLayout {
        build_layout(&VocabConfig {
            special_count: 44,
            visual_count: 16,
            audio_levels: 2,
            audio_codes_per_level: 8,
            text_vocab_count: 16,
            factor_base: 4,
            factor_k: 2,
        })
        .unwrap()
    }

    fn tiny_synth() -> SynthConfig {
        SynthConfig {
            frames: 9,
            height: 24,
            width: 24,
            ..SynthConfig::desk()
        }
    }

    fn tiny_codecs(clips: &[SynthClip]) -> (VideoCodec, AudioCodec) {
        let videos: Vec<VideoClip> = clips.iter().map(|c| c.video.clone()).collect();
        let waves: Vec<Vec<f64>> = clips.iter().map(|c| c.audio.clone()).collect();
        let vc = train_video_codec(
            &CodecConfig { temporal_factor: 4, spatial_factor: 8, code_count: 16, fps: 8 },
            &videos,
            &KMeansOpts { iterations: 3, max_samples: 2000 },
            3,
        )
        .unwrap();
        let ac = crate::codec::train_audio_codec(
            &crate::codec::AudioCodecConfig { sample_rate: 1600, hop: 64, levels: 2, code_count: 8 },
            &waves,
            &KMeansOpts { iterations: 3, max_samples: 2000 },
            5,
        )
        .unwrap();
        (vc, ac)
    }

    fn tiny_model(layout: VocabLayout, max_seq_len: usize) -> LanguageModel {
        LanguageModel::new(
            ModelConfig {
                width: 16,
                depth: 1,
                heads: 2,
                ffn_mult: 2,
                max_seq_len,
                cond_dropout_rate: 0.1,
                text_embed_dim: 8,
                rotary_base: 10_000.0,
            },
            layout,
            7,
        )
        .unwrap()
    }

    #[test]
    fn groups_are_length_homogeneous_and_holdout_is_excluded() {
        let layout = tiny_vocab();
        let clips = make_dataset(&tiny_synth(), 20, 11).unwrap();
        let (vc, ac) = tiny_codecs(&clips);
        let held = clips.iter().filter(|c| c.split == Split::Held).count();
        assert!(held > 0, "fixture wants some held-out clips");
        let set = build_training_set(
            clips.iter().map(ClipView::from),
            &[TaskKind::TextToImage, TaskKind::TextToVideo],
            &layout,
            &vc,
            &ac,
        )
        .unwrap();
        assert_eq!(set.len(), (20 - held) * 2, "two examples per training clip");
        assert_eq!(set.groups.len(), 2, "image and video lengths differ");
        for (gi, group) in set.groups.iter().enumerate() {
            assert!(!set.by_group[gi].is_empty());
            for &idx in &set.by_group[gi] {
                assert_eq!(set.examples[idx].len(), group.seq_len);
            }
            for &idx in &set.hq_by_group[gi] {
                assert!(set.by_group[gi].contains(&idx));
            }
        }
        let image_groups: Vec<bool> = set.groups.iter().map(|g| g.is_image()).collect();
        assert!(image_groups.contains(&true) && image_groups.contains(&false));
    }

    #[test]
    fn continuation_examples_condition_on_the_grid_prefix() {
        let layout = tiny_vocab();
        // 17 frames so the 9-frame context window leaves rows to predict;
        // 32 px so fast clips can travel their 16 px.
        let cfg = SynthConfig { frames: 17, height: 32, width: 32, ..tiny_synth() };
        let clips = make_dataset(&cfg, 4, 13).unwrap();
        let (vc, ac) = tiny_codecs(&clips);
        let clip = ClipView::from(&clips[0]);
        let (seq, member) = task_example(&clip, TaskKind::FramePrediction, &layout, &vc, &ac).unwrap();
        assert_eq!(member.visual_in, Some((3, 4, 4)));
        assert_eq!(member.visual_out, Some((5, 4, 4)));
        // The conditioning tokens reappear verbatim at the start of the
        // output segment: copy-then-continue.
        let vis_in: Vec<u32> = seq
            .tokens
            .iter()
            .zip(&seq.roles)
            .filter(|(_, r)| **r == Role::VisualIn)
            .map(|(t, _)| *t)
            .collect();
        let vis_out: Vec<u32> = seq
            .tokens
            .iter()
            .zip(&seq.roles)
            .filter(|(_, r)| **r == Role::VisualOut)
            .map(|(t, _)| *t)
            .collect();
        assert_eq!(vis_in.len(), 48);
        assert_eq!(vis_out.len(), 80);
        assert_eq!(&vis_out[..48], &vis_in[..]);

        // Too-short clips cannot form a continuation pair.
        let short = make_dataset(&tiny_synth(), 1, 17).unwrap();
        let err = task_example(
            &ClipView::from(&short[0]),
            TaskKind::FramePrediction,
            &layout,
            &vc,
            &ac,
        );
        assert!(err.is_err());
    }

    #[test]
    fn every_task_builds_an_example_from_long_clips() {
        let layout = tiny_vocab();
        let cfg = SynthConfig { frames: 17, height: 32, width: 32, ..tiny_synth() };
        let clips = make_dataset(&cfg, 3, 19).unwrap();
        let (vc, ac) = tiny_codecs(&clips);
        let all = crate::sequence::TaskKind::all();
        let set = build_training_set(
            clips.iter().map(ClipView::from),
            &all,
            &layout,
            &vc,
            &ac,
        )
        .unwrap();
        let trained: usize = set.by_group.iter().map(Vec::len).sum();
        let kept = clips.iter().filter(|c| c.split == Split::Train).count();
        assert_eq!(trained, kept * all.len());
    }

    #[test]
    fn training_drives_the_loss_down() {
        let layout = tiny_vocab();
        let clips = make_dataset(&tiny_synth(), 8, 23).unwrap();
        let (vc, ac) = tiny_codecs(&clips);
        let set = build_training_set(
            clips.iter().map(ClipView::from),
            &[TaskKind::TextToImage, TaskKind::TextToVideo],
            &layout,
            &vc,
            &ac,
        )
        .unwrap();
        let model = tiny_model(layout, 64);
        let curriculum = Curriculum::two_stage(60);
        let mut trainer = Trainer::new(
            model,
            set,
            curriculum,
            TrainOpts { batch_size: 2, lr: 1e-2, seed: 1 },
        )
        .unwrap();
        let mut losses = Vec::new();
        while !trainer.is_done() {
            losses.push(trainer.step().unwrap().loss);
        }
        assert_eq!(losses.len(), 60);
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < head * 0.8,
            "loss should fall: first-10 avg {head:.3}, last-10 avg {tail:.3}"
        );
    }

    #[test]
    fn resume_reproduces_the_straight_run_bit_for_bit() {
        let layout = tiny_vocab();
        let clips = make_dataset(&tiny_synth(), 6, 29).unwrap();
        let (vc, ac) = tiny_codecs(&clips);
        let tasks = [TaskKind::TextToImage, TaskKind::TextToVideo];
        let build = || {
            build_training_set(clips.iter().map(ClipView::from), &tasks, &layout, &vc, &ac)
                .unwrap()
        };
        let opts = TrainOpts { batch_size: 2, lr: 5e-3, seed: 9 };

        let mut straight = Trainer::new(
            tiny_model(layout.clone(), 64),
            build(),
            Curriculum::two_stage(10),
            opts.clone(),
        )
        .unwrap();
        for _ in 0..10 {
            straight.step().unwrap();
        }

        let mut first_leg = Trainer::new(
            tiny_model(layout.clone(), 64),
            build(),
            Curriculum::two_stage(10),
            opts.clone(),
        )
        .unwrap();
        for _ in 0..5 {
            first_leg.step().unwrap();
        }
        let ck = checkpoint_from_lm(first_leg.model(), 5, Some(first_leg.optimizer()));

        let resumed_model = lm_from_checkpoint(&ck).unwrap();
        let mut resumed = Trainer::new(
            resumed_model,
            build(),
            Curriculum::two_stage(10),
            opts,
        )
        .unwrap();
        // Pull the optimizer moments out of the checkpoint, then jump.
        {
            let params_snapshot = resumed.model().params().zeros_like();
            let mut throwaway = AdamW::new(&params_snapshot, 1.0, 1);
            assert!(restore_optimizer(&ck, &params_snapshot, &mut throwaway).unwrap());
            let (m, v, step) = throwaway.state();
            let (m, v) = (m.clone(), v.clone());
            resumed.restore(m, v, step).unwrap();
        }
        assert_eq!(resumed.step_index(), 5);
        for _ in 0..5 {
            resumed.step().unwrap();
        }

        assert_eq!(
            straight.model().params().data(),
            resumed.model().params().data(),
            "resumed run must match the straight run exactly"
        );
    }

    #[test]
    fn finetune_phase_requires_high_quality_examples() {
        let layout = tiny_vocab();
        // hq_fraction 0 leaves the finetune pool empty.
        let cfg = SynthConfig { hq_fraction: 0.0, ..tiny_synth() };
        let clips = make_dataset(&cfg, 6, 31).unwrap();
        assert!(clips.iter().all(|c| !c.hq));
        let (vc, ac) = tiny_codecs(&clips);
        let set = build_training_set(
            clips.iter().map(ClipView::from),
            &[TaskKind::TextToImage, TaskKind::TextToVideo],
            &layout,
            &vc,
            &ac,
        )
        .unwrap();
        let curriculum = Curriculum::with_finetune(12, 6).unwrap();
        let mut trainer = Trainer::new(
            tiny_model(layout, 64),
            set,
            curriculum,
            TrainOpts { batch_size: 2, lr: 5e-3, seed: 2 },
        )
        .unwrap();
        let mut saw_empty_pool_error = false;
        for _ in 0..12 {
            match trainer.step() {
                Ok(_) => {}
                Err(Error::Config(msg)) => {
                    assert!(msg.contains("high-quality"), "unexpected config error: {msg}");
                    saw_empty_pool_error = true;
                    break;
                }
                Err(e) => panic!("unexpected error kind: {e}"),
            }
        }
        assert!(saw_empty_pool_error, "finetune steps must demand the hq pool");
    }

    #[test]
    fn sr_examples_pair_full_and_half_resolution_grids() {
        let layout = tiny_vocab();
        let cfg = SynthConfig { frames: 17, height: 32, width: 32, ..tiny_synth() };
        let clips = make_dataset(&cfg, 4, 37).unwrap();
        let (vc, _) = tiny_codecs(&clips);
        let examples =
            build_sr_examples(clips.iter().map(ClipView::from), &layout, &vc).unwrap();
        let kept = clips.iter().filter(|c| c.split == Split::Train).count();
        assert_eq!(examples.len(), kept);
        for ex in &examples {
            assert_eq!(ex.hr.shape, (5, 4, 4));
            assert_eq!(ex.lr.shape, (5, 2, 2));
            assert_eq!(ex.hr.codec_fp, ex.lr.codec_fp);
            assert_eq!(ex.text.len(), 6);
        }
    }

    #[test]
    fn sr_trainer_runs_and_stays_finite() {
        let layout = tiny_vocab();
        let cfg = SynthConfig { frames: 17, height: 32, width: 32, ..tiny_synth() };
        let clips = make_dataset(&cfg, 4, 41).unwrap();
        let (vc, _) = tiny_codecs(&clips);
        let examples =
            build_sr_examples(clips.iter().map(ClipView::from), &layout, &vc).unwrap();
        let sr = SrModel::new(
            SrConfig {
                lr_shape: (5, 2, 2),
                hr_shape: (5, 4, 4),
                self_windows: [(1, 4, 2), (1, 2, 4), (5, 2, 2)],
                cross_windows: [(1, 2, 1), (1, 1, 2), (5, 1, 1)],
                layer_axes: vec![0, 1, 2],
                width: 16,
                heads: 2,
                ffn_mult: 2,
                text_slots: 8,
                text_embed_dim: 8,
                steps: 4,
                guidance_text: 1.5,
                guidance_lr: 1.0,
                noise_frac_max: 0.3,
                cond_drop_rate: 0.1,
            },
            layout,
            11,
        )
        .unwrap();
        let mut trainer = SrTrainer::new(
            sr,
            examples,
            6,
            TrainOpts { batch_size: 2, lr: 1e-3, seed: 3 },
        )
        .unwrap();
        let mut last = f64::INFINITY;
        while !trainer.is_done() {
            let entry = trainer.step().unwrap();
            assert!(entry.loss.is_finite());
            assert_eq!(entry.group, "sr");
            last = entry.loss;
        }
        assert!(last.is_finite());
        assert!(trainer.step().is_err(), "stepping past the end must fail");
    }
}
