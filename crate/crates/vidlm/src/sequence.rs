//! Multi-task sequence protocol: how token streams for every task are laid
//! out, where the bidirectional prefix ends, and which positions carry loss.
//!
//! Every training or inference sequence follows one grammar:
//!
//! ```text
//! <bos> <task> [<bot_i> text <eot_i>] [<res>] [<source>]
//!       [<bov_i> visual_in <eov_i>] [<boa_i> audio_in <eoa_i>]
//!       <bov_o> visual_out <eov_o> [<boa_o> audio_out <eoa_o>] <eos>
//! ```
//!
//! `prefix_len` is the index of the first output opener: everything before it
//! attends bidirectionally, everything from it on is causal. Openers carry no
//! loss (they are forced at inference); output tokens and the closing markers
//! do, so the model learns to terminate. Open-ended sequences (image
//! generation) drop `<eov_o>` and `<eos>` entirely.

use std::fmt;

use crate::codec::{AudioTokens, TokenGrid};
use crate::error::{Error, Result};
use crate::vocab::{Partition, Special, TokenId, VocabLayout};

/// Hard cap on text slots per sequence.
pub const MAX_TEXT_SLOTS: usize = 64;

// ---------------------------------------------------------------------------
// Tasks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum TaskKind {
    Uncond,
    TextToVideo,
    FramePrediction,
    ImageToVideo,
    Inpaint,
    Outpaint,
    Stylize,
    AudioToVideo,
    VideoToAudio,
    AudioVideoContinue,
    TextToImage,
}

impl TaskKind {
    pub fn all() -> [TaskKind; 11] {
        [
            TaskKind::Uncond,
            TaskKind::TextToVideo,
            TaskKind::FramePrediction,
            TaskKind::ImageToVideo,
            TaskKind::Inpaint,
            TaskKind::Outpaint,
            TaskKind::Stylize,
            TaskKind::AudioToVideo,
            TaskKind::VideoToAudio,
            TaskKind::AudioVideoContinue,
            TaskKind::TextToImage,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Uncond => "uncond",
            TaskKind::TextToVideo => "t2v",
            TaskKind::FramePrediction => "fp",
            TaskKind::ImageToVideo => "i2v",
            TaskKind::Inpaint => "inpaint",
            TaskKind::Outpaint => "outpaint",
            TaskKind::Stylize => "stylize",
            TaskKind::AudioToVideo => "a2v",
            TaskKind::VideoToAudio => "v2a",
            TaskKind::AudioVideoContinue => "avcont",
            TaskKind::TextToImage => "t2i",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<TaskKind> {
        TaskKind::all()
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown task {s:?}")))
    }
}

/// What a task consumes and produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Slot within the task-id sub-range. Tasks with the same output type
    /// share a slot; the input mix alone tells them apart.
    pub task_slot: u8,
    pub uses_text: bool,
    pub visual_in: bool,
    pub audio_in: bool,
    pub visual_out: bool,
    pub audio_out: bool,
    /// Open-ended outputs drop the closing markers (image generation).
    pub open_ended: bool,
}

/// All supported tasks.
pub fn enumerate_tasks() -> Vec<TaskSpec> {
    TaskKind::all().iter().map(|&k| task_spec(k)).collect()
}

pub fn task_spec(kind: TaskKind) -> TaskSpec {
    use TaskKind::*;
    // Slot 0 covers every plain visual-generation task regardless of
    // conditioning; distinct output behavior gets its own slot.
    let (slot, text, vin, ain, vout, aout, open) = match kind {
        Uncond => (0, false, false, false, true, false, false),
        TextToVideo => (0, true, false, false, true, false, false),
        ImageToVideo => (0, false, true, false, true, false, false),
        AudioToVideo => (0, false, false, true, true, false, false),
        TextToImage => (0, true, false, false, true, false, true),
        FramePrediction => (1, false, true, false, true, false, false),
        Inpaint => (2, false, true, false, true, false, false),
        Outpaint => (3, false, true, false, true, false, false),
        Stylize => (4, true, true, false, true, false, false),
        VideoToAudio => (5, false, true, false, false, true, false),
        AudioVideoContinue => (6, false, true, true, true, true, false),
    };
    TaskSpec {
        kind,
        task_slot: slot,
        uses_text: text,
        visual_in: vin,
        audio_in: ain,
        visual_out: vout,
        audio_out: aout,
        open_ended: open,
    }
}

// ---------------------------------------------------------------------------
// Sequence values

/// Per-position segment tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Framing,
    Text,
    VisualIn,
    AudioIn,
    VisualOut,
    AudioOut,
}

impl Role {
    pub fn name(&self) -> &'static str {
        match self {
            Role::Framing => "framing",
            Role::Text => "text",
            Role::VisualIn => "visual_in",
            Role::AudioIn => "audio_in",
            Role::VisualOut => "visual_out",
            Role::AudioOut => "audio_out",
        }
    }

    fn parse(s: &str) -> Result<Role> {
        Ok(match s {
            "framing" => Role::Framing,
            "text" => Role::Text,
            "visual_in" => Role::VisualIn,
            "audio_in" => Role::AudioIn,
            "visual_out" => Role::VisualOut,
            "audio_out" => Role::AudioOut,
            other => return Err(Error::data(format!("unknown role {other:?}"))),
        })
    }
}

/// A fully laid-out token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceExample {
    pub task: TaskKind,
    pub tokens: Vec<TokenId>,
    pub roles: Vec<Role>,
    /// Index of the first output opener; the bidirectional prefix is
    /// positions `0..prefix_len`.
    pub prefix_len: usize,
    pub loss_mask: Vec<bool>,
    pub layout_fp: u64,
}

impl SequenceExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Indices with loss, ascending.
    pub fn loss_positions(&self) -> Vec<usize> {
        self.loss_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

/// Everything `build_sequence` consumes. Output fields may all be `None` to
/// build an inference prefix (ends right after the first output opener).
#[derive(Debug, Clone, Copy, Default)]
pub struct SequenceInputs<'a> {
    pub text: Option<&'a [TokenId]>,
    pub visual_in: Option<&'a TokenGrid>,
    pub audio_in: Option<&'a AudioTokens>,
    pub visual_out: Option<&'a TokenGrid>,
    pub audio_out: Option<&'a AudioTokens>,
    /// Resolution tag slot; only emitted for the one tall output shape.
    pub res: Option<u8>,
    /// Dataset-provenance tag slot.
    pub source: Option<u8>,
}

// ---------------------------------------------------------------------------
// Length arithmetic

/// Token counts that determine a sequence's length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeCounts {
    pub text_slots: usize,
    pub visual_in: usize,
    pub audio_in: usize,
    pub visual_out: usize,
    pub audio_out: usize,
    pub has_res: bool,
    pub has_source: bool,
}

/// Sequence length as a pure function of task and modality shapes. Grouping
/// by this value yields the batch groups used by the training scheduler.
pub fn sequence_length(spec: &TaskSpec, c: &ShapeCounts) -> usize {
    let mut n = 2; // <bos> <task>
    if spec.uses_text {
        n += c.text_slots + 2;
    }
    if c.has_res {
        n += 1;
    }
    if c.has_source {
        n += 1;
    }
    if spec.visual_in {
        n += c.visual_in + 2;
    }
    if spec.audio_in {
        n += c.audio_in + 2;
    }
    if spec.visual_out {
        n += c.visual_out + 1; // opener + tokens
        if !spec.open_ended {
            n += 1; // closer
        }
    }
    if spec.audio_out {
        n += c.audio_out + 2;
    }
    if !spec.open_ended {
        n += 1; // <eos>
    }
    n
}

// ---------------------------------------------------------------------------
// Builder

pub fn build_sequence(
    layout: &VocabLayout,
    kind: TaskKind,
    inputs: &SequenceInputs<'_>,
) -> Result<SequenceExample> {
    let spec = task_spec(kind);

    // Modality presence must match the task exactly.
    check_presence(kind, "text", spec.uses_text, inputs.text.is_some())?;
    check_presence(kind, "visual input", spec.visual_in, inputs.visual_in.is_some())?;
    check_presence(kind, "audio input", spec.audio_in, inputs.audio_in.is_some())?;
    let prefix_only = inputs.visual_out.is_none() && inputs.audio_out.is_none();
    if !prefix_only {
        check_presence(kind, "visual output", spec.visual_out, inputs.visual_out.is_some())?;
        check_presence(kind, "audio output", spec.audio_out, inputs.audio_out.is_some())?;
    }

    if let Some(text) = inputs.text {
        if text.len() > MAX_TEXT_SLOTS {
            return Err(Error::data(format!(
                "{} text slots exceed the cap of {MAX_TEXT_SLOTS}",
                text.len()
            )));
        }
    }
    if let Some(r) = inputs.res {
        if u32::from(r) >= crate::vocab::RES_SLOTS {
            return Err(Error::data(format!("resolution tag {r} out of range")));
        }
    }
    if let Some(s) = inputs.source {
        if u32::from(s) >= crate::vocab::SOURCE_SLOTS {
            return Err(Error::data(format!("source tag {s} out of range")));
        }
    }

    let mut seq = Builder::new(layout, kind);
    seq.framing(Special::Bos);
    seq.framing(Special::Task(spec.task_slot));
    if let Some(text) = inputs.text {
        seq.framing(Special::BotI);
        for &id in text {
            seq.push(id, Role::Text, Partition::Text, false)?;
        }
        seq.framing(Special::EotI);
    }
    if let Some(r) = inputs.res {
        seq.framing(Special::Res(r));
    }
    if let Some(s) = inputs.source {
        seq.framing(Special::Source(s));
    }
    if let Some(grid) = inputs.visual_in {
        seq.framing(Special::BovI);
        for &id in &grid.tokens {
            seq.push(id, Role::VisualIn, Partition::Visual, false)?;
        }
        seq.framing(Special::EovI);
    }
    if let Some(audio) = inputs.audio_in {
        seq.framing(Special::BoaI);
        seq.audio_segment(audio, Role::AudioIn, false)?;
        seq.framing(Special::EoaI);
    }

    // Prefix ends at the first output opener.
    let prefix_len = seq.tokens.len();
    if spec.visual_out {
        seq.framing(Special::BovO);
    } else {
        seq.framing(Special::BoaO);
    }

    if prefix_only {
        return seq.finish(prefix_len, inputs);
    }

    if let Some(grid) = inputs.visual_out {
        for &id in &grid.tokens {
            seq.push(id, Role::VisualOut, Partition::Visual, true)?;
        }
        if !spec.open_ended {
            seq.loss_framing(Special::EovO);
        }
    }
    if let Some(audio) = inputs.audio_out {
        if spec.visual_out {
            seq.framing(Special::BoaO);
        }
        seq.audio_segment(audio, Role::AudioOut, true)?;
        seq.loss_framing(Special::EoaO);
    }
    if !spec.open_ended {
        seq.loss_framing(Special::Eos);
    }

    let built = seq.finish(prefix_len, inputs)?;
    // Self-check against the pure length function.
    let counts = ShapeCounts {
        text_slots: inputs.text.map_or(0, |t| t.len()),
        visual_in: inputs.visual_in.map_or(0, |g| g.tokens.len()),
        audio_in: inputs.audio_in.map_or(0, |a| a.tokens.len()),
        visual_out: inputs.visual_out.map_or(0, |g| g.tokens.len()),
        audio_out: inputs.audio_out.map_or(0, |a| a.tokens.len()),
        has_res: inputs.res.is_some(),
        has_source: inputs.source.is_some(),
    };
    debug_assert_eq!(built.len(), sequence_length(&spec, &counts));
    Ok(built)
}

fn check_presence(kind: TaskKind, what: &str, wanted: bool, given: bool) -> Result<()> {
    if wanted && !given {
        return Err(Error::data(format!("task {kind} requires {what}")));
    }
    if !wanted && given {
        return Err(Error::data(format!("task {kind} does not accept {what}")));
    }
    Ok(())
}

struct Builder<'a> {
    layout: &'a VocabLayout,
    task: TaskKind,
    tokens: Vec<TokenId>,
    roles: Vec<Role>,
    loss: Vec<bool>,
}

impl<'a> Builder<'a> {
    fn new(layout: &'a VocabLayout, task: TaskKind) -> Builder<'a> {
        Builder {
            layout,
            task,
            tokens: Vec::new(),
            roles: Vec::new(),
            loss: Vec::new(),
        }
    }

    fn framing(&mut self, s: Special) {
        self.tokens.push(self.layout.special_id(s));
        self.roles.push(Role::Framing);
        self.loss.push(false);
    }

    /// A framing token the model must learn to emit (closers).
    fn loss_framing(&mut self, s: Special) {
        self.tokens.push(self.layout.special_id(s));
        self.roles.push(Role::Framing);
        self.loss.push(true);
    }

    fn push(&mut self, id: TokenId, role: Role, want: Partition, loss: bool) -> Result<()> {
        let got = self.layout.classify(id)?;
        let ok = match want {
            Partition::Audio { .. } => matches!(got, Partition::Audio { .. }),
            other => got == other,
        };
        if !ok {
            return Err(Error::data(format!(
                "token {id} is in the {got:?} partition, {role:?} wants {want:?}"
            )));
        }
        self.tokens.push(id);
        self.roles.push(role);
        self.loss.push(loss);
        Ok(())
    }

    /// Audio tokens go in level-major order; each id must sit in its level's
    /// id range.
    fn audio_segment(&mut self, audio: &AudioTokens, role: Role, loss: bool) -> Result<()> {
        for level in 0..audio.levels {
            let range = self.layout.audio_level_range(level as u32)?;
            for frame in 0..audio.frames {
                let id = audio.get(level, frame);
                if !range.contains(&id) {
                    return Err(Error::data(format!(
                        "audio token {id} outside level-{level} range {range:?}"
                    )));
                }
                self.push(id, role, Partition::Audio { level: level as u32 }, loss)?;
            }
        }
        Ok(())
    }

    fn finish(self, prefix_len: usize, _inputs: &SequenceInputs<'_>) -> Result<SequenceExample> {
        debug_assert!(self.loss[..prefix_len].iter().all(|&l| !l));
        Ok(SequenceExample {
            task: self.task,
            tokens: self.tokens,
            roles: self.roles,
            prefix_len,
            loss_mask: self.loss,
            layout_fp: self.layout.fingerprint(),
        })
    }
}

// ---------------------------------------------------------------------------
// Decode script

/// What the sampler must produce at each position after the first opener.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptStep {
    /// Sample a visual-partition token.
    Visual,
    /// Sample an audio token of the given level.
    Audio { level: u32 },
    /// Emit exactly this framing token (closers are constrained; the opener
    /// for a second output modality is forced).
    Exact(Special),
}

/// Generation plan for a task: the steps that follow the opener emitted by
/// the prefix builder. `visual_out` / `audio_frames` size the output.
pub fn decode_script(
    kind: TaskKind,
    visual_out: usize,
    audio_frames: usize,
    audio_levels: u32,
) -> Result<Vec<ScriptStep>> {
    let spec = task_spec(kind);
    let mut steps = Vec::new();
    if spec.visual_out {
        if visual_out == 0 {
            return Err(Error::config(format!("task {kind} needs a visual output size")));
        }
        steps.extend(std::iter::repeat(ScriptStep::Visual).take(visual_out));
        if !spec.open_ended {
            steps.push(ScriptStep::Exact(Special::EovO));
        }
    }
    if spec.audio_out {
        if audio_frames == 0 {
            return Err(Error::config(format!("task {kind} needs an audio output size")));
        }
        if spec.visual_out {
            steps.push(ScriptStep::Exact(Special::BoaO));
        }
        for level in 0..audio_levels {
            steps.extend(std::iter::repeat(ScriptStep::Audio { level }).take(audio_frames));
        }
        steps.push(ScriptStep::Exact(Special::EoaO));
    }
    if !spec.open_ended {
        steps.push(ScriptStep::Exact(Special::Eos));
    }
    Ok(steps)
}

// ---------------------------------------------------------------------------
// Text dump

/// Render a sequence as text lines `(index, role, token, loss-flag)` under a
/// small header. Exists for golden tests and eyeballing; `parse_sequence`
/// reverses it bit-exactly.
pub fn dump_sequence(seq: &SequenceExample) -> String {
    let mut out = String::new();
    out.push_str(&format!("task {}\n", seq.task.name()));
    out.push_str(&format!("layout_fp {}\n", seq.layout_fp));
    out.push_str(&format!("prefix_len {}\n", seq.prefix_len));
    for i in 0..seq.tokens.len() {
        let flag = if seq.loss_mask[i] { '*' } else { '-' };
        out.push_str(&format!(
            "{} {} {} {}\n",
            i,
            seq.roles[i].name(),
            seq.tokens[i],
            flag
        ));
    }
    out
}

pub fn parse_sequence(text: &str) -> Result<SequenceExample> {
    let mut lines = text.lines();
    let task_line = lines
        .next()
        .ok_or_else(|| Error::data("empty sequence dump".to_string()))?;
    let task: TaskKind = task_line
        .strip_prefix("task ")
        .ok_or_else(|| Error::data(format!("expected task header, got {task_line:?}")))?
        .parse()?;
    let fp_line = lines
        .next()
        .ok_or_else(|| Error::data("missing layout_fp header".to_string()))?;
    let layout_fp: u64 = fp_line
        .strip_prefix("layout_fp ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::data(format!("bad layout_fp header {fp_line:?}")))?;
    let pl_line = lines
        .next()
        .ok_or_else(|| Error::data("missing prefix_len header".to_string()))?;
    let prefix_len: usize = pl_line
        .strip_prefix("prefix_len ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::data(format!("bad prefix_len header {pl_line:?}")))?;

    let mut tokens = Vec::new();
    let mut roles = Vec::new();
    let mut loss = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::data(format!("malformed dump line {line:?}")));
        }
        let idx: usize = parts[0]
            .parse()
            .map_err(|_| Error::data(format!("bad index in {line:?}")))?;
        if idx != tokens.len() {
            return Err(Error::data(format!(
                "dump line {idx} out of order (expected {})",
                tokens.len()
            )));
        }
        roles.push(Role::parse(parts[1])?);
        tokens.push(
            parts[2]
                .parse()
                .map_err(|_| Error::data(format!("bad token in {line:?}")))?,
        );
        loss.push(match parts[3] {
            "*" => true,
            "-" => false,
            other => return Err(Error::data(format!("bad loss flag {other:?}"))),
        });
    }
    if prefix_len > tokens.len() {
        return Err(Error::data(format!(
            "prefix_len {prefix_len} exceeds sequence length {}",
            tokens.len()
        )));
    }
    Ok(SequenceExample {
        task,
        tokens,
        roles,
        prefix_len,
        loss_mask: loss,
        layout_fp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_layout, VocabConfig};
    use rand::Rng;

    fn layout() -> VocabLayout {
        build_layout(&VocabConfig::desk()).unwrap()
    }

    fn grid(layout: &VocabLayout, shape: (usize, usize, usize), seed: u64) -> TokenGrid {
        let mut rng = crate::util::seeded_rng(seed, "grid");
        let n = shape.0 * shape.1 * shape.2;
        TokenGrid {
            shape,
            tokens: (0..n)
                .map(|_| {
                    layout
                        .visual_id(rng.random_range(0..layout.config().visual_count))
                        .unwrap()
                })
                .collect(),
            codec_fp: 0,
        }
    }

    fn audio(layout: &VocabLayout, frames: usize, seed: u64) -> AudioTokens {
        let mut rng = crate::util::seeded_rng(seed, "audio");
        let levels = layout.config().audio_levels as usize;
        let mut tokens = Vec::new();
        for level in 0..levels {
            for _ in 0..frames {
                let code = rng.random_range(0..layout.config().audio_codes_per_level);
                tokens.push(layout.audio_id(level as u32, code).unwrap());
            }
        }
        AudioTokens {
            levels,
            frames,
            tokens,
            codec_fp: 0,
        }
    }

    fn text(layout: &VocabLayout, n: usize) -> Vec<TokenId> {
        (0..n).map(|i| layout.text_id(i as u32).unwrap()).collect()
    }

    #[test]
    fn worked_t2v_example_has_pinned_shape() {
        let layout = layout();
        let words = text(&layout, 8);
        let out = grid(&layout, (5, 4, 4), 1);
        let seq = build_sequence(
            &layout,
            TaskKind::TextToVideo,
            &SequenceInputs {
                text: Some(&words),
                visual_out: Some(&out),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(seq.len(), 95);
        assert_eq!(seq.prefix_len, 12);
        // Opener right at the boundary, then 80 outputs, closer, eos.
        assert_eq!(seq.tokens[12], layout.special_id(Special::BovO));
        assert!(!seq.loss_mask[12], "opener must not carry loss");
        let loss = seq.loss_positions();
        assert_eq!(loss.len(), 82, "80 visual tokens + closer + eos");
        assert_eq!(loss, (13..=94).collect::<Vec<_>>());
        assert_eq!(*seq.tokens.last().unwrap(), layout.special_id(Special::Eos));
    }

    #[test]
    fn open_ended_image_drops_closers() {
        let layout = layout();
        let words = text(&layout, 8);
        let out = grid(&layout, (1, 4, 4), 2);
        let seq = build_sequence(
            &layout,
            TaskKind::TextToImage,
            &SequenceInputs {
                text: Some(&words),
                visual_out: Some(&out),
                ..Default::default()
            },
        )
        .unwrap();
        // Ends right after the 16th output token.
        assert_eq!(seq.len(), 13 + 16);
        assert_eq!(seq.roles[seq.len() - 1], Role::VisualOut);
        let eov = layout.special_id(Special::EovO);
        let eos = layout.special_id(Special::Eos);
        assert!(!seq.tokens.contains(&eov));
        assert!(!seq.tokens.contains(&eos));
        assert_eq!(seq.loss_positions().len(), 16, "loss on output tokens only");
    }

    #[test]
    fn unconditional_sequence_has_no_input_segments() {
        let layout = layout();
        let out = grid(&layout, (5, 4, 4), 3);
        let seq = build_sequence(
            &layout,
            TaskKind::Uncond,
            &SequenceInputs {
                visual_out: Some(&out),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(seq.len(), 2 + 1 + 80 + 2);
        assert_eq!(seq.prefix_len, 2);
        assert!(seq.roles.iter().all(|r| !matches!(
            r,
            Role::Text | Role::VisualIn | Role::AudioIn
        )));
    }

    #[test]
    fn tag_order_is_text_res_source() {
        let layout = layout();
        let words = text(&layout, 4);
        let out = grid(&layout, (5, 4, 4), 4);
        let seq = build_sequence(
            &layout,
            TaskKind::TextToVideo,
            &SequenceInputs {
                text: Some(&words),
                visual_out: Some(&out),
                res: Some(2),
                source: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        // bos task bot_i 4x text eot_i res source bov_o ...
        assert_eq!(seq.tokens[7], layout.special_id(Special::EotI));
        assert_eq!(seq.tokens[8], layout.special_id(Special::Res(2)));
        assert_eq!(seq.tokens[9], layout.special_id(Special::Source(1)));
        assert_eq!(seq.tokens[10], layout.special_id(Special::BovO));
        assert_eq!(seq.prefix_len, 10);
    }

    #[test]
    fn audio_only_output_opens_with_audio_marker() {
        let layout = layout();
        let vin = grid(&layout, (5, 4, 4), 5);
        let aout = audio(&layout, 53, 6);
        let seq = build_sequence(
            &layout,
            TaskKind::VideoToAudio,
            &SequenceInputs {
                visual_in: Some(&vin),
                audio_out: Some(&aout),
                ..Default::default()
            },
        )
        .unwrap();
        // bos task bov_i 80 eov_i = 84 prefix positions.
        assert_eq!(seq.prefix_len, 84);
        assert_eq!(seq.tokens[84], layout.special_id(Special::BoaO));
        assert_eq!(seq.len(), 84 + 1 + 212 + 2);
        // Audio is serialized level-major: first 53 entries are level 0.
        let l0 = layout.audio_level_range(0).unwrap();
        let l1 = layout.audio_level_range(1).unwrap();
        for i in 0..53 {
            assert!(l0.contains(&seq.tokens[85 + i]));
        }
        assert!(l1.contains(&seq.tokens[85 + 53]));
    }

    #[test]
    fn av_continuation_carries_two_output_segments() {
        let layout = layout();
        let vin = grid(&layout, (1, 4, 4), 7);
        let ain = audio(&layout, 3, 8);
        let vout = grid(&layout, (4, 4, 4), 9);
        let aout = audio(&layout, 50, 10);
        let seq = build_sequence(
            &layout,
            TaskKind::AudioVideoContinue,
            &SequenceInputs {
                visual_in: Some(&vin),
                audio_in: Some(&ain),
                visual_out: Some(&vout),
                audio_out: Some(&aout),
                ..Default::default()
            },
        )
        .unwrap();
        // 2 + (16+2) + (12+2) = 34 prefix positions.
        assert_eq!(seq.prefix_len, 34);
        assert_eq!(seq.len(), 34 + 1 + 64 + 1 + 1 + 200 + 1 + 1);
        let boa = layout.special_id(Special::BoaO);
        let boa_pos = seq.tokens.iter().position(|&t| t == boa).unwrap();
        assert!(!seq.loss_mask[boa_pos], "second opener carries no loss");
        // Closers and eos carry loss.
        let eov = layout.special_id(Special::EovO);
        let eov_pos = seq.tokens.iter().position(|&t| t == eov).unwrap();
        assert!(seq.loss_mask[eov_pos]);
        assert!(seq.loss_mask[seq.len() - 1]);
    }

    #[test]
    fn inference_prefix_ends_after_first_opener() {
        let layout = layout();
        let words = text(&layout, 6);
        let seq = build_sequence(
            &layout,
            TaskKind::TextToVideo,
            &SequenceInputs {
                text: Some(&words),
                source: Some(0),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(seq.len(), seq.prefix_len + 1);
        assert_eq!(
            *seq.tokens.last().unwrap(),
            layout.special_id(Special::BovO)
        );
        assert!(seq.loss_mask.iter().all(|&l| !l));
    }

    #[test]
    fn every_task_builds_and_dump_round_trips() {
        let layout = layout();
        let words = text(&layout, 6);
        let img = grid(&layout, (1, 4, 4), 20);
        let vid = grid(&layout, (5, 4, 4), 21);
        let out_tail = grid(&layout, (4, 4, 4), 22);
        let fp_in = grid(&layout, (3, 4, 4), 23);
        let fp_out = grid(&layout, (2, 4, 4), 24);
        let aud_full = audio(&layout, 53, 25);
        let aud_head = audio(&layout, 3, 26);
        let aud_tail = audio(&layout, 50, 27);

        for spec in enumerate_tasks() {
            let inputs = match spec.kind {
                TaskKind::Uncond => SequenceInputs {
                    visual_out: Some(&vid),
                    ..Default::default()
                },
                TaskKind::TextToVideo => SequenceInputs {
                    text: Some(&words),
                    visual_out: Some(&vid),
                    ..Default::default()
                },
                TaskKind::FramePrediction => SequenceInputs {
                    visual_in: Some(&fp_in),
                    visual_out: Some(&fp_out),
                    ..Default::default()
                },
                TaskKind::ImageToVideo => SequenceInputs {
                    visual_in: Some(&img),
                    visual_out: Some(&out_tail),
                    ..Default::default()
                },
                TaskKind::Inpaint | TaskKind::Outpaint => SequenceInputs {
                    visual_in: Some(&vid),
                    visual_out: Some(&vid),
                    ..Default::default()
                },
                TaskKind::Stylize => SequenceInputs {
                    text: Some(&words),
                    visual_in: Some(&vid),
                    visual_out: Some(&vid),
                    ..Default::default()
                },
                TaskKind::AudioToVideo => SequenceInputs {
                    audio_in: Some(&aud_full),
                    visual_out: Some(&vid),
                    ..Default::default()
                },
                TaskKind::VideoToAudio => SequenceInputs {
                    visual_in: Some(&vid),
                    audio_out: Some(&aud_full),
                    ..Default::default()
                },
                TaskKind::AudioVideoContinue => SequenceInputs {
                    visual_in: Some(&img),
                    audio_in: Some(&aud_head),
                    visual_out: Some(&out_tail),
                    audio_out: Some(&aud_tail),
                    ..Default::default()
                },
                TaskKind::TextToImage => SequenceInputs {
                    text: Some(&words),
                    visual_out: Some(&img),
                    ..Default::default()
                },
            };
            let inputs = SequenceInputs {
                source: Some(0),
                ..inputs
            };
            let seq = build_sequence(&layout, spec.kind, &inputs).unwrap();

            // Loss never precedes the prefix boundary; openers are loss-free.
            for (i, &l) in seq.loss_mask.iter().enumerate() {
                if l {
                    assert!(i > seq.prefix_len, "{}: loss at {i} within prefix", spec.kind);
                }
            }
            // Output segments exist exactly when the spec says.
            assert_eq!(
                seq.roles.iter().any(|r| *r == Role::VisualOut),
                spec.visual_out,
                "{}",
                spec.kind
            );
            assert_eq!(
                seq.roles.iter().any(|r| *r == Role::AudioOut),
                spec.audio_out,
                "{}",
                spec.kind
            );

            let dumped = dump_sequence(&seq);
            let parsed = parse_sequence(&dumped).unwrap();
            assert_eq!(seq, parsed, "{} dump round trip", spec.kind);

            // Length arithmetic agrees with the pure function.
            let counts = ShapeCounts {
                text_slots: inputs.text.map_or(0, |t| t.len()),
                visual_in: inputs.visual_in.map_or(0, |g| g.tokens.len()),
                audio_in: inputs.audio_in.map_or(0, |a| a.tokens.len()),
                visual_out: inputs.visual_out.map_or(0, |g| g.tokens.len()),
                audio_out: inputs.audio_out.map_or(0, |a| a.tokens.len()),
                has_res: false,
                has_source: true,
            };
            assert_eq!(seq.len(), sequence_length(&spec, &counts), "{}", spec.kind);
        }
    }

    #[test]
    fn task_ids_are_shared_by_output_type() {
        let tasks = enumerate_tasks();
        assert_eq!(tasks.len(), 11);
        let slot = |k: TaskKind| task_spec(k).task_slot;
        // Plain visual generation shares one id regardless of conditioning.
        assert_eq!(slot(TaskKind::Uncond), slot(TaskKind::TextToVideo));
        assert_eq!(slot(TaskKind::Uncond), slot(TaskKind::ImageToVideo));
        assert_eq!(slot(TaskKind::Uncond), slot(TaskKind::AudioToVideo));
        assert_eq!(slot(TaskKind::Uncond), slot(TaskKind::TextToImage));
        // Distinct output behaviors get distinct ids.
        let distinct = [
            TaskKind::Uncond,
            TaskKind::FramePrediction,
            TaskKind::Inpaint,
            TaskKind::Outpaint,
            TaskKind::Stylize,
            TaskKind::VideoToAudio,
            TaskKind::AudioVideoContinue,
        ];
        for i in 0..distinct.len() {
            for j in 0..i {
                assert_ne!(slot(distinct[i]), slot(distinct[j]));
            }
        }
        // Exactly one open-ended task.
        assert_eq!(
            tasks.iter().filter(|t| t.open_ended).count(),
            1,
            "image generation is the only open-ended task"
        );
    }

    #[test]
    fn modality_mismatches_are_rejected() {
        let layout = layout();
        let words = text(&layout, 4);
        let vid = grid(&layout, (5, 4, 4), 30);
        // Missing required text.
        assert!(build_sequence(
            &layout,
            TaskKind::TextToVideo,
            &SequenceInputs {
                visual_out: Some(&vid),
                ..Default::default()
            }
        )
        .is_err());
        // Unexpected text.
        assert!(build_sequence(
            &layout,
            TaskKind::Uncond,
            &SequenceInputs {
                text: Some(&words),
                visual_out: Some(&vid),
                ..Default::default()
            }
        )
        .is_err());
        // Partial outputs for a two-output task.
        let img = grid(&layout, (1, 4, 4), 31);
        let ain = audio(&layout, 3, 32);
        assert!(build_sequence(
            &layout,
            TaskKind::AudioVideoContinue,
            &SequenceInputs {
                visual_in: Some(&img),
                audio_in: Some(&ain),
                visual_out: Some(&vid),
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn text_overflow_and_bad_tags_are_rejected() {
        let layout = layout();
        let too_many = text(&layout, 65);
        assert!(build_sequence(
            &layout,
            TaskKind::TextToImage,
            &SequenceInputs {
                text: Some(&too_many),
                ..Default::default()
            }
        )
        .is_err());
        let words = text(&layout, 4);
        assert!(build_sequence(
            &layout,
            TaskKind::TextToImage,
            &SequenceInputs {
                text: Some(&words),
                res: Some(200),
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn wrong_partition_tokens_are_rejected() {
        let layout = layout();
        let vid = grid(&layout, (5, 4, 4), 40);
        // Special ids passed off as text.
        let bogus = vec![0u32, 1, 2, 3];
        assert!(build_sequence(
            &layout,
            TaskKind::TextToVideo,
            &SequenceInputs {
                text: Some(&bogus),
                visual_out: Some(&vid),
                ..Default::default()
            }
        )
        .is_err());
        // Audio ids in a visual grid.
        let bad_grid = TokenGrid {
            shape: (1, 2, 2),
            tokens: vec![layout.audio_id(0, 0).unwrap(); 4],
            codec_fp: 0,
        };
        assert!(build_sequence(
            &layout,
            TaskKind::ImageToVideo,
            &SequenceInputs {
                visual_in: Some(&bad_grid),
                visual_out: Some(&vid),
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn decode_script_matches_training_layout() {
        let layout = layout();
        // For every task, the script must predict exactly the loss-bearing
        // positions of a training sequence, in order.
        let words = text(&layout, 6);
        let vid = grid(&layout, (5, 4, 4), 50);
        let aud = audio(&layout, 53, 51);
        let img = grid(&layout, (1, 4, 4), 52);
        let cases: Vec<(TaskKind, SequenceInputs, usize, usize)> = vec![
            (
                TaskKind::TextToVideo,
                SequenceInputs {
                    text: Some(&words),
                    visual_out: Some(&vid),
                    ..Default::default()
                },
                80,
                0,
            ),
            (
                TaskKind::VideoToAudio,
                SequenceInputs {
                    visual_in: Some(&vid),
                    audio_out: Some(&aud),
                    ..Default::default()
                },
                0,
                53,
            ),
            (
                TaskKind::TextToImage,
                SequenceInputs {
                    text: Some(&words),
                    visual_out: Some(&img),
                    ..Default::default()
                },
                16,
                0,
            ),
        ];
        for (kind, inputs, vis, aud_frames) in cases {
            let seq = build_sequence(&layout, kind, &inputs).unwrap();
            let script = decode_script(kind, vis, aud_frames, 4).unwrap();
            // Script steps line up one-to-one with positions after the opener.
            let tail = &seq.tokens[seq.prefix_len + 1..];
            assert_eq!(script.len(), tail.len(), "{kind}");
            for (step, &tok) in script.iter().zip(tail) {
                match step {
                    ScriptStep::Visual => {
                        assert!(layout.visual_range().contains(&tok), "{kind}")
                    }
                    ScriptStep::Audio { level } => {
                        assert!(
                            layout.audio_level_range(*level).unwrap().contains(&tok),
                            "{kind}"
                        )
                    }
                    ScriptStep::Exact(s) => {
                        assert_eq!(tok, layout.special_id(*s), "{kind}")
                    }
                }
            }
        }
    }

    #[test]
    fn parse_rejects_corrupt_dumps() {
        let layout = layout();
        let vid = grid(&layout, (5, 4, 4), 60);
        let seq = build_sequence(
            &layout,
            TaskKind::Uncond,
            &SequenceInputs {
                visual_out: Some(&vid),
                ..Default::default()
            },
        )
        .unwrap();
        let good = dump_sequence(&seq);
        assert!(parse_sequence(&good).is_ok());
        assert!(parse_sequence("").is_err());
        assert!(parse_sequence("task nope\nlayout_fp 0\nprefix_len 0\n").is_err());
        // Out-of-order index.
        let mut lines: Vec<String> = good.lines().map(String::from).collect();
        lines.swap(3, 4);
        assert!(parse_sequence(&lines.join("\n")).is_err());
        // Bad loss flag.
        let bad = good.replace(" -\n", " x\n");
        assert!(parse_sequence(&bad).is_err());
    }
}
