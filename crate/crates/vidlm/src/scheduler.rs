//! Multi-task training schedule: tasks are grouped by exact sequence length,
//! one group is drawn per step, and a curriculum shifts mass between image
//! and video groups over training.
//!
//! Because every batch comes from one group and all members of a group
//! produce identical sequence lengths, emitted batches never contain padding.
//! `greedy_packing_ratio` is the baseline this is measured against.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{sequence_length, task_spec, ShapeCounts, TaskKind};
use crate::util::seeded_rng;

// ---------------------------------------------------------------------------
// Members and groups

/// One (task, modality shapes) combination the trainer will draw batches for.
/// Shapes are latent-grid dims and audio frame counts, not pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMember {
    pub task: TaskKind,
    pub text_slots: usize,
    /// Latent grid (t', h', w') fed as conditioning, if the task takes one.
    pub visual_in: Option<(usize, usize, usize)>,
    /// Latent grid produced as output, if the task emits one.
    pub visual_out: Option<(usize, usize, usize)>,
    /// Audio latent frames in and out (tokens = frames x levels).
    pub audio_in_frames: Option<usize>,
    pub audio_out_frames: Option<usize>,
    pub has_res: bool,
    pub has_source: bool,
}

impl GroupMember {
    /// Token counts for the length function, with `levels` audio levels.
    pub fn counts(&self, levels: u32) -> ShapeCounts {
        let grid = |g: Option<(usize, usize, usize)>| g.map_or(0, |(t, h, w)| t * h * w);
        let audio = |f: Option<usize>| f.map_or(0, |n| n * levels as usize);
        ShapeCounts {
            text_slots: self.text_slots,
            visual_in: grid(self.visual_in),
            audio_in: audio(self.audio_in_frames),
            visual_out: grid(self.visual_out),
            audio_out: audio(self.audio_out_frames),
            has_res: self.has_res,
            has_source: self.has_source,
        }
    }

    pub fn seq_len(&self, levels: u32) -> usize {
        sequence_length(&task_spec(self.task), &self.counts(levels))
    }

    /// A member counts as image data when its visual output is a single
    /// latent frame.
    fn is_image(&self) -> bool {
        matches!(self.visual_out, Some((1, _, _)))
    }
}

/// Tasks sharing one exact sequence length; the unit the schedule draws.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGroup {
    pub seq_len: usize,
    pub members: Vec<GroupMember>,
}

impl TaskGroup {
    /// Image groups get the image-phase weight; everything else is video.
    pub fn is_image(&self) -> bool {
        self.members.iter().all(|m| m.is_image())
    }

    /// Stable label for weight overrides and logs, e.g. "t2v+i2v@95".
    pub fn label(&self) -> String {
        let mut names: Vec<&str> = self.members.iter().map(|m| m.task.name()).collect();
        names.dedup();
        format!("{}@{}", names.join("+"), self.seq_len)
    }
}

/// Group members by exact sequence length. Groups come out sorted by length,
/// so indices are stable given the same member set.
pub fn build_groups(members: &[GroupMember], audio_levels: u32) -> Result<Vec<TaskGroup>> {
    if members.is_empty() {
        return Err(Error::config("schedule needs at least one member".to_string()));
    }
    let mut by_len: BTreeMap<usize, Vec<GroupMember>> = BTreeMap::new();
    for m in members {
        by_len.entry(m.seq_len(audio_levels)).or_default().push(m.clone());
    }
    Ok(by_len
        .into_iter()
        .map(|(seq_len, members)| TaskGroup { seq_len, members })
        .collect())
}

// ---------------------------------------------------------------------------
// Curriculum

/// Replaces a group's raw weight before normalization. `pattern` matches a
/// group when it equals "*", the group's class ("image" / "video"), one of
/// its member task names, or its full label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightOverride {
    pub pattern: String,
    pub weight: f64,
}

impl WeightOverride {
    fn matches(&self, group: &TaskGroup) -> bool {
        if self.pattern == "*" {
            return true;
        }
        if self.pattern == "image" {
            return group.is_image();
        }
        if self.pattern == "video" {
            return !group.is_image();
        }
        if self.pattern == group.label() {
            return true;
        }
        group.members.iter().any(|m| m.task.name() == self.pattern)
    }
}

/// One span of training steps with its own group weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPhase {
    /// Step range [start, end).
    pub start: usize,
    pub end: usize,
    /// Mass given to image groups (video groups share the rest). Split
    /// uniformly within each class.
    pub image_weight: f64,
    /// When set, batches in this phase draw only from the filtered
    /// high-quality subset of the dataset.
    pub hq_only: bool,
    #[serde(default)]
    pub overrides: Vec<WeightOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub total_steps: usize,
    pub phases: Vec<CurriculumPhase>,
}

impl Curriculum {
    /// The two-stage mix: the first quarter of training is 90% image data,
    /// the rest is 90% video data.
    pub fn two_stage(total_steps: usize) -> Curriculum {
        let split = total_steps / 4;
        Curriculum {
            total_steps,
            phases: vec![
                CurriculumPhase {
                    start: 0,
                    end: split,
                    image_weight: 0.9,
                    hq_only: false,
                    overrides: Vec::new(),
                },
                CurriculumPhase {
                    start: split,
                    end: total_steps,
                    image_weight: 0.1,
                    hq_only: false,
                    overrides: Vec::new(),
                },
            ],
        }
    }

    /// Two-stage mix plus a final phase restricted to high-quality examples.
    pub fn with_finetune(total_steps: usize, finetune_start: usize) -> Result<Curriculum> {
        let mut c = Curriculum::two_stage(total_steps);
        let split = c.phases[1].start;
        if finetune_start <= split || finetune_start >= total_steps {
            return Err(Error::config(format!(
                "finetune start {finetune_start} outside ({split}, {total_steps})"
            )));
        }
        c.phases[1].end = finetune_start;
        c.phases.push(CurriculumPhase {
            start: finetune_start,
            end: total_steps,
            image_weight: 0.1,
            hq_only: true,
            overrides: Vec::new(),
        });
        Ok(c)
    }

    /// Phases must partition [0, total_steps) in order.
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("curriculum with zero steps".to_string()));
        }
        let mut cursor = 0;
        for (i, p) in self.phases.iter().enumerate() {
            if p.start != cursor || p.end <= p.start {
                return Err(Error::config(format!(
                    "phase {i} spans [{}, {}), expected to start at {cursor} and be non-empty",
                    p.start, p.end
                )));
            }
            if !(0.0..=1.0).contains(&p.image_weight) {
                return Err(Error::config(format!(
                    "phase {i} image weight {} outside [0, 1]",
                    p.image_weight
                )));
            }
            for o in &p.overrides {
                if !(o.weight.is_finite() && o.weight >= 0.0) {
                    return Err(Error::config(format!(
                        "phase {i} override '{}' has invalid weight {}",
                        o.pattern, o.weight
                    )));
                }
            }
            cursor = p.end;
        }
        if cursor != self.total_steps {
            return Err(Error::config(format!(
                "phases end at {cursor}, curriculum runs to {}",
                self.total_steps
            )));
        }
        Ok(())
    }

    pub fn phase_at(&self, step: usize) -> Result<&CurriculumPhase> {
        self.phases
            .iter()
            .find(|p| (p.start..p.end).contains(&step))
            .ok_or_else(|| Error::data(format!("step {step} outside curriculum [0, {})", self.total_steps)))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("curriculum encode: {e}")))
    }

    pub fn from_toml_string(s: &str) -> Result<Curriculum> {
        let c: Curriculum =
            toml::from_str(s).map_err(|e| Error::config(format!("curriculum parse: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}

// ---------------------------------------------------------------------------
// Weights and the scheduler

/// Normalized sampling weights for `groups` under `phase`. Class mass is
/// split uniformly within the class, overrides replace raw weights, and the
/// result is renormalized, so dropping one group redistributes its mass
/// proportionally across the rest.
pub fn phase_weights(groups: &[TaskGroup], phase: &CurriculumPhase) -> Result<Vec<f64>> {
    if groups.is_empty() {
        return Err(Error::config("no groups to weight".to_string()));
    }
    let image_count = groups.iter().filter(|g| g.is_image()).count();
    let video_count = groups.len() - image_count;
    let mut weights: Vec<f64> = groups
        .iter()
        .map(|g| {
            if g.is_image() {
                phase.image_weight / image_count.max(1) as f64
            } else {
                (1.0 - phase.image_weight) / video_count.max(1) as f64
            }
        })
        .collect();
    for o in &phase.overrides {
        for (g, w) in groups.iter().zip(weights.iter_mut()) {
            if o.matches(g) {
                *w = o.weight;
            }
        }
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::config(
            "schedule weights sum to zero; every group is disabled".to_string(),
        ));
    }
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// Draws one group per step according to the active phase. Deterministic:
/// the same seed and curriculum replay the same group sequence.
#[derive(Debug, Clone)]
pub struct Scheduler {
    groups: Vec<TaskGroup>,
    curriculum: Curriculum,
    rng: ChaCha8Rng,
    step: usize,
}

/// What the trainer gets for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduledStep {
    pub step: usize,
    pub group: usize,
    pub hq_only: bool,
}

impl Scheduler {
    pub fn new(groups: Vec<TaskGroup>, curriculum: Curriculum, seed: u64) -> Result<Scheduler> {
        curriculum.validate()?;
        if groups.is_empty() {
            return Err(Error::config("scheduler needs at least one group".to_string()));
        }
        // Fail fast if any phase zeroes everything out.
        for p in &curriculum.phases {
            phase_weights(&groups, p)?;
        }
        Ok(Scheduler {
            groups,
            curriculum,
            rng: seeded_rng(seed, "schedule"),
            step: 0,
        })
    }

    pub fn groups(&self) -> &[TaskGroup] {
        &self.groups
    }

    pub fn curriculum(&self) -> &Curriculum {
        &self.curriculum
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.curriculum.total_steps
    }

    /// Group index drawn for the current step; advances the step counter.
    pub fn next_group(&mut self) -> Result<ScheduledStep> {
        if self.is_done() {
            return Err(Error::data(format!(
                "step {} beyond curriculum of {}",
                self.step, self.curriculum.total_steps
            )));
        }
        let phase = self.curriculum.phase_at(self.step)?;
        let weights = phase_weights(&self.groups, phase)?;
        let draw: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut chosen = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if draw < acc {
                chosen = i;
                break;
            }
        }
        let out = ScheduledStep {
            step: self.step,
            group: chosen,
            hq_only: phase.hq_only,
        };
        self.step += 1;
        Ok(out)
    }

    /// Replay draws up to `step`, for resuming a run mid-curriculum.
    pub fn advance_to(&mut self, step: usize) -> Result<()> {
        if step < self.step {
            return Err(Error::data(format!(
                "cannot rewind schedule from {} to {step}",
                self.step
            )));
        }
        while self.step < step {
            self.next_group()?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Padding diagnostics

/// Fraction of wasted positions when each batch is padded to its longest
/// member. Length-grouped batches give exactly 0.
pub fn padding_ratio(batches: &[Vec<usize>]) -> f64 {
    let mut padded = 0usize;
    let mut total = 0usize;
    for batch in batches {
        if batch.is_empty() {
            continue;
        }
        let max = *batch.iter().max().unwrap();
        padded += batch.iter().map(|&l| max - l).sum::<usize>();
        total += max * batch.len();
    }
    if total == 0 {
        0.0
    } else {
        padded as f64 / total as f64
    }
}

/// Baseline comparator: pack sequences greedily (first fit) into bins of
/// `capacity` positions and count the leftover space as padding.
pub fn greedy_packing_ratio(lengths: &[usize], capacity: usize) -> f64 {
    let mut bins: Vec<usize> = Vec::new(); // used positions per bin
    for &len in lengths {
        assert!(len <= capacity, "sequence longer than bin capacity");
        match bins.iter_mut().find(|used| **used + len <= capacity) {
            Some(used) => *used += len,
            None => bins.push(len),
        }
    }
    if bins.is_empty() {
        return 0.0;
    }
    let used: usize = bins.iter().sum();
    let total = bins.len() * capacity;
    (total - used) as f64 / total as f64
}
