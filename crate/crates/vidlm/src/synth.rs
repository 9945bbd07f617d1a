//! Procedural dataset: a colored shape slides across a dark background at a
//! constant velocity, paired with a six-word caption, a speed-keyed audio
//! tone, and analytic optical flow and depth.
//!
//! Everything is exactly reproducible: pixel values are u8 grid points,
//! positions are integer arithmetic on the frame index, and all randomness
//! comes from the dataset seed. The caption template is invertible, so
//! fidelity checks can recover the scene facts from the text alone.

use ndarray::{Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::VideoClip;
use crate::error::{Error, Result};
use crate::util::{fnv1a_extend, seeded_rng};
use crate::vocab::{Partition, TokenId, VocabLayout};

// ---------------------------------------------------------------------------
// Scene vocabulary

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub fn all() -> [Color; 4] {
        [Color::Red, Color::Green, Color::Blue, Color::Yellow]
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    /// RGB on the u8 grid, scaled to [0, 1].
    pub fn rgb(self) -> [f64; 3] {
        let v = |c: u8| c as f64 / 255.0;
        match self {
            Color::Red => [v(220), v(50), v(50)],
            Color::Green => [v(50), v(220), v(50)],
            Color::Blue => [v(50), v(50), v(220)],
            Color::Yellow => [v(220), v(220), v(50)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Shape {
    Square,
    Circle,
}

impl Shape {
    pub fn all() -> [Shape; 2] {
        [Shape::Square, Shape::Circle]
    }

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub fn all() -> [Direction; 4] {
        [Direction::Left, Direction::Right, Direction::Up, Direction::Down]
    }

    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    /// Unit step (dx, dy) in pixel coordinates; y grows downward.
    pub fn unit(self) -> (i64, i64) {
        match self {
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Speed {
    Slow,
    Fast,
}

impl Speed {
    pub fn all() -> [Speed; 2] {
        [Speed::Slow, Speed::Fast]
    }

    pub fn word(self) -> &'static str {
        match self {
            Speed::Slow => "slowly",
            Speed::Fast => "quickly",
        }
    }

    /// Nominal velocity in pixels per frame.
    pub fn px_per_frame(self) -> f64 {
        match self {
            Speed::Slow => 0.5,
            Speed::Fast => 1.0,
        }
    }

    /// Integer displacement after `t` frames (slow alternates 0/1 steps).
    pub fn displacement(self, t: usize) -> i64 {
        match self {
            Speed::Slow => (t / 2) as i64,
            Speed::Fast => t as i64,
        }
    }

    pub fn tone_hz(self) -> f64 {
        match self {
            Speed::Slow => 400.0,
            Speed::Fast => 600.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Scene spec and captions

pub const BACKGROUND: f64 = 30.0 / 255.0;
pub const DEPTH_SHAPE: f64 = 0.8;
pub const DEPTH_BACKGROUND: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub color: Color,
    pub shape: Shape,
    pub dir: Direction,
    pub speed: Speed,
    /// Side length of the shape's bounding box in pixels.
    pub size: usize,
    /// Top-left corner of the bounding box at frame 0.
    pub start: (usize, usize),
}

impl SceneSpec {
    /// Top-left corner at frame `t` (integer pixels, u8-exact rendering).
    pub fn position(&self, t: usize) -> (i64, i64) {
        let (ux, uy) = self.dir.unit();
        let d = self.speed.displacement(t);
        (self.start.0 as i64 + ux * d, self.start.1 as i64 + uy * d)
    }

    /// The shape must stay fully inside the frame for the whole clip.
    pub fn validate(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        for t in [0, frames.saturating_sub(1)] {
            let (x, y) = self.position(t);
            if x < 0 || y < 0 || x + self.size as i64 > width as i64 || y + self.size as i64 > height as i64
            {
                return Err(Error::data(format!(
                    "shape leaves the {width}x{height} frame at t={t} (corner {x},{y}, size {})",
                    self.size
                )));
            }
        }
        Ok(())
    }

    /// "a {color} {shape} moves {direction} {adverb}" — always six words.
    pub fn caption(&self) -> String {
        format!(
            "a {} {} moves {} {}",
            self.color.word(),
            self.shape.word(),
            self.dir.word(),
            self.speed.word()
        )
    }

    fn mask(&self, t: usize, height: usize, width: usize) -> Vec<(usize, usize)> {
        let (x0, y0) = self.position(t);
        let s = self.size;
        let mut cells = Vec::with_capacity(s * s);
        let c = (s as f64 - 1.0) / 2.0;
        let r2 = (s as f64 / 2.0).powi(2);
        for dy in 0..s {
            for dx in 0..s {
                if self.shape == Shape::Circle {
                    let dd = (dy as f64 - c).powi(2) + (dx as f64 - c).powi(2);
                    if dd > r2 {
                        continue;
                    }
                }
                let (x, y) = (x0 + dx as i64, y0 + dy as i64);
                if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                    cells.push((y as usize, x as usize));
                }
            }
        }
        cells
    }
}

/// The full word list used by captions; token index = position in the list.
pub fn caption_words() -> &'static [&'static str] {
    &[
        "a", "red", "green", "blue", "yellow", "square", "circle", "moves", "left", "right",
        "up", "down", "slowly", "quickly",
    ]
}

/// The categorical facts recoverable from a caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionFacts {
    pub color: Color,
    pub shape: Shape,
    pub dir: Direction,
    pub speed: Speed,
}

pub fn parse_caption(caption: &str) -> Result<CaptionFacts> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    if words.len() != 6 || words[0] != "a" || words[3] != "moves" {
        return Err(Error::data(format!("caption '{caption}' is not from the template")));
    }
    let color = Color::all()
        .into_iter()
        .find(|c| c.word() == words[1])
        .ok_or_else(|| Error::data(format!("unknown color '{}'", words[1])))?;
    let shape = Shape::all()
        .into_iter()
        .find(|s| s.word() == words[2])
        .ok_or_else(|| Error::data(format!("unknown shape '{}'", words[2])))?;
    let dir = Direction::all()
        .into_iter()
        .find(|d| d.word() == words[4])
        .ok_or_else(|| Error::data(format!("unknown direction '{}'", words[4])))?;
    let speed = Speed::all()
        .into_iter()
        .find(|s| s.word() == words[5])
        .ok_or_else(|| Error::data(format!("unknown adverb '{}'", words[5])))?;
    Ok(CaptionFacts { color, shape, dir, speed })
}

/// Map caption words to text-partition token ids.
pub fn tokenize_caption(layout: &VocabLayout, caption: &str) -> Result<Vec<TokenId>> {
    let words = caption_words();
    caption
        .split_whitespace()
        .map(|w| {
            let idx = words
                .iter()
                .position(|&k| k == w)
                .ok_or_else(|| Error::data(format!("word '{w}' is outside the caption vocabulary")))?;
            layout.text_id(idx as u32)
        })
        .collect()
}

/// Inverse of `tokenize_caption`.
pub fn detokenize_caption(layout: &VocabLayout, tokens: &[TokenId]) -> Result<String> {
    let words = caption_words();
    let base = layout.text_range().start;
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if layout.classify(t)? != Partition::Text {
            return Err(Error::data(format!("token {t} is not a text slot")));
        }
        let idx = (t - base) as usize;
        if idx >= words.len() {
            return Err(Error::data(format!("text slot {idx} has no caption word")));
        }
        out.push(words[idx]);
    }
    Ok(out.join(" "))
}

// ---------------------------------------------------------------------------
// Rendering

/// Geometry and timing of generated clips.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u32,
    pub sample_rate: u32,
    /// Fraction of clips held out of training, exact count per dataset.
    pub holdout_fraction: f64,
    /// Fraction of clips flagged high quality, exact count per dataset.
    pub hq_fraction: f64,
}

impl SynthConfig {
    pub fn desk() -> SynthConfig {
        SynthConfig {
            frames: 17,
            height: 32,
            width: 32,
            fps: 8,
            sample_rate: 1600,
            holdout_fraction: 0.1,
            hq_fraction: 0.25,
        }
    }

    pub fn audio_samples(&self) -> usize {
        (self.frames as f64 / self.fps as f64 * self.sample_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Held,
}

/// One generated example with every modality and its ground truth.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub spec: SceneSpec,
    pub caption: String,
    pub video: VideoClip,
    pub audio: Vec<f64>,
    /// Per-frame (dx, dy) velocity field, pixels per frame.
    pub flow: Array4<f64>,
    pub depth: Array3<f64>,
    pub hq: bool,
    pub split: Split,
}

/// Render the video frames for a scene. Values are u8 grid points.
pub fn render_video(spec: &SceneSpec, cfg: &SynthConfig) -> Result<VideoClip> {
    spec.validate(cfg.frames, cfg.height, cfg.width)?;
    let mut frames = Array4::from_elem((cfg.frames, cfg.height, cfg.width, 3), BACKGROUND);
    let rgb = spec.color.rgb();
    for t in 0..cfg.frames {
        for (y, x) in spec.mask(t, cfg.height, cfg.width) {
            for c in 0..3 {
                frames[[t, y, x, c]] = rgb[c];
            }
        }
    }
    VideoClip::new(frames, cfg.fps)
}

/// Analytic flow and depth: the nominal velocity inside the shape and zero
/// outside; depth is a two-level map (shape near, background far).
pub fn render_structure(spec: &SceneSpec, cfg: &SynthConfig) -> Result<(Array4<f64>, Array3<f64>)> {
    spec.validate(cfg.frames, cfg.height, cfg.width)?;
    let mut flow = Array4::zeros((cfg.frames, cfg.height, cfg.width, 2));
    let mut depth = Array3::from_elem((cfg.frames, cfg.height, cfg.width), DEPTH_BACKGROUND);
    let (ux, uy) = spec.dir.unit();
    let v = spec.speed.px_per_frame();
    for t in 0..cfg.frames {
        for (y, x) in spec.mask(t, cfg.height, cfg.width) {
            flow[[t, y, x, 0]] = ux as f64 * v;
            flow[[t, y, x, 1]] = uy as f64 * v;
            depth[[t, y, x]] = DEPTH_SHAPE;
        }
    }
    Ok((flow, depth))
}

/// A half-amplitude sine at the speed's tone frequency.
pub fn render_audio(spec: &SceneSpec, cfg: &SynthConfig) -> Vec<f64> {
    let n = cfg.audio_samples();
    let f = spec.speed.tone_hz();
    let sr = cfg.sample_rate as f64;
    (0..n)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / sr).sin())
        .collect()
}

/// Draw a scene that provably stays in frame.
pub fn sample_scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SceneSpec> {
    let color = Color::all()[rng.random_range(0..4)];
    let shape = Shape::all()[rng.random_range(0..2)];
    let dir = Direction::all()[rng.random_range(0..4)];
    let speed = Speed::all()[rng.random_range(0..2)];
    let size = rng.random_range(6..=10usize);
    let travel = speed.displacement(cfg.frames - 1) as usize;
    let margin = 1usize;
    let free_x = cfg.width.checked_sub(2 * margin + size).ok_or_else(|| {
        Error::config(format!("frame {}x{} too small for size {size}", cfg.width, cfg.height))
    })?;
    let free_y = cfg
        .height
        .checked_sub(2 * margin + size)
        .ok_or_else(|| Error::config("frame too small".to_string()))?;
    let (ux, uy) = dir.unit();
    let range_on = |free: usize, u: i64| -> Result<(usize, usize)> {
        // Start range so start + u*travel stays within [margin, margin+free].
        let room = free.checked_sub(if u != 0 { travel } else { 0 }).ok_or_else(|| {
            Error::config(format!(
                "clip of {} frames travels {travel} px, too far for this frame",
                cfg.frames
            ))
        })?;
        Ok(if u < 0 { (margin + travel, room + 1) } else { (margin, room + 1) })
    };
    let (lo_x, n_x) = range_on(free_x, ux)?;
    let (lo_y, n_y) = range_on(free_y, uy)?;
    let start = (
        lo_x + rng.random_range(0..n_x),
        lo_y + rng.random_range(0..n_y),
    );
    let spec = SceneSpec { color, shape, dir, speed, size, start };
    spec.validate(cfg.frames, cfg.height, cfg.width)?;
    Ok(spec)
}

/// Generate `n` clips. Deterministic in (cfg, n, seed): each clip derives
/// its own stream from the dataset seed and its index, and the split and
/// quality flags are exact-count index draws.
pub fn make_dataset(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<SynthClip>> {
    if n == 0 {
        return Err(Error::config("dataset needs at least one clip".to_string()));
    }
    let held_count = (n as f64 * cfg.holdout_fraction).round() as usize;
    let hq_count = (n as f64 * cfg.hq_fraction).round() as usize;
    let mut split_rng = seeded_rng(seed, "synth-split");
    let held: std::collections::HashSet<usize> =
        rand::seq::index::sample(&mut split_rng, n, held_count.min(n)).into_iter().collect();
    let mut hq_rng = seeded_rng(seed, "synth-hq");
    let hq: std::collections::HashSet<usize> =
        rand::seq::index::sample(&mut hq_rng, n, hq_count.min(n)).into_iter().collect();

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let clip_seed = fnv1a_extend(seed, &(i as u64).to_le_bytes());
        let mut rng = seeded_rng(clip_seed, "synth-clip");
        let spec = sample_scene(cfg, &mut rng)?;
        let video = render_video(&spec, cfg)?;
        let (flow, depth) = render_structure(&spec, cfg)?;
        let audio = render_audio(&spec, cfg);
        out.push(SynthClip {
            caption: spec.caption(),
            spec,
            video,
            audio,
            flow,
            depth,
            hq: hq.contains(&i),
            split: if held.contains(&i) { Split::Held } else { Split::Train },
        });
    }
    Ok(out)
}
