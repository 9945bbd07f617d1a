//! Discrete tokenizers that turn pixels and waveforms into vocabulary ids.
//!
//! The video side quantizes non-overlapping spatio-temporal patches against
//! learned code tables. Time is compressed causally: the first latent frame
//! covers pixel frame 0 alone, and latent frame `i` (i >= 1) covers pixel
//! frames `4(i-1)+1 ..= 4i`. Nothing downstream of a pixel frame can change
//! tokens for earlier latent frames, which is what makes image conditioning
//! work: tokenizing a single frame as an image gives exactly the first latent
//! frame of any video that starts with it.
//!
//! The audio side is a residual quantizer: each of four levels picks the
//! nearest code to what the previous levels left unexplained. Code 0 of every
//! level is pinned to the zero vector, so quantization error never increases
//! with depth and silence maps to code 0 at every level.

use ndarray::{Array3, Array4, ArrayView1};
use rand::seq::index::sample as sample_indices;

use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::util::{seeded_rng, Fingerprint};
use crate::vocab::{Partition, TokenId, VocabLayout};

// ---------------------------------------------------------------------------
// Configs

/// Geometry and size of the video tokenizer.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CodecConfig {
    /// Pixel frames per body latent frame.
    pub temporal_factor: usize,
    /// Pixel rows/cols per latent cell.
    pub spatial_factor: usize,
    /// Rows in each code table; must match the vocabulary's visual count.
    pub code_count: usize,
    /// Frame rate the codec was built for.
    pub fps: u32,
}

impl CodecConfig {
    pub fn desk() -> CodecConfig {
        CodecConfig {
            temporal_factor: 4,
            spatial_factor: 8,
            code_count: 4096,
            fps: 8,
        }
    }

    /// Production-scale geometry. Only the shape arithmetic is usable at this
    /// size; the tables themselves would not fit a desk machine.
    pub fn full_scale() -> CodecConfig {
        CodecConfig {
            temporal_factor: 4,
            spatial_factor: 8,
            code_count: 262_144,
            fps: 8,
        }
    }

    pub fn compact() -> CodecConfig {
        CodecConfig {
            code_count: 1024,
            ..CodecConfig::desk()
        }
    }

    /// Dimension of a first-frame patch: one frame of `s x s` RGB.
    pub fn first_dim(&self) -> usize {
        self.spatial_factor * self.spatial_factor * 3
    }

    /// Dimension of a body patch: `temporal_factor` frames of `s x s` RGB.
    pub fn body_dim(&self) -> usize {
        self.temporal_factor * self.first_dim()
    }
}

/// Latent grid shape for a pixel clip, or an error if the clip does not tile.
pub fn latent_shape(cfg: &CodecConfig, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("empty clip {t}x{h}x{w}")));
    }
    if (t - 1) % cfg.temporal_factor != 0 {
        return Err(Error::shape(format!(
            "frame count {t} is not 1 mod {}",
            cfg.temporal_factor
        )));
    }
    if h % cfg.spatial_factor != 0 || w % cfg.spatial_factor != 0 {
        return Err(Error::shape(format!(
            "frame size {h}x{w} is not a multiple of {}",
            cfg.spatial_factor
        )));
    }
    Ok((
        1 + (t - 1) / cfg.temporal_factor,
        h / cfg.spatial_factor,
        w / cfg.spatial_factor,
    ))
}

/// Visual tokens a clip of the given pixel shape produces.
pub fn token_count(cfg: &CodecConfig, t: usize, h: usize, w: usize) -> Result<usize> {
    let (lt, lh, lw) = latent_shape(cfg, t, h, w)?;
    Ok(lt * lh * lw)
}

// ---------------------------------------------------------------------------
// Pixel clips

/// A pixel video: frames indexed [time, row, col, channel], values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Array4<f64>,
    pub fps: u32,
}

impl VideoClip {
    pub fn new(frames: Array4<f64>, fps: u32) -> Result<VideoClip> {
        let (t, h, w, c) = frames.dim();
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("empty clip {t}x{h}x{w}")));
        }
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        for &v in frames.iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::data(format!("pixel value {v} outside [0, 1]")));
            }
        }
        Ok(VideoClip { frames, fps })
    }

    pub fn t(&self) -> usize {
        self.frames.dim().0
    }

    pub fn h(&self) -> usize {
        self.frames.dim().1
    }

    pub fn w(&self) -> usize {
        self.frames.dim().2
    }

    /// The first frame as a single-frame clip.
    pub fn first_frame(&self) -> VideoClip {
        VideoClip {
            frames: self
                .frames
                .slice(ndarray::s![0..1, .., .., ..])
                .to_owned(),
            fps: self.fps,
        }
    }
}

// ---------------------------------------------------------------------------
// Token containers

/// Quantized video: latent shape plus one unified-vocabulary id per cell,
/// flattened in (time, row, col) order. Carries the producing codec's
/// fingerprint so stale token data cannot silently cross codec versions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub shape: (usize, usize, usize),
    pub tokens: Vec<TokenId>,
    pub codec_fp: u64,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.shape.1 + y) * self.shape.2 + x
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> TokenId {
        self.tokens[self.index(t, y, x)]
    }
}

/// Quantized audio: `frames` codes per level, serialized level-major
/// (all of level 0, then level 1, ...).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioTokens {
    pub levels: usize,
    pub frames: usize,
    pub tokens: Vec<TokenId>,
    pub codec_fp: u64,
}

impl AudioTokens {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn get(&self, level: usize, frame: usize) -> TokenId {
        self.tokens[level * self.frames + frame]
    }
}

// ---------------------------------------------------------------------------
// Shared k-means machinery

/// Options for fitting code tables.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct KMeansOpts {
    pub iterations: usize,
    /// Cap on training vectors; more get subsampled deterministically.
    pub max_samples: usize,
}

impl Default for KMeansOpts {
    fn default() -> Self {
        KMeansOpts {
            iterations: 10,
            max_samples: 20_000,
        }
    }
}

/// Nearest-row assignment. For each data row, the index minimizing
/// ||c||^2 - 2 x.c (the ||x||^2 term is constant per row). Processes rows in
/// chunks to bound the score matrix size.
fn assign(data: &Mat, table: &Mat) -> Vec<usize> {
    let k = table.nrows();
    let cnorm: Vec<f64> = table
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect();
    let mut out = Vec::with_capacity(data.nrows());
    let chunk = 256;
    let mut start = 0;
    while start < data.nrows() {
        let end = (start + chunk).min(data.nrows());
        let scores = data
            .slice(ndarray::s![start..end, ..])
            .dot(&table.t());
        for row in scores.rows() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let d = cnorm[j] - 2.0 * row[j];
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            out.push(best);
        }
        start = end;
    }
    out
}

/// Make all rows pairwise distinct by nudging later duplicates toward the
/// middle of [lo, hi]. Rows below `pinned` are never modified. The nudge is
/// large enough (1e-4) that squared distances dominate float noise in the
/// assignment step, which is what makes tokenize(detokenize(g)) == g hold
/// exactly.
fn repair_duplicate_rows(table: &mut Mat, pinned: usize, lo: f64, hi: f64) {
    let eps = 1e-4;
    let mid = 0.5 * (lo + hi);
    let k = table.nrows();
    let d = table.ncols();
    for i in pinned.max(1)..k {
        let mut mult = 1.0;
        let mut dim = 0;
        loop {
            let dup = (0..i).any(|j| table.row(j) == table.row(i));
            if !dup {
                break;
            }
            let cur = table[[i, dim]];
            let delta = if cur < mid { mult * eps } else { -mult * eps };
            table[[i, dim]] = (cur + delta).clamp(lo, hi);
            dim = (dim + 1) % d;
            if dim == 0 {
                mult += 1.0;
            }
        }
    }
}

/// Lloyd's algorithm with deterministic seeding. The first `pinned` rows stay
/// at zero. Empty clusters keep their previous centroid. Output rows are
/// pairwise distinct.
fn kmeans(
    data: &Mat,
    k: usize,
    pinned: usize,
    opts: &KMeansOpts,
    seed: u64,
    tag: &str,
    lo: f64,
    hi: f64,
) -> Result<Mat> {
    let n = data.nrows();
    let d = data.ncols();
    if n == 0 {
        return Err(Error::data("no training vectors for code table".to_string()));
    }
    let mut rng = seeded_rng(seed, tag);

    // Subsample if over budget.
    let data_owned;
    let data = if n > opts.max_samples {
        let idx = sample_indices(&mut rng, n, opts.max_samples);
        let mut sub = Mat::zeros((opts.max_samples, d));
        for (row, src) in idx.iter().enumerate() {
            sub.row_mut(row).assign(&data.row(src));
        }
        data_owned = sub;
        &data_owned
    } else {
        data
    };
    let n = data.nrows();

    let mut table = Mat::zeros((k, d));
    let free = k - pinned;
    if n >= free {
        let idx = sample_indices(&mut rng, n, free);
        for (row, src) in idx.iter().enumerate() {
            table.row_mut(pinned + row).assign(&data.row(src));
        }
    } else {
        // Fewer samples than codes: cycle through what we have; the repair
        // pass below separates the copies.
        for row in 0..free {
            table.row_mut(pinned + row).assign(&data.row(row % n));
        }
    }

    for _ in 0..opts.iterations {
        let labels = assign(data, &table);
        let mut sums = Mat::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &data.row(i));
            counts[l] += 1;
        }
        for j in pinned..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                let mut row = table.row_mut(j);
                row.assign(&sums.row(j));
                row.mapv_inplace(|v| v * inv);
            }
        }
    }

    repair_duplicate_rows(&mut table, pinned, lo, hi);
    for &v in table.iter() {
        if !v.is_finite() {
            return Err(Error::numeric("non-finite centroid after fit".to_string()));
        }
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Video codec

/// Patch quantizer with two code tables over the same id range: one for the
/// standalone first frame, one for four-frame body blocks.
#[derive(Debug, Clone)]
pub struct VideoCodec {
    cfg: CodecConfig,
    /// [code_count, s*s*3]
    first: Mat,
    /// [code_count, temporal_factor*s*s*3]
    body: Mat,
    fp: u64,
}

impl VideoCodec {
    pub fn from_tables(cfg: CodecConfig, first: Mat, body: Mat) -> Result<VideoCodec> {
        if first.nrows() != cfg.code_count || body.nrows() != cfg.code_count {
            return Err(Error::shape(format!(
                "code tables have {} / {} rows, config wants {}",
                first.nrows(),
                body.nrows(),
                cfg.code_count
            )));
        }
        if first.ncols() != cfg.first_dim() || body.ncols() != cfg.body_dim() {
            return Err(Error::shape(format!(
                "code dims {} / {} do not match config {} / {}",
                first.ncols(),
                body.ncols(),
                cfg.first_dim(),
                cfg.body_dim()
            )));
        }
        let mut f = Fingerprint::new("video-codec-v1");
        f.push_u64(cfg.temporal_factor as u64);
        f.push_u64(cfg.spatial_factor as u64);
        f.push_u64(cfg.code_count as u64);
        f.push_u64(cfg.fps as u64);
        f.push_f64_slice(first.as_slice().unwrap());
        f.push_f64_slice(body.as_slice().unwrap());
        let fp = f.finish();
        Ok(VideoCodec {
            cfg,
            first,
            body,
            fp,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn fingerprint(&self) -> u64 {
        self.fp
    }

    /// First-frame and body code tables, for persistence.
    pub fn tables(&self) -> (&Mat, &Mat) {
        (&self.first, &self.body)
    }

    fn check_layout(&self, layout: &VocabLayout) -> Result<()> {
        if layout.config().visual_count as usize != self.cfg.code_count {
            return Err(Error::config(format!(
                "codec has {} codes but vocabulary has {} visual ids",
                self.cfg.code_count,
                layout.config().visual_count
            )));
        }
        Ok(())
    }

    /// Quantize a clip. Emits unified-vocabulary visual ids.
    pub fn tokenize_video(&self, clip: &VideoClip, layout: &VocabLayout) -> Result<TokenGrid> {
        self.check_layout(layout)?;
        if clip.fps != self.cfg.fps {
            return Err(Error::data(format!(
                "clip is {} fps, codec expects {}",
                clip.fps, self.cfg.fps
            )));
        }
        let (lt, lh, lw) = latent_shape(&self.cfg, clip.t(), clip.h(), clip.w())?;

        let first_patches = self.gather_first(clip, lh, lw);
        let first_codes = assign(&first_patches, &self.first);

        let mut tokens = Vec::with_capacity(lt * lh * lw);
        for &c in &first_codes {
            tokens.push(layout.visual_id(c as u32)?);
        }
        if lt > 1 {
            let body_patches = self.gather_body(clip, lt, lh, lw);
            let body_codes = assign(&body_patches, &self.body);
            for &c in &body_codes {
                tokens.push(layout.visual_id(c as u32)?);
            }
        }
        Ok(TokenGrid {
            shape: (lt, lh, lw),
            tokens,
            codec_fp: self.fp,
        })
    }

    /// Quantize a single frame with the first-frame table.
    pub fn tokenize_image(&self, clip: &VideoClip, layout: &VocabLayout) -> Result<TokenGrid> {
        if clip.t() != 1 {
            return Err(Error::shape(format!(
                "image tokenizer expects one frame, got {}",
                clip.t()
            )));
        }
        self.tokenize_video(clip, layout)
    }

    /// Reconstruct pixels from a token grid.
    pub fn detokenize_video(&self, grid: &TokenGrid, layout: &VocabLayout) -> Result<VideoClip> {
        self.check_layout(layout)?;
        if grid.codec_fp != self.fp {
            return Err(Error::Fingerprint {
                expected: self.fp,
                found: grid.codec_fp,
                context: "token grid vs video codec".to_string(),
            });
        }
        let (lt, lh, lw) = grid.shape;
        if grid.tokens.len() != lt * lh * lw {
            return Err(Error::shape(format!(
                "grid claims {}x{}x{} but holds {} tokens",
                lt,
                lh,
                lw,
                grid.tokens.len()
            )));
        }
        let s = self.cfg.spatial_factor;
        let tf = self.cfg.temporal_factor;
        let t = 1 + (lt - 1) * tf;
        let mut frames = Array4::<f64>::zeros((t, lh * s, lw * s, 3));
        for lt_i in 0..lt {
            for by in 0..lh {
                for bx in 0..lw {
                    let code = self.local_code(grid.get(lt_i, by, bx), layout)?;
                    if lt_i == 0 {
                        self.scatter_patch(&mut frames, self.first.row(code), &[0], by, bx);
                    } else {
                        let f0 = (lt_i - 1) * tf + 1;
                        let src: Vec<usize> = (f0..f0 + tf).collect();
                        self.scatter_patch(&mut frames, self.body.row(code), &src, by, bx);
                    }
                }
            }
        }
        VideoClip::new(frames, self.cfg.fps)
    }

    fn local_code(&self, id: TokenId, layout: &VocabLayout) -> Result<usize> {
        match layout.classify(id)? {
            Partition::Visual => Ok((id - layout.visual_range().start) as usize),
            p => Err(Error::data(format!(
                "token {id} is in the {p:?} partition, expected visual"
            ))),
        }
    }

    /// Patch element order is (frame, row, col, channel); fixed contract
    /// shared by gather, scatter, and the trainer.
    fn gather_first(&self, clip: &VideoClip, lh: usize, lw: usize) -> Mat {
        let s = self.cfg.spatial_factor;
        let mut out = Mat::zeros((lh * lw, self.cfg.first_dim()));
        for by in 0..lh {
            for bx in 0..lw {
                let mut col = 0;
                let mut row = out.row_mut(by * lw + bx);
                for y in 0..s {
                    for x in 0..s {
                        for ch in 0..3 {
                            row[col] = clip.frames[[0, by * s + y, bx * s + x, ch]];
                            col += 1;
                        }
                    }
                }
            }
        }
        out
    }

    fn gather_body(&self, clip: &VideoClip, lt: usize, lh: usize, lw: usize) -> Mat {
        let s = self.cfg.spatial_factor;
        let tf = self.cfg.temporal_factor;
        let mut out = Mat::zeros(((lt - 1) * lh * lw, self.cfg.body_dim()));
        for lt_i in 1..lt {
            let f0 = (lt_i - 1) * tf + 1;
            for by in 0..lh {
                for bx in 0..lw {
                    let mut col = 0;
                    let mut row = out.row_mut(((lt_i - 1) * lh + by) * lw + bx);
                    for dt in 0..tf {
                        for y in 0..s {
                            for x in 0..s {
                                for ch in 0..3 {
                                    row[col] = clip.frames[[f0 + dt, by * s + y, bx * s + x, ch]];
                                    col += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn scatter_patch(
        &self,
        frames: &mut Array4<f64>,
        code: ArrayView1<'_, f64>,
        frame_idx: &[usize],
        by: usize,
        bx: usize,
    ) {
        let s = self.cfg.spatial_factor;
        let mut col = 0;
        for &f in frame_idx {
            for y in 0..s {
                for x in 0..s {
                    for ch in 0..3 {
                        frames[[f, by * s + y, bx * s + x, ch]] = code[col];
                        col += 1;
                    }
                }
            }
        }
    }
}

/// Fit both code tables on a clip corpus.
pub fn train_video_codec(
    cfg: &CodecConfig,
    clips: &[VideoClip],
    opts: &KMeansOpts,
    seed: u64,
) -> Result<VideoCodec> {
    if clips.is_empty() {
        return Err(Error::data("no clips to train on".to_string()));
    }
    let scratch = VideoCodec {
        cfg: cfg.clone(),
        first: Mat::zeros((0, cfg.first_dim())),
        body: Mat::zeros((0, cfg.body_dim())),
        fp: 0,
    };
    let mut first_rows = Vec::new();
    let mut body_rows = Vec::new();
    for clip in clips {
        let (lt, lh, lw) = latent_shape(cfg, clip.t(), clip.h(), clip.w())?;
        first_rows.push(scratch.gather_first(clip, lh, lw));
        if lt > 1 {
            body_rows.push(scratch.gather_body(clip, lt, lh, lw));
        }
    }
    let stack = |mats: &[Mat], d: usize| -> Mat {
        let n: usize = mats.iter().map(|m| m.nrows()).sum();
        let mut out = Mat::zeros((n, d));
        let mut at = 0;
        for m in mats {
            out.slice_mut(ndarray::s![at..at + m.nrows(), ..]).assign(m);
            at += m.nrows();
        }
        out
    };
    let first_data = stack(&first_rows, cfg.first_dim());
    let first = kmeans(&first_data, cfg.code_count, 0, opts, seed, "video-first", 0.0, 1.0)?;
    let body = if body_rows.is_empty() {
        // Image-only corpus: tile the first table across time so the codec
        // stays usable for any clip shape.
        let mut body = Mat::zeros((cfg.code_count, cfg.body_dim()));
        for k in 0..cfg.code_count {
            for dt in 0..cfg.temporal_factor {
                let d1 = cfg.first_dim();
                body.row_mut(k)
                    .slice_mut(ndarray::s![dt * d1..(dt + 1) * d1])
                    .assign(&first.row(k));
            }
        }
        repair_duplicate_rows(&mut body, 0, 0.0, 1.0);
        body
    } else {
        let body_data = stack(&body_rows, cfg.body_dim());
        kmeans(&body_data, cfg.code_count, 0, opts, seed, "video-body", 0.0, 1.0)?
    };
    VideoCodec::from_tables(cfg.clone(), first, body)
}

// ---------------------------------------------------------------------------
// Audio codec

/// Geometry and size of the audio tokenizer. A latent frame is `hop` raw
/// samples; each of `levels` residual stages has its own code table.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AudioCodecConfig {
    pub sample_rate: u32,
    pub hop: usize,
    pub levels: usize,
    pub code_count: usize,
}

impl AudioCodecConfig {
    pub fn desk() -> AudioCodecConfig {
        AudioCodecConfig {
            sample_rate: 1600,
            hop: 64,
            levels: 4,
            code_count: 1024,
        }
    }

    pub fn full_scale() -> AudioCodecConfig {
        AudioCodecConfig {
            sample_rate: 24_000,
            hop: 480,
            levels: 4,
            code_count: 1024,
        }
    }

    pub fn compact() -> AudioCodecConfig {
        AudioCodecConfig {
            code_count: 256,
            ..AudioCodecConfig::desk()
        }
    }

    /// Latent frames for a waveform of `n` samples (partial tail dropped).
    pub fn frame_count(&self, n: usize) -> usize {
        n / self.hop
    }

    /// Latent frames per second of audio.
    pub fn frames_per_second(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }
}

/// Residual quantizer over fixed-size waveform windows.
#[derive(Debug, Clone)]
pub struct AudioCodec {
    cfg: AudioCodecConfig,
    /// One [code_count, hop] table per level; row 0 of each is all zero.
    books: Vec<Mat>,
    fp: u64,
}

impl AudioCodec {
    pub fn from_tables(cfg: AudioCodecConfig, books: Vec<Mat>) -> Result<AudioCodec> {
        if books.len() != cfg.levels {
            return Err(Error::shape(format!(
                "{} tables for {} levels",
                books.len(),
                cfg.levels
            )));
        }
        for (l, b) in books.iter().enumerate() {
            if b.nrows() != cfg.code_count || b.ncols() != cfg.hop {
                return Err(Error::shape(format!(
                    "level {l} table is {}x{}, config wants {}x{}",
                    b.nrows(),
                    b.ncols(),
                    cfg.code_count,
                    cfg.hop
                )));
            }
            if b.row(0).iter().any(|&v| v != 0.0) {
                return Err(Error::data(format!("level {l} code 0 must be the zero vector")));
            }
        }
        let mut f = Fingerprint::new("audio-codec-v1");
        f.push_u64(cfg.sample_rate as u64);
        f.push_u64(cfg.hop as u64);
        f.push_u64(cfg.levels as u64);
        f.push_u64(cfg.code_count as u64);
        for b in &books {
            f.push_f64_slice(b.as_slice().unwrap());
        }
        let fp = f.finish();
        Ok(AudioCodec { cfg, books, fp })
    }

    pub fn config(&self) -> &AudioCodecConfig {
        &self.cfg
    }

    pub fn fingerprint(&self) -> u64 {
        self.fp
    }

    /// Per-level code tables, for persistence.
    pub fn books(&self) -> &[Mat] {
        &self.books
    }

    fn check_layout(&self, layout: &VocabLayout) -> Result<()> {
        if layout.config().audio_levels as usize != self.cfg.levels
            || layout.config().audio_codes_per_level as usize != self.cfg.code_count
        {
            return Err(Error::config(format!(
                "codec has {} levels x {} codes, vocabulary has {} x {}",
                self.cfg.levels,
                self.cfg.code_count,
                layout.config().audio_levels,
                layout.config().audio_codes_per_level
            )));
        }
        Ok(())
    }

    /// Quantize a waveform. Emits unified-vocabulary audio ids, level-major.
    pub fn tokenize_audio(&self, samples: &[f64], layout: &VocabLayout) -> Result<AudioTokens> {
        self.check_layout(layout)?;
        let frames = self.cfg.frame_count(samples.len());
        if frames == 0 {
            return Err(Error::data(format!(
                "waveform of {} samples is shorter than one hop ({})",
                samples.len(),
                self.cfg.hop
            )));
        }
        let hop = self.cfg.hop;
        let mut residual = Mat::zeros((frames, hop));
        for i in 0..frames {
            for j in 0..hop {
                residual[[i, j]] = samples[i * hop + j];
            }
        }
        let mut tokens = Vec::with_capacity(self.cfg.levels * frames);
        for (level, book) in self.books.iter().enumerate() {
            let codes = assign(&residual, book);
            for i in 0..frames {
                let mut row = residual.row_mut(i);
                row -= &book.row(codes[i]);
            }
            for &c in &codes {
                tokens.push(layout.audio_id(level as u32, c as u32)?);
            }
        }
        Ok(AudioTokens {
            levels: self.cfg.levels,
            frames,
            tokens,
            codec_fp: self.fp,
        })
    }

    /// Reconstruct `frames * hop` samples by summing code vectors per level.
    pub fn detokenize_audio(&self, tokens: &AudioTokens, layout: &VocabLayout) -> Result<Vec<f64>> {
        self.check_layout(layout)?;
        if tokens.codec_fp != self.fp {
            return Err(Error::Fingerprint {
                expected: self.fp,
                found: tokens.codec_fp,
                context: "audio tokens vs audio codec".to_string(),
            });
        }
        if tokens.levels != self.cfg.levels || tokens.tokens.len() != tokens.levels * tokens.frames {
            return Err(Error::shape(format!(
                "token container claims {} levels x {} frames but holds {} ids",
                tokens.levels,
                tokens.frames,
                tokens.tokens.len()
            )));
        }
        let hop = self.cfg.hop;
        let mut out = vec![0.0; tokens.frames * hop];
        for level in 0..tokens.levels {
            let book = &self.books[level];
            for frame in 0..tokens.frames {
                let id = tokens.get(level, frame);
                let (lvl, code) = match layout.classify(id)? {
                    Partition::Audio { level } => {
                        let start = layout.audio_level_range(level)?.start;
                        (level, (id - start) as usize)
                    }
                    p => {
                        return Err(Error::data(format!(
                            "token {id} is in the {p:?} partition, expected audio"
                        )))
                    }
                };
                if lvl as usize != level {
                    return Err(Error::data(format!(
                        "token {id} belongs to level {lvl}, found in level {level} slot"
                    )));
                }
                let row = book.row(code);
                for j in 0..hop {
                    out[frame * hop + j] += row[j];
                }
            }
        }
        Ok(out)
    }

    /// Per-level mean squared residual after cumulative quantization, mostly
    /// for diagnostics and tests.
    pub fn level_errors(&self, samples: &[f64]) -> Result<Vec<f64>> {
        let frames = self.cfg.frame_count(samples.len());
        if frames == 0 {
            return Err(Error::data("waveform shorter than one hop".to_string()));
        }
        let hop = self.cfg.hop;
        let mut residual = Mat::zeros((frames, hop));
        for i in 0..frames {
            for j in 0..hop {
                residual[[i, j]] = samples[i * hop + j];
            }
        }
        let mut errs = Vec::with_capacity(self.cfg.levels);
        for book in &self.books {
            let codes = assign(&residual, book);
            for i in 0..frames {
                let mut row = residual.row_mut(i);
                row -= &book.row(codes[i]);
            }
            let mse = residual.iter().map(|v| v * v).sum::<f64>() / (frames * hop) as f64;
            errs.push(mse);
        }
        Ok(errs)
    }
}

/// Fit the residual code tables on a waveform corpus. Level l trains on what
/// levels 0..l left behind; code 0 of every level stays pinned at zero.
pub fn train_audio_codec(
    cfg: &AudioCodecConfig,
    waveforms: &[Vec<f64>],
    opts: &KMeansOpts,
    seed: u64,
) -> Result<AudioCodec> {
    let hop = cfg.hop;
    let total_frames: usize = waveforms.iter().map(|w| cfg.frame_count(w.len())).sum();
    if total_frames == 0 {
        return Err(Error::data("no audio frames to train on".to_string()));
    }
    let mut residual = Mat::zeros((total_frames, hop));
    let mut at = 0;
    for w in waveforms {
        for f in 0..cfg.frame_count(w.len()) {
            for j in 0..hop {
                residual[[at, j]] = w[f * hop + j];
            }
            at += 1;
        }
    }
    let mut books = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        let tag = format!("audio-level-{level}");
        let book = kmeans(&residual, cfg.code_count, 1, opts, seed, &tag, -2.0, 2.0)?;
        let codes = assign(&residual, &book);
        for i in 0..total_frames {
            let mut row = residual.row_mut(i);
            row -= &book.row(codes[i]);
        }
        books.push(book);
    }
    AudioCodec::from_tables(cfg.clone(), books)
}

// ---------------------------------------------------------------------------
// Structure channels

/// Pack optical flow and depth into pixel channels the video codec can
/// tokenize: x/y flow mapped through (f / flow_scale + 1) / 2, depth as-is,
/// all clamped to [0, 1].
pub fn pack_structure(
    flow: &Array4<f64>,
    depth: &Array3<f64>,
    flow_scale: f64,
    fps: u32,
) -> Result<VideoClip> {
    let (t, h, w, two) = flow.dim();
    if two != 2 {
        return Err(Error::shape(format!("flow needs 2 channels, got {two}")));
    }
    if depth.dim() != (t, h, w) {
        return Err(Error::shape(format!(
            "depth shape {:?} does not match flow {:?}",
            depth.dim(),
            (t, h, w)
        )));
    }
    if flow_scale <= 0.0 {
        return Err(Error::config(format!("flow_scale must be positive, got {flow_scale}")));
    }
    let mut frames = Array4::<f64>::zeros((t, h, w, 3));
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let fx = (flow[[ti, y, x, 0]] / flow_scale + 1.0) / 2.0;
                let fy = (flow[[ti, y, x, 1]] / flow_scale + 1.0) / 2.0;
                frames[[ti, y, x, 0]] = fx.clamp(0.0, 1.0);
                frames[[ti, y, x, 1]] = fy.clamp(0.0, 1.0);
                frames[[ti, y, x, 2]] = depth[[ti, y, x]].clamp(0.0, 1.0);
            }
        }
    }
    VideoClip::new(frames, fps)
}

pub const DEFAULT_FLOW_SCALE: f64 = 4.0;

// ---------------------------------------------------------------------------
// Painting masks

/// Which part of the frame gets blanked before tokenizing a painting input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskRegion {
    /// Blank the centered box (the model fills the middle back in).
    CenterBox,
    /// Blank everything outside the centered box (the model extends outward).
    OutsideCenterBox,
}

/// Centered box of half the height and width: (y0, x0, box_h, box_w).
pub fn center_box(h: usize, w: usize) -> (usize, usize, usize, usize) {
    let bh = h / 2;
    let bw = w / 2;
    ((h - bh) / 2, (w - bw) / 2, bh, bw)
}

pub const MASK_FILL: f64 = 0.5;

/// Replace the masked region with a constant fill on every frame.
pub fn apply_mask(clip: &VideoClip, region: MaskRegion, fill: f64) -> VideoClip {
    let (y0, x0, bh, bw) = center_box(clip.h(), clip.w());
    let mut frames = clip.frames.clone();
    let (t, h, w, c) = frames.dim();
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let inside = y >= y0 && y < y0 + bh && x >= x0 && x < x0 + bw;
                let blank = match region {
                    MaskRegion::CenterBox => inside,
                    MaskRegion::OutsideCenterBox => !inside,
                };
                if blank {
                    for ch in 0..c {
                        frames[[ti, y, x, ch]] = fill;
                    }
                }
            }
        }
    }
    VideoClip { frames, fps: clip.fps }
}

/// Shrink every frame by block-averaging `factor` x `factor` pixel patches.
/// The paired full-size and shrunk clips make upsampler training data.
pub fn downsample(clip: &VideoClip, factor: usize) -> Result<VideoClip> {
    let (t, h, w, c) = clip.frames.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "cannot shrink {h}x{w} frames by {factor}"
        )));
    }
    let (sh, sw) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut frames = Array4::zeros((t, sh, sw, c));
    for ti in 0..t {
        for y in 0..sh {
            for x in 0..sw {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += clip.frames[[ti, y * factor + dy, x * factor + dx, ch]];
                        }
                    }
                    frames[[ti, y, x, ch]] = acc * norm;
                }
            }
        }
    }
    VideoClip::new(frames, clip.fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_layout, VocabConfig};
    use rand::Rng;

    fn tiny_vocab(codes: u32) -> VocabLayout {
        // Smallest legal vocabulary wrapping `codes` visual ids.
        let base = (codes as f64).sqrt() as u32;
        assert_eq!(base * base, codes, "test vocab wants a square code count");
        build_layout(&VocabConfig {
            special_count: 256,
            visual_count: codes,
            audio_levels: 4,
            audio_codes_per_level: 64,
            text_vocab_count: 64,
            factor_base: base,
            factor_k: 2,
        })
        .unwrap()
    }

    fn tiny_codec_cfg(codes: usize) -> CodecConfig {
        CodecConfig {
            temporal_factor: 4,
            spatial_factor: 8,
            code_count: codes,
            fps: 8,
        }
    }

    fn random_clip(seed: u64, t: usize, h: usize, w: usize) -> VideoClip {
        let mut rng = seeded_rng(seed, "clip");
        let frames = Array4::from_shape_fn((t, h, w, 3), |_| rng.random::<f64>());
        VideoClip::new(frames, 8).unwrap()
    }

    fn trained_codec(codes: usize, seed: u64) -> VideoCodec {
        let clips: Vec<VideoClip> = (0..3).map(|i| random_clip(seed + i, 9, 16, 16)).collect();
        let opts = KMeansOpts {
            iterations: 4,
            max_samples: 4000,
        };
        train_video_codec(&tiny_codec_cfg(codes), &clips, &opts, seed).unwrap()
    }

    #[test]
    fn latent_shapes_match_known_cases() {
        let cfg = CodecConfig::desk();
        assert_eq!(latent_shape(&cfg, 17, 32, 32).unwrap(), (5, 4, 4));
        assert_eq!(token_count(&cfg, 17, 32, 32).unwrap(), 80);

        let full = CodecConfig::full_scale();
        assert_eq!(token_count(&full, 17, 128, 128).unwrap(), 1280);
        assert_eq!(latent_shape(&full, 17, 128, 128).unwrap(), (5, 16, 16));
        assert_eq!(token_count(&full, 17, 224, 128).unwrap(), 2240);
        assert_eq!(latent_shape(&full, 17, 224, 128).unwrap(), (5, 28, 16));
        assert_eq!(token_count(&full, 1, 128, 128).unwrap(), 256);
    }

    #[test]
    fn latent_shape_rejects_bad_geometry() {
        let cfg = CodecConfig::desk();
        assert!(latent_shape(&cfg, 16, 32, 32).is_err(), "16 is not 1 mod 4");
        assert!(latent_shape(&cfg, 17, 30, 32).is_err(), "30 not divisible by 8");
        assert!(latent_shape(&cfg, 0, 32, 32).is_err(), "empty clip");
    }

    #[test]
    fn audio_frame_counts_match_known_cases() {
        let desk = AudioCodecConfig::desk();
        // 2.125 s at 1600 Hz.
        assert_eq!(desk.frame_count(3400), 53);
        assert_eq!(desk.frames_per_second(), 25.0);

        let full = AudioCodecConfig::full_scale();
        // 2.125 s at 24 kHz: 106.25 frames floors to 106.
        assert_eq!(full.frame_count(51_000), 106);
        assert_eq!(full.frame_count(51_000) * full.levels, 424);
        assert_eq!(full.frames_per_second(), 50.0);
    }

    #[test]
    fn tokenize_desk_clip_produces_80_visual_ids() {
        let layout = tiny_vocab(64);
        let codec = trained_codec(64, 11);
        let clip = random_clip(99, 17, 32, 32);
        let grid = codec.tokenize_video(&clip, &layout).unwrap();
        assert_eq!(grid.shape, (5, 4, 4));
        assert_eq!(grid.len(), 80);
        let vr = layout.visual_range();
        for &t in &grid.tokens {
            assert!(vr.contains(&t), "token {t} outside visual range");
        }
    }

    #[test]
    fn detokenize_then_tokenize_is_identity() {
        let layout = tiny_vocab(64);
        let codec = trained_codec(64, 22);
        let mut rng = seeded_rng(7, "grids");
        for _ in 0..100 {
            let tokens: Vec<TokenId> = (0..80)
                .map(|_| layout.visual_id(rng.random_range(0..64u32)).unwrap())
                .collect();
            let grid = TokenGrid {
                shape: (5, 4, 4),
                tokens,
                codec_fp: codec.fingerprint(),
            };
            let clip = codec.detokenize_video(&grid, &layout).unwrap();
            let back = codec.tokenize_video(&clip, &layout).unwrap();
            assert_eq!(grid, back, "token grid drifted through a pixel round trip");
        }
    }

    #[test]
    fn tokens_depend_only_on_their_causal_frame_window() {
        let layout = tiny_vocab(64);
        let codec = trained_codec(64, 33);
        let clip = random_clip(5, 17, 16, 16);
        let base = codec.tokenize_video(&clip, &layout).unwrap();
        let (lt, lh, lw) = base.shape;

        for j in 0..17 {
            let mut frames = clip.frames.clone();
            for y in 0..16 {
                for x in 0..16 {
                    for c in 0..3 {
                        frames[[j, y, x, c]] = 1.0 - frames[[j, y, x, c]];
                    }
                }
            }
            let perturbed = codec
                .tokenize_video(&VideoClip::new(frames, 8).unwrap(), &layout)
                .unwrap();
            // Pixel frame j feeds exactly one latent frame.
            let owner = if j == 0 { 0 } else { j.div_ceil(4) };
            for t in 0..lt {
                if t == owner {
                    continue;
                }
                for y in 0..lh {
                    for x in 0..lw {
                        assert_eq!(
                            base.get(t, y, x),
                            perturbed.get(t, y, x),
                            "frame {j} leaked into latent frame {t}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn first_latent_frame_equals_image_tokens_of_first_frame() {
        let layout = tiny_vocab(64);
        let codec = trained_codec(64, 44);
        let clip = random_clip(12, 17, 16, 16);
        let video = codec.tokenize_video(&clip, &layout).unwrap();
        let image = codec.tokenize_image(&clip.first_frame(), &layout).unwrap();
        assert_eq!(image.shape, (1, 2, 2));
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(video.get(0, y, x), image.get(0, y, x));
            }
        }
    }

    #[test]
    fn codec_trains_with_fewer_samples_than_codes() {
        let layout = tiny_vocab(256);
        // One 9-frame 16x16 clip: 4 first patches, 8 body patches, 256 codes.
        let clips = vec![random_clip(3, 9, 16, 16)];
        let codec = train_video_codec(
            &tiny_codec_cfg(256),
            &clips,
            &KMeansOpts {
                iterations: 2,
                max_samples: 1000,
            },
            9,
        )
        .unwrap();
        let grid = codec.tokenize_video(&clips[0], &layout).unwrap();
        assert_eq!(grid.len(), 12);
    }

    #[test]
    fn code_tables_have_pairwise_distinct_rows_even_on_degenerate_data() {
        // Every patch identical: k-means alone would collapse all centroids.
        let frames = Array4::from_elem((9, 16, 16, 3), 0.25);
        let clips = vec![VideoClip::new(frames, 8).unwrap()];
        let codec = train_video_codec(
            &tiny_codec_cfg(64),
            &clips,
            &KMeansOpts {
                iterations: 3,
                max_samples: 1000,
            },
            1,
        )
        .unwrap();
        for (name, table) in [("first", &codec.first), ("body", &codec.body)] {
            for i in 0..table.nrows() {
                for j in 0..i {
                    assert_ne!(
                        table.row(i),
                        table.row(j),
                        "{name} rows {i} and {j} are identical"
                    );
                }
            }
            for &v in table.iter() {
                assert!((0.0..=1.0).contains(&v), "{name} centroid value {v} out of range");
            }
        }
    }

    #[test]
    fn fingerprint_tracks_tables_and_config() {
        let a = trained_codec(64, 50);
        let b = trained_codec(64, 51);
        assert_ne!(a.fingerprint(), b.fingerprint(), "different fits, same print");
        let c = VideoCodec::from_tables(a.cfg.clone(), a.first.clone(), a.body.clone()).unwrap();
        assert_eq!(a.fingerprint(), c.fingerprint(), "same tables, same print");
        let mut first = a.first.clone();
        first[[0, 0]] += 1e-9;
        let d = VideoCodec::from_tables(a.cfg.clone(), first, a.body.clone()).unwrap();
        assert_ne!(a.fingerprint(), d.fingerprint(), "perturbed table, same print");
    }

    #[test]
    fn detokenize_rejects_foreign_fingerprints_and_partitions() {
        let layout = tiny_vocab(64);
        let codec = trained_codec(64, 60);
        let grid = TokenGrid {
            shape: (1, 2, 2),
            tokens: vec![layout.visual_id(0).unwrap(); 4],
            codec_fp: codec.fingerprint() ^ 1,
        };
        assert!(matches!(
            codec.detokenize_video(&grid, &layout),
            Err(Error::Fingerprint { .. })
        ));
        let grid = TokenGrid {
            shape: (1, 2, 2),
            tokens: vec![0; 4], // special-partition ids
            codec_fp: codec.fingerprint(),
        };
        assert!(codec.detokenize_video(&grid, &layout).is_err());
    }

    #[test]
    fn tokenize_rejects_mismatched_inputs() {
        let layout = tiny_vocab(64);
        let codec = trained_codec(64, 70);
        let clip = random_clip(1, 16, 16, 16);
        assert!(codec.tokenize_video(&clip, &layout).is_err(), "16 frames");
        let wrong_fps = VideoClip {
            frames: random_clip(2, 17, 16, 16).frames,
            fps: 30,
        };
        assert!(codec.tokenize_video(&wrong_fps, &layout).is_err(), "fps mismatch");
        let big_vocab = tiny_vocab(256);
        let ok_clip = random_clip(3, 17, 16, 16);
        assert!(codec.tokenize_video(&ok_clip, &big_vocab).is_err(), "vocab mismatch");
        let image = random_clip(4, 9, 16, 16);
        assert!(codec.tokenize_image(&image, &layout).is_err(), "multi-frame image");
    }

    fn random_wave(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = seeded_rng(seed, "wave");
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    fn trained_audio(seed: u64) -> (AudioCodecConfig, AudioCodec) {
        let cfg = AudioCodecConfig {
            sample_rate: 1600,
            hop: 64,
            levels: 4,
            code_count: 64,
        };
        let waves: Vec<Vec<f64>> = (0..4).map(|i| random_wave(seed + i, 1600)).collect();
        let codec = train_audio_codec(
            &cfg,
            &waves,
            &KMeansOpts {
                iterations: 4,
                max_samples: 4000,
            },
            seed,
        )
        .unwrap();
        (cfg, codec)
    }

    #[test]
    fn residual_levels_never_increase_error() {
        let (_, codec) = trained_audio(100);
        let wave = random_wave(999, 3400);
        let errs = codec.level_errors(&wave).unwrap();
        assert_eq!(errs.len(), 4);
        for i in 1..errs.len() {
            assert!(
                errs[i] <= errs[i - 1] + 1e-15,
                "level {i} error {} above level {} error {}",
                errs[i],
                i - 1,
                errs[i - 1]
            );
        }
        // And quantization actually helps on in-distribution data.
        let wave_energy = wave.iter().map(|v| v * v).sum::<f64>() / wave.len() as f64;
        assert!(errs[3] < wave_energy);
    }

    #[test]
    fn silence_maps_to_code_zero_at_every_level() {
        let layout = tiny_vocab(64);
        let (cfg, codec) = trained_audio(200);
        let silence = vec![0.0; 640];
        let toks = codec.tokenize_audio(&silence, &layout).unwrap();
        assert_eq!(toks.frames, 10);
        for level in 0..cfg.levels {
            let zero_id = layout.audio_id(level as u32, 0).unwrap();
            for f in 0..toks.frames {
                assert_eq!(toks.get(level, f), zero_id, "level {level} frame {f}");
            }
        }
        let back = codec.detokenize_audio(&toks, &layout).unwrap();
        assert!(back.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn audio_round_trip_reduces_error_and_keeps_counts() {
        let layout = tiny_vocab(64);
        let (_, codec) = trained_audio(300);
        let wave = random_wave(5, 3400);
        let toks = codec.tokenize_audio(&wave, &layout).unwrap();
        assert_eq!(toks.frames, 53);
        assert_eq!(toks.len(), 212);
        for &t in &toks.tokens {
            assert!(matches!(layout.classify(t).unwrap(), Partition::Audio { .. }));
        }
        let back = codec.detokenize_audio(&toks, &layout).unwrap();
        assert_eq!(back.len(), 53 * 64);
        let err: f64 = back
            .iter()
            .zip(&wave)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / back.len() as f64;
        let energy: f64 = wave[..back.len()].iter().map(|v| v * v).sum::<f64>() / back.len() as f64;
        assert!(err < energy, "reconstruction no better than silence");
    }

    #[test]
    fn audio_level_ids_live_in_their_own_ranges() {
        let layout = tiny_vocab(64);
        let (cfg, codec) = trained_audio(400);
        let wave = random_wave(6, 1280);
        let toks = codec.tokenize_audio(&wave, &layout).unwrap();
        for level in 0..cfg.levels {
            let range = layout.audio_level_range(level as u32).unwrap();
            for f in 0..toks.frames {
                let id = toks.get(level, f);
                assert!(range.contains(&id), "level {level} id {id} outside {range:?}");
            }
        }
    }

    #[test]
    fn structure_packing_maps_flow_to_unit_channels() {
        let t = 2;
        let (h, w) = (4, 4);
        let mut flow = Array4::<f64>::zeros((t, h, w, 2));
        let depth = Array3::<f64>::from_elem((t, h, w), 0.5);
        flow[[0, 0, 0, 0]] = DEFAULT_FLOW_SCALE; // max rightward
        flow[[0, 0, 1, 0]] = -DEFAULT_FLOW_SCALE; // max leftward
        flow[[0, 0, 2, 1]] = 10.0 * DEFAULT_FLOW_SCALE; // clamps
        let clip = pack_structure(&flow, &depth, DEFAULT_FLOW_SCALE, 8).unwrap();
        assert_eq!(clip.frames[[0, 0, 0, 0]], 1.0);
        assert_eq!(clip.frames[[0, 0, 1, 0]], 0.0);
        assert_eq!(clip.frames[[0, 0, 2, 1]], 1.0);
        // Still flow: all channels at exactly one half.
        assert_eq!(clip.frames[[1, 3, 3, 0]], 0.5);
        assert_eq!(clip.frames[[1, 3, 3, 1]], 0.5);
        assert_eq!(clip.frames[[1, 3, 3, 2]], 0.5);
    }

    #[test]
    fn center_mask_blanks_exactly_a_quarter() {
        for (h, w) in [(64, 64), (32, 32)] {
            let clip = VideoClip::new(Array4::from_elem((1, h, w, 3), 1.0), 8).unwrap();
            let masked = apply_mask(&clip, MaskRegion::CenterBox, MASK_FILL);
            let blanked = masked.frames.iter().filter(|&&v| v == MASK_FILL).count();
            let total = h * w * 3;
            assert_eq!(blanked * 4, total, "{h}x{w} box mask fraction");

            let outer = apply_mask(&clip, MaskRegion::OutsideCenterBox, MASK_FILL);
            let blanked = outer.frames.iter().filter(|&&v| v == MASK_FILL).count();
            assert_eq!(blanked * 4, 3 * total, "{h}x{w} inverse mask fraction");
        }
    }

    #[test]
    fn masks_are_complementary() {
        let clip = random_clip(8, 5, 16, 16);
        let inner = apply_mask(&clip, MaskRegion::CenterBox, MASK_FILL);
        let outer = apply_mask(&clip, MaskRegion::OutsideCenterBox, MASK_FILL);
        let (t, h, w, c) = clip.frames.dim();
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let orig = clip.frames[[ti, y, x, ch]];
                        let a = inner.frames[[ti, y, x, ch]];
                        let b = outer.frames[[ti, y, x, ch]];
                        // Exactly one of the two keeps the original pixel.
                        assert!(
                            (a == orig && b == MASK_FILL) || (b == orig && a == MASK_FILL),
                            "pixel ({ti},{y},{x},{ch}) not covered exactly once"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn downsample_block_averages_and_checks_divisibility() {
        // Paint each 2x2 block a constant so the averages are exact.
        let mut frames = Array4::zeros((2, 4, 6, 3));
        for ti in 0..2 {
            for y in 0..4 {
                for x in 0..6 {
                    for c in 0..3 {
                        frames[[ti, y, x, c]] =
                            (ti * 100 + (y / 2) * 10 + (x / 2) + c) as f64 / 997.0;
                    }
                }
            }
        }
        let clip = VideoClip::new(frames, 8).unwrap();
        let small = downsample(&clip, 2).unwrap();
        assert_eq!(small.frames.dim(), (2, 2, 3, 3));
        for ti in 0..2 {
            for y in 0..2 {
                for x in 0..3 {
                    for c in 0..3 {
                        let want = (ti * 100 + y * 10 + x + c) as f64 / 997.0;
                        assert!((small.frames[[ti, y, x, c]] - want).abs() < 1e-12);
                    }
                }
            }
        }
        assert!(downsample(&clip, 4).is_err(), "6 is not divisible by 4");
        assert!(downsample(&clip, 0).is_err());
    }
}
