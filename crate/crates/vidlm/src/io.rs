//! On-disk formats: clip datasets, token grids, model checkpoints, codec
//! tables, feature statistics, the training log, and animated exports.
//!
//! Binary files open with a four-byte magic and a version word, carry the
//! relevant fingerprints, and use little-endian fixed-width fields
//! throughout. Writing a checkpoint and reading it back is lossless: a
//! second save produces byte-identical output.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array4;

use crate::codec::{AudioCodec, AudioCodecConfig, AudioTokens, CodecConfig, TokenGrid, VideoClip, VideoCodec};
use crate::error::{Error, Result};
use crate::eval::FrechetStats;
use crate::lm::LanguageModel;
use crate::nn::{AdamW, Mat, Store};
use crate::superres::SrModel;
use crate::synth::{SceneSpec, Split, SynthClip};
use crate::vocab::VocabLayout;

const CLIPSET_MAGIC: &[u8; 4] = b"VLCS";
const GRID_MAGIC: &[u8; 4] = b"VLGR";
const CHECKPOINT_MAGIC: &[u8; 4] = b"VLCK";
const STATS_MAGIC: &[u8; 4] = b"VLST";
const VIDEO_CODEC_MAGIC: &[u8; 4] = b"VLVC";
const AUDIO_CODEC_MAGIC: &[u8; 4] = b"VLAC";
const VERSION: u32 = 1;

/// Refuse to allocate for absurd lengths from corrupt headers.
const MAX_FIELD: usize = 1 << 28;

// ---------------------------------------------------------------------------
// Little-endian primitives

fn w_u8(w: &mut impl Write, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f64_slice(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for &v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn w_str(w: &mut impl Write, s: &str) -> Result<()> {
    w_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn r_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_len(r: &mut impl Read) -> Result<usize> {
    let n = r_u32(r)? as usize;
    if n > MAX_FIELD {
        return Err(Error::data(format!("field length {n} exceeds sanity limit")));
    }
    Ok(n)
}

fn r_f64_vec(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    if n > MAX_FIELD {
        return Err(Error::data(format!("tensor length {n} exceeds sanity limit")));
    }
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn r_str(r: &mut impl Read) -> Result<String> {
    let n = r_len(r)?;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| Error::data(format!("invalid utf-8 in file: {e}")))
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(Error::data(format!("not a {what} file (magic {b:?})")));
    }
    let version = r_u32(r)?;
    if version != VERSION {
        return Err(Error::data(format!("{what} file version {version}, expected {VERSION}")));
    }
    Ok(())
}

fn open_read(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| {
        Error::data(format!("cannot open {}: {e}", path.display()))
    })?))
}

fn open_write(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        Error::data(format!("cannot create {}: {e}", path.display()))
    })?))
}

// ---------------------------------------------------------------------------
// Human-readable config files

pub fn write_toml<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value)
        .map_err(|e| Error::data(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("parse {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Clip datasets

/// One stored example: frames are kept as bytes, so pixel data survives a
/// round trip exactly when it sits on the u8 grid (as rendered clips do).
#[derive(Debug, Clone)]
pub struct ClipRecord {
    pub caption: String,
    pub hq: bool,
    pub split: Split,
    pub scene: Option<SceneSpec>,
    pub video: VideoClip,
    pub audio: Option<Vec<f64>>,
    pub video_tokens: Option<TokenGrid>,
    pub audio_tokens: Option<AudioTokens>,
}

impl ClipRecord {
    pub fn from_synth(clip: &SynthClip) -> ClipRecord {
        ClipRecord {
            caption: clip.caption.clone(),
            hq: clip.hq,
            split: clip.split,
            scene: Some(clip.spec),
            video: clip.video.clone(),
            audio: Some(clip.audio.clone()),
            video_tokens: None,
            audio_tokens: None,
        }
    }
}

/// A homogeneous set of clips plus the vocabulary they are meant for.
#[derive(Debug, Clone)]
pub struct ClipSet {
    pub layout_fp: u64,
    pub sample_rate: u32,
    pub clips: Vec<ClipRecord>,
}

pub fn write_clipset(path: &Path, set: &ClipSet) -> Result<()> {
    let first = set
        .clips
        .first()
        .ok_or_else(|| Error::data("refusing to write an empty clip set".to_string()))?;
    let dims = first.video.frames.dim();
    let fps = first.video.fps;
    for (i, c) in set.clips.iter().enumerate() {
        if c.video.frames.dim() != dims || c.video.fps != fps {
            return Err(Error::shape(format!(
                "clip {i} is {:?}@{}fps, the set is {dims:?}@{fps}fps",
                c.video.frames.dim(),
                c.video.fps
            )));
        }
    }
    let mut w = open_write(path)?;
    w.write_all(CLIPSET_MAGIC)?;
    w_u32(&mut w, VERSION)?;
    w_u64(&mut w, set.layout_fp)?;
    for d in [dims.0, dims.1, dims.2, dims.3] {
        w_u32(&mut w, d as u32)?;
    }
    w_u32(&mut w, fps)?;
    w_u32(&mut w, 0)?; // caption encoding 0: utf-8 words
    w_u32(&mut w, set.sample_rate)?;
    w_u32(&mut w, set.clips.len() as u32)?;
    for c in &set.clips {
        w_str(&mut w, &c.caption)?;
        w_u8(&mut w, c.hq as u8)?;
        w_u8(&mut w, matches!(c.split, Split::Held) as u8)?;
        match &c.scene {
            Some(s) => {
                w_u8(&mut w, 1)?;
                let text = toml::to_string(s)
                    .map_err(|e| Error::data(format!("scene serialization: {e}")))?;
                w_str(&mut w, &text)?;
            }
            None => w_u8(&mut w, 0)?,
        }
        let bytes: Vec<u8> = c
            .video
            .frames
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        w.write_all(&bytes)?;
        match &c.audio {
            Some(a) => {
                w_u8(&mut w, 1)?;
                w_u32(&mut w, a.len() as u32)?;
                for &s in a {
                    w.write_all(&(s as f32).to_le_bytes())?;
                }
            }
            None => w_u8(&mut w, 0)?,
        }
        match &c.video_tokens {
            Some(g) => {
                w_u8(&mut w, 1)?;
                write_grid_body(&mut w, g)?;
            }
            None => w_u8(&mut w, 0)?,
        }
        match &c.audio_tokens {
            Some(a) => {
                w_u8(&mut w, 1)?;
                write_audio_body(&mut w, a)?;
            }
            None => w_u8(&mut w, 0)?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_clipset(path: &Path) -> Result<ClipSet> {
    let mut r = open_read(path)?;
    expect_magic(&mut r, CLIPSET_MAGIC, "clip set")?;
    let layout_fp = r_u64(&mut r)?;
    let t = r_len(&mut r)?;
    let h = r_len(&mut r)?;
    let w = r_len(&mut r)?;
    let c = r_len(&mut r)?;
    if c != 3 {
        return Err(Error::shape(format!("clip set stores {c} channels, expected 3")));
    }
    let fps = r_u32(&mut r)?;
    let encoding = r_u32(&mut r)?;
    if encoding != 0 {
        return Err(Error::data(format!("unknown caption encoding {encoding}")));
    }
    let sample_rate = r_u32(&mut r)?;
    let count = r_len(&mut r)?;
    let mut clips = Vec::with_capacity(count);
    for _ in 0..count {
        let caption = r_str(&mut r)?;
        let hq = r_u8(&mut r)? != 0;
        let split = if r_u8(&mut r)? != 0 { Split::Held } else { Split::Train };
        let scene = if r_u8(&mut r)? != 0 {
            let text = r_str(&mut r)?;
            Some(
                toml::from_str(&text)
                    .map_err(|e| Error::data(format!("scene parse: {e}")))?,
            )
        } else {
            None
        };
        let mut bytes = vec![0u8; t * h * w * 3];
        r.read_exact(&mut bytes)?;
        let frames = Array4::from_shape_vec(
            (t, h, w, 3),
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .map_err(|e| Error::shape(format!("frame buffer: {e}")))?;
        let video = VideoClip::new(frames, fps)?;
        let audio = if r_u8(&mut r)? != 0 {
            let n = r_len(&mut r)?;
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            Some(
                buf.chunks_exact(4)
                    .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()) as f64)
                    .collect(),
            )
        } else {
            None
        };
        let video_tokens = if r_u8(&mut r)? != 0 {
            Some(read_grid_body(&mut r)?)
        } else {
            None
        };
        let audio_tokens = if r_u8(&mut r)? != 0 {
            Some(read_audio_body(&mut r)?)
        } else {
            None
        };
        clips.push(ClipRecord {
            caption,
            hq,
            split,
            scene,
            video,
            audio,
            video_tokens,
            audio_tokens,
        });
    }
    Ok(ClipSet { layout_fp, sample_rate, clips })
}

// ---------------------------------------------------------------------------
// Token grids

fn write_grid_body(w: &mut impl Write, g: &TokenGrid) -> Result<()> {
    w_u32(w, g.shape.0 as u32)?;
    w_u32(w, g.shape.1 as u32)?;
    w_u32(w, g.shape.2 as u32)?;
    w_u64(w, g.codec_fp)?;
    w_u32(w, g.tokens.len() as u32)?;
    for &t in &g.tokens {
        w_u32(w, t)?;
    }
    Ok(())
}

fn read_grid_body(r: &mut impl Read) -> Result<TokenGrid> {
    let shape = (r_len(r)?, r_len(r)?, r_len(r)?);
    let codec_fp = r_u64(r)?;
    let n = r_len(r)?;
    if n != shape.0 * shape.1 * shape.2 {
        return Err(Error::shape(format!("grid {shape:?} with {n} tokens")));
    }
    let mut tokens = Vec::with_capacity(n);
    for _ in 0..n {
        tokens.push(r_u32(r)?);
    }
    Ok(TokenGrid { shape, tokens, codec_fp })
}

fn write_audio_body(w: &mut impl Write, a: &AudioTokens) -> Result<()> {
    w_u32(w, a.levels as u32)?;
    w_u32(w, a.frames as u32)?;
    w_u64(w, a.codec_fp)?;
    for &t in &a.tokens {
        w_u32(w, t)?;
    }
    Ok(())
}

fn read_audio_body(r: &mut impl Read) -> Result<AudioTokens> {
    let levels = r_len(r)?;
    let frames = r_len(r)?;
    let codec_fp = r_u64(r)?;
    let n = levels
        .checked_mul(frames)
        .filter(|&n| n <= MAX_FIELD)
        .ok_or_else(|| Error::data("audio token count overflows".to_string()))?;
    let mut tokens = Vec::with_capacity(n);
    for _ in 0..n {
        tokens.push(r_u32(r)?);
    }
    Ok(AudioTokens { levels, frames, tokens, codec_fp })
}

/// Standalone grid file, also used for upsampled outputs.
pub fn write_video_grid(path: &Path, g: &TokenGrid) -> Result<()> {
    let mut w = open_write(path)?;
    w.write_all(GRID_MAGIC)?;
    w_u32(&mut w, VERSION)?;
    w_u8(&mut w, 0)?;
    write_grid_body(&mut w, g)?;
    w.flush()?;
    Ok(())
}

pub fn read_video_grid(path: &Path) -> Result<TokenGrid> {
    let mut r = open_read(path)?;
    expect_magic(&mut r, GRID_MAGIC, "token grid")?;
    if r_u8(&mut r)? != 0 {
        return Err(Error::data("grid file holds audio tokens, expected video".to_string()));
    }
    read_grid_body(&mut r)
}

pub fn write_audio_grid(path: &Path, a: &AudioTokens) -> Result<()> {
    let mut w = open_write(path)?;
    w.write_all(GRID_MAGIC)?;
    w_u32(&mut w, VERSION)?;
    w_u8(&mut w, 1)?;
    write_audio_body(&mut w, a)?;
    w.flush()?;
    Ok(())
}

pub fn read_audio_grid(path: &Path) -> Result<AudioTokens> {
    let mut r = open_read(path)?;
    expect_magic(&mut r, GRID_MAGIC, "token grid")?;
    if r_u8(&mut r)? != 1 {
        return Err(Error::data("grid file holds video tokens, expected audio".to_string()));
    }
    read_audio_body(&mut r)
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: usize,
    pub m: Vec<TensorData>,
    pub v: Vec<TensorData>,
}

/// A model snapshot: everything needed to rebuild it without the original
/// process, plus optional optimizer state for exact training resumption.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Which architecture the tensors belong to ("lm" or "sr").
    pub kind: String,
    pub step: u64,
    pub vocab_toml: String,
    pub layout_fp: u64,
    pub config_toml: String,
    pub tensors: Vec<TensorData>,
    pub optimizer: Option<OptimizerState>,
}

fn store_tensors(store: &Store) -> Vec<TensorData> {
    store
        .tensors()
        .map(|(name, rows, cols, values)| TensorData {
            name: name.to_string(),
            rows,
            cols,
            values: values.to_vec(),
        })
        .collect()
}

/// Copy named tensors into a registered store; every entry must match.
pub fn fill_store(store: &mut Store, tensors: &[TensorData]) -> Result<()> {
    let expected = store.tensors().count();
    if tensors.len() != expected {
        return Err(Error::shape(format!(
            "checkpoint has {} tensors, model has {expected}",
            tensors.len()
        )));
    }
    for t in tensors {
        store.load_tensor(&t.name, t.rows, t.cols, &t.values)?;
    }
    Ok(())
}

fn write_tensor_list(w: &mut impl Write, tensors: &[TensorData]) -> Result<()> {
    w_u32(w, tensors.len() as u32)?;
    for t in tensors {
        w_str(w, &t.name)?;
        w_u64(w, t.rows as u64)?;
        w_u64(w, t.cols as u64)?;
        w_f64_slice(w, &t.values)?;
    }
    Ok(())
}

fn read_tensor_list(r: &mut impl Read) -> Result<Vec<TensorData>> {
    let count = r_len(r)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r_str(r)?;
        let rows = r_u64(r)? as usize;
        let cols = r_u64(r)? as usize;
        let values = r_f64_vec(r, rows * cols.max(1))?;
        out.push(TensorData { name, rows, cols, values });
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = open_write(path)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w_u32(&mut w, VERSION)?;
    w_str(&mut w, &ck.kind)?;
    w_u64(&mut w, ck.step)?;
    w_str(&mut w, &ck.vocab_toml)?;
    w_u64(&mut w, ck.layout_fp)?;
    w_str(&mut w, &ck.config_toml)?;
    write_tensor_list(&mut w, &ck.tensors)?;
    match &ck.optimizer {
        Some(opt) => {
            w_u8(&mut w, 1)?;
            w_u64(&mut w, opt.step as u64)?;
            write_tensor_list(&mut w, &opt.m)?;
            write_tensor_list(&mut w, &opt.v)?;
        }
        None => w_u8(&mut w, 0)?,
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = open_read(path)?;
    expect_magic(&mut r, CHECKPOINT_MAGIC, "checkpoint")?;
    let kind = r_str(&mut r)?;
    let step = r_u64(&mut r)?;
    let vocab_toml = r_str(&mut r)?;
    let layout_fp = r_u64(&mut r)?;
    let config_toml = r_str(&mut r)?;
    let tensors = read_tensor_list(&mut r)?;
    let optimizer = if r_u8(&mut r)? != 0 {
        let step = r_u64(&mut r)? as usize;
        let m = read_tensor_list(&mut r)?;
        let v = read_tensor_list(&mut r)?;
        Some(OptimizerState { step, m, v })
    } else {
        None
    };
    Ok(Checkpoint {
        kind,
        step,
        vocab_toml,
        layout_fp,
        config_toml,
        tensors,
        optimizer,
    })
}

pub fn checkpoint_from_lm(model: &LanguageModel, step: u64, opt: Option<&AdamW>) -> Checkpoint {
    Checkpoint {
        kind: "lm".to_string(),
        step,
        vocab_toml: model.layout().to_config_string(),
        layout_fp: model.layout().fingerprint(),
        config_toml: toml::to_string(model.config()).expect("model config serializes"),
        tensors: store_tensors(model.params()),
        optimizer: opt.map(|o| {
            let (m, v, step) = o.state();
            OptimizerState {
                step,
                m: store_tensors(m),
                v: store_tensors(v),
            }
        }),
    }
}

pub fn lm_from_checkpoint(ck: &Checkpoint) -> Result<LanguageModel> {
    if ck.kind != "lm" {
        return Err(Error::data(format!("checkpoint holds a {:?} model, expected \"lm\"", ck.kind)));
    }
    let layout = VocabLayout::from_config_string(&ck.vocab_toml)?;
    if layout.fingerprint() != ck.layout_fp {
        return Err(Error::Fingerprint {
            expected: ck.layout_fp,
            found: layout.fingerprint(),
            context: "checkpoint vocabulary".to_string(),
        });
    }
    let cfg = toml::from_str(&ck.config_toml)
        .map_err(|e| Error::config(format!("checkpoint model config: {e}")))?;
    let mut model = LanguageModel::new(cfg, layout, 0)?;
    fill_store(model.params_mut(), &ck.tensors)?;
    Ok(model)
}

pub fn checkpoint_from_sr(model: &SrModel, step: u64, opt: Option<&AdamW>) -> Checkpoint {
    Checkpoint {
        kind: "sr".to_string(),
        step,
        vocab_toml: model.layout().to_config_string(),
        layout_fp: model.layout().fingerprint(),
        config_toml: toml::to_string(model.config()).expect("sr config serializes"),
        tensors: store_tensors(model.params()),
        optimizer: opt.map(|o| {
            let (m, v, step) = o.state();
            OptimizerState {
                step,
                m: store_tensors(m),
                v: store_tensors(v),
            }
        }),
    }
}

pub fn sr_from_checkpoint(ck: &Checkpoint) -> Result<SrModel> {
    if ck.kind != "sr" {
        return Err(Error::data(format!("checkpoint holds a {:?} model, expected \"sr\"", ck.kind)));
    }
    let layout = VocabLayout::from_config_string(&ck.vocab_toml)?;
    if layout.fingerprint() != ck.layout_fp {
        return Err(Error::Fingerprint {
            expected: ck.layout_fp,
            found: layout.fingerprint(),
            context: "checkpoint vocabulary".to_string(),
        });
    }
    let cfg = toml::from_str(&ck.config_toml)
        .map_err(|e| Error::config(format!("checkpoint sr config: {e}")))?;
    let mut model = SrModel::new(cfg, layout, 0)?;
    fill_store(model.params_mut(), &ck.tensors)?;
    Ok(model)
}

/// Rebuild optimizer moments from a checkpoint into an existing optimizer.
/// Returns false (and leaves the optimizer fresh) when none were stored.
pub fn restore_optimizer(ck: &Checkpoint, params: &Store, opt: &mut AdamW) -> Result<bool> {
    let Some((m, v, step)) = optimizer_state(ck, params)? else {
        return Ok(false);
    };
    opt.restore_state(m, v, step);
    Ok(true)
}

/// The checkpoint's optimizer moments shaped like `params`, if it has any.
pub fn optimizer_state(ck: &Checkpoint, params: &Store) -> Result<Option<(Store, Store, usize)>> {
    let Some(state) = &ck.optimizer else {
        return Ok(None);
    };
    let mut m = params.zeros_like();
    let mut v = params.zeros_like();
    fill_store(&mut m, &state.m)?;
    fill_store(&mut v, &state.v)?;
    Ok(Some((m, v, state.step)))
}

// ---------------------------------------------------------------------------
// Codec tables

pub fn write_video_codec(path: &Path, codec: &VideoCodec) -> Result<()> {
    let mut w = open_write(path)?;
    w.write_all(VIDEO_CODEC_MAGIC)?;
    w_u32(&mut w, VERSION)?;
    let cfg = toml::to_string(codec.config()).expect("codec config serializes");
    w_str(&mut w, &cfg)?;
    let (first, body) = codec.tables();
    for table in [first, body] {
        w_u64(&mut w, table.nrows() as u64)?;
        w_u64(&mut w, table.ncols() as u64)?;
        w_f64_slice(&mut w, table.as_slice().unwrap())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_video_codec(path: &Path) -> Result<VideoCodec> {
    let mut r = open_read(path)?;
    expect_magic(&mut r, VIDEO_CODEC_MAGIC, "video codec")?;
    let cfg: CodecConfig = toml::from_str(&r_str(&mut r)?)
        .map_err(|e| Error::config(format!("codec config: {e}")))?;
    let mut tables = Vec::with_capacity(2);
    for _ in 0..2 {
        let rows = r_u64(&mut r)? as usize;
        let cols = r_u64(&mut r)? as usize;
        let values = r_f64_vec(&mut r, rows * cols)?;
        tables.push(
            Mat::from_shape_vec((rows, cols), values)
                .map_err(|e| Error::shape(format!("codec table: {e}")))?,
        );
    }
    let body = tables.pop().unwrap();
    let first = tables.pop().unwrap();
    VideoCodec::from_tables(cfg, first, body)
}

pub fn write_audio_codec(path: &Path, codec: &AudioCodec) -> Result<()> {
    let mut w = open_write(path)?;
    w.write_all(AUDIO_CODEC_MAGIC)?;
    w_u32(&mut w, VERSION)?;
    let cfg = toml::to_string(codec.config()).expect("codec config serializes");
    w_str(&mut w, &cfg)?;
    w_u32(&mut w, codec.books().len() as u32)?;
    for table in codec.books() {
        w_u64(&mut w, table.nrows() as u64)?;
        w_u64(&mut w, table.ncols() as u64)?;
        w_f64_slice(&mut w, table.as_slice().unwrap())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_audio_codec(path: &Path) -> Result<AudioCodec> {
    let mut r = open_read(path)?;
    expect_magic(&mut r, AUDIO_CODEC_MAGIC, "audio codec")?;
    let cfg: AudioCodecConfig = toml::from_str(&r_str(&mut r)?)
        .map_err(|e| Error::config(format!("codec config: {e}")))?;
    let count = r_len(&mut r)?;
    let mut books = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = r_u64(&mut r)? as usize;
        let cols = r_u64(&mut r)? as usize;
        let values = r_f64_vec(&mut r, rows * cols)?;
        books.push(
            Mat::from_shape_vec((rows, cols), values)
                .map_err(|e| Error::shape(format!("codec table: {e}")))?,
        );
    }
    AudioCodec::from_tables(cfg, books)
}

// ---------------------------------------------------------------------------
// Feature statistics

pub fn write_stats(path: &Path, stats: &FrechetStats, feature_seed: u64) -> Result<()> {
    let mut w = open_write(path)?;
    w.write_all(STATS_MAGIC)?;
    w_u32(&mut w, VERSION)?;
    w_u64(&mut w, feature_seed)?;
    w_u32(&mut w, stats.dim() as u32)?;
    w_u64(&mut w, stats.count() as u64)?;
    w_f64_slice(&mut w, stats.mean())?;
    let cov = if stats.count() >= 2 {
        stats.covariance()?
    } else {
        ndarray::Array2::zeros((stats.dim(), stats.dim()))
    };
    w_f64_slice(&mut w, cov.as_slice().unwrap())?;
    w.flush()?;
    Ok(())
}

pub fn read_stats(path: &Path) -> Result<(FrechetStats, u64)> {
    let mut r = open_read(path)?;
    expect_magic(&mut r, STATS_MAGIC, "feature stats")?;
    let feature_seed = r_u64(&mut r)?;
    let dim = r_len(&mut r)?;
    let count = r_u64(&mut r)? as usize;
    let mean = r_f64_vec(&mut r, dim)?;
    let cov_values = r_f64_vec(&mut r, dim * dim)?;
    let cov = ndarray::Array2::from_shape_vec((dim, dim), cov_values)
        .map_err(|e| Error::shape(format!("covariance: {e}")))?;
    Ok((FrechetStats::from_parts(count, mean, cov)?, feature_seed))
}

// ---------------------------------------------------------------------------
// Training log

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub step: u64,
    pub phase: usize,
    pub group: String,
    pub loss: f64,
}

/// Append one record; creates the file on first use.
pub fn append_log(path: &Path, entry: &TrainLogEntry) -> Result<()> {
    let mut f = OpenOptions::new().append(true).create(true).open(path)?;
    writeln!(
        f,
        "step={} phase={} group={} loss={:.6}",
        entry.step, entry.phase, entry.group, entry.loss
    )?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<TrainLogEntry>> {
    let r = open_read(path)?;
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut step = None;
        let mut phase = None;
        let mut group = None;
        let mut loss = None;
        for field in line.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::data(format!("log line {}: bad field {field:?}", lineno + 1)))?;
            match key {
                "step" => step = value.parse::<u64>().ok(),
                "phase" => phase = value.parse::<usize>().ok(),
                "group" => group = Some(value.to_string()),
                "loss" => loss = value.parse::<f64>().ok(),
                _ => {}
            }
        }
        match (step, phase, group, loss) {
            (Some(step), Some(phase), Some(group), Some(loss)) => {
                out.push(TrainLogEntry { step, phase, group, loss });
            }
            _ => {
                return Err(Error::data(format!("log line {} is incomplete: {line:?}", lineno + 1)));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Animated export

/// Write the clip as a looping animated image.
pub fn write_gif(path: &Path, clip: &VideoClip) -> Result<()> {
    use image::codecs::gif::{GifEncoder, Repeat};
    let file = File::create(path)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", path.display())))?;
    let mut enc = GifEncoder::new_with_speed(BufWriter::new(file), 10);
    enc.set_repeat(Repeat::Infinite)
        .map_err(|e| Error::data(format!("gif: {e}")))?;
    let (t, h, w, _) = clip.frames.dim();
    let delay = image::Delay::from_numer_denom_ms(1000, clip.fps);
    for ti in 0..t {
        let mut img = image::RgbaImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = |c: usize| {
                    (clip.frames[[ti, y, x, c]] * 255.0).round().clamp(0.0, 255.0) as u8
                };
                img.put_pixel(x as u32, y as u32, image::Rgba([px(0), px(1), px(2), 255]));
            }
        }
        enc.encode_frame(image::Frame::from_parts(img, 0, 0, delay))
            .map_err(|e| Error::data(format!("gif frame {ti}: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;
    use crate::superres::SrConfig;
    use crate::synth::{make_dataset, SynthConfig};
    use crate::vocab::{build_layout, VocabConfig};

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn tiny_layout() -> VocabLayout {
        build_layout(&VocabConfig {
            special_count: 44,
            visual_count: 16,
            audio_levels: 4,
            audio_codes_per_level: 8,
            text_vocab_count: 16,
            factor_base: 4,
            factor_k: 2,
        })
        .unwrap()
    }

    #[test]
    fn clipset_round_trips_u8_video_and_metadata() {
        let dir = tmp();
        let path = dir.path().join("clips.bin");
        let cfg = SynthConfig::desk();
        let clips = make_dataset(&cfg, 4, 3).unwrap();
        let set = ClipSet {
            layout_fp: 0xabcd,
            sample_rate: cfg.sample_rate,
            clips: clips.iter().map(ClipRecord::from_synth).collect(),
        };
        write_clipset(&path, &set).unwrap();
        let back = read_clipset(&path).unwrap();
        assert_eq!(back.layout_fp, 0xabcd);
        assert_eq!(back.clips.len(), 4);
        for (a, b) in set.clips.iter().zip(&back.clips) {
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.hq, b.hq);
            assert_eq!(a.split, b.split);
            assert_eq!(a.scene, b.scene);
            // Rendered pixels sit on the u8 grid, so the round trip is exact.
            assert_eq!(a.video.frames, b.video.frames);
            let (x, y) = (a.audio.as_ref().unwrap(), b.audio.as_ref().unwrap());
            assert_eq!(x.len(), y.len());
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-7, "audio f32 round trip");
            }
        }
    }

    #[test]
    fn clipset_rejects_mixed_shapes() {
        let dir = tmp();
        let cfg = SynthConfig::desk();
        let mut clips: Vec<ClipRecord> =
            make_dataset(&cfg, 2, 5).unwrap().iter().map(ClipRecord::from_synth).collect();
        let small = SynthConfig { frames: 9, ..cfg };
        clips.push(ClipRecord::from_synth(&make_dataset(&small, 1, 5).unwrap()[0]));
        let set = ClipSet { layout_fp: 1, sample_rate: 1600, clips };
        assert!(write_clipset(&dir.path().join("x.bin"), &set).is_err());
    }

    #[test]
    fn grid_files_round_trip_and_check_kind() {
        let dir = tmp();
        let g = TokenGrid {
            shape: (2, 3, 3),
            tokens: (0..18).map(|i| 44 + i as u32).collect(),
            codec_fp: 77,
        };
        let vp = dir.path().join("v.grid");
        write_video_grid(&vp, &g).unwrap();
        assert_eq!(read_video_grid(&vp).unwrap(), g);
        assert!(read_audio_grid(&vp).is_err());

        let a = AudioTokens {
            levels: 2,
            frames: 5,
            tokens: (0..10).collect(),
            codec_fp: 9,
        };
        let ap = dir.path().join("a.grid");
        write_audio_grid(&ap, &a).unwrap();
        assert_eq!(read_audio_grid(&ap).unwrap(), a);
        assert!(read_video_grid(&ap).is_err());
    }

    #[test]
    fn lm_checkpoint_round_trip_is_byte_identical() {
        let dir = tmp();
        let layout = tiny_layout();
        let cfg = ModelConfig {
            width: 16,
            depth: 2,
            heads: 2,
            ffn_mult: 2,
            max_seq_len: 64,
            cond_dropout_rate: 0.1,
            text_embed_dim: 8,
            rotary_base: 10_000.0,
        };
        let model = LanguageModel::new(cfg, layout, 5).unwrap();
        let opt = AdamW::new(model.params(), 1e-3, 100);
        let ck = checkpoint_from_lm(&model, 42, Some(&opt));
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        write_checkpoint(&p1, &ck).unwrap();
        let loaded = read_checkpoint(&p1).unwrap();
        assert_eq!(loaded.step, 42);
        assert!(loaded.optimizer.is_some());
        let model2 = lm_from_checkpoint(&loaded).unwrap();
        assert_eq!(model.params().data(), model2.params().data());
        assert_eq!(model.fingerprint(), model2.fingerprint());
        write_checkpoint(&p2, &loaded).unwrap();
        let bytes1 = std::fs::read(&p1).unwrap();
        let bytes2 = std::fs::read(&p2).unwrap();
        assert_eq!(bytes1, bytes2, "save-load-save must be byte-identical");
    }

    #[test]
    fn sr_checkpoint_round_trips() {
        let dir = tmp();
        let layout = tiny_layout();
        let cfg = SrConfig {
            lr_shape: (1, 2, 2),
            hr_shape: (1, 4, 4),
            self_windows: [(1, 4, 2), (1, 2, 4), (1, 4, 4)],
            cross_windows: [(1, 2, 1), (1, 1, 2), (1, 2, 2)],
            layer_axes: vec![0],
            width: 8,
            heads: 2,
            ffn_mult: 2,
            text_slots: 8,
            text_embed_dim: 4,
            steps: 4,
            guidance_text: 2.0,
            guidance_lr: 1.0,
            noise_frac_max: 0.3,
            cond_drop_rate: 0.1,
        };
        let model = SrModel::new(cfg, layout, 7).unwrap();
        let ck = checkpoint_from_sr(&model, 3, None);
        let p = dir.path().join("sr.ckpt");
        write_checkpoint(&p, &ck).unwrap();
        let model2 = sr_from_checkpoint(&read_checkpoint(&p).unwrap()).unwrap();
        assert_eq!(model.params().data(), model2.params().data());
        assert!(lm_from_checkpoint(&read_checkpoint(&p).unwrap()).is_err());
    }

    #[test]
    fn optimizer_state_survives_resume() {
        let layout = tiny_layout();
        let cfg = ModelConfig {
            width: 16,
            depth: 1,
            heads: 2,
            ffn_mult: 2,
            max_seq_len: 64,
            cond_dropout_rate: 0.0,
            text_embed_dim: 8,
            rotary_base: 10_000.0,
        };
        let model = LanguageModel::new(cfg, layout, 5).unwrap();
        let mut opt = AdamW::new(model.params(), 1e-3, 100);
        let mut grads = model.params().zeros_like();
        grads.data_mut().iter_mut().enumerate().for_each(|(i, g)| *g = (i % 7) as f64 * 0.01);
        let mut params = model.params().clone();
        opt.update(&mut params, &grads);
        opt.update(&mut params, &grads);

        let ck = checkpoint_from_lm(&model, 2, Some(&opt));
        let mut fresh = AdamW::new(model.params(), 1e-3, 100);
        assert!(restore_optimizer(&ck, model.params(), &mut fresh).unwrap());
        let (m1, v1, s1) = opt.state();
        let (m2, v2, s2) = fresh.state();
        assert_eq!(s1, s2);
        assert_eq!(m1.data(), m2.data());
        assert_eq!(v1.data(), v2.data());
    }

    #[test]
    fn codec_files_preserve_fingerprints() {
        let dir = tmp();
        let layout = tiny_layout();
        let cfg = SynthConfig {
            frames: 9,
            height: 16,
            width: 16,
            ..SynthConfig::desk()
        };
        let clips = make_dataset(&cfg, 3, 9).unwrap();
        let videos: Vec<VideoClip> = clips.iter().map(|c| c.video.clone()).collect();
        let ccfg = CodecConfig {
            temporal_factor: 4,
            spatial_factor: 8,
            code_count: 16,
            fps: 8,
        };
        let codec = crate::codec::train_video_codec(
            &ccfg,
            &videos,
            &crate::codec::KMeansOpts::default(),
            11,
        )
        .unwrap();
        let vp = dir.path().join("video.codec");
        write_video_codec(&vp, &codec).unwrap();
        let codec2 = read_video_codec(&vp).unwrap();
        assert_eq!(codec.fingerprint(), codec2.fingerprint());
        let g1 = codec.tokenize_video(&videos[0], &layout).unwrap();
        let g2 = codec2.tokenize_video(&videos[0], &layout).unwrap();
        assert_eq!(g1, g2);

        let acfg = AudioCodecConfig {
            sample_rate: 1600,
            hop: 64,
            levels: 4,
            code_count: 8,
        };
        let waves: Vec<Vec<f64>> = clips.iter().map(|c| c.audio.clone()).collect();
        let acodec = crate::codec::train_audio_codec(
            &acfg,
            &waves,
            &crate::codec::KMeansOpts::default(),
            13,
        )
        .unwrap();
        let ap = dir.path().join("audio.codec");
        write_audio_codec(&ap, &acodec).unwrap();
        let acodec2 = read_audio_codec(&ap).unwrap();
        assert_eq!(acodec.fingerprint(), acodec2.fingerprint());
    }

    #[test]
    fn stats_file_round_trips() {
        let dir = tmp();
        let mut stats = FrechetStats::new(3);
        let mut rng = crate::util::seeded_rng(3, "io-stats");
        use rand::Rng;
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            stats.push(&x).unwrap();
        }
        let p = dir.path().join("ref.stats");
        write_stats(&p, &stats, 99).unwrap();
        let (back, seed) = read_stats(&p).unwrap();
        assert_eq!(seed, 99);
        assert_eq!(back.count(), 10);
        assert_eq!(back.mean(), stats.mean());
        let (ca, cb) = (stats.covariance().unwrap(), back.covariance().unwrap());
        for (a, b) in ca.iter().zip(cb.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn training_log_appends_and_parses() {
        let dir = tmp();
        let p = dir.path().join("train.log");
        let entries = [
            TrainLogEntry { step: 1, phase: 0, group: "t2v+i2v@95".into(), loss: 9.1562 },
            TrainLogEntry { step: 2, phase: 0, group: "t2i@20".into(), loss: 8.9921 },
            TrainLogEntry { step: 3, phase: 1, group: "v2a@150".into(), loss: 8.5 },
        ];
        for e in &entries {
            append_log(&p, e).unwrap();
        }
        let back = read_log(&p).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in entries.iter().zip(&back) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.phase, b.phase);
            assert_eq!(a.group, b.group);
            assert!((a.loss - b.loss).abs() < 1e-6);
        }
        std::fs::write(&p, "step=1 group=x\n").unwrap();
        assert!(read_log(&p).is_err());
    }

    #[test]
    fn gif_export_writes_a_playable_file() {
        let dir = tmp();
        let cfg = SynthConfig::desk();
        let clip = &make_dataset(&cfg, 1, 21).unwrap()[0];
        let p = dir.path().join("clip.gif");
        write_gif(&p, &clip.video).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.len() > 100);
        assert_eq!(&bytes[..6], b"GIF89a");
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tmp();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, b"NOPExxxxyyyy").unwrap();
        assert!(read_checkpoint(&p).is_err());
        assert!(read_clipset(&p).is_err());
        assert!(read_stats(&p).is_err());
        assert!(read_video_grid(&p).is_err());
    }
}
