//! Token super-resolution: a non-autoregressive transformer that refines a
//! low-resolution token grid into one with doubled spatial dims.
//!
//! Each layer works along one of three axes (vertical, horizontal, temporal)
//! with attention confined to windows: self-attention over high-res
//! positions inside a window, cross-attention to the low-res tokens in the
//! window's half-size counterpart, global cross-attention to text, then an
//! FFN. Locality is by construction (blocks are gathered index sets), so
//! out-of-window influence is exactly zero.
//!
//! Tokens are handled in factorized form: each visual id splits into two
//! digits, and the model predicts both with separate heads. Sampling is
//! iterative: start fully masked, sample all masked positions, keep the most
//! confident per a cosine schedule, repeat until nothing is masked.
//!
//! Guidance runs two knobs, one for the low-res condition and one for text:
//! `guided = bn + s_lr*(tn - bn) + s_t*(f - tn)` over three passes
//! (both-null, LR-only, fully-conditioned), so s_lr = s_t = 0 is exactly the
//! unconditional model and s_lr = s_t = 1 is exactly the conditioned one.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::TokenGrid;
use crate::error::{Error, Result};
use crate::nn::{
    attn_backward, attn_forward, cross_entropy, gauss, gelu_backward, gelu_forward,
    layer_norm_backward, layer_norm_forward, linear_backward, linear_forward, sample_top_k,
    softmax_rows, AdamW, AttnCache, LayerNormCache, Mat, Slot, Store,
};
use crate::util::{fnv1a, seeded_rng, Fingerprint};
use crate::vocab::{Partition, TokenId, VocabLayout};

pub type Dims = (usize, usize, usize);

// ---------------------------------------------------------------------------
// Windows

/// Tile `shape` with `window`, flat indices in (t, y, x) raster order.
/// Every position lands in exactly one block.
pub fn window_partition(shape: Dims, window: Dims) -> Result<Vec<Vec<usize>>> {
    let (st, sh, sw) = shape;
    let (wt, wh, ww) = window;
    if wt == 0 || wh == 0 || ww == 0 || st % wt != 0 || sh % wh != 0 || sw % ww != 0 {
        return Err(Error::shape(format!(
            "window {window:?} does not tile grid {shape:?}"
        )));
    }
    let (bt, bh, bw) = (st / wt, sh / wh, sw / ww);
    let mut blocks = Vec::with_capacity(bt * bh * bw);
    for gt in 0..bt {
        for gh in 0..bh {
            for gw in 0..bw {
                let mut block = Vec::with_capacity(wt * wh * ww);
                for dt in 0..wt {
                    for dh in 0..wh {
                        for dw in 0..ww {
                            let t = gt * wt + dt;
                            let y = gh * wh + dh;
                            let x = gw * ww + dw;
                            block.push((t * sh + y) * sw + x);
                        }
                    }
                }
                blocks.push(block);
            }
        }
    }
    Ok(blocks)
}

fn unflatten(i: usize, shape: Dims) -> (usize, usize, usize) {
    let (_, h, w) = shape;
    (i / (h * w), (i / w) % h, i % w)
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SrConfig {
    pub lr_shape: Dims,
    /// Same duration, doubled height and width.
    pub hr_shape: Dims,
    /// Self-attention windows per axis {vertical, horizontal, temporal}.
    pub self_windows: [Dims; 3],
    /// Cross-attention windows: same axis structure, half the spatial size,
    /// tiling the low-res grid into the same block layout.
    pub cross_windows: [Dims; 3],
    /// Which axis each layer uses, in order.
    pub layer_axes: Vec<usize>,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub text_slots: usize,
    pub text_embed_dim: usize,
    /// Refinement iterations at sampling time.
    pub steps: usize,
    pub guidance_text: f64,
    pub guidance_lr: f64,
    /// Training-time LR corruption: resample fraction drawn from
    /// [0, noise_frac_max] per example.
    pub noise_frac_max: f64,
    /// Independent drop rate for each of the LR and text conditions.
    pub cond_drop_rate: f64,
}

impl SrConfig {
    pub fn desk() -> SrConfig {
        SrConfig {
            lr_shape: (5, 8, 8),
            hr_shape: (5, 16, 16),
            self_windows: [(1, 16, 2), (1, 2, 16), (5, 4, 4)],
            cross_windows: [(1, 8, 1), (1, 1, 8), (5, 2, 2)],
            layer_axes: vec![0, 1, 2],
            width: 32,
            heads: 4,
            ffn_mult: 4,
            text_slots: 64,
            text_embed_dim: 16,
            steps: 24,
            guidance_text: 2.0,
            guidance_lr: 1.0,
            noise_frac_max: 0.3,
            cond_drop_rate: 0.1,
        }
    }

    /// First production-scale stage, kept for its shape constants.
    pub fn production_stage1() -> SrConfig {
        SrConfig {
            lr_shape: (5, 28, 16),
            hr_shape: (5, 56, 32),
            self_windows: [(1, 56, 4), (1, 8, 32), (5, 8, 8)],
            cross_windows: [(1, 28, 2), (1, 4, 16), (5, 4, 4)],
            guidance_text: 4.0,
            guidance_lr: 1.0,
            ..SrConfig::desk()
        }
    }

    /// Second production-scale stage: same windows over a doubled grid.
    pub fn production_stage2() -> SrConfig {
        SrConfig {
            lr_shape: (5, 56, 32),
            hr_shape: (5, 112, 64),
            self_windows: [(1, 56, 4), (1, 8, 32), (5, 8, 8)],
            cross_windows: [(1, 28, 2), (1, 4, 16), (5, 4, 4)],
            guidance_text: 8.0,
            guidance_lr: 2.0,
            ..SrConfig::desk()
        }
    }

    pub fn hr_len(&self) -> usize {
        self.hr_shape.0 * self.hr_shape.1 * self.hr_shape.2
    }

    pub fn lr_len(&self) -> usize {
        self.lr_shape.0 * self.lr_shape.1 * self.lr_shape.2
    }

    pub fn validate(&self) -> Result<()> {
        let (lt, lh, lw) = self.lr_shape;
        let (ht, hh, hw) = self.hr_shape;
        if ht != lt || hh != 2 * lh || hw != 2 * lw {
            return Err(Error::config(format!(
                "hr {:?} must be lr {:?} with doubled spatial dims",
                self.hr_shape, self.lr_shape
            )));
        }
        for a in 0..3 {
            let s = self.self_windows[a];
            let c = self.cross_windows[a];
            if s.1 % 2 != 0 || s.2 % 2 != 0 || c != (s.0, s.1 / 2, s.2 / 2) {
                return Err(Error::config(format!(
                    "axis {a}: cross window {c:?} is not the half-size image of {s:?}"
                )));
            }
            let hr_blocks = window_partition(self.hr_shape, s)?.len();
            let lr_blocks = window_partition(self.lr_shape, c)?.len();
            if hr_blocks != lr_blocks {
                return Err(Error::config(format!(
                    "axis {a}: {hr_blocks} self blocks vs {lr_blocks} cross blocks"
                )));
            }
        }
        if self.layer_axes.is_empty() || self.layer_axes.iter().any(|&a| a >= 3) {
            return Err(Error::config("layer_axes must be non-empty indices into 0..3".to_string()));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} must be a positive multiple of {} heads",
                self.width, self.heads
            )));
        }
        if self.steps == 0 {
            return Err(Error::config("sampler needs at least one step".to_string()));
        }
        if !(0.0..=1.0).contains(&self.noise_frac_max) || !(0.0..=1.0).contains(&self.cond_drop_rate) {
            return Err(Error::config("noise fraction and drop rate must lie in [0, 1]".to_string()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Schedule, noise, drops

/// Masked-count targets after each refinement step: a cosine curve forced to
/// be strictly decreasing until it reaches 0 (so every step commits at least
/// one position), ending at exactly 0.
pub fn mask_schedule(total: usize, steps: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(steps);
    let mut prev = total;
    for i in 1..=steps {
        let frac = (std::f64::consts::FRAC_PI_2 * i as f64 / steps as f64).cos();
        let raw = (total as f64 * frac).ceil() as usize;
        let next = raw.min(prev.saturating_sub(1));
        let next = if i == steps { 0 } else { next };
        out.push(next);
        prev = next;
    }
    out
}

/// Replace exactly `floor(fraction * len)` positions with a different
/// uniform-random id from the visual partition. Drawing from the other ids
/// keeps the changed-position count exact.
pub fn noise_augment(
    grid: &TokenGrid,
    fraction: f64,
    layout: &VocabLayout,
    rng: &mut ChaCha8Rng,
) -> Result<TokenGrid> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("resample fraction {fraction} outside [0, 1]")));
    }
    let n = grid.len();
    let count = (fraction * n as f64).floor() as usize;
    let mut out = grid.clone();
    if count == 0 {
        return Ok(out);
    }
    let visual = layout.visual_range();
    let codes = visual.end - visual.start;
    let picks = rand::seq::index::sample(rng, n, count);
    for i in picks {
        let old = out.tokens[i] - visual.start;
        let other = (old + 1 + rng.random_range(0..codes - 1)) % codes;
        out.tokens[i] = visual.start + other;
    }
    Ok(out)
}

/// Independent condition drops for one training example: (drop_lr, drop_text).
pub fn draw_drops(rng: &mut ChaCha8Rng, rate: f64) -> (bool, bool) {
    let lr = rng.random::<f64>() < rate;
    let text = rng.random::<f64>() < rate;
    (lr, text)
}

// ---------------------------------------------------------------------------
// Model

/// Per-position logits for the two factor digits, each `[positions, base]`.
#[derive(Debug, Clone)]
pub struct SrLogits {
    pub f1: Mat,
    pub f2: Mat,
}

/// Dual guidance: `bn` is both conditions null, `tn` is LR-conditioned with
/// null text, `f` is fully conditioned. Expanding
/// `bn + s_lr*(tn - bn) + s_t*(f - tn)` into coefficients and skipping the
/// zero ones makes the endpoint identities exact: (0,0) returns `bn`
/// bitwise, (1,0) returns `tn`, (1,1) returns `f`.
pub fn guided_sr(bn: &SrLogits, tn: &SrLogits, f: &SrLogits, s_lr: f64, s_t: f64) -> SrLogits {
    let c_bn = 1.0 - s_lr;
    let c_tn = s_lr - s_t;
    let c_f = s_t;
    let mix = |b: &Mat, t: &Mat, ff: &Mat| {
        let mut out = Mat::zeros(b.raw_dim());
        for (m, c) in [(b, c_bn), (t, c_tn), (ff, c_f)] {
            if c == 1.0 {
                out += m;
            } else if c != 0.0 {
                out.scaled_add(c, m);
            }
        }
        out
    };
    SrLogits {
        f1: mix(&bn.f1, &tn.f1, &f.f1),
        f2: mix(&bn.f2, &tn.f2, &f.f2),
    }
}

/// Which of the three guidance passes actually contribute for these scales.
pub fn guidance_passes(s_lr: f64, s_t: f64) -> (bool, bool, bool) {
    (1.0 - s_lr != 0.0, s_lr - s_t != 0.0, s_t != 0.0)
}

#[derive(Debug, Clone, Copy)]
struct SrBlockSlots {
    ln_s_g: Slot,
    ln_s_b: Slot,
    wq: Slot,
    wk: Slot,
    wv: Slot,
    wo: Slot,
    ln_c_g: Slot,
    ln_c_b: Slot,
    cq: Slot,
    ck: Slot,
    cv: Slot,
    co: Slot,
    ln_t_g: Slot,
    ln_t_b: Slot,
    tq: Slot,
    tk: Slot,
    tv: Slot,
    to: Slot,
    ln_f_g: Slot,
    ln_f_b: Slot,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
}

#[derive(Debug, Clone)]
struct SrSlots {
    e1: Slot,
    e2: Slot,
    mask_emb: Slot,
    hr_pos: [Slot; 3],
    lr_pos: [Slot; 3],
    lr_null: Slot,
    text_null: Slot,
    text_proj: Slot,
    layers: Vec<SrBlockSlots>,
    lnf_g: Slot,
    lnf_b: Slot,
    head1: Slot,
    head2: Slot,
}

#[derive(Debug, Clone)]
pub struct SrModel {
    cfg: SrConfig,
    layout: VocabLayout,
    params: Store,
    slots: SrSlots,
    text_table: Mat,
    /// Blocks per axis, precomputed: self over the HR grid, cross over LR.
    self_blocks: [Vec<Vec<usize>>; 3],
    cross_blocks: [Vec<Vec<usize>>; 3],
}

impl SrModel {
    pub fn new(cfg: SrConfig, layout: VocabLayout, seed: u64) -> Result<SrModel> {
        cfg.validate()?;
        if layout.config().factor_k != 2 {
            return Err(Error::config(format!(
                "factorized heads need k = 2, vocabulary has k = {}",
                layout.config().factor_k
            )));
        }
        let base = layout.config().factor_base as usize;
        let w = cfg.width;
        let mut rng = seeded_rng(seed, "sr-init");
        let mut store = Store::new();
        let std = 0.02;
        let slots = SrSlots {
            e1: store.mat("e1", base, w, gauss(&mut rng, std)),
            e2: store.mat("e2", base, w, gauss(&mut rng, std)),
            mask_emb: {
                let s = store.vec("mask_emb", w, 0.0);
                let mut g = gauss(&mut rng, std);
                for v in store.v_mut(s).iter_mut() {
                    *v = g();
                }
                s
            },
            hr_pos: [
                store.mat("hr_pos.t", cfg.hr_shape.0, w, gauss(&mut rng, std)),
                store.mat("hr_pos.y", cfg.hr_shape.1, w, gauss(&mut rng, std)),
                store.mat("hr_pos.x", cfg.hr_shape.2, w, gauss(&mut rng, std)),
            ],
            lr_pos: [
                store.mat("lr_pos.t", cfg.lr_shape.0, w, gauss(&mut rng, std)),
                store.mat("lr_pos.y", cfg.lr_shape.1, w, gauss(&mut rng, std)),
                store.mat("lr_pos.x", cfg.lr_shape.2, w, gauss(&mut rng, std)),
            ],
            lr_null: {
                let s = store.vec("lr_null", w, 0.0);
                let mut g = gauss(&mut rng, 1.0);
                for v in store.v_mut(s).iter_mut() {
                    *v = g();
                }
                s
            },
            text_null: {
                let s = store.vec("text_null", w, 0.0);
                let mut g = gauss(&mut rng, 1.0);
                for v in store.v_mut(s).iter_mut() {
                    *v = g();
                }
                s
            },
            text_proj: store.mat("text_proj", cfg.text_embed_dim, w, gauss(&mut rng, std)),
            layers: (0..cfg.layer_axes.len())
                .map(|l| SrBlockSlots {
                    ln_s_g: store.vec(&format!("l{l}.ln_s.g"), w, 1.0),
                    ln_s_b: store.vec(&format!("l{l}.ln_s.b"), w, 0.0),
                    wq: store.mat(&format!("l{l}.wq"), w, w, gauss(&mut rng, std)),
                    wk: store.mat(&format!("l{l}.wk"), w, w, gauss(&mut rng, std)),
                    wv: store.mat(&format!("l{l}.wv"), w, w, gauss(&mut rng, std)),
                    wo: store.mat(&format!("l{l}.wo"), w, w, gauss(&mut rng, std)),
                    ln_c_g: store.vec(&format!("l{l}.ln_c.g"), w, 1.0),
                    ln_c_b: store.vec(&format!("l{l}.ln_c.b"), w, 0.0),
                    cq: store.mat(&format!("l{l}.cq"), w, w, gauss(&mut rng, std)),
                    ck: store.mat(&format!("l{l}.ck"), w, w, gauss(&mut rng, std)),
                    cv: store.mat(&format!("l{l}.cv"), w, w, gauss(&mut rng, std)),
                    co: store.mat(&format!("l{l}.co"), w, w, gauss(&mut rng, std)),
                    ln_t_g: store.vec(&format!("l{l}.ln_t.g"), w, 1.0),
                    ln_t_b: store.vec(&format!("l{l}.ln_t.b"), w, 0.0),
                    tq: store.mat(&format!("l{l}.tq"), w, w, gauss(&mut rng, std)),
                    tk: store.mat(&format!("l{l}.tk"), w, w, gauss(&mut rng, std)),
                    tv: store.mat(&format!("l{l}.tv"), w, w, gauss(&mut rng, std)),
                    to: store.mat(&format!("l{l}.to"), w, w, gauss(&mut rng, std)),
                    ln_f_g: store.vec(&format!("l{l}.ln_f.g"), w, 1.0),
                    ln_f_b: store.vec(&format!("l{l}.ln_f.b"), w, 0.0),
                    w1: store.mat(&format!("l{l}.ffn.w1"), w, w * cfg.ffn_mult, gauss(&mut rng, std)),
                    b1: store.vec(&format!("l{l}.ffn.b1"), w * cfg.ffn_mult, 0.0),
                    w2: store.mat(&format!("l{l}.ffn.w2"), w * cfg.ffn_mult, w, gauss(&mut rng, std)),
                    b2: store.vec(&format!("l{l}.ffn.b2"), w, 0.0),
                })
                .collect(),
            lnf_g: store.vec("lnf.g", w, 1.0),
            lnf_b: store.vec("lnf.b", w, 0.0),
            // Zero heads: initial factor distributions are exactly uniform.
            head1: store.mat("head1", w, base, || 0.0),
            head2: store.mat("head2", w, base, || 0.0),
        };
        let text_seed = layout.fingerprint() ^ fnv1a(b"frozen-text-table");
        let mut trng = seeded_rng(text_seed, "text-table");
        let mut g = gauss(&mut trng, 1.0);
        let text_table = Mat::from_shape_fn(
            (layout.config().text_vocab_count as usize, cfg.text_embed_dim),
            |_| g(),
        );
        let self_blocks = [
            window_partition(cfg.hr_shape, cfg.self_windows[0])?,
            window_partition(cfg.hr_shape, cfg.self_windows[1])?,
            window_partition(cfg.hr_shape, cfg.self_windows[2])?,
        ];
        let cross_blocks = [
            window_partition(cfg.lr_shape, cfg.cross_windows[0])?,
            window_partition(cfg.lr_shape, cfg.cross_windows[1])?,
            window_partition(cfg.lr_shape, cfg.cross_windows[2])?,
        ];
        Ok(SrModel {
            cfg,
            layout,
            params: store,
            slots,
            text_table,
            self_blocks,
            cross_blocks,
        })
    }

    pub fn config(&self) -> &SrConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.layout
    }

    pub fn params(&self) -> &Store {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Store {
        &mut self.params
    }

    pub fn fingerprint(&self) -> u64 {
        let mut f = Fingerprint::new("sr-config-v1");
        for d in [self.cfg.lr_shape, self.cfg.hr_shape] {
            f.push_u64(d.0 as u64);
            f.push_u64(d.1 as u64);
            f.push_u64(d.2 as u64);
        }
        f.push_u64(self.cfg.width as u64);
        f.push_u64(self.cfg.layer_axes.len() as u64);
        f.push_u64(self.layout.fingerprint());
        f.finish()
    }

    fn base(&self) -> usize {
        self.layout.config().factor_base as usize
    }

    // -- embeddings ---------------------------------------------------------

    fn embed_hr(&self, factors: &[Option<(u32, u32)>]) -> Mat {
        let p = &self.params;
        let n = self.cfg.hr_len();
        let mut x = Mat::zeros((n, self.cfg.width));
        let e1 = p.m(self.slots.e1);
        let e2 = p.m(self.slots.e2);
        let mask = p.v(self.slots.mask_emb);
        for i in 0..n {
            let (t, y, xx) = unflatten(i, self.cfg.hr_shape);
            let mut row = match factors[i] {
                Some((f1, f2)) => (&e1.row(f1 as usize) + &e2.row(f2 as usize)).to_owned(),
                None => mask.to_owned(),
            };
            row += &p.m(self.slots.hr_pos[0]).row(t);
            row += &p.m(self.slots.hr_pos[1]).row(y);
            row += &p.m(self.slots.hr_pos[2]).row(xx);
            x.row_mut(i).assign(&row);
        }
        x
    }

    fn embed_hr_backward(&self, grads: &mut Store, factors: &[Option<(u32, u32)>], dx: &Mat) {
        for i in 0..factors.len() {
            let (t, y, xx) = unflatten(i, self.cfg.hr_shape);
            let row = dx.row(i);
            match factors[i] {
                Some((f1, f2)) => {
                    grads.m_mut(self.slots.e1).row_mut(f1 as usize).scaled_add(1.0, &row);
                    grads.m_mut(self.slots.e2).row_mut(f2 as usize).scaled_add(1.0, &row);
                }
                None => grads.v_mut(self.slots.mask_emb).scaled_add(1.0, &row),
            }
            grads.m_mut(self.slots.hr_pos[0]).row_mut(t).scaled_add(1.0, &row);
            grads.m_mut(self.slots.hr_pos[1]).row_mut(y).scaled_add(1.0, &row);
            grads.m_mut(self.slots.hr_pos[2]).row_mut(xx).scaled_add(1.0, &row);
        }
    }

    /// LR memory rows: token factor embeddings plus LR positional tables, or
    /// the single null row when the condition is dropped.
    fn embed_lr(&self, lr: Option<&TokenGrid>) -> Result<Mat> {
        let p = &self.params;
        match lr {
            None => Ok(p
                .v(self.slots.lr_null)
                .to_owned()
                .insert_axis(ndarray::Axis(0))),
            Some(grid) => {
                if grid.shape != self.cfg.lr_shape {
                    return Err(Error::shape(format!(
                        "LR grid {:?} does not match stage input {:?}",
                        grid.shape, self.cfg.lr_shape
                    )));
                }
                let e1 = p.m(self.slots.e1);
                let e2 = p.m(self.slots.e2);
                let mut mem = Mat::zeros((grid.len(), self.cfg.width));
                for (i, &tok) in grid.tokens.iter().enumerate() {
                    let fs = self.layout.factorize(tok)?;
                    let (t, y, x) = unflatten(i, self.cfg.lr_shape);
                    let mut row = (&e1.row(fs[0] as usize) + &e2.row(fs[1] as usize)).to_owned();
                    row += &p.m(self.slots.lr_pos[0]).row(t);
                    row += &p.m(self.slots.lr_pos[1]).row(y);
                    row += &p.m(self.slots.lr_pos[2]).row(x);
                    mem.row_mut(i).assign(&row);
                }
                Ok(mem)
            }
        }
    }

    fn embed_lr_backward(&self, grads: &mut Store, lr: Option<&TokenGrid>, dmem: &Mat) -> Result<()> {
        match lr {
            None => {
                grads.v_mut(self.slots.lr_null).scaled_add(1.0, &dmem.row(0));
            }
            Some(grid) => {
                for (i, &tok) in grid.tokens.iter().enumerate() {
                    let fs = self.layout.factorize(tok)?;
                    let (t, y, x) = unflatten(i, self.cfg.lr_shape);
                    let row = dmem.row(i);
                    grads.m_mut(self.slots.e1).row_mut(fs[0] as usize).scaled_add(1.0, &row);
                    grads.m_mut(self.slots.e2).row_mut(fs[1] as usize).scaled_add(1.0, &row);
                    grads.m_mut(self.slots.lr_pos[0]).row_mut(t).scaled_add(1.0, &row);
                    grads.m_mut(self.slots.lr_pos[1]).row_mut(y).scaled_add(1.0, &row);
                    grads.m_mut(self.slots.lr_pos[2]).row_mut(x).scaled_add(1.0, &row);
                }
            }
        }
        Ok(())
    }

    fn embed_text(&self, text: Option<&[TokenId]>) -> Result<Mat> {
        let p = &self.params;
        match text {
            None => Ok(p
                .v(self.slots.text_null)
                .to_owned()
                .insert_axis(ndarray::Axis(0))),
            Some(words) => {
                if words.is_empty() || words.len() > self.cfg.text_slots {
                    return Err(Error::shape(format!(
                        "text of {} slots outside 1..={}",
                        words.len(),
                        self.cfg.text_slots
                    )));
                }
                let base = self.layout.text_range().start;
                let proj = p.m(self.slots.text_proj);
                let mut mem = Mat::zeros((words.len(), self.cfg.width));
                for (i, &w) in words.iter().enumerate() {
                    if self.layout.classify(w)? != Partition::Text {
                        return Err(Error::data(format!("token {w} is not a text slot")));
                    }
                    let frozen = self.text_table.row((w - base) as usize);
                    mem.row_mut(i).assign(&frozen.dot(&proj));
                }
                Ok(mem)
            }
        }
    }

    fn embed_text_backward(&self, grads: &mut Store, text: Option<&[TokenId]>, dmem: &Mat) {
        match text {
            None => {
                grads.v_mut(self.slots.text_null).scaled_add(1.0, &dmem.row(0));
            }
            Some(words) => {
                let base = self.layout.text_range().start;
                let mut dproj = grads.m_mut(self.slots.text_proj);
                for (i, &w) in words.iter().enumerate() {
                    let frozen = self.text_table.row((w - base) as usize);
                    let drow = dmem.row(i);
                    for a in 0..frozen.len() {
                        for b in 0..drow.len() {
                            dproj[[a, b]] += frozen[a] * drow[b];
                        }
                    }
                }
            }
        }
    }

    // -- attention helpers --------------------------------------------------

    fn mha(&self, q: &Mat, k: &Mat, v: &Mat) -> (Mat, Vec<AttnCache>) {
        let heads = self.cfg.heads;
        let dh = self.cfg.width / heads;
        let mut out = Mat::zeros(q.raw_dim());
        let mut caches = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            let (oh, c) = attn_forward(
                &q.slice(cols).to_owned(),
                &k.slice(cols).to_owned(),
                &v.slice(cols).to_owned(),
                None,
            );
            out.slice_mut(cols).assign(&oh);
            caches.push(c);
        }
        (out, caches)
    }

    fn mha_backward(
        &self,
        caches: &[AttnCache],
        q: &Mat,
        k: &Mat,
        v: &Mat,
        dout: &Mat,
    ) -> (Mat, Mat, Mat) {
        let heads = self.cfg.heads;
        let dh = self.cfg.width / heads;
        let mut dq = Mat::zeros(q.raw_dim());
        let mut dk = Mat::zeros(k.raw_dim());
        let mut dv = Mat::zeros(v.raw_dim());
        for h in 0..heads {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            let (dqh, dkh, dvh) = attn_backward(
                &caches[h],
                &q.slice(cols).to_owned(),
                &k.slice(cols).to_owned(),
                &v.slice(cols).to_owned(),
                &dout.slice(cols).to_owned(),
            );
            dq.slice_mut(cols).assign(&dqh);
            dk.slice_mut(cols).assign(&dkh);
            dv.slice_mut(cols).assign(&dvh);
        }
        (dq, dk, dv)
    }

    // -- forward ------------------------------------------------------------

    fn forward_trace(
        &self,
        factors: &[Option<(u32, u32)>],
        lr: Option<&TokenGrid>,
        text: Option<&[TokenId]>,
    ) -> Result<(Mat, SrTrace)> {
        if factors.len() != self.cfg.hr_len() {
            return Err(Error::shape(format!(
                "{} factor slots for an HR grid of {}",
                factors.len(),
                self.cfg.hr_len()
            )));
        }
        for f in factors.iter().flatten() {
            let base = self.base() as u32;
            if f.0 >= base || f.1 >= base {
                return Err(Error::data(format!("factor pair {f:?} outside base {base}")));
            }
        }
        let lr_mem = self.embed_lr(lr)?;
        let text_mem = self.embed_text(text)?;
        let x0 = self.embed_hr(factors);

        let p = &self.params;
        let mut x = x0;
        let mut layers = Vec::with_capacity(self.slots.layers.len());
        for (l, b) in self.slots.layers.iter().enumerate() {
            let axis = self.cfg.layer_axes[l];

            // Windowed self-attention.
            let (xn_s, ln_s) = layer_norm_forward(p, b.ln_s_g, b.ln_s_b, &x);
            let q = linear_forward(p, b.wq, None, &xn_s);
            let k = linear_forward(p, b.wk, None, &xn_s);
            let v = linear_forward(p, b.wv, None, &xn_s);
            let mut cat_s = Mat::zeros(x.raw_dim());
            let mut attn_s = Vec::new();
            for block in &self.self_blocks[axis] {
                let (ob, caches) = self.mha(
                    &gather_rows(&q, block),
                    &gather_rows(&k, block),
                    &gather_rows(&v, block),
                );
                scatter_rows(&mut cat_s, block, &ob);
                attn_s.push(caches);
            }
            let x_self = &x + &linear_forward(p, b.wo, None, &cat_s);

            // Windowed cross-attention to the LR memory. A dropped condition
            // is a single null row shared by every block.
            let (xn_c, ln_c) = layer_norm_forward(p, b.ln_c_g, b.ln_c_b, &x_self);
            let qc = linear_forward(p, b.cq, None, &xn_c);
            let km = linear_forward(p, b.ck, None, &lr_mem);
            let vm = linear_forward(p, b.cv, None, &lr_mem);
            let null_mem = lr_mem.nrows() == 1;
            let mut cat_c = Mat::zeros(x.raw_dim());
            let mut attn_c = Vec::new();
            for (bi, block) in self.self_blocks[axis].iter().enumerate() {
                let mem_rows: Vec<usize> = if null_mem {
                    vec![0]
                } else {
                    self.cross_blocks[axis][bi].clone()
                };
                let (ob, caches) = self.mha(
                    &gather_rows(&qc, block),
                    &gather_rows(&km, &mem_rows),
                    &gather_rows(&vm, &mem_rows),
                );
                scatter_rows(&mut cat_c, block, &ob);
                attn_c.push(caches);
            }
            let x_cross = &x_self + &linear_forward(p, b.co, None, &cat_c);

            // Global cross-attention to text.
            let (xn_t, ln_t) = layer_norm_forward(p, b.ln_t_g, b.ln_t_b, &x_cross);
            let qt = linear_forward(p, b.tq, None, &xn_t);
            let kt = linear_forward(p, b.tk, None, &text_mem);
            let vt = linear_forward(p, b.tv, None, &text_mem);
            let (cat_t, attn_t) = self.mha(&qt, &kt, &vt);
            let x_text = &x_cross + &linear_forward(p, b.to, None, &cat_t);

            let (xn_f, ln_f) = layer_norm_forward(p, b.ln_f_g, b.ln_f_b, &x_text);
            let h_pre = linear_forward(p, b.w1, Some(b.b1), &xn_f);
            let h_act = gelu_forward(&h_pre);
            let x_out = &x_text + &linear_forward(p, b.w2, Some(b.b2), &h_act);

            layers.push(SrLayerTrace {
                axis,
                ln_s,
                xn_s,
                q,
                k,
                v,
                attn_s,
                cat_s,
                ln_c,
                xn_c,
                qc,
                km,
                vm,
                attn_c,
                cat_c,
                ln_t,
                xn_t,
                qt,
                kt,
                vt,
                attn_t,
                cat_t,
                ln_f,
                xn_f,
                h_pre,
                h_act,
            });
            x = x_out;
        }
        let (xf, lnf) = layer_norm_forward(p, self.slots.lnf_g, self.slots.lnf_b, &x);
        Ok((
            xf,
            SrTrace {
                layers,
                lnf,
                lr_mem,
                text_mem,
            },
        ))
    }

    /// Factor logits for every HR position. `None` conditions are the
    /// dropped (null) variants used by guidance.
    pub fn forward(
        &self,
        factors: &[Option<(u32, u32)>],
        lr: Option<&TokenGrid>,
        text: Option<&[TokenId]>,
    ) -> Result<SrLogits> {
        let (xf, _) = self.forward_trace(factors, lr, text)?;
        let f1 = xf.dot(&self.params.m(self.slots.head1));
        let f2 = xf.dot(&self.params.m(self.slots.head2));
        for v in f1.iter().chain(f2.iter()) {
            if !v.is_finite() {
                return Err(Error::numeric("non-finite factor logit".to_string()));
            }
        }
        Ok(SrLogits { f1, f2 })
    }

    fn backward(
        &self,
        grads: &mut Store,
        trace: &SrTrace,
        lr: Option<&TokenGrid>,
        text: Option<&[TokenId]>,
        factors: &[Option<(u32, u32)>],
        d_xf: &Mat,
    ) -> Result<()> {
        let p = &self.params;
        let mut d = layer_norm_backward(p, grads, self.slots.lnf_g, self.slots.lnf_b, &trace.lnf, d_xf);
        let mut d_lr_mem = Mat::zeros(trace.lr_mem.raw_dim());
        let mut d_text_mem = Mat::zeros(trace.text_mem.raw_dim());

        for (l, b) in self.slots.layers.iter().enumerate().rev() {
            let t = &trace.layers[l];
            let axis = t.axis;

            // FFN
            let d_h_act = linear_backward(p, grads, b.w2, Some(b.b2), &t.h_act, &d);
            let d_h_pre = gelu_backward(&t.h_pre, &d_h_act);
            let d_xn_f = linear_backward(p, grads, b.w1, Some(b.b1), &t.xn_f, &d_h_pre);
            let mut d_text_out = layer_norm_backward(p, grads, b.ln_f_g, b.ln_f_b, &t.ln_f, &d_xn_f);
            d_text_out += &d;

            // Text cross-attention
            let d_cat_t = linear_backward(p, grads, b.to, None, &t.cat_t, &d_text_out);
            let (dqt, dkt, dvt) = self.mha_backward(&t.attn_t, &t.qt, &t.kt, &t.vt, &d_cat_t);
            d_text_mem += &linear_backward(p, grads, b.tk, None, &trace.text_mem, &dkt);
            d_text_mem += &linear_backward(p, grads, b.tv, None, &trace.text_mem, &dvt);
            let d_xn_t = linear_backward(p, grads, b.tq, None, &t.xn_t, &dqt);
            let mut d_cross_out = layer_norm_backward(p, grads, b.ln_t_g, b.ln_t_b, &t.ln_t, &d_xn_t);
            d_cross_out += &d_text_out;

            // LR cross-attention
            let d_cat_c = linear_backward(p, grads, b.co, None, &t.cat_c, &d_cross_out);
            let null_mem = trace.lr_mem.nrows() == 1;
            let mut dqc = Mat::zeros(t.qc.raw_dim());
            let mut dkm = Mat::zeros(t.km.raw_dim());
            let mut dvm = Mat::zeros(t.vm.raw_dim());
            for (bi, block) in self.self_blocks[axis].iter().enumerate() {
                let mem_rows: Vec<usize> = if null_mem {
                    vec![0]
                } else {
                    self.cross_blocks[axis][bi].clone()
                };
                let qb = gather_rows(&t.qc, block);
                let kb = gather_rows(&t.km, &mem_rows);
                let vb = gather_rows(&t.vm, &mem_rows);
                let db = gather_rows(&d_cat_c, block);
                let (dqb, dkb, dvb) = self.mha_backward(&t.attn_c[bi], &qb, &kb, &vb, &db);
                scatter_rows(&mut dqc, block, &dqb);
                scatter_add_rows(&mut dkm, &mem_rows, &dkb);
                scatter_add_rows(&mut dvm, &mem_rows, &dvb);
            }
            d_lr_mem += &linear_backward(p, grads, b.ck, None, &trace.lr_mem, &dkm);
            d_lr_mem += &linear_backward(p, grads, b.cv, None, &trace.lr_mem, &dvm);
            let d_xn_c = linear_backward(p, grads, b.cq, None, &t.xn_c, &dqc);
            let mut d_self_out = layer_norm_backward(p, grads, b.ln_c_g, b.ln_c_b, &t.ln_c, &d_xn_c);
            d_self_out += &d_cross_out;

            // Self-attention
            let d_cat_s = linear_backward(p, grads, b.wo, None, &t.cat_s, &d_self_out);
            let mut dq = Mat::zeros(t.q.raw_dim());
            let mut dk = Mat::zeros(t.k.raw_dim());
            let mut dv = Mat::zeros(t.v.raw_dim());
            for (bi, block) in self.self_blocks[axis].iter().enumerate() {
                let qb = gather_rows(&t.q, block);
                let kb = gather_rows(&t.k, block);
                let vb = gather_rows(&t.v, block);
                let db = gather_rows(&d_cat_s, block);
                let (dqb, dkb, dvb) = self.mha_backward(&t.attn_s[bi], &qb, &kb, &vb, &db);
                scatter_rows(&mut dq, block, &dqb);
                scatter_rows(&mut dk, block, &dkb);
                scatter_rows(&mut dv, block, &dvb);
            }
            let mut d_xn_s = linear_backward(p, grads, b.wq, None, &t.xn_s, &dq);
            d_xn_s += &linear_backward(p, grads, b.wk, None, &t.xn_s, &dk);
            d_xn_s += &linear_backward(p, grads, b.wv, None, &t.xn_s, &dv);
            let mut d_x = layer_norm_backward(p, grads, b.ln_s_g, b.ln_s_b, &t.ln_s, &d_xn_s);
            d_x += &d_self_out;
            d = d_x;
        }
        self.embed_hr_backward(grads, factors, &d);
        self.embed_lr_backward(grads, lr, &d_lr_mem)?;
        self.embed_text_backward(grads, text, &d_text_mem);
        Ok(())
    }

    // -- training -----------------------------------------------------------

    fn example_grads(
        &self,
        grads: &mut Store,
        ex: &SrExample,
        masked: &[usize],
        drop_lr: bool,
        drop_text: bool,
        lr_aug: &TokenGrid,
        scale: f64,
    ) -> Result<f64> {
        let factors = self.masked_factors(&ex.hr, masked)?;
        let lr = if drop_lr { None } else { Some(lr_aug) };
        let text: Option<&[TokenId]> = if drop_text || ex.text.is_empty() {
            None
        } else {
            Some(&ex.text)
        };
        let (xf, trace) = self.forward_trace(&factors, lr, text)?;

        let mut xf_rows = Mat::zeros((masked.len(), self.cfg.width));
        for (r, &i) in masked.iter().enumerate() {
            xf_rows.row_mut(r).assign(&xf.row(i));
        }
        let mut t1 = Vec::with_capacity(masked.len());
        let mut t2 = Vec::with_capacity(masked.len());
        for &i in masked {
            let fs = self.layout.factorize(ex.hr.tokens[i])?;
            t1.push(fs[0] as usize);
            t2.push(fs[1] as usize);
        }
        let logits1 = xf_rows.dot(&self.params.m(self.slots.head1));
        let logits2 = xf_rows.dot(&self.params.m(self.slots.head2));
        let (l1, d1) = cross_entropy(&logits1, &t1)?;
        let (l2, d2) = cross_entropy(&logits2, &t2)?;
        let d1 = d1 * scale;
        let d2 = d2 * scale;

        grads
            .m_mut(self.slots.head1)
            .scaled_add(1.0, &xf_rows.t().dot(&d1));
        grads
            .m_mut(self.slots.head2)
            .scaled_add(1.0, &xf_rows.t().dot(&d2));
        let d_rows = d1.dot(&self.params.m(self.slots.head1).t())
            + d2.dot(&self.params.m(self.slots.head2).t());
        let mut d_xf = Mat::zeros(xf.raw_dim());
        for (r, &i) in masked.iter().enumerate() {
            d_xf.row_mut(i).assign(&d_rows.row(r));
        }
        self.backward(grads, &trace, lr, text, &factors, &d_xf)?;
        Ok(l1 + l2)
    }

    fn masked_factors(&self, hr: &TokenGrid, masked: &[usize]) -> Result<Vec<Option<(u32, u32)>>> {
        if hr.shape != self.cfg.hr_shape {
            return Err(Error::shape(format!(
                "HR grid {:?} does not match stage output {:?}",
                hr.shape, self.cfg.hr_shape
            )));
        }
        let mut out = Vec::with_capacity(hr.len());
        for &tok in &hr.tokens {
            let fs = self.layout.factorize(tok)?;
            out.push(Some((fs[0], fs[1])));
        }
        for &i in masked {
            out[i] = None;
        }
        Ok(out)
    }

    /// One optimizer step: per example, draw a mask fraction from the cosine
    /// curve, corrupt the LR grid, flip the two condition-drop coins, and
    /// average the masked-position factor losses.
    pub fn train_step(
        &mut self,
        opt: &mut AdamW,
        batch: &[SrExample],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::data("empty batch".to_string()));
        }
        let mut grads = self.params.zeros_like();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let n = self.cfg.hr_len();
        for ex in batch {
            if ex.lr.codec_fp != ex.hr.codec_fp {
                return Err(Error::Fingerprint {
                    expected: ex.hr.codec_fp,
                    found: ex.lr.codec_fp,
                    context: "LR vs HR token source".to_string(),
                });
            }
            let ratio = (std::f64::consts::FRAC_PI_2 * rng.random::<f64>()).cos();
            let count = ((ratio * n as f64).ceil() as usize).clamp(1, n);
            let masked: Vec<usize> = rand::seq::index::sample(rng, n, count).into_vec();
            let frac = rng.random::<f64>() * self.cfg.noise_frac_max;
            let lr_aug = noise_augment(&ex.lr, frac, &self.layout, rng)?;
            let (drop_lr, drop_text) = draw_drops(rng, self.cfg.cond_drop_rate);
            let loss = self.example_grads(&mut grads, ex, &masked, drop_lr, drop_text, &lr_aug, scale)?;
            total += loss * scale;
        }
        for &g in grads.data() {
            if !g.is_finite() {
                return Err(Error::numeric("non-finite gradient".to_string()));
            }
        }
        opt.update(&mut self.params, &grads);
        Ok(total)
    }

    /// Masked-position loss without an update, for evaluation.
    pub fn example_loss(&self, ex: &SrExample, masked: &[usize]) -> Result<f64> {
        let mut grads = self.params.zeros_like();
        self.example_grads(
            &mut grads,
            ex,
            masked,
            false,
            ex.text.is_empty(),
            &ex.lr,
            1.0,
        )
    }

    // -- sampling -----------------------------------------------------------

    /// Iterative refinement from a fully-masked grid. Each step runs up to
    /// three passes for dual guidance, samples every masked position, and
    /// keeps the most confident picks per the schedule (ties: lowest index).
    pub fn sample(
        &self,
        lr: &TokenGrid,
        text: Option<&[TokenId]>,
        sampler: &SrSampler,
    ) -> Result<TokenGrid> {
        let n = self.cfg.hr_len();
        let schedule = mask_schedule(n, sampler.steps);
        let mut rng = seeded_rng(sampler.seed, "sr-sample");
        let mut factors: Vec<Option<(u32, u32)>> = vec![None; n];
        let base = self.base();

        for &target in &schedule {
            let masked: Vec<usize> = (0..n).filter(|&i| factors[i].is_none()).collect();
            if masked.is_empty() {
                break;
            }
            let s_lr = sampler.guidance_lr;
            let s_t = sampler.guidance_text;
            // Passes with a zero coefficient are never read, so any computed
            // pass stands in for them.
            let (need_bn, need_tn, need_f) = guidance_passes(s_lr, s_t);
            let full = if need_f || (!need_bn && !need_tn) {
                self.forward(&factors, Some(lr), text)?
            } else {
                self.forward(&factors, None, None)?
            };
            let bn = if need_bn && need_f {
                self.forward(&factors, None, None)?
            } else {
                full.clone()
            };
            let tn = if need_tn {
                self.forward(&factors, Some(lr), None)?
            } else {
                full.clone()
            };
            let guided = guided_sr(&bn, &tn, &full, s_lr, s_t);

            // Sample both factors at every masked position; confidence is
            // the product of the picked factors' probabilities.
            let mut picks: Vec<(f64, usize, (u32, u32))> = Vec::with_capacity(masked.len());
            let mut p1 = guided.f1.clone();
            softmax_rows(&mut p1);
            let mut p2 = guided.f2.clone();
            softmax_rows(&mut p2);
            for &i in &masked {
                let row1: Vec<f64> = guided.f1.row(i).to_vec();
                let row2: Vec<f64> = guided.f2.row(i).to_vec();
                let f1 = sample_top_k(&mut rng, &row1, sampler.temperature, base);
                let f2 = sample_top_k(&mut rng, &row2, sampler.temperature, base);
                let conf = p1[[i, f1]] * p2[[i, f2]];
                picks.push((conf, i, (f1 as u32, f2 as u32)));
            }
            let keep = masked.len().saturating_sub(target);
            picks.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            });
            for &(_, i, pair) in picks.iter().take(keep) {
                factors[i] = Some(pair);
            }
        }

        let mut tokens = Vec::with_capacity(n);
        for f in &factors {
            let (f1, f2) = f.expect("schedule ends at zero masked positions");
            tokens.push(self.layout.defactorize(&[f1, f2])?);
        }
        Ok(TokenGrid {
            shape: self.cfg.hr_shape,
            tokens,
            codec_fp: lr.codec_fp,
        })
    }
}

/// A training pair: the HR grid, its downsampled-and-retokenized LR version,
/// and the caption tokens (empty for uncaptioned clips).
#[derive(Debug, Clone)]
pub struct SrExample {
    pub hr: TokenGrid,
    pub lr: TokenGrid,
    pub text: Vec<TokenId>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SrSampler {
    pub steps: usize,
    pub guidance_text: f64,
    pub guidance_lr: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl SrSampler {
    pub fn from_config(cfg: &SrConfig, seed: u64) -> SrSampler {
        SrSampler {
            steps: cfg.steps,
            guidance_text: cfg.guidance_text,
            guidance_lr: cfg.guidance_lr,
            temperature: 1.0,
            seed,
        }
    }
}

struct SrLayerTrace {
    axis: usize,
    ln_s: LayerNormCache,
    xn_s: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn_s: Vec<Vec<AttnCache>>,
    cat_s: Mat,
    ln_c: LayerNormCache,
    xn_c: Mat,
    qc: Mat,
    km: Mat,
    vm: Mat,
    attn_c: Vec<Vec<AttnCache>>,
    cat_c: Mat,
    ln_t: LayerNormCache,
    xn_t: Mat,
    qt: Mat,
    kt: Mat,
    vt: Mat,
    attn_t: Vec<AttnCache>,
    cat_t: Mat,
    ln_f: LayerNormCache,
    xn_f: Mat,
    h_pre: Mat,
    h_act: Mat,
}

struct SrTrace {
    layers: Vec<SrLayerTrace>,
    lnf: LayerNormCache,
    lr_mem: Mat,
    text_mem: Mat,
}

fn gather_rows(m: &Mat, rows: &[usize]) -> Mat {
    let mut out = Mat::zeros((rows.len(), m.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&m.row(i));
    }
    out
}

fn scatter_rows(dst: &mut Mat, rows: &[usize], src: &Mat) {
    for (r, &i) in rows.iter().enumerate() {
        dst.row_mut(i).assign(&src.row(r));
    }
}

fn scatter_add_rows(dst: &mut Mat, rows: &[usize], src: &Mat) {
    for (r, &i) in rows.iter().enumerate() {
        dst.row_mut(i).scaled_add(1.0, &src.row(r));
    }
}
