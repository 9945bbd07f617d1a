//! Unified discrete token vocabulary.
//!
//! Every modality lives in one contiguous id space, partitioned in a fixed
//! order: `[special | visual | audio (one sub-range per quantizer level) | text]`.
//! The layout also owns the factorization parameters that split a visual id
//! into `factor_k` smaller factors for the super-resolution heads.
//!
//! A layout is immutable once built and carries a fingerprint over all counts
//! and offsets; checkpoints and dataset files embed the fingerprint so a
//! mismatched vocabulary fails loudly instead of decoding garbage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::Fingerprint;

pub type TokenId = u32;

/// Number of task ids reserved inside the special partition.
pub const TASK_SLOTS: u32 = 16;
/// Number of resolution-tag ids reserved inside the special partition.
pub const RES_SLOTS: u32 = 8;
/// Number of source-tag ids reserved inside the special partition.
pub const SOURCE_SLOTS: u32 = 4;
/// Smallest legal special partition: fixed framing ids + the sub-ranges.
pub const MIN_SPECIAL: u32 = SOURCE_BASE + SOURCE_SLOTS;

const TASK_BASE: u32 = 16;
const RES_BASE: u32 = TASK_BASE + TASK_SLOTS;
const SOURCE_BASE: u32 = RES_BASE + RES_SLOTS;

/// Partition sizes and factorization parameters for one vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub special_count: u32,
    pub visual_count: u32,
    pub audio_levels: u32,
    pub audio_codes_per_level: u32,
    pub text_vocab_count: u32,
    pub factor_base: u32,
    pub factor_k: u32,
}

impl VocabConfig {
    /// Desk-scale default: 256 + 4,096 + 4x1,024 + 1,024 = 9,472 ids.
    pub fn desk() -> Self {
        VocabConfig {
            special_count: 256,
            visual_count: 4096,
            audio_levels: 4,
            audio_codes_per_level: 1024,
            text_vocab_count: 1024,
            factor_base: 64,
            factor_k: 2,
        }
    }

    /// Full-scale reference configuration (for shape arithmetic only).
    pub fn full_scale() -> Self {
        VocabConfig {
            special_count: 256,
            visual_count: 262_144,
            audio_levels: 4,
            audio_codes_per_level: 1024,
            text_vocab_count: 33_000,
            factor_base: 512,
            factor_k: 2,
        }
    }

    /// Compact configuration for end-to-end training runs on weak hardware.
    /// Same structure as `desk`, smaller partitions.
    pub fn compact() -> Self {
        VocabConfig {
            special_count: 256,
            visual_count: 1024,
            audio_levels: 4,
            audio_codes_per_level: 256,
            text_vocab_count: 256,
            factor_base: 32,
            factor_k: 2,
        }
    }
}

/// Fixed special tokens. Task, res, and source ids are sub-ranges with
/// documented offsets; everything is stable across runs for a given config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Bos,
    Eos,
    BotI,
    EotI,
    BovI,
    EovI,
    BoaI,
    EoaI,
    BovO,
    EovO,
    BoaO,
    EoaO,
    /// Task id slot, `0..TASK_SLOTS`.
    Task(u8),
    /// Resolution tag slot, `0..RES_SLOTS`.
    Res(u8),
    /// Dataset-provenance slot, `0..SOURCE_SLOTS`.
    Source(u8),
}

impl Special {
    /// Offset of this token inside the special partition.
    pub fn offset(self) -> u32 {
        match self {
            Special::Bos => 0,
            Special::Eos => 1,
            Special::BotI => 2,
            Special::EotI => 3,
            Special::BovI => 4,
            Special::EovI => 5,
            Special::BoaI => 6,
            Special::EoaI => 7,
            Special::BovO => 8,
            Special::EovO => 9,
            Special::BoaO => 10,
            Special::EoaO => 11,
            Special::Task(i) => {
                debug_assert!((i as u32) < TASK_SLOTS);
                TASK_BASE + i as u32
            }
            Special::Res(i) => {
                debug_assert!((i as u32) < RES_SLOTS);
                RES_BASE + i as u32
            }
            Special::Source(i) => {
                debug_assert!((i as u32) < SOURCE_SLOTS);
                SOURCE_BASE + i as u32
            }
        }
    }

    /// Inverse of `offset` for ids inside the mapped region.
    pub fn from_offset(off: u32) -> Option<Special> {
        Some(match off {
            0 => Special::Bos,
            1 => Special::Eos,
            2 => Special::BotI,
            3 => Special::EotI,
            4 => Special::BovI,
            5 => Special::EovI,
            6 => Special::BoaI,
            7 => Special::EoaI,
            8 => Special::BovO,
            9 => Special::EovO,
            10 => Special::BoaO,
            11 => Special::EoaO,
            o if (TASK_BASE..TASK_BASE + TASK_SLOTS).contains(&o) => {
                Special::Task((o - TASK_BASE) as u8)
            }
            o if (RES_BASE..RES_BASE + RES_SLOTS).contains(&o) => Special::Res((o - RES_BASE) as u8),
            o if (SOURCE_BASE..SOURCE_BASE + SOURCE_SLOTS).contains(&o) => {
                Special::Source((o - SOURCE_BASE) as u8)
            }
            _ => return None,
        })
    }
}

/// Which partition an id belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Special,
    Visual,
    /// Audio sub-range for one quantizer level.
    Audio { level: u32 },
    Text,
}

/// Validated vocabulary: partition bases plus the originating config.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabLayout {
    config: VocabConfig,
    visual_base: u32,
    audio_base: u32,
    text_base: u32,
    total: u32,
    fingerprint: u64,
}

/// Validate a config and compute partition offsets.
pub fn build_layout(config: &VocabConfig) -> Result<VocabLayout> {
    if config.special_count == 0
        || config.visual_count == 0
        || config.audio_levels == 0
        || config.audio_codes_per_level == 0
        || config.text_vocab_count == 0
        || config.factor_base == 0
        || config.factor_k == 0
    {
        return Err(Error::config("vocab: all counts must be positive"));
    }
    if config.special_count < MIN_SPECIAL {
        return Err(Error::config(format!(
            "vocab: special_count {} cannot hold the fixed token map (need >= {MIN_SPECIAL})",
            config.special_count
        )));
    }
    let expect_visual = (config.factor_base as u64)
        .checked_pow(config.factor_k)
        .ok_or_else(|| Error::config("vocab: factor_base^factor_k overflows"))?;
    if expect_visual != config.visual_count as u64 {
        return Err(Error::config(format!(
            "vocab: visual_count {} != factor_base {} ^ {}",
            config.visual_count, config.factor_base, config.factor_k
        )));
    }
    let audio_total = (config.audio_levels as u64) * (config.audio_codes_per_level as u64);
    let total = config.special_count as u64
        + config.visual_count as u64
        + audio_total
        + config.text_vocab_count as u64;
    let total: u32 = total
        .try_into()
        .map_err(|_| Error::config("vocab: total id count overflows u32"))?;

    let visual_base = config.special_count;
    let audio_base = visual_base + config.visual_count;
    let text_base = audio_base + audio_total as u32;

    let mut fp = Fingerprint::new("vocab-layout-v1");
    fp.push_u32(config.special_count)
        .push_u32(config.visual_count)
        .push_u32(config.audio_levels)
        .push_u32(config.audio_codes_per_level)
        .push_u32(config.text_vocab_count)
        .push_u32(config.factor_base)
        .push_u32(config.factor_k)
        .push_u32(visual_base)
        .push_u32(audio_base)
        .push_u32(text_base)
        .push_u32(total);

    Ok(VocabLayout {
        config: config.clone(),
        visual_base,
        audio_base,
        text_base,
        total,
        fingerprint: fp.finish(),
    })
}

impl VocabLayout {
    pub fn config(&self) -> &VocabConfig {
        &self.config
    }

    /// Total id count across all partitions.
    pub fn total(&self) -> u32 {
        self.total
    }

    /// Hash of all counts and offsets; embedded in files for compatibility checks.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn special_id(&self, s: Special) -> TokenId {
        let off = s.offset();
        debug_assert!(off < self.config.special_count);
        off
    }

    pub fn visual_range(&self) -> std::ops::Range<u32> {
        self.visual_base..self.audio_base
    }

    pub fn audio_level_range(&self, level: u32) -> Result<std::ops::Range<u32>> {
        if level >= self.config.audio_levels {
            return Err(Error::config(format!(
                "vocab: audio level {level} out of range (levels = {})",
                self.config.audio_levels
            )));
        }
        let base = self.audio_base + level * self.config.audio_codes_per_level;
        Ok(base..base + self.config.audio_codes_per_level)
    }

    pub fn text_range(&self) -> std::ops::Range<u32> {
        self.text_base..self.total
    }

    /// Unified id of a visual code (offset within the visual partition).
    pub fn visual_id(&self, code: u32) -> Result<TokenId> {
        if code >= self.config.visual_count {
            return Err(Error::data(format!(
                "vocab: visual code {code} >= {}",
                self.config.visual_count
            )));
        }
        Ok(self.visual_base + code)
    }

    /// Unified id of an audio code at a given level.
    pub fn audio_id(&self, level: u32, code: u32) -> Result<TokenId> {
        if code >= self.config.audio_codes_per_level {
            return Err(Error::data(format!(
                "vocab: audio code {code} >= {}",
                self.config.audio_codes_per_level
            )));
        }
        Ok(self.audio_level_range(level)?.start + code)
    }

    /// Unified id of a text-table entry.
    pub fn text_id(&self, index: u32) -> Result<TokenId> {
        if index >= self.config.text_vocab_count {
            return Err(Error::data(format!(
                "vocab: text index {index} >= {}",
                self.config.text_vocab_count
            )));
        }
        Ok(self.text_base + index)
    }

    /// Partition owning `id`. Total over `[0, total)`; errors beyond.
    pub fn classify(&self, id: TokenId) -> Result<Partition> {
        if id < self.visual_base {
            Ok(Partition::Special)
        } else if id < self.audio_base {
            Ok(Partition::Visual)
        } else if id < self.text_base {
            let level = (id - self.audio_base) / self.config.audio_codes_per_level;
            Ok(Partition::Audio { level })
        } else if id < self.total {
            Ok(Partition::Text)
        } else {
            Err(Error::data(format!(
                "vocab: id {id} outside vocabulary of {} ids",
                self.total
            )))
        }
    }

    /// Mixed-radix big-endian factor decomposition of a visual id
    /// (most-significant factor first).
    pub fn factorize(&self, visual_id: TokenId) -> Result<Vec<u32>> {
        if !self.visual_range().contains(&visual_id) {
            return Err(Error::data(format!(
                "vocab: id {visual_id} not in visual range {:?}",
                self.visual_range()
            )));
        }
        let mut rem = visual_id - self.visual_base;
        let k = self.config.factor_k as usize;
        let base = self.config.factor_base;
        let mut factors = vec![0u32; k];
        for slot in (0..k).rev() {
            factors[slot] = rem % base;
            rem /= base;
        }
        Ok(factors)
    }

    /// Inverse of `factorize`.
    pub fn defactorize(&self, factors: &[u32]) -> Result<TokenId> {
        if factors.len() != self.config.factor_k as usize {
            return Err(Error::data(format!(
                "vocab: expected {} factors, got {}",
                self.config.factor_k,
                factors.len()
            )));
        }
        let base = self.config.factor_base;
        let mut acc: u32 = 0;
        for &f in factors {
            if f >= base {
                return Err(Error::data(format!("vocab: factor {f} >= base {base}")));
            }
            acc = acc * base + f;
        }
        Ok(self.visual_base + acc)
    }

    /// Serialize the config as a human-readable key-value document.
    pub fn to_config_string(&self) -> String {
        toml::to_string(&self.config).expect("vocab config serializes")
    }

    /// Parse a config document and rebuild the layout.
    pub fn from_config_string(s: &str) -> Result<VocabLayout> {
        let config: VocabConfig =
            toml::from_str(s).map_err(|e| Error::config(format!("vocab config parse: {e}")))?;
        build_layout(&config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_total_is_9472() {
        let l = build_layout(&VocabConfig::desk()).unwrap();
        assert_eq!(l.total(), 9472);
    }

    #[test]
    fn full_scale_total_is_about_300k() {
        let l = build_layout(&VocabConfig::full_scale()).unwrap();
        assert_eq!(l.total(), 299_496);
        assert!((l.total() as i64 - 300_000).abs() < 1000);
        // Visual ids occupy [256, 262400).
        assert_eq!(l.visual_range(), 256..262_400);
    }

    #[test]
    fn bad_factor_base_rejected() {
        let cfg = VocabConfig {
            factor_base: 63,
            ..VocabConfig::desk()
        };
        assert!(build_layout(&cfg).is_err());
    }

    #[test]
    fn zero_count_rejected() {
        let cfg = VocabConfig {
            text_vocab_count: 0,
            ..VocabConfig::desk()
        };
        assert!(build_layout(&cfg).is_err());
    }

    #[test]
    fn overflow_rejected() {
        let cfg = VocabConfig {
            special_count: u32::MAX - 10,
            ..VocabConfig::desk()
        };
        assert!(build_layout(&cfg).is_err());
    }

    #[test]
    fn factorize_known_cases() {
        let l = build_layout(&VocabConfig::full_scale()).unwrap();
        let base = l.visual_range().start;
        assert_eq!(l.factorize(base).unwrap(), vec![0, 0]);
        assert_eq!(l.factorize(base + 262_143).unwrap(), vec![511, 511]);
        assert_eq!(l.factorize(base + 513).unwrap(), vec![1, 1]);
        // Big-endian: most-significant factor first.
        assert_eq!(l.factorize(base + 512).unwrap(), vec![1, 0]);
    }

    #[test]
    fn factorize_bijection_exhaustive_desk() {
        let l = build_layout(&VocabConfig::desk()).unwrap();
        for id in l.visual_range() {
            let f = l.factorize(id).unwrap();
            assert!(f.iter().all(|&x| x < 64));
            assert_eq!(l.defactorize(&f).unwrap(), id);
        }
    }

    #[test]
    fn factorize_rejects_non_visual() {
        let l = build_layout(&VocabConfig::desk()).unwrap();
        assert!(l.factorize(0).is_err());
        assert!(l.factorize(l.text_range().start).is_err());
    }

    #[test]
    fn classification_tiles_the_space_exhaustively() {
        let l = build_layout(&VocabConfig::desk()).unwrap();
        let mut counts = [0u32; 4];
        for id in 0..l.total() {
            match l.classify(id).unwrap() {
                Partition::Special => counts[0] += 1,
                Partition::Visual => counts[1] += 1,
                Partition::Audio { level } => {
                    assert!(level < 4);
                    counts[2] += 1;
                }
                Partition::Text => counts[3] += 1,
            }
        }
        assert_eq!(counts, [256, 4096, 4096, 1024]);
        assert!(l.classify(l.total()).is_err());
    }

    #[test]
    fn classify_boundary_cases() {
        let l = build_layout(&VocabConfig::desk()).unwrap();
        assert_eq!(l.classify(0).unwrap(), Partition::Special);
        assert_eq!(l.classify(256).unwrap(), Partition::Visual);
        // First id of audio level 1 sits one full level past the audio base.
        let id = 256 + 4096 + 1024;
        assert_eq!(l.classify(id).unwrap(), Partition::Audio { level: 1 });
    }

    #[test]
    fn audio_levels_are_disjoint_and_ordered() {
        let l = build_layout(&VocabConfig::desk()).unwrap();
        let mut prev_end = l.visual_range().end;
        for level in 0..4 {
            let r = l.audio_level_range(level).unwrap();
            assert_eq!(r.start, prev_end);
            assert_eq!(r.end - r.start, 1024);
            prev_end = r.end;
        }
        assert_eq!(prev_end, l.text_range().start);
        assert!(l.audio_level_range(4).is_err());
    }

    #[test]
    fn special_map_is_stable_and_within_bounds() {
        let l = build_layout(&VocabConfig::desk()).unwrap();
        let all = [
            Special::Bos,
            Special::Eos,
            Special::BotI,
            Special::EotI,
            Special::BovI,
            Special::EovI,
            Special::BoaI,
            Special::EoaI,
            Special::BovO,
            Special::EovO,
            Special::BoaO,
            Special::EoaO,
            Special::Task(0),
            Special::Task(15),
            Special::Res(0),
            Special::Res(7),
            Special::Source(0),
            Special::Source(3),
        ];
        let mut seen = std::collections::HashSet::new();
        for s in all {
            let id = l.special_id(s);
            assert!(id < 256, "{s:?} must live in the special partition");
            assert!(seen.insert(id), "{s:?} collides");
            assert_eq!(Special::from_offset(id), Some(s));
        }
    }

    #[test]
    fn config_round_trips_bit_exactly() {
        let l = build_layout(&VocabConfig::desk()).unwrap();
        let s = l.to_config_string();
        let l2 = VocabLayout::from_config_string(&s).unwrap();
        assert_eq!(l, l2);
        assert_eq!(l.fingerprint(), l2.fingerprint());
    }

    #[test]
    fn fingerprint_tracks_every_count() {
        let base = build_layout(&VocabConfig::desk()).unwrap().fingerprint();
        let variants = [
            VocabConfig {
                special_count: 512,
                ..VocabConfig::desk()
            },
            VocabConfig {
                visual_count: 256,
                factor_base: 16,
                ..VocabConfig::desk()
            },
            VocabConfig {
                audio_codes_per_level: 512,
                ..VocabConfig::desk()
            },
            VocabConfig {
                text_vocab_count: 2048,
                ..VocabConfig::desk()
            },
        ];
        for v in variants {
            assert_ne!(build_layout(&v).unwrap().fingerprint(), base);
        }
    }
}
