//! Walk the shared token id space: where each partition lives, how visual
//! ids factor into smaller axes, and how many tokens the standard clip
//! shapes cost.
//!
//!     cargo run --release --example vocabulary

use vidlm::codec::{token_count, AudioCodecConfig, CodecConfig};
use vidlm::vocab::{build_layout, Special, VocabConfig};
use vidlm::Result;

fn main() -> Result<()> {
    for (name, cfg) in [
        ("compact", VocabConfig::compact()),
        ("desk", VocabConfig::desk()),
        ("full_scale", VocabConfig::full_scale()),
    ] {
        let layout = build_layout(&cfg)?;
        println!(
            "{name:10}: {} ids total (special {}, visual {}, audio {}x{}, text {})",
            layout.total(),
            cfg.special_count,
            cfg.visual_count,
            cfg.audio_levels,
            cfg.audio_codes_per_level,
            cfg.text_vocab_count,
        );
    }

    // Every id classifies back to exactly one partition.
    let layout = build_layout(&VocabConfig::desk())?;
    println!("\ndesk layout fingerprint: {:016x}", layout.fingerprint());
    for (what, id) in [
        ("bos", layout.special_id(Special::Bos)),
        ("visual code 0", layout.visual_id(0)?),
        ("audio level 2 code 5", layout.audio_id(2, 5)?),
        ("text word 3", layout.text_id(3)?),
    ] {
        println!("  {what:20} -> id {:5} ({:?})", id, layout.classify(id)?);
    }

    // Visual ids factor into base-64 digits so output heads can stay small.
    // The mapping is a bijection: every id round-trips.
    let base = layout.config().factor_base;
    let k = layout.config().factor_k;
    let sample = layout.visual_id(2507)?;
    let factors = layout.factorize(sample)?;
    println!("\nvisual id {sample} = digits {factors:?} in base {base} ({k} axes)");
    assert_eq!(layout.defactorize(&factors)?, sample);
    let mut seen = std::collections::HashSet::new();
    for code in 0..layout.config().visual_count {
        let f = layout.factorize(layout.visual_id(code)?)?;
        assert!(seen.insert(f.clone()), "factor collision at code {code}");
        assert!(f.iter().all(|&d| d < base));
    }
    println!("factorization is a bijection over all {} visual codes", seen.len());

    // Token budgets at the production geometry (4x temporal, 8x spatial).
    let vc = CodecConfig::full_scale();
    println!("\ntoken cost at {}x temporal / {}x spatial compression:", vc.temporal_factor, vc.spatial_factor);
    for (t, h, w) in [(17, 128, 128), (17, 224, 128), (1, 128, 128)] {
        println!("  {t:2} frames of {h}x{w}: {} tokens", token_count(&vc, t, h, w)?);
    }
    let ac = AudioCodecConfig::full_scale();
    let samples = (2.125 * ac.sample_rate as f64) as usize;
    println!(
        "  2.125 s of audio: {} frames x {} levels = {} tokens",
        ac.frame_count(samples),
        ac.levels,
        ac.frame_count(samples) * ac.levels,
    );

    // A layout serializes to a config string and reloads identically, so
    // checkpoints can verify they are decoded with the vocabulary they were
    // trained with.
    let s = layout.to_config_string();
    let reloaded = vidlm::vocab::VocabLayout::from_config_string(&s)?;
    assert_eq!(reloaded.fingerprint(), layout.fingerprint());
    println!("\nlayout round-trips through its config string");
    Ok(())
}
