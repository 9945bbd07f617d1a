//! Train the two toy tokenizers on a procedural dataset and poke at their
//! guarantees: exact shape arithmetic, lossy-but-faithful round trips, and
//! temporal causality of the video grid.
//!
//!     cargo run --release --example codecs

use vidlm::codec::{
    latent_shape, train_audio_codec, train_video_codec, AudioCodecConfig, CodecConfig,
    KMeansOpts, VideoClip,
};
use vidlm::eval::{audio_snr, psnr};
use vidlm::synth::{make_dataset, SynthConfig};
use vidlm::vocab::{build_layout, VocabConfig};
use vidlm::Result;

fn main() -> Result<()> {
    let layout = build_layout(&VocabConfig::desk())?;
    let synth = SynthConfig::desk();
    let clips = make_dataset(&synth, 48, 7)?;
    println!("dataset: {} clips of {}x{}x{} @ {} fps", clips.len(), synth.frames, synth.height, synth.width, synth.fps);

    let vc_cfg = CodecConfig::desk();
    let videos: Vec<VideoClip> = clips.iter().map(|c| c.video.clone()).collect();
    let opts = KMeansOpts { iterations: 6, max_samples: 8000 };
    let vc = train_video_codec(&vc_cfg, &videos, &opts, 3)?;
    println!("video codec fingerprint: {:016x}", vc.fingerprint());

    // Shape arithmetic is exact: 17 frames tile as 1 + 16/4 latent rows.
    let shape = latent_shape(&vc_cfg, synth.frames, synth.height, synth.width)?;
    println!("latent shape for the clip: {shape:?}");

    let sample = &clips[0];
    let grid = vc.tokenize_video(&sample.video, &layout)?;
    assert_eq!(grid.shape, shape);
    println!("\"{}\" tokenizes to {} ids, first row {:?}", sample.caption, grid.len(), &grid.tokens[..4]);

    let back = vc.detokenize_video(&grid, &layout)?;
    println!("round trip: {:.1} dB PSNR", psnr(&sample.video, &back)?);

    // Causality: rewriting the last temporal window of pixels can only move
    // the last latent row. Everything earlier is bit-identical.
    let mut corrupted = sample.video.frames.clone();
    let t = corrupted.dim().0;
    for f in t - vc_cfg.temporal_factor..t {
        corrupted.index_axis_mut(ndarray::Axis(0), f).fill(1.0);
    }
    let grid2 = vc.tokenize_video(&VideoClip::new(corrupted, synth.fps)?, &layout)?;
    let row = shape.1 * shape.2;
    assert_eq!(grid.tokens[..grid.len() - row], grid2.tokens[..grid2.len() - row]);
    println!("rewriting the last {} frames left the first {} latent rows untouched", vc_cfg.temporal_factor, shape.0 - 1);

    // A single frame tokenizes as an image: one latent row, same table.
    let image = vc.tokenize_image(&sample.video.first_frame(), &layout)?;
    println!("first frame alone: {:?} = {} tokens", image.shape, image.len());

    // The audio codec stacks residual quantizer levels: each level encodes
    // what the previous ones missed, so the reconstruction sharpens as
    // levels accumulate.
    let ac_cfg = AudioCodecConfig::desk();
    let waves: Vec<Vec<f64>> = clips.iter().map(|c| c.audio.clone()).collect();
    let ac = train_audio_codec(&ac_cfg, &waves, &opts, 5)?;
    let tokens = ac.tokenize_audio(&sample.audio, &layout)?;
    println!("\naudio: {} samples -> {} frames x {} levels", sample.audio.len(), tokens.frames, tokens.levels);
    let rebuilt = ac.detokenize_audio(&tokens, &layout)?;
    println!("round trip: {:.1} dB SNR", audio_snr(&sample.audio[..rebuilt.len()], &rebuilt)?);

    // Token ids land in disjoint vocabulary partitions per level, so a flat
    // sequence never confuses level-0 ids with level-3 ids.
    for level in 0..tokens.levels {
        let range = layout.audio_level_range(level as u32)?;
        let id = tokens.get(level, 0);
        assert!(range.contains(&id));
        println!("level {level} ids live in [{}, {})", range.start, range.end);
    }
    Ok(())
}
