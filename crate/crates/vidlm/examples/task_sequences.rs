//! Lay out the token sequence for every task and inspect one end to end:
//! framing specials, the prefix/output boundary, and the loss mask that
//! keeps conditioning tokens out of the objective.
//!
//!     cargo run --release --example task_sequences

use vidlm::codec::{train_audio_codec, train_video_codec, AudioCodecConfig, CodecConfig, KMeansOpts, VideoClip};
use vidlm::sequence::{build_sequence, dump_sequence, enumerate_tasks, sequence_length, SequenceInputs, ShapeCounts, TaskKind};
use vidlm::synth::{make_dataset, tokenize_caption, SynthConfig};
use vidlm::vocab::{build_layout, VocabConfig};
use vidlm::Result;

fn main() -> Result<()> {
    // Lengths are pure shape arithmetic: a 5x4x4 latent clip, 53 audio
    // frames at 4 levels, 64 text slots.
    let counts = ShapeCounts {
        text_slots: 64,
        visual_in: 80,
        audio_in: 212,
        visual_out: 80,
        audio_out: 212,
        has_res: false,
        has_source: false,
    };
    println!("{:8} {:>5}  text  vis-in  aud-in  vis-out  aud-out", "task", "len");
    for spec in enumerate_tasks() {
        let flag = |b: bool| if b { "yes" } else { "." };
        println!(
            "{:8} {:>5}  {:4}  {:6}  {:6}  {:7}  {:7}",
            spec.kind.name(),
            sequence_length(&spec, &counts),
            flag(spec.uses_text),
            flag(spec.visual_in),
            flag(spec.audio_in),
            flag(spec.visual_out),
            flag(spec.audio_out),
        );
    }

    // Build a real text-to-video example and dump its head and tail.
    let layout = build_layout(&VocabConfig::desk())?;
    let synth = SynthConfig::desk();
    let clips = make_dataset(&synth, 16, 7)?;
    let opts = KMeansOpts { iterations: 4, max_samples: 4000 };
    let videos: Vec<VideoClip> = clips.iter().map(|c| c.video.clone()).collect();
    let vc = train_video_codec(&CodecConfig::desk(), &videos, &opts, 3)?;
    let waves: Vec<Vec<f64>> = clips.iter().map(|c| c.audio.clone()).collect();
    let ac = train_audio_codec(&AudioCodecConfig::desk(), &waves, &opts, 5)?;

    let clip = &clips[0];
    let grid = vc.tokenize_video(&clip.video, &layout)?;
    let text = tokenize_caption(&layout, &clip.caption)?;
    let seq = build_sequence(
        &layout,
        TaskKind::TextToVideo,
        &SequenceInputs {
            text: Some(&text),
            visual_out: Some(&grid),
            ..Default::default()
        },
    )?;
    println!(
        "\nt2v example for \"{}\": {} positions, prefix {}, {} loss positions",
        clip.caption,
        seq.len(),
        seq.prefix_len,
        seq.loss_positions().len(),
    );
    let dump = dump_sequence(&seq);
    let lines: Vec<&str> = dump.lines().collect();
    for l in &lines[..9] {
        println!("  {l}");
    }
    println!("  ...");
    for l in &lines[lines.len() - 3..] {
        println!("  {l}");
    }

    // Only output-segment positions carry loss; the prefix conditions but
    // never trains. The boundary also caps bidirectional attention.
    let loss = seq.loss_positions();
    assert!(loss.iter().all(|&i| i >= seq.prefix_len));
    assert_eq!(loss.len(), grid.len() + 2); // tokens + closer + <eos>
    println!("\nloss starts at position {} (first output token)", loss[0]);

    // Audio-output sequences interleave nothing: levels are stored
    // level-major so the id partitions stay contiguous.
    let audio = ac.tokenize_audio(&clip.audio, &layout)?;
    let av = build_sequence(
        &layout,
        TaskKind::VideoToAudio,
        &SequenceInputs {
            visual_in: Some(&grid),
            audio_out: Some(&audio),
            ..Default::default()
        },
    )?;
    println!(
        "v2a example: {} positions, prefix {}, audio block {} ids",
        av.len(),
        av.prefix_len,
        audio.len(),
    );
    Ok(())
}
