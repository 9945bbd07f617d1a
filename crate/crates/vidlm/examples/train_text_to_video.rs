//! Train a compact text-to-video model end to end on the procedural
//! moving-shapes corpus, then score it: Frechet feature distance against
//! the reference clips at three snapshots, and caption fidelity (does the
//! generated motion match the prompt?) on held-out captions.
//!
//!     cargo run --release --example train_text_to_video -- \
//!         [steps] [clips] [width] [depth] [guidance] [temperature] [top_k]
//!
//! Defaults are sized for roughly an hour on one laptop core.

use std::time::Instant;

use vidlm::codec::{
    train_audio_codec, train_video_codec, AudioCodecConfig, CodecConfig, KMeansOpts, VideoClip,
};
use vidlm::eval::{frechet_distance, motion_fidelity, FeatureProjector, FrechetStats, FEATURE_DIM};
use vidlm::lm::{LanguageModel, ModelConfig, SamplerConfig};
use vidlm::pipeline::{generate, GenerationRequest, ModelBundle, StageInput};
use vidlm::scheduler::Curriculum;
use vidlm::sequence::TaskKind;
use vidlm::synth::{make_dataset, Split, SynthClip, SynthConfig};
use vidlm::train::{build_training_set, ClipView, TrainOpts, Trainer};
use vidlm::vocab::{build_layout, VocabConfig};
use vidlm::Result;

fn arg<T: std::str::FromStr>(n: usize, default: T) -> T {
    std::env::args()
        .nth(n)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn t2v_request(prompt: &str, sampler: &SamplerConfig, synth: &SynthConfig) -> GenerationRequest {
    GenerationRequest {
        task: "t2v".to_string(),
        prompt: Some(prompt.to_string()),
        negative_prompt: None,
        prompt_rewrite: None,
        frames: synth.frames,
        height: synth.height,
        width: synth.width,
        input: None,
        sampler: sampler.clone(),
        use_sr: false,
        sr_guidance_text: None,
        sr_guidance_lr: None,
        res_tag: None,
        source_tag: None,
        chain: Vec::new(),
    }
}

fn generate_batch(
    bundle: &ModelBundle,
    prompts: &[&str],
    sampler: &SamplerConfig,
    synth: &SynthConfig,
    seed_base: u64,
) -> Result<Vec<(String, VideoClip)>> {
    let mut out = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let req = t2v_request(
            prompt,
            &SamplerConfig { seed: seed_base + i as u64, ..sampler.clone() },
            synth,
        );
        let clip = generate(bundle, &req, &StageInput::default())?;
        out.push((prompt.to_string(), clip.video.expect("t2v emits video")));
    }
    Ok(out)
}

fn gen_stats(
    projector: &FeatureProjector,
    clips: &[(String, VideoClip)],
) -> Result<FrechetStats> {
    let mut stats = FrechetStats::new(FEATURE_DIM);
    for (_, clip) in clips {
        stats.push(&projector.features(clip)?)?;
    }
    Ok(stats)
}

fn main() -> Result<()> {
    let steps: usize = arg(1, 9000);
    let n_clips: usize = arg(2, 384);
    let width: usize = arg(3, 24);
    let depth: usize = arg(4, 2);
    let guidance: f64 = arg(5, 2.0);
    let temperature: f64 = arg(6, 0.7);
    let top_k: usize = arg(7, 32);

    let t0 = Instant::now();
    let layout = build_layout(&VocabConfig::compact())?;
    let synth = SynthConfig::desk();
    println!(
        "corpus: {n_clips} clips of {}x{}x{}, vocab {} ids",
        synth.frames,
        synth.height,
        synth.width,
        layout.total()
    );
    let clips = make_dataset(&synth, n_clips, 17)?;

    let videos: Vec<VideoClip> = clips.iter().map(|c| c.video.clone()).collect();
    let waves: Vec<Vec<f64>> = clips.iter().map(|c| c.audio.clone()).collect();
    let vc = train_video_codec(
        &CodecConfig { code_count: 1024, ..CodecConfig::desk() },
        &videos,
        &KMeansOpts { iterations: 4, max_samples: 8000 },
        3,
    )?;
    let ac = train_audio_codec(
        &AudioCodecConfig { code_count: 256, ..AudioCodecConfig::desk() },
        &waves,
        &KMeansOpts { iterations: 4, max_samples: 8000 },
        5,
    )?;
    println!("codecs trained at {:.0?}", t0.elapsed());

    let set = build_training_set(
        clips.iter().map(ClipView::from),
        &[TaskKind::TextToImage, TaskKind::TextToVideo],
        &layout,
        &vc,
        &ac,
    )?;
    println!(
        "training set: {} examples in {} groups at {:.0?}",
        set.len(),
        set.groups.len(),
        t0.elapsed()
    );

    let model = LanguageModel::new(
        ModelConfig {
            width,
            depth,
            heads: 4,
            ffn_mult: 4,
            max_seq_len: 96,
            cond_dropout_rate: 0.1,
            text_embed_dim: 16,
            rotary_base: 10_000.0,
        },
        layout,
        7,
    )?;
    println!("model: {} parameters", model.param_count());

    let mut trainer = Trainer::new(
        model,
        set,
        Curriculum::two_stage(steps),
        TrainOpts { batch_size: 4, lr: 3e-3, seed: 11 },
    )?;

    let projector = FeatureProjector::new(99);
    let mut reference = FrechetStats::new(FEATURE_DIM);
    for clip in &clips {
        reference.push(&projector.features(&clip.video)?)?;
    }
    let held: Vec<&SynthClip> = clips.iter().filter(|c| c.split == Split::Held).collect();
    let held_captions: Vec<&str> = held.iter().map(|c| c.caption.as_str()).collect();
    println!("held-out clips: {}", held.len());

    let sampler = SamplerConfig { temperature, top_k, guidance, seed: 0 };
    let snap_at = [steps / 8, steps / 2, steps];
    let probe_prompts: Vec<&str> =
        (0..96).map(|i| held_captions[i % held_captions.len()]).collect();

    let mut distances = Vec::new();
    let mut window = Vec::new();
    while !trainer.is_done() {
        let entry = trainer.step()?;
        window.push(entry.loss);
        let step_now = trainer.step_index();
        if step_now % 250 == 0 || step_now == steps {
            let avg: f64 = window.iter().sum::<f64>() / window.len() as f64;
            println!(
                "step {step_now}/{steps} phase {} avg-loss {avg:.4} ({:.0?})",
                entry.phase,
                t0.elapsed()
            );
            window.clear();
        }
        if snap_at.contains(&step_now) {
            let bundle = ModelBundle {
                lm: trainer.model().clone(),
                video_codec: vc.clone(),
                audio_codec: ac.clone(),
                sr: None,
            };
            let gen = generate_batch(&bundle, &probe_prompts, &sampler, &synth, 10_000)?;
            let stats = gen_stats(&projector, &gen)?;
            let d = frechet_distance(&reference, &stats)?;
            let mut ok = 0;
            for (caption, clip) in &gen {
                if motion_fidelity(clip, caption)? {
                    ok += 1;
                }
            }
            println!(
                "snapshot step {step_now}: frechet {d:.4} probe-fidelity {ok}/{} ({:.0?})",
                gen.len(),
                t0.elapsed()
            );
            distances.push(d);
        }
    }

    println!(
        "frechet trajectory: {:?} (monotone decrease: {})",
        distances,
        distances.windows(2).all(|w| w[1] < w[0])
    );

    let (model, _) = trainer.into_parts();
    let bundle = ModelBundle { lm: model, video_codec: vc, audio_codec: ac, sr: None };
    let fidelity_prompts: Vec<&str> =
        (0..200).map(|i| held_captions[i % held_captions.len()]).collect();
    let gen = generate_batch(&bundle, &fidelity_prompts, &sampler, &synth, 50_000)?;
    let mut matches = 0;
    for (caption, clip) in &gen {
        if motion_fidelity(clip, caption)? {
            matches += 1;
        }
    }
    let rate = matches as f64 / gen.len() as f64;
    println!(
        "motion fidelity: {matches}/{} = {:.1}% (total {:.0?})",
        gen.len(),
        rate * 100.0,
        t0.elapsed()
    );

    // Sweep decode settings on a smaller prompt set to pick the best pair.
    for g in [1.0, 1.15, 1.3, 1.5] {
        for t in [0.4, 0.6, 0.8] {
            let s = SamplerConfig { temperature: t, top_k, guidance: g, seed: 0 };
            let gen = generate_batch(&bundle, &probe_prompts, &s, &synth, 70_000)?;
            let mut ok = 0;
            for (caption, clip) in &gen {
                if motion_fidelity(clip, caption)? {
                    ok += 1;
                }
            }
            println!("sweep guidance {g} temperature {t}: {ok}/{}", gen.len());
        }
    }
    println!("total {:.0?}", t0.elapsed());
    Ok(())
}
