//! Build the alternating-task training schedule and measure what it
//! actually draws: image-heavy warmup, video-heavy main phase, optional
//! high-quality finetune tail.
//!
//!     cargo run --release --example schedule

use vidlm::scheduler::{build_groups, phase_weights, Curriculum, GroupMember, Scheduler};
use vidlm::sequence::TaskKind;
use vidlm::Result;

fn member(task: TaskKind) -> GroupMember {
    let image = task == TaskKind::TextToImage;
    GroupMember {
        task,
        text_slots: if task == TaskKind::TextToImage || task == TaskKind::TextToVideo { 64 } else { 0 },
        visual_in: task.requires_video_in().then_some((3, 4, 4)),
        visual_out: Some(if image { (1, 4, 4) } else { (5, 4, 4) }),
        audio_in_frames: None,
        audio_out_frames: None,
        has_res: false,
        has_source: false,
    }
}

fn main() -> Result<()> {
    let members = vec![
        member(TaskKind::TextToImage),
        member(TaskKind::TextToVideo),
        member(TaskKind::FramePrediction),
    ];
    let groups = build_groups(&members, 4)?;
    println!("{} groups by exact sequence length:", groups.len());
    for g in &groups {
        println!("  len {:4} <- {}", g.seq_len, g.label());
    }

    // The two-stage curriculum: first quarter 90% image, rest 90% video.
    let total = 10_000;
    let cur = Curriculum::two_stage(total);
    for (i, p) in cur.phases.iter().enumerate() {
        let w = phase_weights(&groups, p)?;
        println!("phase {i} [{:5}, {:5}): image weight {:.2}, group weights {:?}", p.start, p.end, p.image_weight, w);
    }

    // Draw the whole schedule and count. Frequencies track the weights
    // closely because the draws are independent per step.
    let mut sched = Scheduler::new(groups.clone(), cur, 11)?;
    let mut counts = vec![[0usize; 2]; groups.len()];
    while !sched.is_done() {
        let s = sched.next_group()?;
        let phase = usize::from(s.step >= total / 4);
        counts[s.group][phase] += 1;
    }
    println!("\nobserved draws over {total} steps:");
    for (g, c) in groups.iter().zip(&counts) {
        let warm = c[0] as f64 / (total / 4) as f64;
        let main = c[1] as f64 / (total - total / 4) as f64;
        println!("  {:28} warmup {:.3}  main {:.3}", g.label(), warm, main);
    }

    // Replaying the same seed reproduces the same draw sequence.
    let cur = Curriculum::two_stage(total);
    let mut replay = Scheduler::new(groups.clone(), cur, 11)?;
    let first: Vec<usize> = (0..20).map(|_| replay.next_group().unwrap().group).collect();
    let cur = Curriculum::two_stage(total);
    let mut again = Scheduler::new(groups.clone(), cur, 11)?;
    let second: Vec<usize> = (0..20).map(|_| again.next_group().unwrap().group).collect();
    assert_eq!(first, second);
    println!("\nschedule replays exactly under the same seed: {first:?}");

    // A finetune tail restricts draws to the high-quality subset without
    // changing the video-heavy weights.
    let tuned = Curriculum::with_finetune(total, 8_000)?;
    for (i, p) in tuned.phases.iter().enumerate() {
        println!("finetune curriculum phase {i}: [{:5}, {:5}) hq_only={}", p.start, p.end, p.hq_only);
    }
    Ok(())
}
