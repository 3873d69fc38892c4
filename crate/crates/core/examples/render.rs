//! Plain and sampled renderings of a score, written as MIDI.
//!
//! `cargo run --release --example render -- [--ckpt last.ckpt] [out-dir]`

mod common;

use std::path::PathBuf;

use pianoplan::notedata::midi::{read_midi, write_midi};
use pianoplan::notedata::plain_performance;
use pianoplan::render::{render_sample, ScoreContext};
use pianoplan::seqcvae::seeded_rng;

fn main() -> anyhow::Result<()> {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = args.iter().position(|a| a == "--ckpt").map(|i| PathBuf::from(args.remove(i + 1)));
    args.retain(|a| a != "--ckpt");
    let out = PathBuf::from(args.first().map_or("render-out", String::as_str));
    std::fs::create_dir_all(&out)?;

    let (world, ds) = common::small_world(40, 1)?;
    let piece = &world.pieces[0];

    // no model: reference velocity, notated durations at 120 bpm
    let plain = out.join("plain.mid");
    write_midi(&plain, &plain_performance(&piece.score), &piece.score)?;
    let m = read_midi(&plain)?;
    println!("{}: {} notes, velocity {}, tempo {:?}", plain.display(), m.notes.len(), m.notes[0].velocity, m.tempos);

    let model = common::model_or_quick_train(ckpt.as_deref(), &ds, 3)?;
    let ctx = ScoreContext::new(&piece.id, piece.score.clone(), model.config().arch)?;
    for seed in 0..3 {
        let x = render_sample(&model, &ctx, &mut seeded_rng(seed))?;
        let path = out.join(format!("sample{seed}.mid"));
        write_midi(&path, &ctx.perform(&x)?, &piece.score)?;
        let vel: Vec<u8> = read_midi(&path)?.notes.iter().take(8).map(|n| n.velocity).collect();
        println!("{}: first velocities {vel:?}", path.display());
    }
    Ok(())
}
