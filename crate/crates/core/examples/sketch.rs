//! Draw a coarse dynamics/tempo curve and let the model fill in the detail.
//! Writes a MIDI file, the curves as CSV, and an SVG plot.
//!
//! `cargo run --release --example sketch -- [--ckpt last.ckpt]`

mod common;

use std::path::PathBuf;

use pianoplan::notedata::midi::write_midi;
use pianoplan::plot::{render_svg, CurveTable};
use pianoplan::render::{parse_curves, sketch, ScoreContext};
use pianoplan::seqcvae::seeded_rng;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = args.iter().position(|a| a == "--ckpt").map(|i| PathBuf::from(&args[i + 1]));
    let (world, ds) = common::small_world(40, 2)?;
    let model = common::model_or_quick_train(ckpt.as_deref(), &ds, 3)?;

    // crescendo to the middle, then fade; steady slowing throughout
    let curves = parse_curves(
        "attr,position,value\nvel,0,-0.6\nvel,0.5,0.7\nvel,1,-0.4\ntempo,0,-0.2\ntempo,1,0.5\n".as_bytes(),
    )?;
    let piece = &world.pieces[0];
    let ctx = ScoreContext::new(&piece.id, piece.score.clone(), model.config().arch)?;
    let out = sketch(&model, &ctx, &curves, &mut seeded_rng(0))?;

    write_midi("sketch.mid", &ctx.perform(&out.x)?, &piece.score)?;
    let mut table = CurveTable::new("position", ctx.step_positions());
    table.push_attrs("sketch", &out.alpha);
    let chordwise = ctx.chordwise(&out.x)?;
    let per_step = if model.config().arch.uses_chords() { chordwise } else { out.x.clone() };
    table.push_attrs("output", &per_step);
    table.write_csv(std::fs::File::create("sketch.csv")?)?;
    std::fs::write("sketch.svg", render_svg(&table)?)?;
    println!("wrote sketch.mid, sketch.csv, sketch.svg ({} steps)", ctx.steps());
    Ok(())
}
