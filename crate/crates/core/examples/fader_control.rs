//! Sliding a planning fader: one excerpt rendered at rising fader values,
//! then the consistency / restrictiveness / linearity scores of the model
//! next to those of an ideal fader.
//!
//! `cargo run --release --example fader_control -- [--ckpt last.ckpt]`

mod common;

use std::path::PathBuf;

use pianoplan::metrics::{controllability_suite, ControlConfig, PerfectFader};
use pianoplan::render::{control_sweep, ScoreContext, ATTR_NAMES};
use pianoplan::seqcvae::seeded_rng;
use pianoplan::trainer::prepare_items;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = args.iter().position(|a| a == "--ckpt").map(|i| PathBuf::from(&args[i + 1]));
    let (world, ds) = common::small_world(40, 4)?;
    let model = common::model_or_quick_train(ckpt.as_deref(), &ds, 3)?;

    let piece = &world.pieces[0];
    let ctx = ScoreContext::new(&piece.id, piece.score.clone(), model.config().arch)?;
    let x = pianoplan::dataset::piece_features(piece)?.x;
    for (attr, name) in ATTR_NAMES.iter().enumerate() {
        let sweep = control_sweep(&model, &ctx, &x, attr, 5, (None, None), &mut seeded_rng(0))?;
        let means: Vec<String> = sweep
            .iter()
            .map(|s| {
                let a = ctx.chordwise(&s.x).map(|k| k.col(attr).iter().sum::<f64>() / k.rows() as f64);
                format!("{:+.2}->{:+.3}", s.value, a.unwrap_or(f64::NAN))
            })
            .collect();
        println!("{name:<5} fader -> mean {name}: {}", means.join("  "));
    }

    let items = prepare_items(&ds.test, model.config().arch, model.config().degree)?;
    let cfg = ControlConfig { n_samples: 5, seed: 0 };
    let ours = controllability_suite(&model, &items, cfg);
    let ideal = controllability_suite(&PerfectFader, &items, cfg);
    println!("             C      R      L");
    println!("model    {:.3}  {:.3}  {:.3}", ours.mean[0], ours.mean[1], ours.mean[2]);
    println!("ideal    {:.3}  {:.3}  {:.3}", ideal.mean[0], ideal.mean[1], ideal.mean[2]);
    Ok(())
}
