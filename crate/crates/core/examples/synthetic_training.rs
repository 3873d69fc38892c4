//! Train on a synthetic world and evaluate on its held-out pieces, printing
//! per-epoch loss terms.
//!
//! `cargo run --release --example synthetic_training -- [pieces] [epochs] [hierarchical|notewise|cvae] [zero]`
//!
//! `zero` switches all four regularizers off (the baseline for the
//! disentanglement errors). Set `SAVE_CKPT=path` to keep the model.

use std::time::Instant;

use pianoplan::dataset::build_dataset;
use pianoplan::metrics::{evaluate, EvalConfig};
use pianoplan::seqcvae::Arch;
use pianoplan::synthworld::{generate_world, WorldSpec};
use pianoplan::trainer::{prepare_items, Lambdas, LogRecord, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let pieces = args.first().map_or(Ok(200), |s| s.parse())?;
    let epochs = args.get(1).map_or(Ok(30), |s| s.parse())?;
    let arch = match args.get(2).map(String::as_str) {
        Some("notewise") => Arch::Notewise,
        Some("cvae") => Arch::Cvae,
        _ => Arch::Hierarchical,
    };
    let zero = args.get(3).is_some_and(|s| s == "zero");

    let world = generate_world(&WorldSpec { pieces, seed: 0, noise: 0.02, ..WorldSpec::default() })?;
    let (ds, _) = build_dataset(&world.pieces, 0.2)?;
    let mut cfg = TrainConfig { epochs, arch, ..TrainConfig::desk() };
    if zero {
        cfg.lambda = Lambdas::zero();
    }
    let train = prepare_items(&ds.train, arch, cfg.degree)?;
    let test = prepare_items(&ds.test, arch, cfg.degree)?;
    println!("{} train / {} test excerpts", train.len(), test.len());

    let t0 = Instant::now();
    let mut trainer = Trainer::new(cfg)?;
    println!("{} parameters", trainer.model().param_count());
    for epoch in 0..epochs {
        let log = trainer.run_epoch(&train, |_| {})?;
        let mean = |f: fn(&LogRecord) -> f64| log.iter().map(f).sum::<f64>() / log.len() as f64;
        println!(
            "epoch {epoch:>3}  total {:.4}  recon {:.4}  kl_pln {:.3}  kl_str {:.3}  pln {:.5}  str {:.4}  fac {:.4}  reg {:.4}  [{:.0}s]",
            mean(|r| r.loss.total),
            mean(|r| r.loss.recon_note + r.loss.recon_chord),
            mean(|r| r.loss.kl_pln),
            mean(|r| r.loss.kl_str),
            mean(|r| r.loss.l_pln),
            mean(|r| r.loss.l_str),
            mean(|r| r.loss.l_fac),
            mean(|r| r.loss.l_reg),
            t0.elapsed().as_secs_f64()
        );
    }
    if let Ok(path) = std::env::var("SAVE_CKPT") {
        trainer.state.save(path)?;
    }
    let t1 = Instant::now();
    let report = evaluate(trainer.model(), &test, EvalConfig { repeats: 5, n_samples: 10, seed: 0 });
    println!("{}", report.to_table());
    println!("train {:.0}s, eval {:.0}s", t1.duration_since(t0).as_secs_f64(), t1.elapsed().as_secs_f64());
    Ok(())
}
