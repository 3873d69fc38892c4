//! Same data, same seed, one component switched off at a time.
//!
//! `cargo run --release --example ablations -- [pieces] [epochs]`

use pianoplan::dataset::build_dataset;
use pianoplan::metrics::{evaluate, EvalConfig};
use pianoplan::seqcvae::Arch;
use pianoplan::synthworld::{generate_world, WorldSpec};
use pianoplan::trainer::{prepare_items, Lambdas, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let pieces = args.first().map_or(Ok(60), |s| s.parse())?;
    let epochs = args.get(1).map_or(Ok(5), |s| s.parse())?;
    let world = generate_world(&WorldSpec { pieces, seed: 0, noise: 0.02, ..WorldSpec::default() })?;
    let (ds, _) = build_dataset(&world.pieces, 0.2)?;

    let base = TrainConfig { epochs, ..TrainConfig::desk() };
    let l = base.lambda;
    let variants = [
        ("full", base.clone()),
        ("notewise", TrainConfig { arch: Arch::Notewise, ..base.clone() }),
        ("cvae", TrainConfig { arch: Arch::Cvae, ..base.clone() }),
        ("no pln", TrainConfig { lambda: Lambdas { pln: 0.0, ..l }, ..base.clone() }),
        ("no str", TrainConfig { lambda: Lambdas { str_: 0.0, ..l }, ..base.clone() }),
        ("no fac", TrainConfig { lambda: Lambdas { fac: 0.0, ..l }, ..base.clone() }),
        ("no reg", TrainConfig { lambda: Lambdas { reg: 0.0, ..l }, ..base.clone() }),
        ("no regularizers", TrainConfig { lambda: Lambdas::zero(), ..base.clone() }),
        ("degree 1", TrainConfig { degree: 1, ..base.clone() }),
        ("degree 8", TrainConfig { degree: 8, ..base.clone() }),
    ];
    println!("{:<16} {:>8} {:>8} {:>9} {:>9} {:>6} {:>6} {:>6}", "variant", "R_recon", "R_pln", "MSE_p", "MSE_s", "C", "R", "L");
    for (name, cfg) in variants {
        let train = prepare_items(&ds.train, cfg.arch, cfg.degree)?;
        let test = prepare_items(&ds.test, cfg.arch, cfg.degree)?;
        let mut t = Trainer::new(cfg)?;
        t.fit(&train, None)?;
        let r = evaluate(t.model(), &test, EvalConfig { repeats: 3, n_samples: 5, seed: 0 });
        let c = r.controllability.mean;
        println!(
            "{name:<16} {:>8.3} {:>8.3} {:>9.4} {:>9.4} {:>6.3} {:>6.3} {:>6.3}",
            r.pearson.r_recon.mean, r.pearson.r_pln.mean, r.disentanglement.mse_p.mean, r.disentanglement.mse_s.mean, c[0], c[1], c[2]
        );
    }
    Ok(())
}
