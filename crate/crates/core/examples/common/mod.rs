//! Shared by the examples that need a trained model.

use std::path::Path;

use pianoplan::checkpoint::Checkpoint;
use pianoplan::dataset::{build_dataset, Dataset};
use pianoplan::seqcvae::SeqCvae;
use pianoplan::synthworld::{generate_world, World, WorldSpec};
use pianoplan::trainer::{prepare_items, TrainConfig, Trainer};

pub fn small_world(pieces: usize, seed: u64) -> anyhow::Result<(World, Dataset)> {
    let world = generate_world(&WorldSpec { pieces, seed, noise: 0.02, ..WorldSpec::default() })?;
    let (ds, _) = build_dataset(&world.pieces, 0.2)?;
    Ok((world, ds))
}

/// Loads `ckpt` when given; otherwise trains the desk model briefly on
/// `ds` (seconds, not a converged model).
pub fn model_or_quick_train(ckpt: Option<&Path>, ds: &Dataset, epochs: usize) -> anyhow::Result<SeqCvae> {
    if let Some(p) = ckpt {
        return Ok(Checkpoint::load(p)?.model);
    }
    let cfg = TrainConfig { epochs, ..TrainConfig::desk() };
    let items = prepare_items(&ds.train, cfg.arch, cfg.degree)?;
    eprintln!("training {epochs} epochs on {} excerpts (pass --ckpt to skip)", items.len());
    let mut t = Trainer::new(cfg)?;
    t.fit(&items, None)?;
    Ok(t.model().clone())
}
