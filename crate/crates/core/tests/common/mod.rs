#![allow(dead_code)]

pub mod oracles;

use pianoplan::dataset::{build_dataset, piece_features};
use pianoplan::notedata::{Excerpt, ScoreFeatures};
use pianoplan::hier::n2c;
use pianoplan::seqcvae::{Arch, ModelConfig, ParamGroup, ScaleProfile, SeqCvae};
use pianoplan::synthworld::{generate_world, WorldSpec};
use pianoplan::trainer::{batch_objective, Lambdas, TrainConfig, TrainItem};
use pianoplan::Matrix;

/// Desk-profile shape small enough for exhaustive finite differences.
pub fn tiny_model(arch: Arch) -> ModelConfig {
    ModelConfig {
        d_str: 3,
        hidden: 4,
        perf_embed: 4,
        score_embed: 8,
        disc_hidden: 3,
        profile: ScaleProfile::Desk,
        arch,
        ..ModelConfig::desk()
    }
}

pub fn tiny_train_config(arch: Arch, lambda: Lambdas) -> TrainConfig {
    TrainConfig { model: Some(tiny_model(arch)), arch, lambda, seed: 3, ..TrainConfig::desk() }
}

/// The first `chords` chords of synthetic pieces as excerpts.
pub fn short_excerpts(pieces: usize, chords: usize, seed: u64) -> Vec<Excerpt> {
    let w = generate_world(&WorldSpec { pieces, seed, noise: 0.05, ..WorldSpec::default() }).unwrap();
    w.pieces
        .iter()
        .map(|p| {
            let f = piece_features(p).unwrap();
            let (partition, notes) = f.partition.window(0, chords);
            let mut x = Matrix::zeros(notes.len(), 3);
            for (r, i) in notes.clone().enumerate() {
                x.row_mut(r).copy_from_slice(f.x.row(i));
            }
            let y = ScoreFeatures { y: f.y.y[notes].to_vec() };
            let k = n2c(&x, &partition).unwrap();
            Excerpt { piece_id: f.id.clone(), start_chord: 0, x, y, partition, k }
        })
        .collect()
}

pub fn items(excerpts: &[Excerpt], arch: Arch) -> Vec<TrainItem> {
    excerpts.iter().map(|e| TrainItem::new(e, arch, 4).unwrap()).collect()
}

pub fn synthetic_split(pieces: usize, seed: u64, noise: f64) -> (Vec<Excerpt>, Vec<Excerpt>) {
    let w = generate_world(&WorldSpec { pieces, seed, noise, ..WorldSpec::default() }).unwrap();
    let (ds, _) = build_dataset(&w.pieces, 0.2).unwrap();
    (ds.train, ds.test)
}

// ---- finite-difference gradient checks ----

const SEEDS: [u64; 2] = [11, 12];
const GRAD_FLOOR: f64 = 1e-4;

pub fn objective(model: &SeqCvae, it: &[TrainItem], cfg: &TrainConfig, grads: bool) -> (f64, Option<Vec<Matrix>>) {
    let refs: Vec<&TrainItem> = it.iter().collect();
    let (l, g) = batch_objective(model, &refs, &SEEDS[..it.len()], 5, cfg, grads).unwrap();
    (l.total, g)
}

/// The factorization term holds the posterior sample fixed, so its true
/// derivative with respect to encoder parameters is deliberately dropped.
/// Encoder and discriminator groups of a total are therefore compared with
/// the objective without that term, and the generator group with the full
/// objective.
pub fn total_errors(cfg: &TrainConfig, it: &[TrainItem]) -> Vec<(ParamGroup, f64)> {
    let no_fac = TrainConfig { lambda: Lambdas { fac: 0.0, ..cfg.lambda }, ..cfg.clone() };
    let mut e = group_errors_for(&no_fac, None, it, &[ParamGroup::Encoder, ParamGroup::Discriminator]);
    e.extend(group_errors_for(cfg, None, it, &[ParamGroup::Generator]));
    e
}

/// Norm-wise relative error per parameter group between the analytic
/// gradient of `cfg`'s objective minus `base`'s and central differences.
pub fn group_errors(cfg: &TrainConfig, base: Option<&TrainConfig>, it: &[TrainItem]) -> Vec<(ParamGroup, f64)> {
    group_errors_for(cfg, base, it, &[ParamGroup::Encoder, ParamGroup::Generator, ParamGroup::Discriminator])
}

pub fn group_errors_for(
    cfg: &TrainConfig,
    base: Option<&TrainConfig>,
    it: &[TrainItem],
    groups: &[ParamGroup],
) -> Vec<(ParamGroup, f64)> {
    let mut model = SeqCvae::new(cfg.model_config()).unwrap();
    assert!(model.param_count() <= 2000, "{} parameters", model.param_count());
    let diff = |m: &SeqCvae, grads: bool| {
        let (a, ga) = objective(m, it, cfg, grads);
        match base {
            Some(b) => {
                let (c, gc) = objective(m, it, b, grads);
                let g = ga.zip(gc).map(|(ga, gc)| {
                    ga.into_iter().zip(gc).map(|(x, y)| x.zip_map(&y, |p, q| p - q)).collect::<Vec<_>>()
                });
                (a - c, g)
            }
            None => (a, ga),
        }
    };
    let analytic = diff(&model, true).1.unwrap();
    let h: f64 = std::env::var("FD_STEP").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-5);
    let mut acc: Vec<(ParamGroup, f64, f64, f64)> = Vec::new();
    for id in 0..model.params().len() {
        let group = model.params().entries()[id].group;
        if !groups.contains(&group) {
            continue;
        }
        for j in 0..model.params().value(id).len() {
            let orig = model.params().value(id).data()[j];
            model.params_mut().value_mut(id).data_mut()[j] = orig + h;
            let up = diff(&model, false).0;
            model.params_mut().value_mut(id).data_mut()[j] = orig - h;
            let down = diff(&model, false).0;
            model.params_mut().value_mut(id).data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[id].data()[j];
            let slot = match acc.iter_mut().find(|a| a.0 == group) {
                Some(s) => s,
                None => {
                    acc.push((group, 0.0, 0.0, 0.0));
                    acc.last_mut().unwrap()
                }
            };
            slot.1 += (an - fd).powi(2);
            slot.2 += an * an;
            slot.3 += fd * fd;
        }
    }
    acc.into_iter()
        .map(|(g, d, a, f)| {
            // the floor keeps cancellation noise of identically-zero
            // gradients from reading as a relative error of 1
            (g, d.sqrt() / a.sqrt().max(f.sqrt()).max(GRAD_FLOOR))
        })
        .collect()
}
