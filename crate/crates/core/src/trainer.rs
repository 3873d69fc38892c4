//! Objective assembly, Adam, and the deterministic training loop.
//!
//! Each excerpt gets its own tape; the batch loss is the mean of the
//! per-excerpt objectives plus the pooled monotonicity term, whose gradient
//! is computed in closed form and seeded into every tape at the sampled
//! planning latents. Excerpts keep their own lengths, so no padding is
//! needed. Gradients are summed in batch order, which keeps runs
//! bit-reproducible.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::notedata::{ChordPartition, Excerpt, NUM_ATTRS};
use crate::regularizers::{self, FacNoise, Signals, REG_MAX_ITEMS};
use crate::seqcvae::{
    seeded_rng, standard_normal, Arch, Graph, ModelConfig, ModelInput, ParamStore, PrevNote, ScaleProfile, SeqCvae,
};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lambdas {
    pub pln: f64,
    #[serde(rename = "str")]
    pub str_: f64,
    pub fac: f64,
    pub reg: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self { pln: 1000.0, str_: 100.0, fac: 1.0, reg: 10.0 }
    }
}

impl Lambdas {
    /// Weights for the small desk-profile model, whose short runs need a
    /// stronger pull from the planning and fader terms.
    pub fn desk() -> Self {
        Self { pln: 10000.0, reg: 300.0, ..Self::default() }
    }

    pub fn zero() -> Self {
        Self { pln: 0.0, str_: 0.0, fac: 0.0, reg: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: Lambdas,
    pub lr: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub profile: ScaleProfile,
    pub arch: Arch,
    /// Planning-signal polynomial degree.
    pub degree: usize,
    pub reg_items: usize,
    /// Abort when the total loss exceeds this.
    pub divergence: f64,
    /// Full model shape; defaults to the profile preset.
    pub model: Option<ModelConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            lambda: Lambdas::default(),
            lr: 1e-5,
            lr_decay: 0.95,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            profile: ScaleProfile::Paper,
            arch: Arch::Hierarchical,
            degree: 4,
            reg_items: REG_MAX_ITEMS,
            divergence: 1e6,
            model: None,
        }
    }

    pub fn desk() -> Self {
        Self { lambda: Lambdas::desk(), lr: 1e-3, epochs: 30, batch_size: 16, profile: ScaleProfile::Desk, ..Self::paper() }
    }

    pub fn preset(profile: ScaleProfile) -> Self {
        match profile {
            ScaleProfile::Paper => Self::paper(),
            ScaleProfile::Desk => Self::desk(),
        }
    }

    /// Parses a config file; keys it leaves out come from the preset of the
    /// profile it names (paper when absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let file: toml::Table = toml::from_str(text).map_err(|e| bad(&e))?;
        let profile = match file.get("profile") {
            Some(p) => p.clone().try_into().map_err(|e| bad(&e))?,
            None => ScaleProfile::Paper,
        };
        let mut merged = toml::Table::try_from(Self::preset(profile)).map_err(|e| bad(&e))?;
        for (key, value) in file {
            match (merged.get_mut(&key), value) {
                (Some(toml::Value::Table(base)), toml::Value::Table(over)) if key == "lambda" => base.extend(over),
                (_, value) => {
                    merged.insert(key, value);
                }
            }
        }
        let cfg: Self = merged.try_into().map_err(|e| bad(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.lambda;
        if [l.pln, l.str_, l.fac, l.reg].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must lie in (0, 1]".into()));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        self.model_config().validate()
    }

    /// Model shape with arch, degree and seed taken from this config.
    pub fn model_config(&self) -> ModelConfig {
        let base = self.model.clone().unwrap_or_else(|| match self.profile {
            ScaleProfile::Paper => ModelConfig::paper(),
            ScaleProfile::Desk => ModelConfig::desk(),
        });
        ModelConfig { arch: self.arch, degree: self.degree, seed: self.seed, ..base }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self.lr, self.lr_decay, epoch)
    }
}

pub fn lr_at(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// SplitMix64 chaining of seed components.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut s: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        s ^= p;
        s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        s = z ^ (z >> 31);
    }
    s
}

/// An excerpt in the form the chosen architecture consumes: chordwise for
/// the hierarchical model, one step per note otherwise.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub piece_id: String,
    pub start_chord: usize,
    pub x: Matrix,
    /// Per-timestep targets: `n2c(x)`, or `x` itself without hierarchy.
    pub k: Matrix,
    pub input: ModelInput,
    pub signals: Signals,
}

impl TrainItem {
    pub fn new(ex: &Excerpt, arch: Arch, degree: usize) -> Result<Self> {
        let (partition, k) = if arch.uses_chords() {
            (ex.partition.clone(), ex.k.clone())
        } else {
            (ChordPartition::singletons(ex.num_notes()), ex.x.clone())
        };
        let signals = Signals::compute(&k, degree);
        Ok(Self {
            piece_id: ex.piece_id.clone(),
            start_chord: ex.start_chord,
            x: ex.x.clone(),
            k,
            input: ModelInput::new(&ex.y, partition)?,
            signals,
        })
    }

    pub fn steps(&self) -> usize {
        self.k.rows()
    }
}

pub fn prepare_items(excerpts: &[Excerpt], arch: Arch, degree: usize) -> Result<Vec<TrainItem>> {
    excerpts.iter().map(|e| TrainItem::new(e, arch, degree)).collect()
}

/// Per-term values of the objective for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_note: f64,
    pub recon_chord: f64,
    pub kl_pln: f64,
    pub kl_str: f64,
    pub l_pln: f64,
    pub l_str: f64,
    pub l_fac: f64,
    pub l_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn vae(&self) -> f64 {
        self.recon_note + self.recon_chord + self.kl_pln + self.kl_str
    }

    fn terms(&self) -> [(&'static str, f64); 9] {
        [
            ("recon_note", self.recon_note),
            ("recon_chord", self.recon_chord),
            ("kl_pln", self.kl_pln),
            ("kl_str", self.kl_str),
            ("l_pln", self.l_pln),
            ("l_str", self.l_str),
            ("l_fac", self.l_fac),
            ("l_reg", self.l_reg),
            ("total", self.total),
        ]
    }

    /// Fails naming the first non-finite term.
    pub fn check_finite(&self) -> Result<()> {
        match self.terms().iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFinite { term: name.to_string() }),
            None => Ok(()),
        }
    }
}

struct ItemVars {
    terms: [Option<Var>; 7],
    objective: Var,
    z_pln: Option<Var>,
}

const TERM_NAMES: [&str; 7] = ["recon_note", "recon_chord", "kl_pln", "kl_str", "l_pln", "l_str", "l_fac"];

fn item_forward(model: &SeqCvae, g: &mut Graph, item: &TrainItem, lambda: &Lambdas, noise_seed: u64) -> ItemVars {
    let cfg = model.config();
    let c = item.steps();
    let mut rng = seeded_rng(noise_seed);
    let eps_pln = standard_normal(c, cfg.d_pln, &mut rng);
    let eps_str = standard_normal(c, cfg.d_str, &mut rng);
    let fac_noise = FacNoise { prior: standard_normal(c, cfg.d_str, &mut rng), pln: standard_normal(c, cfg.d_pln, &mut rng) };

    let x = g.constant(item.x.clone());
    let enc = model.encode(g, x, &item.input);
    let z_pln = match enc.post_pln {
        Some(post) => g.sample(post, eps_pln),
        None => g.constant(item.signals.i_pln.clone()),
    };
    let z_str = g.sample(enc.post_str, eps_str);
    let prior = model.prior_teacher(g, z_str, enc.y_chd);
    let dec = model.decode(g, z_pln, z_str, enc.y_chd, enc.e_y, &item.input, PrevNote::Teacher(&item.x));

    let recon_note = g.tape.mse(dec.x_hat, x);
    let k = g.constant(item.k.clone());
    let recon_chord = g.tape.mse(dec.k_hat, k);
    let kl_pln = enc.post_pln.map(|p| g.tape.kl_diag(p.mu, p.sigma, None));
    let kl_str = g.tape.kl_diag(enc.post_str.mu, enc.post_str.sigma, Some((prior.mu, prior.sigma)));

    let has_pln = cfg.arch.has_planning_latent();
    let l_pln = (has_pln && lambda.pln > 0.0).then(|| regularizers::loss_pln(model, g, z_pln, &item.signals.i_pln, false));
    let l_str = (lambda.str_ > 0.0).then(|| regularizers::loss_str(model, g, z_str, &item.signals.i_str));
    let l_fac = if has_pln && lambda.fac > 0.0 {
        let zp = g.value(z_pln).clone();
        regularizers::loss_fac(model, g, &zp, &item.input, &item.signals.i_pln, &fac_noise)
    } else {
        None
    };

    let mut objective = g.tape.add(recon_note, recon_chord);
    objective = g.tape.add(objective, kl_str);
    if let Some(v) = kl_pln {
        objective = g.tape.add(objective, v);
    }
    for (term, w) in [(l_pln, lambda.pln), (l_str, lambda.str_), (l_fac, lambda.fac)] {
        if let Some(t) = term {
            let s = g.tape.scale(t, w);
            objective = g.tape.add(objective, s);
        }
    }
    ItemVars {
        terms: [Some(recon_note), Some(recon_chord), kl_pln, Some(kl_str), l_pln, l_str, l_fac],
        objective,
        z_pln: has_pln.then_some(z_pln),
    }
}

/// Objective of one batch. `item_seeds` gives the noise seed of each item.
/// With `want_grads` the per-parameter gradients are returned as well.
pub fn batch_objective(
    model: &SeqCvae,
    items: &[&TrainItem],
    item_seeds: &[u64],
    reg_seed: u64,
    cfg: &TrainConfig,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<Matrix>>)> {
    if items.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let lambda = cfg.lambda;
    let graphs: Vec<(Graph, ItemVars)> = items
        .par_iter()
        .zip(item_seeds.par_iter())
        .map(|(item, &seed)| {
            let mut g = model.graph();
            let vars = item_forward(model, &mut g, item, &lambda, seed);
            (g, vars)
        })
        .collect();

    let b = items.len() as f64;
    let mut out = LossBreakdown::default();
    for (g, vars) in &graphs {
        let vals: Vec<f64> = vars.terms.iter().map(|t| t.map_or(0.0, |v| g.value(v).item())).collect();
        for (name, v) in TERM_NAMES.iter().zip(&vals) {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: name.to_string() });
            }
        }
        out.recon_note += vals[0] / b;
        out.recon_chord += vals[1] / b;
        out.kl_pln += vals[2] / b;
        out.kl_str += vals[3] / b;
        out.l_pln += vals[4] / b;
        out.l_str += vals[5] / b;
        out.l_fac += vals[6] / b;
    }

    // pooled monotonicity term over (excerpt, timestep) items
    let mut reg_grads: Vec<Option<Matrix>> = vec![None; graphs.len()];
    if lambda.reg > 0.0 && model.config().arch.has_planning_latent() {
        let mut d_rows = Vec::new();
        let mut a_rows = Vec::new();
        for ((g, vars), item) in graphs.iter().zip(items) {
            let z = g.value(vars.z_pln.expect("planning latent present"));
            let f = regularizers::fader_columns(model, z);
            for r in 0..f.rows() {
                d_rows.push(Matrix::row_vector(f.row(r)));
                a_rows.push(Matrix::row_vector(item.k.row(r)));
            }
        }
        let d = Matrix::stack_rows(&d_rows.iter().collect::<Vec<_>>());
        let a = Matrix::stack_rows(&a_rows.iter().collect::<Vec<_>>());
        let (l, grad) = regularizers::loss_reg(&d, &a, cfg.reg_items, &mut seeded_rng(reg_seed));
        out.l_reg = l;
        let mut offset = 0;
        for (slot, item) in reg_grads.iter_mut().zip(items) {
            let c = item.steps();
            let mut gz = Matrix::zeros(c, model.config().d_pln);
            for r in 0..c {
                for attr in 0..NUM_ATTRS {
                    gz.set(r, model.config().fader_dim(attr), lambda.reg * grad.get(offset + r, attr));
                }
            }
            offset += c;
            *slot = Some(gz);
        }
    }
    out.total = out.vae() + lambda.pln * out.l_pln + lambda.str_ * out.l_str + lambda.fac * out.l_fac + lambda.reg * out.l_reg;
    out.check_finite()?;
    if !want_grads {
        return Ok((out, None));
    }

    let per_item: Vec<Vec<Matrix>> = graphs
        .par_iter()
        .zip(reg_grads.par_iter())
        .map(|((g, vars), rg)| {
            let mut seeds = vec![(vars.objective, Matrix::scalar(1.0 / b))];
            if let (Some(z), Some(gz)) = (vars.z_pln, rg) {
                seeds.push((z, gz.clone()));
            }
            let grads = g.tape.backward(&seeds);
            let mut slots = model.params().zeros_like();
            g.tape.param_grads(&grads, &mut slots);
            slots
        })
        .collect();
    let mut total = model.params().zeros_like();
    for slots in per_item {
        for (t, s) in total.iter_mut().zip(slots) {
            t.add_assign(&s);
        }
    }
    Ok((out, Some(total)))
}

/// Adam with f32-rounded state, so checkpoints restore exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Matrix], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.value_mut(i);
            for (((pj, mj), vj), gj) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            m.round_to_f32();
            v.round_to_f32();
            p.round_to_f32();
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub state: Checkpoint,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = SeqCvae::new(cfg.model_config())?;
        let optimizer = Adam::new(model.params());
        Ok(Self { state: Checkpoint { model, optimizer, epoch: 0, step: 0, train: Some(cfg.clone()) }, cfg })
    }

    /// Continues from a checkpoint written at the end of an epoch.
    pub fn resume(cfg: TrainConfig, mut state: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if state.model.config() != &cfg.model_config() {
            return Err(Error::Config("checkpoint model does not match the training config".into()));
        }
        state.train = Some(cfg.clone());
        Ok(Self { cfg, state })
    }

    pub fn model(&self) -> &SeqCvae {
        &self.state.model
    }

    /// Batches of item indices for an epoch, shuffled from (seed, epoch).
    pub fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(derive_seed(&[self.cfg.seed, 1, epoch as u64])));
        order.chunks(self.cfg.batch_size).map(|c| c.to_vec()).collect()
    }

    /// One optimizer step on the given items.
    pub fn step(&mut self, items: &[TrainItem], batch: &[usize]) -> Result<LogRecord> {
        let step = self.state.step;
        let seed = self.cfg.seed;
        let refs: Vec<&TrainItem> = batch.iter().map(|&i| &items[i]).collect();
        let seeds: Vec<u64> = batch.iter().map(|&i| derive_seed(&[seed, 2, step, i as u64])).collect();
        let reg_seed = derive_seed(&[seed, 3, step]);
        let (loss, grads) = batch_objective(&self.state.model, &refs, &seeds, reg_seed, &self.cfg, true)?;
        if loss.total > self.cfg.divergence {
            return Err(Error::Diverged { step: step as usize, loss: loss.total });
        }
        let lr = self.cfg.lr_at(self.state.epoch);
        let grads = grads.expect("gradients requested");
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { term: "gradient".into() });
        }
        self.state.optimizer.step(self.state.model.params_mut(), &grads, lr);
        self.state.step += 1;
        Ok(LogRecord { step, epoch: self.state.epoch, lr, loss })
    }

    pub fn run_epoch(&mut self, items: &[TrainItem], mut on_record: impl FnMut(&LogRecord)) -> Result<Vec<LogRecord>> {
        let mut log = Vec::new();
        for batch in self.epoch_batches(items.len(), self.state.epoch) {
            let rec = self.step(items, &batch)?;
            on_record(&rec);
            log.push(rec);
        }
        self.state.epoch += 1;
        Ok(log)
    }

    /// Trains until `cfg.epochs`, writing `log.jsonl`, `epoch_XXX.ckpt` and
    /// `last.ckpt` under `out` when given.
    pub fn fit(&mut self, items: &[TrainItem], out: Option<&Path>) -> Result<Vec<LogRecord>> {
        if items.is_empty() {
            return Err(Error::Config("no training excerpts".into()));
        }
        let mut log_file = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(std::fs::OpenOptions::new().create(true).append(true).open(dir.join("log.jsonl"))?)
            }
            None => None,
        };
        let mut all = Vec::new();
        while self.state.epoch < self.cfg.epochs {
            let mut io_err = None;
            let recs = self.run_epoch(items, |r| {
                if let Some(f) = log_file.as_mut() {
                    let line = serde_json::to_string(r).expect("record serializes");
                    if let Err(e) = writeln!(f, "{line}") {
                        io_err.get_or_insert(e);
                    }
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            let last = recs.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
            log::info!("epoch {} done, last loss {:.5}", self.state.epoch, last);
            all.extend(recs);
            if let Some(dir) = out {
                self.state.train = Some(self.cfg.clone());
                self.state.save(dir.join(format!("epoch_{:03}.ckpt", self.state.epoch)))?;
                self.state.save(dir.join("last.ckpt"))?;
            }
        }
        Ok(all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::paper();
        assert_eq!(c.lr_at(0), 1e-5);
        assert!((c.lr_at(1) - 9.5e-6).abs() < 1e-18);
        assert!((c.lr_at(10) - 5.9874e-6).abs() < 1e-10);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = TrainConfig { seed: 9, arch: Arch::Notewise, ..TrainConfig::desk() };
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml("epochs = 3\n[lambda]\npln = 0.0\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.lambda.pln, 0.0);
        assert_eq!(partial.lambda.str_, 100.0);
        assert!(TrainConfig::from_toml("lr_decay = 1.5").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("[lambda]\nbogus = 1").is_err());
        let desk = TrainConfig::from_toml("profile = \"desk\"\n[lambda]\nfac = 2.0\n").unwrap();
        assert_eq!(desk.lr, 1e-3);
        assert_eq!(desk.lambda, Lambdas { fac: 2.0, ..Lambdas::desk() });
    }

    #[test]
    fn seeds_differ_by_component() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(derive_seed(&[5, 6, 7]), derive_seed(&[5, 6, 7]));
    }
}
