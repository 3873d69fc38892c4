//! Hierarchical sequential conditional VAE.
//!
//! Encoder: notewise embeddings of performance `x` and score `y` are pooled to
//! chords; a bidirectional GRU over the performance chords gives the planning
//! posterior, a causal GRU over (performance, score) chords gives the
//! structure posterior. A causal GRU prior over (previous structure latent,
//! score chord) models structure latents. Decoder: a chordwise GRU over
//! (planning, structure, score chord) emits an intermediate chordwise
//! prediction and an activation that is broadcast to notes, where an
//! autoregressive GRU produces the notewise features.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kl_value, Tape, Var};
use crate::error::{Error, Result};
use crate::notedata::{ChordPartition, ScoreFeatures, NUM_ATTRS, NUM_SCORE_FEATURES, SCORE_CLASS_COUNTS};
use crate::tensor::Matrix;

/// Width of the planning latent: four dimensions per attribute.
pub const D_PLN: usize = 12;
pub const DIMS_PER_ATTR: usize = D_PLN / NUM_ATTRS;
/// Retry cap of [`GaussianSeq::truncated_sample`] before clamping.
pub const TRUNCATION_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleProfile {
    Paper,
    Desk,
}

/// Model variants: the hierarchical model and the two comparison
/// architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Chordwise latents with N2C/C2N.
    #[default]
    Hierarchical,
    /// No hierarchy: every note is its own timestep.
    Notewise,
    /// Notewise, with the planning latent replaced by the planning signal.
    Cvae,
}

impl Arch {
    pub fn has_planning_latent(self) -> bool {
        self != Arch::Cvae
    }

    pub fn uses_chords(self) -> bool {
        self == Arch::Hierarchical
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_pln: usize,
    pub d_str: usize,
    pub hidden: usize,
    pub perf_embed: usize,
    pub score_embed: usize,
    pub disc_hidden: usize,
    /// Degree of the planning-signal polynomial.
    pub degree: usize,
    pub truncation: f64,
    pub seed: u64,
    pub profile: ScaleProfile,
    #[serde(default)]
    pub arch: Arch,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            d_pln: D_PLN,
            d_str: 64,
            hidden: 256,
            perf_embed: 256,
            score_embed: 128,
            disc_hidden: 256,
            degree: 4,
            truncation: 2.0,
            seed: 0,
            profile: ScaleProfile::Paper,
            arch: Arch::Hierarchical,
        }
    }

    pub fn desk() -> Self {
        Self {
            d_str: 16,
            hidden: 32,
            perf_embed: 32,
            score_embed: 16,
            disc_hidden: 32,
            profile: ScaleProfile::Desk,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_pln != D_PLN {
            return Err(Error::Config(format!("d_pln must be {D_PLN}")));
        }
        if self.score_embed % NUM_SCORE_FEATURES != 0 || self.score_embed == 0 {
            return Err(Error::Config("score_embed must be a positive multiple of 8".into()));
        }
        if self.d_str == 0 || self.hidden == 0 || self.perf_embed == 0 || self.disc_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.truncation > 0.0) {
            return Err(Error::Config("truncation threshold must be positive".into()));
        }
        Ok(())
    }

    /// Width of the planning code fed to the decoder.
    pub fn planning_width(&self) -> usize {
        if self.arch.has_planning_latent() {
            self.d_pln
        } else {
            NUM_ATTRS
        }
    }

    /// Column of the planning code that acts as the fader of `attr`.
    pub fn fader_dim(&self, attr: usize) -> usize {
        if self.arch.has_planning_latent() {
            attr * DIMS_PER_ATTR
        } else {
            attr
        }
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Inference network q.
    Encoder,
    /// Prior and decoder, p.
    Generator,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
}

/// Named parameter arrays in construction order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn value(&self, id: usize) -> &Matrix {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.entries[id].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.entries.iter().map(|e| Matrix::zeros(e.value.rows(), e.value.cols())).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIds {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GruIds {
    pub w_ih: usize,
    pub w_hh: usize,
    pub b_ih: usize,
    pub b_hh: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layers {
    pub perf_embed: LinearIds,
    pub score_tables: Vec<usize>,
    pub enc_pln: Option<(GruIds, GruIds, LinearIds)>,
    pub enc_str: GruIds,
    pub enc_str_head: LinearIds,
    pub prior: GruIds,
    pub prior_head: LinearIds,
    pub dec_chord: GruIds,
    pub k_head: LinearIds,
    pub dec_note: GruIds,
    pub dec_note_prev: usize,
    pub out_head: LinearIds,
    pub disc_pln: Vec<(LinearIds, LinearIds)>,
    pub disc_str: (LinearIds, LinearIds),
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, group: ParamGroup, rows: usize, cols: usize, bound: f64) -> usize {
        let mut value = Matrix::zeros(rows, cols);
        for v in value.data_mut() {
            *v = self.rng.gen_range(-bound..=bound);
        }
        value.round_to_f32();
        self.store.entries.push(ParamEntry { name, group, value });
        self.store.entries.len() - 1
    }

    fn linear(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> LinearIds {
        let bound = 1.0 / (fan_in as f64).sqrt();
        LinearIds {
            w: self.add(format!("{name}.w"), group, fan_in, fan_out, bound),
            b: self.add(format!("{name}.b"), group, 1, fan_out, bound),
        }
    }

    fn gru(&mut self, name: &str, group: ParamGroup, input: usize, hidden: usize) -> GruIds {
        let bound = 1.0 / (hidden as f64).sqrt();
        GruIds {
            w_ih: self.add(format!("{name}.w_ih"), group, input, 3 * hidden, bound),
            w_hh: self.add(format!("{name}.w_hh"), group, hidden, 3 * hidden, bound),
            b_ih: self.add(format!("{name}.b_ih"), group, 1, 3 * hidden, bound),
            b_hh: self.add(format!("{name}.b_hh"), group, 1, 3 * hidden, bound),
            hidden,
        }
    }
}

/// Diagonal Gaussian sequence, T x d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSeq {
    pub mu: Matrix,
    pub sigma: Matrix,
}

/// Standard normal draws from a seeded stream.
pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    m
}

/// Standard normal draws resampled until `|e| <= threshold`, clamped after
/// [`TRUNCATION_RETRIES`] attempts.
pub fn truncated_normal(rows: usize, cols: usize, threshold: f64, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        let mut e: f64 = rng.sample(StandardNormal);
        let mut tries = 0;
        while e.abs() > threshold && tries < TRUNCATION_RETRIES {
            e = rng.sample(StandardNormal);
            tries += 1;
        }
        *v = e.clamp(-threshold, threshold);
    }
    m
}

impl GaussianSeq {
    pub fn standard(rows: usize, cols: usize) -> Self {
        Self { mu: Matrix::zeros(rows, cols), sigma: Matrix::filled(rows, cols, 1.0) }
    }

    pub fn rows(&self) -> usize {
        self.mu.rows()
    }

    /// `mu + sigma * eps`.
    pub fn sample_with(&self, eps: &Matrix) -> Matrix {
        let mut z = self.mu.clone();
        for ((z, s), e) in z.data_mut().iter_mut().zip(self.sigma.data()).zip(eps.data()) {
            *z += s * e;
        }
        z
    }

    pub fn reparameterize(&self, rng: &mut impl Rng) -> Matrix {
        let eps = standard_normal(self.mu.rows(), self.mu.cols(), rng);
        self.sample_with(&eps)
    }

    pub fn truncated_sample(&self, threshold: f64, rng: &mut impl Rng) -> Matrix {
        let eps = truncated_normal(self.mu.rows(), self.mu.cols(), threshold, rng);
        self.sample_with(&eps)
    }

    /// Sum of closed-form KL against another diagonal Gaussian (standard
    /// normal when `None`).
    pub fn kl(&self, prior: Option<&GaussianSeq>) -> f64 {
        kl_value(&self.mu, &self.sigma, prior.map(|p| (&p.mu, &p.sigma)))
    }

    /// Per-row KL sums.
    pub fn kl_per_row(&self, prior: Option<&GaussianSeq>) -> Vec<f64> {
        (0..self.rows())
            .map(|r| {
                let mq = Matrix::row_vector(self.mu.row(r));
                let sq = Matrix::row_vector(self.sigma.row(r));
                match prior {
                    Some(p) => {
                        let mp = Matrix::row_vector(p.mu.row(r));
                        let sp = Matrix::row_vector(p.sigma.row(r));
                        kl_value(&mq, &sq, Some((&mp, &sp)))
                    }
                    None => kl_value(&mq, &sq, None),
                }
            })
            .collect()
    }
}

/// Tape variables of a Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct GaussVars {
    pub mu: Var,
    pub sigma: Var,
}

impl GaussVars {
    pub fn values(&self, g: &Graph) -> GaussianSeq {
        GaussianSeq { mu: g.tape.value(self.mu).clone(), sigma: g.tape.value(self.sigma).clone() }
    }
}

/// A forward pass under construction: the tape plus parameter bindings.
///
/// Every parameter is bound at most once per mode. Frozen bindings are tape
/// constants, so gradients flow through them to their inputs but never
/// reach the parameter.
pub struct Graph<'m> {
    pub tape: Tape,
    store: &'m ParamStore,
    live: Vec<Option<Var>>,
    frozen: Vec<Option<Var>>,
}

impl<'m> Graph<'m> {
    pub fn new(store: &'m ParamStore) -> Self {
        Self { tape: Tape::new(), store, live: vec![None; store.len()], frozen: vec![None; store.len()] }
    }

    pub fn param(&mut self, id: usize, frozen: bool) -> Var {
        let slot = if frozen { &mut self.frozen[id] } else { &mut self.live[id] };
        if let Some(v) = *slot {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = if frozen { self.tape.constant(value) } else { self.tape.param(id, value) };
        if frozen {
            self.frozen[id] = Some(v);
        } else {
            self.live[id] = Some(v);
        }
        v
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.tape.constant(m)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.tape.value(v)
    }

    fn linear(&mut self, ids: LinearIds, x: Var, frozen: bool) -> Var {
        let w = self.param(ids.w, frozen);
        let b = self.param(ids.b, frozen);
        self.tape.affine(x, w, b)
    }

    /// Hidden states of a GRU over the rows of `inputs` (T x H). With
    /// `reverse` the recurrence runs from the last row, and row `t` of the
    /// result still corresponds to input row `t`.
    fn gru_seq(&mut self, ids: GruIds, inputs: Var, reverse: bool, frozen: bool) -> Var {
        let w_ih = self.param(ids.w_ih, frozen);
        let b_ih = self.param(ids.b_ih, frozen);
        let xproj = self.tape.affine(inputs, w_ih, b_ih);
        self.gru_from_proj(ids, xproj, reverse, frozen)
    }

    fn gru_from_proj(&mut self, ids: GruIds, xproj: Var, reverse: bool, frozen: bool) -> Var {
        let w_hh = self.param(ids.w_hh, frozen);
        let b_hh = self.param(ids.b_hh, frozen);
        let steps = self.value(xproj).rows();
        let mut h = self.constant(Matrix::zeros(1, ids.hidden));
        let mut states = vec![h; steps];
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let row = self.tape.row(xproj, t);
            h = self.tape.gru_step(row, h, w_hh, b_hh);
            states[t] = h;
        }
        self.tape.stack_rows(&states)
    }

    fn gaussian_head(&mut self, ids: LinearIds, h: Var, width: usize, frozen: bool) -> GaussVars {
        let out = self.linear(ids, h, frozen);
        let mu = self.tape.slice_cols(out, 0, width);
        let pre = self.tape.slice_cols(out, width, 2 * width);
        let sigma = self.tape.softplus(pre);
        GaussVars { mu, sigma }
    }

    /// `mu + sigma * eps` with a constant `eps`.
    pub fn sample(&mut self, gauss: GaussVars, eps: Matrix) -> Var {
        let e = self.constant(eps);
        let scaled = self.tape.mul(gauss.sigma, e);
        self.tape.add(gauss.mu, scaled)
    }
}

/// Notewise inputs of one excerpt in model-ready form.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub partition: Arc<ChordPartition>,
    /// Zero-based lookup indices per score feature column.
    pub score_idx: Vec<Arc<Vec<usize>>>,
}

impl ModelInput {
    pub fn new(y: &ScoreFeatures, partition: ChordPartition) -> Result<Self> {
        if y.len() != partition.num_notes() {
            return Err(Error::Shape(format!("{} score rows for {} notes", y.len(), partition.num_notes())));
        }
        if !y.in_range() {
            return Err(Error::Shape("score feature class out of range".into()));
        }
        let score_idx = (0..NUM_SCORE_FEATURES).map(|c| Arc::new(y.class_indices(c))).collect();
        Ok(Self { partition: Arc::new(partition), score_idx })
    }

    pub fn num_notes(&self) -> usize {
        self.partition.num_notes()
    }

    pub fn num_chords(&self) -> usize {
        self.partition.num_chords()
    }
}

/// Encoder outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub post_pln: Option<GaussVars>,
    pub post_str: GaussVars,
    pub x_chd: Var,
    pub y_chd: Var,
    pub e_y: Var,
}

/// Decoder outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    pub x_hat: Var,
    pub k_hat: Var,
}

/// How the notewise decoder receives the previous note's features.
pub enum PrevNote<'a> {
    /// Ground truth (teacher forcing).
    Teacher(&'a Matrix),
    /// The decoder's own previous output.
    FreeRun,
}

#[derive(Clone, Debug)]
pub struct SeqCvae {
    config: ModelConfig,
    params: ParamStore,
    layers: Layers,
}

impl SeqCvae {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { store: ParamStore::default(), rng: ChaCha8Rng::seed_from_u64(config.seed) };
        let (h, ep, es, ds, dh) = (config.hidden, config.perf_embed, config.score_embed, config.d_str, config.disc_hidden);
        let dp = config.planning_width();
        use ParamGroup::*;
        let perf_embed = b.linear("perf_embed", Encoder, NUM_ATTRS, ep);
        let table_w = es / NUM_SCORE_FEATURES;
        let score_tables = SCORE_CLASS_COUNTS
            .iter()
            .enumerate()
            .map(|(i, &n)| b.add(format!("score_embed.{i}"), Generator, n, table_w, 1.0))
            .collect();
        let enc_pln = config.arch.has_planning_latent().then(|| {
            let fwd = b.gru("enc_pln.fwd", Encoder, ep, h);
            let bwd = b.gru("enc_pln.bwd", Encoder, ep, h);
            let head = b.linear("enc_pln.head", Encoder, 2 * h, 2 * dp);
            (fwd, bwd, head)
        });
        let enc_str = b.gru("enc_str", Encoder, ep + es, h);
        let enc_str_head = b.linear("enc_str.head", Encoder, h, 2 * ds);
        let prior = b.gru("prior", Generator, ds + es, h);
        let prior_head = b.linear("prior.head", Generator, h, 2 * ds);
        let dec_chord = b.gru("dec_chord", Generator, dp + ds + es, h);
        let k_head = b.linear("dec_chord.k_head", Generator, h, NUM_ATTRS);
        let dec_note = b.gru("dec_note", Generator, h + es, h);
        let dec_note_prev = b.add("dec_note.w_prev".into(), Generator, NUM_ATTRS, 3 * h, 1.0 / (h as f64).sqrt());
        let out_head = b.linear("dec_note.out", Generator, h, NUM_ATTRS);
        let disc_pln = if config.arch.has_planning_latent() {
            (0..NUM_ATTRS)
                .map(|a| {
                    (
                        b.linear(&format!("disc_pln.{a}.l1"), Discriminator, DIMS_PER_ATTR, dh),
                        b.linear(&format!("disc_pln.{a}.l2"), Discriminator, dh, 1),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let disc_str = (
            b.linear("disc_str.l1", Discriminator, ds, dh),
            b.linear("disc_str.l2", Discriminator, dh, NUM_ATTRS),
        );
        let layers = Layers {
            perf_embed,
            score_tables,
            enc_pln,
            enc_str,
            enc_str_head,
            prior,
            prior_head,
            dec_chord,
            k_head,
            dec_note,
            dec_note_prev,
            out_head,
            disc_pln,
            disc_str,
        };
        Ok(Self { config, params: b.store, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Replaces parameter values by name; every parameter must be present
    /// with its expected shape.
    pub fn load_params(&mut self, named: &[(String, Matrix)]) -> Result<()> {
        for entry in self.params.entries_mut() {
            let (_, m) = named
                .iter()
                .find(|(n, _)| *n == entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", entry.name)))?;
            if m.shape() != entry.value.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", entry.name)));
            }
            entry.value = m.clone();
        }
        Ok(())
    }

    /// Ids of the decoder's chordwise input weights reading the planning code.
    pub fn planning_input_rows(&self) -> (usize, std::ops::Range<usize>) {
        (self.layers.dec_chord.w_ih, 0..self.config.planning_width())
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.params)
    }

    // ---- tape-level building blocks ----

    pub fn embed_score(&self, g: &mut Graph, input: &ModelInput) -> Var {
        let parts: Vec<Var> = self
            .layers
            .score_tables
            .iter()
            .zip(&input.score_idx)
            .map(|(&t, idx)| {
                let table = g.param(t, false);
                g.tape.gather(table, Arc::clone(idx))
            })
            .collect();
        g.tape.concat_cols(&parts)
    }

    fn embed_perf(&self, g: &mut Graph, x: Var, frozen: bool) -> Var {
        g.linear(self.layers.perf_embed, x, frozen)
    }

    /// Planning posterior from notewise features `x` (N x 3).
    pub fn encode_planning(&self, g: &mut Graph, x: Var, input: &ModelInput, frozen: bool) -> Option<GaussVars> {
        let (fwd, bwd, head) = self.layers.enc_pln?;
        let e_x = self.embed_perf(g, x, frozen);
        let x_chd = g.tape.segment_mean(e_x, &input.partition);
        Some(self.planning_from_chords(g, x_chd, fwd, bwd, head, frozen))
    }

    fn planning_from_chords(&self, g: &mut Graph, x_chd: Var, fwd: GruIds, bwd: GruIds, head: LinearIds, frozen: bool) -> GaussVars {
        let hf = g.gru_seq(fwd, x_chd, false, frozen);
        let hb = g.gru_seq(bwd, x_chd, true, frozen);
        let both = g.tape.concat_cols(&[hf, hb]);
        g.gaussian_head(head, both, self.config.d_pln, frozen)
    }

    pub fn encode(&self, g: &mut Graph, x: Var, input: &ModelInput) -> Encoded {
        let e_x = self.embed_perf(g, x, false);
        let e_y = self.embed_score(g, input);
        let x_chd = g.tape.segment_mean(e_x, &input.partition);
        let y_chd = g.tape.segment_mean(e_y, &input.partition);
        let post_pln = self.layers.enc_pln.map(|(f, b, h)| self.planning_from_chords(g, x_chd, f, b, h, false));
        let str_in = g.tape.concat_cols(&[x_chd, y_chd]);
        let hs = g.gru_seq(self.layers.enc_str, str_in, false, false);
        let post_str = g.gaussian_head(self.layers.enc_str_head, hs, self.config.d_str, false);
        Encoded { post_pln, post_str, x_chd, y_chd, e_y }
    }

    /// Prior parameters for every chord given the full structure latent
    /// sequence: chord `c` reads `z_str[c-1]` (zero for `c = 0`) and `y_chd[c]`.
    pub fn prior_teacher(&self, g: &mut Graph, z_str: Var, y_chd: Var) -> GaussVars {
        let c = g.value(z_str).rows();
        let ds = self.config.d_str;
        let mut rows = Vec::with_capacity(c);
        rows.push(g.constant(Matrix::zeros(1, ds)));
        for t in 0..c.saturating_sub(1) {
            rows.push(g.tape.row(z_str, t));
        }
        let shifted = g.tape.stack_rows(&rows);
        let inp = g.tape.concat_cols(&[shifted, y_chd]);
        let h = g.gru_seq(self.layers.prior, inp, false, false);
        g.gaussian_head(self.layers.prior_head, h, ds, false)
    }

    /// Ancestral sampling of structure latents from the prior with the given
    /// standardized noise (C x d_str). Returns the samples and the prior
    /// parameters used at each chord.
    pub fn prior_rollout(&self, g: &mut Graph, y_chd: Var, eps: &Matrix) -> (Var, GaussVars) {
        let c = g.value(y_chd).rows();
        let ds = self.config.d_str;
        let ids = self.layers.prior;
        let w_ih = g.param(ids.w_ih, false);
        let b_ih = g.param(ids.b_ih, false);
        let w_hh = g.param(ids.w_hh, false);
        let b_hh = g.param(ids.b_hh, false);
        let mut h = g.constant(Matrix::zeros(1, ids.hidden));
        let mut z_prev = g.constant(Matrix::zeros(1, ds));
        let (mut zs, mut mus, mut sigmas) = (Vec::with_capacity(c), Vec::with_capacity(c), Vec::with_capacity(c));
        for t in 0..c {
            let y_row = g.tape.row(y_chd, t);
            let inp = g.tape.concat_cols(&[z_prev, y_row]);
            let xp = g.tape.affine(inp, w_ih, b_ih);
            h = g.tape.gru_step(xp, h, w_hh, b_hh);
            let gauss = g.gaussian_head(self.layers.prior_head, h, ds, false);
            let z = g.sample(gauss, Matrix::row_vector(eps.row(t)));
            zs.push(z);
            mus.push(gauss.mu);
            sigmas.push(gauss.sigma);
            z_prev = z;
        }
        let z = g.tape.stack_rows(&zs);
        let mu = g.tape.stack_rows(&mus);
        let sigma = g.tape.stack_rows(&sigmas);
        (z, GaussVars { mu, sigma })
    }

    pub fn decode(
        &self,
        g: &mut Graph,
        z_pln: Var,
        z_str: Var,
        y_chd: Var,
        e_y: Var,
        input: &ModelInput,
        prev: PrevNote<'_>,
    ) -> Decoded {
        let chord_in = g.tape.concat_cols(&[z_pln, z_str, y_chd]);
        let act = g.gru_seq(self.layers.dec_chord, chord_in, false, false);
        let k_lin = g.linear(self.layers.k_head, act, false);
        let k_hat = g.tape.tanh(k_lin);

        let act_notes = g.tape.segment_broadcast(act, &input.partition);
        let ctx = g.tape.concat_cols(&[act_notes, e_y]);
        let ids = self.layers.dec_note;
        let w_ih = g.param(ids.w_ih, false);
        let b_ih = g.param(ids.b_ih, false);
        let w_prev = g.param(self.layers.dec_note_prev, false);
        let ctx_proj = g.tape.affine(ctx, w_ih, b_ih);
        let n = input.num_notes();
        let x_hat = match prev {
            PrevNote::Teacher(x) => {
                let mut shifted = Matrix::zeros(n, NUM_ATTRS);
                for i in 1..n {
                    shifted.row_mut(i).copy_from_slice(x.row(i - 1));
                }
                let prev = g.constant(shifted);
                let prev_proj = g.tape.matmul(prev, w_prev);
                let xproj = g.tape.add(ctx_proj, prev_proj);
                let states = g.gru_from_proj(ids, xproj, false, false);
                let out = g.linear(self.layers.out_head, states, false);
                g.tape.tanh(out)
            }
            PrevNote::FreeRun => {
                let w_hh = g.param(ids.w_hh, false);
                let b_hh = g.param(ids.b_hh, false);
                let out_w = g.param(self.layers.out_head.w, false);
                let out_b = g.param(self.layers.out_head.b, false);
                let mut h = g.constant(Matrix::zeros(1, ids.hidden));
                let mut prev = g.constant(Matrix::zeros(1, NUM_ATTRS));
                let mut outs = Vec::with_capacity(n);
                for t in 0..n {
                    let row = g.tape.row(ctx_proj, t);
                    let pp = g.tape.matmul(prev, w_prev);
                    let xp = g.tape.add(row, pp);
                    h = g.tape.gru_step(xp, h, w_hh, b_hh);
                    let o = g.tape.affine(h, out_w, out_b);
                    let o = g.tape.tanh(o);
                    outs.push(o);
                    prev = o;
                }
                g.tape.stack_rows(&outs)
            }
        };
        Decoded { x_hat, k_hat }
    }

    /// Per-attribute planning discriminator outputs, each C x 1.
    pub fn discriminate_planning(&self, g: &mut Graph, z_pln: Var, frozen: bool) -> Vec<Var> {
        self.layers
            .disc_pln
            .iter()
            .enumerate()
            .map(|(a, &(l1, l2))| {
                let block = g.tape.slice_cols(z_pln, a * DIMS_PER_ATTR, (a + 1) * DIMS_PER_ATTR);
                let h = g.linear(l1, block, frozen);
                let h = g.tape.tanh(h);
                g.linear(l2, h, frozen)
            })
            .collect()
    }

    /// Structure discriminator output, C x 3, tanh-bounded.
    pub fn discriminate_structure(&self, g: &mut Graph, z_str: Var) -> Var {
        let (l1, l2) = self.layers.disc_str;
        let h = g.linear(l1, z_str, false);
        let h = g.tape.tanh(h);
        let o = g.linear(l2, h, false);
        g.tape.tanh(o)
    }

    // ---- value-level inference ----

    /// Posterior parameters for one excerpt.
    pub fn infer(&self, x: &Matrix, input: &ModelInput) -> Result<(Option<GaussianSeq>, GaussianSeq)> {
        check_x(x, input)?;
        let mut g = self.graph();
        let xv = g.constant(x.clone());
        let enc = self.encode(&mut g, xv, input);
        Ok((enc.post_pln.map(|p| p.values(&g)), enc.post_str.values(&g)))
    }

    /// Prior parameters given a structure latent sequence.
    pub fn prior_params(&self, z_str: &Matrix, input: &ModelInput) -> GaussianSeq {
        let mut g = self.graph();
        let e_y = self.embed_score(&mut g, input);
        let y_chd = g.tape.segment_mean(e_y, &input.partition);
        let z = g.constant(z_str.clone());
        self.prior_teacher(&mut g, z, y_chd).values(&g)
    }

    /// Samples structure latents from the prior with standardized noise `eps`.
    pub fn sample_prior(&self, input: &ModelInput, eps: &Matrix) -> Matrix {
        let mut g = self.graph();
        let e_y = self.embed_score(&mut g, input);
        let y_chd = g.tape.segment_mean(e_y, &input.partition);
        let (z, _) = self.prior_rollout(&mut g, y_chd, eps);
        g.value(z).clone()
    }

    /// Decodes features from explicit latents; returns (x_hat, k_hat).
    pub fn generate(&self, z_pln: &Matrix, z_str: &Matrix, input: &ModelInput, teacher: Option<&Matrix>) -> Result<(Matrix, Matrix)> {
        let c = input.num_chords();
        if z_pln.shape() != (c, self.config.planning_width()) || z_str.shape() != (c, self.config.d_str) {
            return Err(Error::Shape(format!("latents {:?}/{:?} for {c} chords", z_pln.shape(), z_str.shape())));
        }
        if let Some(x) = teacher {
            check_x(x, input)?;
        }
        let mut g = self.graph();
        let e_y = self.embed_score(&mut g, input);
        let y_chd = g.tape.segment_mean(e_y, &input.partition);
        let zp = g.constant(z_pln.clone());
        let zs = g.constant(z_str.clone());
        let prev = match teacher {
            Some(x) => PrevNote::Teacher(x),
            None => PrevNote::FreeRun,
        };
        let d = self.decode(&mut g, zp, zs, y_chd, e_y, input, prev);
        Ok((g.value(d.x_hat).clone(), g.value(d.k_hat).clone()))
    }

    /// Free-run generation with structure latents drawn from the prior.
    pub fn generate_with_prior(&self, z_pln: &Matrix, input: &ModelInput, rng: &mut impl Rng, truncation: Option<f64>) -> Result<Matrix> {
        let c = input.num_chords();
        let eps = match truncation {
            Some(t) => truncated_normal(c, self.config.d_str, t, rng),
            None => standard_normal(c, self.config.d_str, rng),
        };
        let z_str = self.sample_prior(input, &eps);
        Ok(self.generate(z_pln, &z_str, input, None)?.0)
    }
}

fn check_x(x: &Matrix, input: &ModelInput) -> Result<()> {
    if x.shape() != (input.num_notes(), NUM_ATTRS) {
        return Err(Error::Shape(format!("x is {:?}, expected {} x 3", x.shape(), input.num_notes())));
    }
    Ok(())
}

/// Values of the four ELBO terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub recon_note: f64,
    pub recon_chord: f64,
    pub kl_pln: f64,
    pub kl_str: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.recon_note + self.recon_chord + self.kl_pln + self.kl_str
    }
}

/// Negative ELBO terms from values: MSE reconstructions (unit-variance
/// Gaussian likelihood up to constants) and closed-form KLs summed over
/// chords.
pub fn elbo_terms(
    x: &Matrix,
    k: &Matrix,
    post_pln: Option<&GaussianSeq>,
    post_str: &GaussianSeq,
    prior_str: &GaussianSeq,
    x_hat: &Matrix,
    k_hat: &Matrix,
) -> ElboTerms {
    let mse = |a: &Matrix, b: &Matrix| a.zip_map(b, |p, q| (p - q) * (p - q)).mean();
    ElboTerms {
        recon_note: mse(x, x_hat),
        recon_chord: mse(k, k_hat),
        kl_pln: post_pln.map_or(0.0, |p| p.kl(None)),
        kl_str: post_str.kl(Some(prior_str)),
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_have_expected_widths() {
        let p = ModelConfig::paper();
        assert_eq!((p.perf_embed, p.score_embed, p.d_str, p.hidden), (256, 128, 64, 256));
        let d = ModelConfig::desk();
        assert_eq!((d.perf_embed, d.score_embed, d.d_str, d.hidden), (32, 16, 16, 32));
        assert_eq!(d.d_pln % NUM_ATTRS, 0);
        assert_eq!(d.degree, 4);
        assert_eq!(d.truncation, 2.0);
    }

    #[test]
    fn parameter_count_is_deterministic() {
        let a = SeqCvae::new(ModelConfig::desk()).unwrap();
        let b = SeqCvae::new(ModelConfig { seed: 99, ..ModelConfig::desk() }).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_ne!(a.params(), b.params());
        assert_eq!(a.params(), SeqCvae::new(ModelConfig::desk()).unwrap().params());
    }

    #[test]
    fn kl_closed_form_examples() {
        let same = GaussianSeq::standard(2, 3);
        assert_eq!(same.kl(Some(&GaussianSeq::standard(2, 3))), 0.0);
        let shifted = GaussianSeq { mu: Matrix::filled(1, 12, 1.0), sigma: Matrix::filled(1, 12, 1.0) };
        assert!((shifted.kl(None) - 6.0).abs() < 1e-12);
        assert!((shifted.kl_per_row(None)[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_sample_is_mean() {
        let g = GaussianSeq { mu: Matrix::from_rows(&[[0.5, -1.0]]), sigma: Matrix::zeros(1, 2) };
        assert_eq!(g.reparameterize(&mut seeded_rng(3)), g.mu);
    }

    #[test]
    fn truncated_noise_respects_threshold() {
        let e = truncated_normal(200, 50, 2.0, &mut seeded_rng(1));
        assert!(e.max_abs() <= 2.0);
        let wide = truncated_normal(10, 10, 1e9, &mut seeded_rng(5));
        assert_eq!(wide, standard_normal(10, 10, &mut seeded_rng(5)));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(SeqCvae::new(ModelConfig { score_embed: 12, ..ModelConfig::desk() }).is_err());
        assert!(SeqCvae::new(ModelConfig { d_pln: 10, ..ModelConfig::desk() }).is_err());
    }
}
