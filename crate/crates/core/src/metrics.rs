//! Evaluation protocols: generation correlations, disentanglement errors,
//! sliding-fader controllability, KL reports and listening-test tabulation.

use std::collections::BTreeMap;
use std::io::Read;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hier::{c2n, n2c};
use crate::notedata::NUM_ATTRS;
use crate::regularizers::fit_planning_signal;
use crate::seqcvae::{seeded_rng, SeqCvae};
use crate::tensor::Matrix;
use crate::trainer::{derive_seed, TrainItem};

pub const DEFAULT_SAMPLES: usize = 20;

/// Mean, population standard deviation and count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        Self { mean, std: pop_std(values), n }
    }
}

pub fn pop_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt()
}

/// Pearson correlation; `None` when either sequence has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.is_empty() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean over attributes of the per-column correlation. Zero-variance
/// columns count as 0; the second value is how many were flagged.
pub fn attribute_correlation(pred: &Matrix, truth: &Matrix) -> (f64, usize) {
    let mut flags = 0;
    let mut total = 0.0;
    for a in 0..truth.cols() {
        match pearson(&pred.col(a), &truth.col(a)) {
            Some(r) => total += r,
            None => flags += 1,
        }
    }
    (total / truth.cols() as f64, flags)
}

/// R^2 of the least squares line of `y` on `x`; 0 for a constant target.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if syy == 0.0 {
        return 0.0;
    }
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    (1.0 - sse / syy).clamp(0.0, 1.0)
}

/// `values[m][t]`: controlled attribute of sample `m` at step `t`.
pub fn consistency(values: &[Vec<f64>]) -> f64 {
    let t_len = values[0].len();
    let s: f64 = (0..t_len).map(|t| pop_std(&values.iter().map(|v| v[t]).collect::<Vec<_>>())).sum();
    1.0 - s / t_len as f64
}

/// `first[m]`, `second[m]`: the two uncontrolled attributes of sample `m`
/// over time.
pub fn restrictiveness(first: &[Vec<f64>], second: &[Vec<f64>]) -> f64 {
    let m = first.len();
    let s: f64 = first.iter().zip(second).map(|(a, b)| pop_std(a) + pop_std(b)).sum();
    1.0 - s / (2.0 * m as f64)
}

/// R^2 over all (d_t, value_{m,t}) points.
pub fn linearity(schedule: &[f64], values: &[Vec<f64>]) -> f64 {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for v in values {
        xs.extend_from_slice(schedule);
        ys.extend_from_slice(v);
    }
    r_squared(&xs, &ys)
}

/// `d_t = min + (t / T)(max - min)` for `t = 1..=T`.
pub fn fader_schedule(min: f64, max: f64, steps: usize) -> Vec<f64> {
    (1..=steps).map(|t| min + (t as f64 / steps as f64) * (max - min)).collect()
}

/// Anything that maps performances to planning codes and planning codes to
/// performances, as needed by the controllability protocol.
pub trait FaderModel: Sync {
    /// Planning code inferred from notewise features (T x width).
    fn infer_planning(&self, x: &Matrix, item: &TrainItem, rng: &mut ChaCha8Rng) -> Matrix;
    /// Notewise features generated from a planning code.
    fn generate(&self, z_pln: &Matrix, item: &TrainItem, rng: &mut ChaCha8Rng) -> Matrix;
    fn fader_dim(&self, attr: usize) -> usize;
}

impl FaderModel for SeqCvae {
    fn infer_planning(&self, x: &Matrix, item: &TrainItem, rng: &mut ChaCha8Rng) -> Matrix {
        planning_code(self, x, item, rng, false)
    }

    fn generate(&self, z_pln: &Matrix, item: &TrainItem, rng: &mut ChaCha8Rng) -> Matrix {
        self.generate_with_prior(z_pln, &item.input, rng, None).expect("shapes checked by caller")
    }

    fn fader_dim(&self, attr: usize) -> usize {
        self.config().fader_dim(attr)
    }
}

/// Planning code for `x`: a posterior sample (or mean), or the planning
/// signal itself for the signal-conditioned architecture.
pub fn planning_code(model: &SeqCvae, x: &Matrix, item: &TrainItem, rng: &mut ChaCha8Rng, use_mean: bool) -> Matrix {
    if model.config().arch.has_planning_latent() {
        let (post, _) = model.infer(x, &item.input).expect("item shapes are consistent");
        let post = post.expect("planning posterior");
        if use_mean {
            post.mu
        } else {
            post.reparameterize(rng)
        }
    } else {
        let k = n2c(x, &item.input.partition).expect("item shapes are consistent");
        fit_planning_signal(&k, model.config().degree).i_pln
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Controllability {
    /// Per attribute (velocity, tempo, articulation).
    pub consistency: [f64; 3],
    pub restrictiveness: [f64; 3],
    pub linearity: [f64; 3],
    pub mean: [f64; 3],
    /// Attributes whose fader range collapsed to a point.
    pub degenerate: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct ControlConfig {
    pub n_samples: usize,
    pub seed: u64,
}

/// Sliding-fader protocol. The fader range of each attribute is the range of
/// its target dimension over the planning codes inferred for all test
/// excerpts; each excerpt's score is then paired with a constant (all-zero)
/// performance, the target dimension is overwritten by the schedule and
/// `n_samples` generations are scored on their chordwise attributes.
pub fn controllability_suite<M: FaderModel>(model: &M, items: &[TrainItem], cfg: ControlConfig) -> Controllability {
    let mut out = Controllability::default();
    if items.is_empty() {
        return out;
    }
    let codes: Vec<Matrix> = items
        .par_iter()
        .enumerate()
        .map(|(i, it)| model.infer_planning(&it.x, it, &mut seeded_rng(derive_seed(&[cfg.seed, 10, i as u64]))))
        .collect();
    for attr in 0..NUM_ATTRS {
        let dim = model.fader_dim(attr);
        let (lo, hi) = codes
            .iter()
            .flat_map(|z| z.col(dim))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if !(hi > lo) {
            out.degenerate.push(attr);
        }
        let per_item: Vec<[f64; 3]> = items
            .par_iter()
            .enumerate()
            .map(|(i, it)| {
                let mut rng = seeded_rng(derive_seed(&[cfg.seed, 11, attr as u64, i as u64]));
                let x_bar = Matrix::zeros(it.x.rows(), it.x.cols());
                let mut z = model.infer_planning(&x_bar, it, &mut rng);
                let schedule = fader_schedule(lo, hi, z.rows());
                for (t, &d) in schedule.iter().enumerate() {
                    z.set(t, dim, d);
                }
                let mut vals: [Vec<Vec<f64>>; 3] = Default::default();
                for _ in 0..cfg.n_samples {
                    let x = model.generate(&z, it, &mut rng);
                    let k = n2c(&x, &it.input.partition).expect("generated shapes match");
                    for (a, v) in vals.iter_mut().enumerate() {
                        v.push(k.col(a));
                    }
                }
                let others: Vec<usize> = (0..NUM_ATTRS).filter(|&b| b != attr).collect();
                [
                    consistency(&vals[attr]),
                    restrictiveness(&vals[others[0]], &vals[others[1]]),
                    linearity(&schedule, &vals[attr]),
                ]
            })
            .collect();
        let n = per_item.len() as f64;
        out.consistency[attr] = per_item.iter().map(|v| v[0]).sum::<f64>() / n;
        out.restrictiveness[attr] = per_item.iter().map(|v| v[1]).sum::<f64>() / n;
        out.linearity[attr] = per_item.iter().map(|v| v[2]).sum::<f64>() / n;
    }
    let avg = |v: &[f64; 3]| v.iter().sum::<f64>() / 3.0;
    out.mean = [avg(&out.consistency), avg(&out.restrictiveness), avg(&out.linearity)];
    out
}

/// A fader model that writes each attribute's fader value straight into
/// that attribute: the ideal case of the protocol.
pub struct PerfectFader;

impl FaderModel for PerfectFader {
    fn infer_planning(&self, x: &Matrix, item: &TrainItem, _: &mut ChaCha8Rng) -> Matrix {
        n2c(x, &item.input.partition).expect("consistent shapes")
    }

    fn generate(&self, z_pln: &Matrix, item: &TrainItem, _: &mut ChaCha8Rng) -> Matrix {
        c2n(z_pln, &item.input.partition).expect("consistent shapes")
    }

    fn fader_dim(&self, attr: usize) -> usize {
        attr
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PearsonReport {
    pub r_recon: Stat,
    pub r_pln: Stat,
    pub r_pln0: Stat,
    /// Zero-variance attribute sequences scored as 0.
    pub zero_variance: usize,
}

/// Correlations of reconstructions and generations with the human
/// performance, per excerpt and repeat.
pub fn pearson_suite(model: &SeqCvae, items: &[TrainItem], repeats: usize, seed: u64) -> PearsonReport {
    let per: Vec<Vec<([f64; 3], usize)>> = items
        .par_iter()
        .enumerate()
        .map(|(i, it)| {
            let mut rng = seeded_rng(derive_seed(&[seed, 20, i as u64]));
            let zeros = Matrix::zeros(it.x.rows(), it.x.cols());
            (0..repeats)
                .map(|_| {
                    let (post_pln, post_str) = model.infer(&it.x, &it.input).expect("consistent shapes");
                    let z_pln = match post_pln {
                        Some(p) => p.reparameterize(&mut rng),
                        None => it.signals.i_pln.clone(),
                    };
                    let z_str = post_str.reparameterize(&mut rng);
                    let recon = model.generate(&z_pln, &z_str, &it.input, Some(&it.x)).expect("consistent shapes").0;
                    let gen = model.generate_with_prior(&z_pln, &it.input, &mut rng, None).expect("consistent shapes");
                    let z0 = planning_code(model, &zeros, it, &mut rng, false);
                    let gen0 = model.generate_with_prior(&z0, &it.input, &mut rng, None).expect("consistent shapes");
                    let (a, fa) = attribute_correlation(&recon, &it.x);
                    let (b, fb) = attribute_correlation(&gen, &it.x);
                    let (c, fc) = attribute_correlation(&gen0, &it.x);
                    ([a, b, c], fa + fb + fc)
                })
                .collect()
        })
        .collect();
    let flat: Vec<&([f64; 3], usize)> = per.iter().flatten().collect();
    let col = |j: usize| Stat::of(&flat.iter().map(|v| v.0[j]).collect::<Vec<_>>());
    PearsonReport { r_recon: col(0), r_pln: col(1), r_pln0: col(2), zero_variance: flat.iter().map(|v| v.1).sum() }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Disentanglement {
    pub mse_p: Stat,
    pub mse_s: Stat,
}

/// MSE of the refitted planning contour of a generation against the
/// excerpt's planning signal.
pub fn planning_error(x_pln: &Matrix, item: &TrainItem, degree: usize) -> f64 {
    let k = n2c(x_pln, &item.input.partition).expect("consistent shapes");
    let fit = fit_planning_signal(&k, degree).i_pln;
    fit.zip_map(&item.signals.i_pln, |a, b| (a - b) * (a - b)).mean()
}

/// Chordwise MSE of a generation against the structural residual `k - I_pln`.
pub fn structure_error(x_str: &Matrix, item: &TrainItem) -> f64 {
    let k = n2c(x_str, &item.input.partition).expect("consistent shapes");
    let mut target = item.k.clone();
    target.add_assign(&item.signals.i_pln.map(|v| -v));
    k.zip_map(&target, |a, b| (a - b) * (a - b)).mean()
}

pub fn disentanglement_suite(model: &SeqCvae, items: &[TrainItem], repeats: usize, seed: u64) -> Disentanglement {
    let degree = model.config().degree;
    let per: Vec<Vec<(f64, f64)>> = items
        .par_iter()
        .enumerate()
        .map(|(i, it)| {
            let mut rng = seeded_rng(derive_seed(&[seed, 30, i as u64]));
            let zeros = Matrix::zeros(it.x.rows(), it.x.cols());
            (0..repeats)
                .map(|_| {
                    let z_pln = planning_code(model, &it.x, it, &mut rng, false);
                    let x_pln = model.generate_with_prior(&z_pln, &it.input, &mut rng, None).expect("consistent shapes");
                    let z0 = planning_code(model, &zeros, it, &mut rng, false);
                    let (_, post_str) = model.infer(&it.x, &it.input).expect("consistent shapes");
                    let z_str = post_str.reparameterize(&mut rng);
                    let x_str = model.generate(&z0, &z_str, &it.input, None).expect("consistent shapes").0;
                    (planning_error(&x_pln, it, degree), structure_error(&x_str, it))
                })
                .collect()
        })
        .collect();
    let flat: Vec<&(f64, f64)> = per.iter().flatten().collect();
    Disentanglement {
        mse_p: Stat::of(&flat.iter().map(|v| v.0).collect::<Vec<_>>()),
        mse_s: Stat::of(&flat.iter().map(|v| v.1).collect::<Vec<_>>()),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub kld_p: Stat,
    pub kld_s: Stat,
}

/// Mean per-timestep KL of each posterior against its prior, over excerpts.
/// The structure prior is evaluated along a posterior sample.
pub fn kld_suite(model: &SeqCvae, items: &[TrainItem], seed: u64) -> KlReport {
    let per: Vec<(Option<f64>, f64)> = items
        .par_iter()
        .enumerate()
        .map(|(i, it)| {
            let mut rng = seeded_rng(derive_seed(&[seed, 40, i as u64]));
            let (post_pln, post_str) = model.infer(&it.x, &it.input).expect("consistent shapes");
            let c = it.steps() as f64;
            let z_str = post_str.reparameterize(&mut rng);
            let prior = model.prior_params(&z_str, &it.input);
            (post_pln.map(|p| p.kl(None) / c), post_str.kl(Some(&prior)) / c)
        })
        .collect();
    KlReport {
        kld_p: Stat::of(&per.iter().filter_map(|v| v.0).collect::<Vec<_>>()),
        kld_s: Stat::of(&per.iter().map(|v| v.1).collect::<Vec<_>>()),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    pub repeats: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { repeats: DEFAULT_SAMPLES, n_samples: DEFAULT_SAMPLES, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub excerpts: usize,
    pub pearson: PearsonReport,
    pub disentanglement: Disentanglement,
    pub controllability: Controllability,
    pub kl: KlReport,
}

pub fn evaluate(model: &SeqCvae, items: &[TrainItem], cfg: EvalConfig) -> EvalReport {
    EvalReport {
        excerpts: items.len(),
        pearson: pearson_suite(model, items, cfg.repeats, cfg.seed),
        disentanglement: disentanglement_suite(model, items, cfg.repeats, cfg.seed),
        controllability: controllability_suite(model, items, ControlConfig { n_samples: cfg.n_samples, seed: cfg.seed }),
        kl: kld_suite(model, items, cfg.seed),
    }
}

fn pm(s: &Stat) -> String {
    format!("{:.4} ± {:.4}", s.mean, s.std)
}

impl EvalReport {
    /// Plain-text tables in the layout of the paper's result tables.
    pub fn to_table(&self) -> String {
        let p = &self.pearson;
        let d = &self.disentanglement;
        let c = &self.controllability;
        let mut s = String::new();
        s.push_str(&format!("excerpts: {}\n\n", self.excerpts));
        s.push_str(&format!("{:<10} {:<20} {:<20} {:<20}\n", "", "R_recon", "R_x|pln", "R_x|pln0"));
        s.push_str(&format!("{:<10} {:<20} {:<20} {:<20}\n\n", "model", pm(&p.r_recon), pm(&p.r_pln), pm(&p.r_pln0)));
        s.push_str(&format!("{:<10} {:<20} {:<20}\n", "", "MSE_p", "MSE_s"));
        s.push_str(&format!("{:<10} {:<20} {:<20}\n\n", "model", pm(&d.mse_p), pm(&d.mse_s)));
        s.push_str(&format!("{:<14} {:>8} {:>8} {:>8}\n", "attribute", "C", "R", "L"));
        for (a, name) in ["velocity", "tempo", "articulation"].iter().enumerate() {
            s.push_str(&format!(
                "{:<14} {:>8.4} {:>8.4} {:>8.4}\n",
                name, c.consistency[a], c.restrictiveness[a], c.linearity[a]
            ));
        }
        s.push_str(&format!("{:<14} {:>8.4} {:>8.4} {:>8.4}\n\n", "mean", c.mean[0], c.mean[1], c.mean[2]));
        s.push_str(&format!("{:<10} {:<20} {:<20}\n", "", "KLD_p", "KLD_s"));
        s.push_str(&format!("{:<10} {:<20} {:<20}\n", "model", pm(&self.kl.kld_p), pm(&self.kl.kld_s)));
        s
    }
}

// ---- listening test ----

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListeningRow {
    pub participant: String,
    pub group: String,
    pub trial: u32,
    pub model: String,
    pub beat_plain: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRates {
    pub model: String,
    pub winning: Stat,
    pub top_ranking: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    /// "T", "UT" or "all".
    pub group: String,
    pub participants: usize,
    pub models: Vec<ModelRates>,
}

pub fn parse_listening_csv(r: impl Read) -> Result<Vec<ListeningRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<ListeningRow>().enumerate() {
        let line = i + 2;
        let row = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if row.group != "T" && row.group != "UT" {
            return Err(Error::Parse { line, msg: format!("group must be T or UT, got {:?}", row.group) });
        }
        if row.beat_plain > 1 {
            return Err(Error::Parse { line, msg: "beat_plain must be 0 or 1".into() });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Winning rates (wins / trials per participant and model, then mean ± std
/// over participants) and top-ranking rates (each participant splits one
/// credit among the models with the most wins) per group and overall.
pub fn listening_report(rows: &[ListeningRow]) -> Vec<GroupRates> {
    // participant -> (group, model -> (wins, trials))
    let mut tally: BTreeMap<&str, (&str, BTreeMap<&str, (u32, u32)>)> = BTreeMap::new();
    for r in rows {
        let e = tally.entry(&r.participant).or_insert((&r.group, BTreeMap::new()));
        let m = e.1.entry(&r.model).or_insert((0, 0));
        m.0 += r.beat_plain as u32;
        m.1 += 1;
    }
    let models: Vec<&str> = {
        let mut m: Vec<&str> = rows.iter().map(|r| r.model.as_str()).collect();
        m.sort_unstable();
        m.dedup();
        m
    };
    let mut out = Vec::new();
    for group in ["T", "UT", "all"] {
        let members: Vec<_> = tally.values().filter(|(g, _)| group == "all" || *g == group).collect();
        if members.is_empty() {
            continue;
        }
        let mut credit: BTreeMap<&str, f64> = BTreeMap::new();
        for (_, per) in &members {
            let best = per.values().map(|v| v.0).max().unwrap_or(0);
            let top: Vec<&&str> = per.iter().filter(|(_, v)| v.0 == best).map(|(m, _)| m).collect();
            for m in &top {
                *credit.entry(m).or_default() += 1.0 / top.len() as f64;
            }
        }
        let rates = models
            .iter()
            .map(|m| {
                let w: Vec<f64> =
                    members.iter().filter_map(|(_, per)| per.get(m)).map(|&(wins, n)| wins as f64 / n as f64).collect();
                ModelRates {
                    model: m.to_string(),
                    winning: Stat::of(&w),
                    top_ranking: credit.get(m).copied().unwrap_or(0.0) / members.len() as f64,
                }
            })
            .collect();
        out.push(GroupRates { group: group.to_string(), participants: members.len(), models: rates });
    }
    out
}

pub fn listening_table(groups: &[GroupRates]) -> String {
    let mut s = format!("{:<6} {:<14} {:<20} {:>10}\n", "group", "model", "winning rate", "top rate");
    for g in groups {
        for m in &g.models {
            s.push_str(&format!("{:<6} {:<14} {:<20} {:>10.4}\n", g.group, m.model, pm(&m.winning), m.top_ranking));
        }
    }
    s
}
