//! Self-supervised planning/structure signals and the regularization losses.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::notedata::NUM_ATTRS;
use crate::seqcvae::{Graph, ModelInput, PrevNote, SeqCvae};
use crate::tensor::Matrix;

/// Item cap per attribute for the pairwise monotonicity loss.
pub const REG_MAX_ITEMS: usize = 256;

/// Smoothed per-attribute contours of the chordwise features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanningSignal {
    /// C x 3.
    pub i_pln: Matrix,
    /// Per attribute, ascending-power coefficients.
    pub coeffs: Vec<Vec<f64>>,
    /// Degree actually used (lowered for short sequences).
    pub degree: usize,
}

/// Normalized positions `c / (C - 1)`, or `[0]` for a single chord.
pub fn chord_positions(c: usize) -> Vec<f64> {
    if c <= 1 {
        return vec![0.0; c];
    }
    (0..c).map(|i| i as f64 / (c - 1) as f64).collect()
}

pub fn poly_eval(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

/// Least squares polynomial fit via Householder QR on the Vandermonde
/// matrix. Ascending-power coefficients.
pub fn polyfit(t: &[f64], y: &[f64], degree: usize) -> Vec<f64> {
    assert_eq!(t.len(), y.len());
    assert!(t.len() > degree, "need more points than the degree");
    let p = degree + 1;
    let m = t.len();
    // column-major Vandermonde
    let mut a = vec![0.0; m * p];
    let mut b = vec![0.0; m];
    for (i, (&ti, &yi)) in t.iter().zip(y).enumerate() {
        let mut v = 1.0;
        for j in 0..p {
            a[j * m + i] = v;
            v *= ti;
        }
        b[i] = yi;
    }
    for k in 0..p {
        let col = &a[k * m..(k + 1) * m];
        let norm = col[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if col[k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = col[k..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..p {
            let cj = &mut a[j * m + k..(j + 1) * m];
            let dot: f64 = cj.iter().zip(&v).map(|(x, y)| x * y).sum();
            let f = 2.0 * dot / vnorm2;
            for (x, vi) in cj.iter_mut().zip(&v) {
                *x -= f * vi;
            }
        }
        let dot: f64 = b[k..].iter().zip(&v).map(|(x, y)| x * y).sum();
        let f = 2.0 * dot / vnorm2;
        for (x, vi) in b[k..].iter_mut().zip(&v) {
            *x -= f * vi;
        }
    }
    let mut coeffs = vec![0.0; p];
    for k in (0..p).rev() {
        let mut s = b[k];
        for j in k + 1..p {
            s -= a[j * m + k] * coeffs[j];
        }
        coeffs[k] = s / a[k * m + k];
    }
    coeffs
}

/// Per-attribute polynomial fit of `k` over normalized chord position. The
/// degree is lowered to `C - 1` when there are too few chords.
pub fn fit_planning_signal(k: &Matrix, degree: usize) -> PlanningSignal {
    let c = k.rows();
    let degree = degree.min(c.saturating_sub(1));
    let t = chord_positions(c);
    let mut i_pln = Matrix::zeros(c, k.cols());
    let mut coeffs = Vec::with_capacity(k.cols());
    for a in 0..k.cols() {
        let co = polyfit(&t, &k.col(a), degree);
        for (r, &tr) in t.iter().enumerate() {
            i_pln.set(r, a, poly_eval(&co, tr));
        }
        coeffs.push(co);
    }
    PlanningSignal { i_pln, coeffs, degree }
}

/// `sign(k - I_pln)` with exact zeros kept at 0.
pub fn structure_signal(k: &Matrix, i_pln: &Matrix) -> Matrix {
    k.zip_map(i_pln, |a, b| {
        let d = a - b;
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Both cached signals of one excerpt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signals {
    pub i_pln: Matrix,
    pub i_str: Matrix,
}

impl Signals {
    pub fn compute(k: &Matrix, degree: usize) -> Self {
        let i_pln = fit_planning_signal(k, degree).i_pln;
        let i_str = structure_signal(k, &i_pln);
        Self { i_pln, i_str }
    }
}

/// Mean over attributes of the MSE between column `a` of `outputs` and of
/// `target`.
pub fn attribute_mse(outputs: &Matrix, target: &Matrix) -> f64 {
    let c = target.rows() as f64;
    let per: f64 = (0..target.cols())
        .map(|a| (0..target.rows()).map(|r| (outputs.get(r, a) - target.get(r, a)).powi(2)).sum::<f64>() / c)
        .sum();
    per / target.cols() as f64
}

/// Planning regularizer on the tape: each sub-discriminator reads its block
/// and regresses the planning signal of its attribute.
pub fn loss_pln(model: &SeqCvae, g: &mut Graph, z_pln: Var, i_pln: &Matrix, frozen: bool) -> Var {
    let outs = model.discriminate_planning(g, z_pln, frozen);
    let terms: Vec<Var> = outs
        .iter()
        .enumerate()
        .map(|(a, &o)| {
            let target = g.constant(Matrix::column(&i_pln.col(a)));
            g.tape.mse(o, target)
        })
        .collect();
    let all = g.tape.concat_cols(&terms);
    g.tape.mean(all)
}

/// Structure regularizer: one discriminator predicts all three directions.
pub fn loss_str(model: &SeqCvae, g: &mut Graph, z_str: Var, i_str: &Matrix) -> Var {
    let o = model.discriminate_structure(g, z_str);
    let target = g.constant(i_str.clone());
    g.tape.mse(o, target)
}

/// Noise used by [`loss_fac`]: prior rollout noise (C x d_str) and the
/// re-encoding posterior noise (C x 12).
#[derive(Clone, Debug)]
pub struct FacNoise {
    pub prior: Matrix,
    pub pln: Matrix,
}

/// Factorization loss. `z_pln` is a posterior sample (held fixed); structure
/// latents come from a prior rollout, the decoder runs free, and its output
/// is re-encoded by the encoder and the planning discriminators bound as
/// constants, so only generator parameters receive gradient.
pub fn loss_fac(model: &SeqCvae, g: &mut Graph, z_pln: &Matrix, input: &ModelInput, i_pln: &Matrix, noise: &FacNoise) -> Option<Var> {
    if !model.config().arch.has_planning_latent() {
        return None;
    }
    let e_y = model.embed_score(g, input);
    let y_chd = g.tape.segment_mean(e_y, &input.partition);
    let (z_str, _) = model.prior_rollout(g, y_chd, &noise.prior);
    let zp = g.constant(z_pln.clone());
    let dec = model.decode(g, zp, z_str, y_chd, e_y, input, PrevNote::FreeRun);
    let post = model.encode_planning(g, dec.x_hat, input, true)?;
    let z_re = g.sample(post, noise.pln.clone());
    Some(loss_pln(model, g, z_re, i_pln, true))
}

/// Pairwise monotonicity loss for one attribute over all ordered pairs
/// `i != j`, with its gradient with respect to `d`.
pub fn pairwise_reg(d: &[f64], a: &[f64]) -> (f64, Vec<f64>) {
    let n = d.len();
    let mut grad = vec![0.0; n];
    if n < 2 {
        return (0.0, grad);
    }
    let pairs = (n * (n - 1)) as f64;
    let mut loss = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let t = (d[i] - d[j]).tanh();
            let s = sign(a[i] - a[j]);
            let r = t - s;
            // (i, j) and (j, i) contribute identical squares
            loss += 2.0 * r * r;
            let gi = 4.0 * r * (1.0 - t * t);
            grad[i] += gi;
            grad[j] -= gi;
        }
    }
    for g in &mut grad {
        *g /= pairs;
    }
    (loss / pairs, grad)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Monotonicity regularizer over pooled items. `d` and `attrs` are M x 3:
/// fader values and attribute values per item. Each attribute uses at most
/// `cap` items drawn uniformly without replacement. Returns the loss (mean
/// over attributes) and its gradient with respect to `d`.
pub fn loss_reg(d: &Matrix, attrs: &Matrix, cap: usize, rng: &mut impl Rng) -> (f64, Matrix) {
    let m = d.rows();
    let mut grad = Matrix::zeros(m, d.cols());
    let mut total = 0.0;
    for a in 0..d.cols() {
        let idx: Vec<usize> = if m > cap { sample(rng, m, cap).into_vec() } else { (0..m).collect() };
        let dv: Vec<f64> = idx.iter().map(|&i| d.get(i, a)).collect();
        let av: Vec<f64> = idx.iter().map(|&i| attrs.get(i, a)).collect();
        let (l, g) = pairwise_reg(&dv, &av);
        total += l;
        for (&i, gi) in idx.iter().zip(g) {
            grad.set(i, a, gi / d.cols() as f64);
        }
    }
    (total / d.cols() as f64, grad)
}

/// Gathers fader columns of a planning code: one column per attribute.
pub fn fader_columns(model: &SeqCvae, z_pln: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(z_pln.rows(), NUM_ATTRS);
    for a in 0..NUM_ATTRS {
        let col = model.config().fader_dim(a);
        for r in 0..z_pln.rows() {
            out.set(r, a, z_pln.get(r, col));
        }
    }
    out
}
