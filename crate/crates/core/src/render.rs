//! Rendering from a trained model: sampled performances, smooth sketches
//! written into the planning code, and sliding-fader sweeps.

use std::io::Read;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hier::n2c;
use crate::notedata::{
    extract_score_features, group_chords, invert_features, ChordPartition, PerfNote, ScoreFeatures, ScoreNote, NUM_ATTRS,
};
use crate::regularizers::{chord_positions, fit_planning_signal};
use crate::seqcvae::{truncated_normal, Arch, ModelInput, SeqCvae};
use crate::tensor::Matrix;

pub const ATTR_NAMES: [&str; NUM_ATTRS] = ["vel", "tempo", "art"];

/// Parses `vel`, `tempo` or `art` (long names accepted).
pub fn parse_attr(s: &str) -> Result<usize> {
    match s {
        "vel" | "velocity" | "dynamics" => Ok(0),
        "tempo" | "ioi" => Ok(1),
        "art" | "articulation" => Ok(2),
        _ => Err(Error::Config(format!("unknown attribute '{s}' (expected vel, tempo or art)"))),
    }
}

/// A score prepared for one architecture.
#[derive(Clone, Debug)]
pub struct ScoreContext {
    pub id: String,
    pub score: Vec<ScoreNote>,
    /// Real chord grouping, used for timing inversion and chordwise output.
    pub chords: ChordPartition,
    pub y: ScoreFeatures,
    /// Model input: chords, or one step per note without hierarchy.
    pub input: ModelInput,
}

impl ScoreContext {
    /// `score` must already be sorted by onset, then pitch.
    pub fn new(id: impl Into<String>, score: Vec<ScoreNote>, arch: Arch) -> Result<Self> {
        let chords = group_chords(&score)?;
        let y = extract_score_features(&score, &chords);
        let steps = if arch.uses_chords() { chords.clone() } else { ChordPartition::singletons(score.len()) };
        let input = ModelInput::new(&y, steps)?;
        Ok(Self { id: id.into(), score, chords, y, input })
    }

    pub fn steps(&self) -> usize {
        self.input.num_chords()
    }

    /// Normalized chord position `c / (C - 1)` of every model step.
    pub fn step_positions(&self) -> Vec<f64> {
        let chord_t = chord_positions(self.chords.num_chords());
        if self.steps() == self.chords.num_chords() {
            chord_t
        } else {
            self.chords.note_chords().iter().map(|&c| chord_t[c]).collect()
        }
    }

    /// Chordwise features `n2c(x)` over the real chords.
    pub fn chordwise(&self, x: &Matrix) -> Result<Matrix> {
        n2c(x, &self.chords)
    }

    pub fn perform(&self, x: &Matrix) -> Result<Vec<PerfNote>> {
        invert_features(x, &self.score, &self.chords)
    }
}

/// A planning code drawn from the truncated standard-normal prior. The
/// signal-conditioned architecture has no prior; it gets a flat signal.
pub fn sample_planning(model: &SeqCvae, steps: usize, rng: &mut impl Rng) -> Matrix {
    let cfg = model.config();
    if cfg.arch.has_planning_latent() {
        truncated_normal(steps, cfg.planning_width(), cfg.truncation, rng)
    } else {
        Matrix::zeros(steps, cfg.planning_width())
    }
}

/// Free-run generation from truncated prior samples of both latents.
pub fn render_sample(model: &SeqCvae, ctx: &ScoreContext, rng: &mut impl Rng) -> Result<Matrix> {
    let z_pln = sample_planning(model, ctx.steps(), rng);
    model.generate_with_prior(&z_pln, &ctx.input, rng, Some(model.config().truncation))
}

/// Sketch curves per attribute: `(position, value)` points sorted by
/// position. Attributes without points are left to the sampled code.
pub type Curves = [Vec<(f64, f64)>; NUM_ATTRS];

/// Reads `attr,position,value` rows.
pub fn parse_curves(r: impl Read) -> Result<Curves> {
    let mut reader = csv::Reader::from_reader(r);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["attr", "position", "value"] {
        return Err(Error::Parse { line: 1, msg: "expected header attr,position,value".into() });
    }
    let mut curves: Curves = Default::default();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |msg: String| Error::Parse { line, msg };
        let attr = parse_attr(&rec[0]).map_err(|e| bad(e.to_string()))?;
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("'{s}': {e}")));
        let (pos, val) = (num(&rec[1])?, num(&rec[2])?);
        if !(0.0..=1.0).contains(&pos) {
            return Err(bad(format!("position {pos} outside [0, 1]")));
        }
        if !(-1.0..=1.0).contains(&val) {
            return Err(bad(format!("value {val} outside [-1, 1]")));
        }
        curves[attr].push((pos, val));
    }
    for c in &mut curves {
        c.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(curves)
}

/// Piecewise-linear interpolation, constant beyond the end points.
pub fn interpolate(points: &[(f64, f64)], t: f64) -> f64 {
    let first = points[0];
    let last = points[points.len() - 1];
    if t <= first.0 {
        return first.1;
    }
    if t >= last.0 {
        return last.1;
    }
    let j = points.partition_point(|p| p.0 <= t);
    let (a, b) = (points[j - 1], points[j]);
    if b.0 == a.0 {
        b.1
    } else {
        a.1 + (t - a.0) / (b.0 - a.0) * (b.1 - a.1)
    }
}

#[derive(Clone, Debug)]
pub struct Sketch {
    /// Sketch values per step and attribute (NaN where no curve was given).
    pub alpha: Matrix,
    pub z_pln: Matrix,
    pub x: Matrix,
}

/// Writes interpolated curve values into the fader dimensions of a
/// truncated-sampled planning code and renders it.
pub fn sketch(model: &SeqCvae, ctx: &ScoreContext, curves: &Curves, rng: &mut impl Rng) -> Result<Sketch> {
    let t = ctx.step_positions();
    let mut z_pln = sample_planning(model, ctx.steps(), rng);
    let mut alpha = Matrix::filled(ctx.steps(), NUM_ATTRS, f64::NAN);
    for (a, pts) in curves.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let dim = model.config().fader_dim(a);
        for (s, &ts) in t.iter().enumerate() {
            let v = interpolate(pts, ts);
            alpha.set(s, a, v);
            z_pln.set(s, dim, v);
        }
    }
    let x = model.generate_with_prior(&z_pln, &ctx.input, rng, Some(model.config().truncation))?;
    Ok(Sketch { alpha, z_pln, x })
}

/// Planning code of a performance: posterior mean, or the fitted planning
/// signal for the signal-conditioned architecture.
pub fn infer_planning(model: &SeqCvae, ctx: &ScoreContext, x: &Matrix) -> Result<Matrix> {
    let (post, _) = model.infer(x, &ctx.input)?;
    match post {
        Some(p) => Ok(p.mu),
        None => {
            let k = n2c(x, &ctx.input.partition)?;
            Ok(fit_planning_signal(&k, model.config().degree).i_pln)
        }
    }
}

#[derive(Clone, Debug)]
pub struct FaderStep {
    pub value: f64,
    pub x: Matrix,
}

/// Sliding-fader sweep: the planning code of `x` with the fader of `attr`
/// held at `steps` evenly spaced constants `lo + (j / steps)(hi - lo)`,
/// j = 1..=steps, each rendered with the same structure sample. Range ends
/// not given default to the minimum and maximum of the code's fader.
pub fn control_sweep(
    model: &SeqCvae,
    ctx: &ScoreContext,
    x: &Matrix,
    attr: usize,
    steps: usize,
    range: (Option<f64>, Option<f64>),
    rng: &mut impl Rng,
) -> Result<Vec<FaderStep>> {
    if steps == 0 {
        return Err(Error::Config("--steps must be positive".into()));
    }
    if let (Some(l), Some(h)) = range {
        if !(l.is_finite() && h.is_finite() && l < h) {
            return Err(Error::Config("fader range needs finite lo < hi".into()));
        }
    }
    let z = infer_planning(model, ctx, x)?;
    let dim = model.config().fader_dim(attr);
    let col = z.col(dim);
    let (mut lo, mut hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi - lo < 1e-6 {
        // a flat code gives no range; sweep one prior standard deviation
        lo -= 1.0;
        hi += 1.0;
    }
    let (lo, hi) = (range.0.unwrap_or(lo), range.1.unwrap_or(hi));
    let eps = truncated_normal(ctx.steps(), model.config().d_str, model.config().truncation, rng);
    let z_str = model.sample_prior(&ctx.input, &eps);
    (1..=steps)
        .map(|j| {
            let value = lo + (j as f64 / steps as f64) * (hi - lo);
            let mut zj = z.clone();
            for r in 0..zj.rows() {
                zj.set(r, dim, value);
            }
            let (x, _) = model.generate(&zj, &z_str, &ctx.input, None)?;
            Ok(FaderStep { value, x })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_is_linear_and_clamped() {
        let p = [(0.0, -1.0), (0.5, 1.0), (1.0, 0.0)];
        assert_eq!(interpolate(&p, 0.25), 0.0);
        assert_eq!(interpolate(&p, 0.75), 0.5);
        assert_eq!(interpolate(&[(0.2, 0.3)], 0.9), 0.3);
        assert_eq!(interpolate(&p, -1.0), -1.0);
    }

    #[test]
    fn curves_parse_and_validate() {
        let c = parse_curves("attr,position,value\nvel,1,0.5\nvel,0,0\ntempo,0.5,-0.2\n".as_bytes()).unwrap();
        assert_eq!(c[0], vec![(0.0, 0.0), (1.0, 0.5)]);
        assert_eq!(c[1], vec![(0.5, -0.2)]);
        assert!(c[2].is_empty());
        let err = parse_curves("attr,position,value\nvel,0,0\nart,2,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        assert!(parse_curves("attr,position,value\nloud,0,0\n".as_bytes()).is_err());
        assert!(parse_curves("a,b\n".as_bytes()).is_err());
    }
}
