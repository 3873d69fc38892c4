//! Synthetic aligned pieces with known planning curves and structure
//! residuals.
//!
//! Every piece gets a random 16th-grid score and, per attribute, a random
//! polynomial planning curve over normalized chord position. A fixed rule
//! set adds structure:
//!
//! * velocity: `downbeat_boost` on downbeat notes plus `pitch_tilt` times
//!   the pitch offset from middle C in octaves;
//! * tempo: `phrase_end_lengthening` on the IOI leading into each downbeat;
//! * articulation: `articulation_gain` on top-voice notes and half of it,
//!   negated, on the others.
//!
//! The chordwise mean of the rule residual is projected onto the orthogonal
//! complement of the planning polynomials (and of the first chord, whose IOI
//! is fixed), and the correction is shared by every note of the chord. The
//! polynomial fit of the chordwise features therefore returns the planning
//! curve exactly and the sign of the remainder is the structure direction.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hier::n2c;
use crate::notedata::{
    group_chords, invert_features, io::write_note_file, AlignedPiece, ChordPartition, ScoreNote, Staff, ATTR_TEMPO,
    NUM_ATTRS,
};
use crate::regularizers::{chord_positions, poly_eval, polyfit};
use crate::seqcvae::{seeded_rng, standard_normal};
use crate::tensor::Matrix;
use crate::trainer::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub pieces: usize,
    pub chords_min: usize,
    pub chords_max: usize,
    pub notes_min: usize,
    pub notes_max: usize,
    pub degree: usize,
    /// Planning curves are scaled to `max |p(t)| <= planning_amplitude`.
    pub planning_amplitude: f64,
    pub downbeat_boost: f64,
    pub pitch_tilt: f64,
    pub phrase_end_lengthening: f64,
    pub articulation_gain: f64,
    pub noise: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            pieces: 200,
            chords_min: 16,
            chords_max: 32,
            notes_min: 1,
            notes_max: 4,
            degree: 4,
            planning_amplitude: 0.5,
            downbeat_boost: 0.2,
            pitch_tilt: 0.1,
            phrase_end_lengthening: 0.2,
            articulation_gain: 0.2,
            noise: 0.0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        if self.chords_min < 2 || self.chords_min > self.chords_max {
            return bad("chord range must be non-empty with at least 2 chords");
        }
        if self.notes_min < 1 || self.notes_min > self.notes_max || self.notes_max > 4 {
            return bad("notes per chord must lie within 1..=4");
        }
        if self.degree > 4 {
            return bad("planning degree must be at most 4");
        }
        if self.pieces == 0 {
            return bad("piece count must be positive");
        }
        if !(self.planning_amplitude >= 0.0) {
            return bad("planning amplitude must be non-negative");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}

/// Ground truth of one generated piece.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub piece_id: String,
    /// Per attribute, ascending-power planning coefficients.
    pub planning_coeffs: Vec<Vec<f64>>,
    /// Planning curve at each chord, C x 3.
    pub planning: Matrix,
    /// Chordwise structure residual, C x 3.
    pub residual: Matrix,
    /// Notewise normalized features the performance was built from.
    pub x: Matrix,
}

#[derive(Clone, Debug)]
pub struct World {
    pub pieces: Vec<AlignedPiece>,
    pub truth: Vec<GroundTruth>,
}

const IOI_CHOICES: [i64; 6] = [2, 4, 4, 4, 8, 8];

fn random_score(rng: &mut impl Rng, spec: &WorldSpec) -> Vec<ScoreNote> {
    let chords = rng.gen_range(spec.chords_min..=spec.chords_max);
    let meter_beats: u32 = if rng.gen_bool(0.25) { 3 } else { 4 };
    let measure = meter_beats as i64 * 4;
    let mut onset = 0i64;
    let mut notes = Vec::new();
    for _ in 0..chords {
        let ioi = IOI_CHOICES[rng.gen_range(0..IOI_CHOICES.len())];
        let count = rng.gen_range(spec.notes_min..=spec.notes_max);
        let mut pitch = rng.gen_range(43u8..=67);
        for _ in 0..count {
            notes.push(ScoreNote {
                onset_16ths: onset,
                dur_16ths: ioi,
                pitch,
                staff: if pitch < 60 { Staff::Bass } else { Staff::Treble },
                meter_beats,
                measure_pos_16ths: onset % measure,
            });
            pitch += rng.gen_range(3u8..=7);
        }
        onset += ioi;
    }
    notes
}

fn planning_curve(rng: &mut impl Rng, spec: &WorldSpec, pinned_start: bool) -> Vec<f64> {
    let p = spec.degree + 1;
    let nodes: Vec<f64> = if spec.degree == 0 { vec![0.0] } else { (0..p).map(|i| i as f64 / spec.degree as f64).collect() };
    let values: Vec<f64> = (0..p)
        .map(|i| if pinned_start && i == 0 { 0.0 } else { rng.gen_range(-1.0..=1.0) })
        .collect();
    let mut coeffs = polyfit(&nodes, &values, spec.degree);
    if pinned_start {
        coeffs[0] = 0.0;
    }
    let peak = (0..=200).map(|i| poly_eval(&coeffs, i as f64 / 200.0).abs()).fold(0.0, f64::max);
    if peak > 0.0 {
        let s = spec.planning_amplitude / peak;
        coeffs.iter_mut().for_each(|c| *c *= s);
    }
    coeffs
}

/// Projects a chordwise column onto the orthogonal complement of
/// span(e_0, 1, t, ..., t^degree).
fn project_out_planning(r: &[f64], degree: usize) -> Vec<f64> {
    let c = r.len();
    let t = chord_positions(c);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut e0 = vec![0.0; c];
    e0[0] = 1.0;
    let mut cands = vec![e0];
    for j in 0..=degree.min(c.saturating_sub(1)) {
        cands.push(t.iter().map(|v| v.powi(j as i32)).collect());
    }
    // modified Gram-Schmidt
    for mut v in cands {
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-10 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut out = r.to_vec();
    for b in &basis {
        let d: f64 = out.iter().zip(b).map(|(x, y)| x * y).sum();
        out.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
    }
    out
}

/// Notewise rule residual before projection.
fn rule_residual(score: &[ScoreNote], p: &ChordPartition, spec: &WorldSpec) -> Matrix {
    let mut r = Matrix::zeros(score.len(), NUM_ATTRS);
    for (c, g) in p.groups().iter().enumerate() {
        let top = *g.iter().max_by_key(|&&i| score[i].pitch).expect("non-empty chord");
        for &i in g {
            let s = &score[i];
            let downbeat = s.measure_pos_16ths == 0;
            let vel = if downbeat { spec.downbeat_boost } else { 0.0 } + spec.pitch_tilt * (s.pitch as f64 - 60.0) / 12.0;
            let tempo = if c > 0 && downbeat { spec.phrase_end_lengthening } else { 0.0 };
            let art = if i == top { spec.articulation_gain } else { -spec.articulation_gain / 2.0 };
            r.row_mut(i).copy_from_slice(&[vel, tempo, art]);
        }
    }
    r
}

fn generate_piece(spec: &WorldSpec, index: usize) -> Result<(AlignedPiece, GroundTruth)> {
    let mut rng = seeded_rng(derive_seed(&[spec.seed, index as u64]));
    let id = format!("synth_{index:04}");
    let score = random_score(&mut rng, spec);
    let p = group_chords(&score)?;
    let c = p.num_chords();
    let t = chord_positions(c);
    let coeffs: Vec<Vec<f64>> = (0..NUM_ATTRS).map(|a| planning_curve(&mut rng, spec, a == ATTR_TEMPO)).collect();
    let mut planning = Matrix::zeros(c, NUM_ATTRS);
    for (a, co) in coeffs.iter().enumerate() {
        for (r, &tr) in t.iter().enumerate() {
            planning.set(r, a, poly_eval(co, tr));
        }
    }
    let mut note_res = rule_residual(&score, &p, spec);
    let chord_res = n2c(&note_res, &p)?;
    let mut residual = Matrix::zeros(c, NUM_ATTRS);
    for a in 0..NUM_ATTRS {
        let proj = project_out_planning(&chord_res.col(a), spec.degree);
        for (r, v) in proj.into_iter().enumerate() {
            residual.set(r, a, v);
        }
    }
    for (i, &ch) in p.note_chords().iter().enumerate() {
        for a in 0..NUM_ATTRS {
            let shift = residual.get(ch, a) - chord_res.get(ch, a);
            note_res.set(i, a, note_res.get(i, a) + shift);
        }
    }
    let noise = standard_normal(score.len(), NUM_ATTRS, &mut rng);
    let mut x = Matrix::zeros(score.len(), NUM_ATTRS);
    for (i, &ch) in p.note_chords().iter().enumerate() {
        for a in 0..NUM_ATTRS {
            let v = if ch == 0 && a == ATTR_TEMPO {
                0.0
            } else {
                planning.get(ch, a) + note_res.get(i, a) + spec.noise * noise.get(i, a)
            };
            x.set(i, a, v.clamp(-1.0, 1.0));
        }
    }
    let perf = invert_features(&x, &score, &p)?;
    let piece = AlignedPiece::new(id.clone(), score.into_iter().zip(perf).collect())?;
    Ok((piece, GroundTruth { piece_id: id, planning_coeffs: coeffs, planning, residual, x }))
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let (pieces, truth) = (0..spec.pieces).map(|i| generate_piece(spec, i)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
    Ok(World { pieces, truth })
}

/// Writes `notes.jsonl` and one `truth/<piece_id>.json` per piece.
pub fn write_world(world: &World, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("truth"))?;
    write_note_file(dir.join("notes.jsonl"), &world.pieces)?;
    for t in &world.truth {
        let f = std::fs::File::create(dir.join("truth").join(format!("{}.json", t.piece_id)))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notedata::extract_performance_features;
    use crate::regularizers::{fit_planning_signal, structure_signal};

    fn small(noise: f64) -> WorldSpec {
        WorldSpec { pieces: 6, noise, ..WorldSpec::default() }
    }

    #[test]
    fn planning_recovered_without_noise() {
        let w = generate_world(&small(0.0)).unwrap();
        for (piece, truth) in w.pieces.iter().zip(&w.truth) {
            let p = group_chords(&piece.score).unwrap();
            let x = extract_performance_features(piece, &p).unwrap().x;
            assert!(x.max_abs_diff(&truth.x) < 1e-9);
            let k = n2c(&x, &p).unwrap();
            let fit = fit_planning_signal(&k, 4);
            assert!(fit.i_pln.max_abs_diff(&truth.planning) < 1e-6);
            for (a, co) in truth.planning_coeffs.iter().enumerate() {
                for (u, v) in co.iter().zip(&fit.coeffs[a]) {
                    assert!((u - v).abs() < 1e-6, "{u} vs {v} attr {a}");
                }
            }
            let s = structure_signal(&k, &fit.i_pln);
            for r in 0..k.rows() {
                for a in 0..3 {
                    let res = truth.residual.get(r, a);
                    if res.abs() > 1e-6 {
                        assert_eq!(s.get(r, a), res.signum());
                    }
                }
            }
        }
    }

    #[test]
    fn flat_world_reproduces_planning() {
        let spec = WorldSpec { downbeat_boost: 0.0, pitch_tilt: 0.0, phrase_end_lengthening: 0.0, articulation_gain: 0.0, ..small(0.0) };
        let w = generate_world(&spec).unwrap();
        for (piece, truth) in w.pieces.iter().zip(&w.truth) {
            let p = group_chords(&piece.score).unwrap();
            let k = n2c(&extract_performance_features(piece, &p).unwrap().x, &p).unwrap();
            assert!(k.max_abs_diff(&truth.planning) < 1e-9);
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = generate_world(&small(0.05)).unwrap();
        let b = generate_world(&small(0.05)).unwrap();
        assert_eq!(a.pieces, b.pieces);
        for piece in &a.pieces {
            assert!(piece.perf.iter().all(|n| (24.0..=104.0).contains(&n.velocity) && n.duration > 0.0));
        }
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(generate_world(&WorldSpec { noise: -1.0, ..small(0.0) }).is_err());
        assert!(generate_world(&WorldSpec { notes_max: 5, ..small(0.0) }).is_err());
        assert!(WorldSpec::from_toml("pieces = 3\nseed = 4\n").unwrap().pieces == 3);
    }
}
