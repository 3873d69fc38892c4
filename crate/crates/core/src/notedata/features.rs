use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{
    AlignedPiece, ChordPartition, PerfNote, ScoreNote, Staff, MAX_VELOCITY, MIN_VELOCITY, REFERENCE_VELOCITY,
};

pub const ATTR_VELOCITY: usize = 0;
pub const ATTR_TEMPO: usize = 1;
pub const ATTR_ARTICULATION: usize = 2;
/// Number of expressive attributes (columns of `x`).
pub const NUM_ATTRS: usize = 3;
pub const NUM_SCORE_FEATURES: usize = 8;

/// Number of classes per score feature column, in column order: pitch,
/// relative duration, relative IOI, top voice, position in chord, chord
/// size, staff, downbeat.
pub const SCORE_CLASS_COUNTS: [usize; NUM_SCORE_FEATURES] = [88, 11, 11, 2, 11, 11, 2, 2];
const SCORE_CLASS_OFFSETS: [u8; NUM_SCORE_FEATURES] = [21, 1, 1, 0, 1, 1, 0, 0];

const IOI_RATIO_CLIP: (f64, f64) = (0.125, 8.0);
const ARTICULATION_CLIP: (f64, f64) = (0.25, 4.0);
const VELOCITY_SCALE: f64 = 40.0;
const IOI_SCALE: f64 = 3.0;
const ARTICULATION_SCALE: f64 = 2.0;

/// Notewise performance features, columns (velocity, IOI ratio, articulation).
#[derive(Clone, Debug, PartialEq)]
pub struct PerformanceFeatures {
    /// Normalized to [-1, 1].
    pub x: Matrix,
    /// Clipped velocity and log2 ratios before normalization.
    pub raw_x: Matrix,
    pub warnings: Vec<String>,
}

/// Notewise categorical score features; entries hold class values in their
/// natural ranges (pitch 21..=108, durations 1..=11, flags 0/1).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreFeatures {
    pub y: Vec<[u8; NUM_SCORE_FEATURES]>,
}

impl ScoreFeatures {
    /// Zero-based lookup-table index of each column.
    pub fn class_indices(&self, column: usize) -> Vec<usize> {
        self.y.iter().map(|row| (row[column] - SCORE_CLASS_OFFSETS[column]) as usize).collect()
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self { y: self.y[range].to_vec() }
    }

    pub fn in_range(&self) -> bool {
        self.y.iter().all(|row| {
            row.iter().enumerate().all(|(c, &v)| {
                let lo = SCORE_CLASS_OFFSETS[c] as usize;
                (lo..lo + SCORE_CLASS_COUNTS[c]).contains(&(v as usize))
            })
        })
    }
}

/// Raw (velocity, log2 IOI ratio, log2 articulation) to [-1, 1].
pub fn normalize(raw: [f64; 3]) -> [f64; 3] {
    [(raw[0] - REFERENCE_VELOCITY) / VELOCITY_SCALE, raw[1] / IOI_SCALE, raw[2] / ARTICULATION_SCALE]
}

pub fn denormalize(x: [f64; 3]) -> [f64; 3] {
    [x[0] * VELOCITY_SCALE + REFERENCE_VELOCITY, x[1] * IOI_SCALE, x[2] * ARTICULATION_SCALE]
}

fn chord_mean_onsets(perf: &[PerfNote], p: &ChordPartition) -> Vec<f64> {
    p.groups().iter().map(|g| g.iter().map(|&i| perf[i].onset).sum::<f64>() / g.len() as f64).collect()
}

fn clipped_log2(ratio: f64, clip: (f64, f64)) -> f64 {
    ratio.clamp(clip.0, clip.1).log2()
}

pub fn extract_performance_features(piece: &AlignedPiece, p: &ChordPartition) -> Result<PerformanceFeatures> {
    let n = piece.len();
    if p.num_notes() != n {
        return Err(Error::Shape(format!("partition covers {} notes, piece has {n}", p.num_notes())));
    }
    let score = &piece.score;
    let perf = &piece.perf;
    let means = chord_mean_onsets(perf, p);
    let chord_score_onset: Vec<f64> = p.groups().iter().map(|g| score[g[0]].onset_seconds()).collect();
    let last = p.num_chords() - 1;
    let mut warnings = Vec::new();
    let mut raw = Matrix::zeros(n, 3);

    for (c, g) in p.groups().iter().enumerate() {
        for &i in g {
            raw.set(i, 0, perf[i].velocity.clamp(MIN_VELOCITY, MAX_VELOCITY));
            let ioi = if c == 0 {
                0.0
            } else {
                let ratio = (perf[i].onset - means[c - 1]) / (chord_score_onset[c] - chord_score_onset[c - 1]);
                if ratio <= 0.0 {
                    warnings.push(format!("note {i}: non-positive performed IOI, clipped"));
                }
                clipped_log2(ratio, IOI_RATIO_CLIP)
            };
            raw.set(i, 1, ioi);
        }
    }
    for (c, g) in p.groups().iter().enumerate() {
        let last_scale = if c == last { mean_ioi_ratio(&raw, g) } else { 0.0 };
        for &i in g {
            let denom = if c == last {
                score[i].duration_seconds() * last_scale
            } else {
                means[c + 1] - perf[i].onset
            };
            if denom <= 0.0 {
                warnings.push(format!("note {i}: non-positive next-chord IOI, articulation clipped"));
            }
            let ratio = if denom > 0.0 { perf[i].duration / denom } else { 0.0 };
            raw.set(i, 2, clipped_log2(ratio, ARTICULATION_CLIP));
        }
    }
    for w in &warnings {
        log::warn!("piece {}: {w}", piece.id);
    }
    let mut x = Matrix::zeros(n, 3);
    for i in 0..n {
        let v = normalize([raw.get(i, 0), raw.get(i, 1), raw.get(i, 2)]);
        x.row_mut(i).copy_from_slice(&v);
    }
    Ok(PerformanceFeatures { x, raw_x: raw, warnings })
}

/// Mean linear IOI ratio of a chord, from the log2 column of `raw`.
fn mean_ioi_ratio(raw: &Matrix, group: &[usize]) -> f64 {
    group.iter().map(|&i| raw.get(i, 1).exp2()).sum::<f64>() / group.len() as f64
}

pub fn extract_score_features(score: &[ScoreNote], p: &ChordPartition) -> ScoreFeatures {
    let n = score.len();
    let mut y = vec![[0u8; NUM_SCORE_FEATURES]; n];
    let chord_onsets: Vec<i64> = p.groups().iter().map(|g| score[g[0]].onset_16ths).collect();
    for (c, g) in p.groups().iter().enumerate() {
        let rel_ioi = if c == 0 { 1 } else { (chord_onsets[c] - chord_onsets[c - 1]).clamp(1, 11) as u8 };
        let mut by_pitch: Vec<usize> = g.clone();
        by_pitch.sort_by_key(|&i| (score[i].pitch, i));
        for (rank, &i) in by_pitch.iter().enumerate() {
            let s = &score[i];
            let row = &mut y[i];
            row[0] = s.pitch;
            row[1] = s.dur_16ths.clamp(1, 11) as u8;
            row[2] = rel_ioi;
            row[3] = is_top_voice(score, i) as u8;
            row[4] = (rank + 1).min(11) as u8;
            row[5] = g.len().min(11) as u8;
            row[6] = match s.staff {
                Staff::Treble => 0,
                Staff::Bass => 1,
            };
            row[7] = (s.measure_pos_16ths == 0) as u8;
        }
    }
    ScoreFeatures { y }
}

/// A note is top voice iff no note sounding at its onset has a higher pitch.
fn is_top_voice(score: &[ScoreNote], i: usize) -> bool {
    let t = score[i].onset_16ths;
    let pitch = score[i].pitch;
    // notes are onset-sorted, so nothing after the current onset can sound at t
    score
        .iter()
        .take_while(|m| m.onset_16ths <= t)
        .filter(|m| m.onset_16ths + m.dur_16ths > t)
        .all(|m| m.pitch <= pitch)
}

/// Rebuilds performed notes from normalized features.
///
/// Chord 0 sits at its score time; every later note is placed relative to the
/// previous chord's mean performed onset. The first chord's IOI column is
/// ignored, matching the extraction rule that fixes it to zero.
pub fn invert_features(x: &Matrix, score: &[ScoreNote], p: &ChordPartition) -> Result<Vec<PerfNote>> {
    let n = score.len();
    if x.rows() != n || x.cols() != 3 || p.num_notes() != n {
        return Err(Error::Shape(format!("features {:?} for {n} notes", x.shape())));
    }
    let raw: Vec<[f64; 3]> = (0..n).map(|i| denormalize([x.get(i, 0), x.get(i, 1), x.get(i, 2)])).collect();
    let mut onsets = vec![0.0; n];
    let mut means = Vec::with_capacity(p.num_chords());
    for (c, g) in p.groups().iter().enumerate() {
        let s_c = score[g[0]].onset_seconds();
        for &i in g {
            onsets[i] = if c == 0 {
                s_c
            } else {
                let s_prev = score[p.groups()[c - 1][0]].onset_seconds();
                means[c - 1] + raw[i][1].exp2() * (s_c - s_prev)
            };
        }
        means.push(g.iter().map(|&i| onsets[i]).sum::<f64>() / g.len() as f64);
    }
    let last = p.num_chords() - 1;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let c = p.note_chords()[i];
        let denom = if c == last {
            let g = &p.groups()[c];
            let scale = if c == 0 { 1.0 } else { g.iter().map(|&j| raw[j][1].exp2()).sum::<f64>() / g.len() as f64 };
            score[i].duration_seconds() * scale
        } else {
            means[c + 1] - onsets[i]
        };
        out.push(PerfNote {
            onset: onsets[i],
            duration: raw[i][2].exp2() * denom,
            velocity: raw[i][0].clamp(MIN_VELOCITY, MAX_VELOCITY),
            score_index: i,
        });
    }
    Ok(out)
}

/// Plain rendering of a score: velocity 64, score timing at 120 BPM.
pub fn plain_performance(score: &[ScoreNote]) -> Vec<PerfNote> {
    score
        .iter()
        .enumerate()
        .map(|(i, s)| PerfNote {
            onset: s.onset_seconds(),
            duration: s.duration_seconds(),
            velocity: REFERENCE_VELOCITY,
            score_index: i,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notedata::group_chords;

    fn sn(onset: i64, dur: i64, pitch: u8) -> ScoreNote {
        ScoreNote { onset_16ths: onset, dur_16ths: dur, pitch, staff: Staff::Treble, meter_beats: 4, measure_pos_16ths: onset % 16 }
    }

    fn piece(score: Vec<ScoreNote>, perf: Vec<(f64, f64, f64)>) -> AlignedPiece {
        let pairs = score
            .into_iter()
            .zip(perf)
            .map(|(s, (o, d, v))| (s, PerfNote { onset: o, duration: d, velocity: v, score_index: 0 }))
            .collect();
        AlignedPiece::new("t", pairs).unwrap()
    }

    #[test]
    fn velocity_normalization_endpoints() {
        assert_eq!(normalize([64.0, 0.0, 0.0])[0], 0.0);
        assert_eq!(normalize([104.0, 0.0, 0.0])[0], 1.0);
        assert_eq!(normalize([24.0, 3.0, -2.0]), [-1.0, 1.0, -1.0]);
        let raw = [71.3, -0.7, 1.9];
        let back = denormalize(normalize(raw));
        for k in 0..3 {
            assert!((back[k] - raw[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn ioi_ratio_hand_value() {
        // score IOI is 4 sixteenths = 0.5 s; performed IOI 0.6 s
        let p = piece(vec![sn(0, 4, 60), sn(4, 4, 62)], vec![(0.0, 0.5, 64.0), (0.6, 0.5, 64.0)]);
        let part = group_chords(&p.score).unwrap();
        let f = extract_performance_features(&p, &part).unwrap();
        assert!((f.raw_x.get(1, 1) - 1.2f64.log2()).abs() < 1e-12);
        assert!((f.raw_x.get(1, 1) - 0.26303).abs() < 1e-5);
        assert!((f.x.get(1, 1) - 0.08768).abs() < 1e-5);
        assert_eq!(f.x.get(0, 1), 0.0);
    }

    #[test]
    fn ioi_ratio_clips_at_eight() {
        let p = piece(vec![sn(0, 4, 60), sn(4, 4, 62)], vec![(0.0, 0.5, 64.0), (10.0, 0.5, 64.0)]);
        let part = group_chords(&p.score).unwrap();
        let f = extract_performance_features(&p, &part).unwrap();
        assert_eq!(f.raw_x.get(1, 1), 3.0);
        assert_eq!(f.x.get(1, 1), 1.0);
    }

    #[test]
    fn negative_next_ioi_is_clipped_with_warning() {
        // the first note starts after the mean onset of the next chord
        let p = piece(vec![sn(0, 4, 60), sn(0, 4, 64), sn(4, 4, 62)], vec![(0.0, 0.5, 64.0), (0.9, 0.5, 64.0), (0.5, 0.4, 64.0)]);
        let part = group_chords(&p.score).unwrap();
        let f = extract_performance_features(&p, &part).unwrap();
        assert_eq!(f.raw_x.get(1, 2), -2.0);
        assert!(!f.warnings.is_empty());
    }

    #[test]
    fn relative_duration_classes() {
        let score = vec![sn(0, 4, 60), sn(4, 8, 62), sn(12, 32, 64)];
        let part = group_chords(&score).unwrap();
        let f = extract_score_features(&score, &part);
        assert_eq!(f.y[0][1], 4);
        assert_eq!(f.y[1][1], 8);
        assert_eq!(f.y[2][1], 11);
        assert_eq!(f.y[1][2], 4);
        assert_eq!(f.y[2][2], 8);
        assert!(f.in_range());
    }

    #[test]
    fn chord_position_counts_from_bottom() {
        let score = vec![sn(0, 4, 48), sn(0, 4, 60), sn(0, 4, 72)];
        let part = group_chords(&score).unwrap();
        let f = extract_score_features(&score, &part);
        assert_eq!(f.y.iter().map(|r| r[4]).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(f.y.iter().all(|r| r[5] == 3));
        assert_eq!(f.y.iter().map(|r| r[3]).collect::<Vec<_>>(), vec![0, 0, 1]);
        assert!(f.y.iter().all(|r| r[7] == 1));
    }

    #[test]
    fn sustained_higher_note_hides_top_voice() {
        // a long high note sounding over a later lower note
        let score = vec![sn(0, 16, 80), sn(4, 4, 70)];
        let part = group_chords(&score).unwrap();
        let f = extract_score_features(&score, &part);
        assert_eq!(f.y[0][3], 1);
        assert_eq!(f.y[1][3], 0);
    }

    fn three_chords() -> Vec<ScoreNote> {
        vec![sn(0, 4, 48), sn(0, 4, 60), sn(4, 4, 62), sn(8, 8, 55), sn(8, 8, 64)]
    }

    #[test]
    fn zero_features_give_plain_timing() {
        let score = three_chords();
        let part = group_chords(&score).unwrap();
        let notes = invert_features(&Matrix::zeros(5, 3), &score, &part).unwrap();
        for (n, s) in notes.iter().zip(&score) {
            assert_eq!(n.velocity, 64.0);
            assert!((n.onset - s.onset_seconds()).abs() < 1e-12);
        }
        // durations reach the next chord; the last chord keeps its score length
        assert!((notes[0].duration - 0.5).abs() < 1e-12);
        assert!((notes[2].duration - 0.5).abs() < 1e-12);
        assert!((notes[4].duration - 1.0).abs() < 1e-12);
    }

    #[test]
    fn doubled_ioi_ratio_doubles_gaps() {
        let score = three_chords();
        let part = group_chords(&score).unwrap();
        let mut x = Matrix::zeros(5, 3);
        for i in 0..5 {
            x.set(i, 1, 1.0 / 3.0);
        }
        let notes = invert_features(&x, &score, &part).unwrap();
        assert!((notes[2].onset - 1.0).abs() < 1e-12);
        assert!((notes[3].onset - 2.0).abs() < 1e-12);
        assert!((notes[4].onset - 2.0).abs() < 1e-12);
    }

    #[test]
    fn invert_then_extract_is_identity() {
        let score = three_chords();
        let part = group_chords(&score).unwrap();
        let x = Matrix::from_rows(&[
            [0.3, 0.0, -0.2],
            [-0.1, 0.0, 0.4],
            [0.5, 0.2, 0.1],
            [-0.6, -0.1, 0.7],
            [0.2, -0.15, -0.9],
        ]);
        let perf = invert_features(&x, &score, &part).unwrap();
        let pairs = score.into_iter().zip(perf).collect();
        let piece = AlignedPiece::new("rt", pairs).unwrap();
        let f = extract_performance_features(&piece, &part).unwrap();
        assert!(f.x.max_abs_diff(&x) < 1e-9, "{:?}", f.x);
    }
}
