//! Aligned score/performance notes and everything derived from them:
//! chord grouping, the alignment matrix, the three performance features,
//! the eight score features, excerpt slicing and feature inversion.

mod excerpts;
mod features;
pub mod io;
pub mod midi;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use excerpts::{excerpt_starts, slice_excerpts, Excerpt, EXCERPT_HOP, EXCERPT_MAX_CHORDS, EXCERPT_MIN_NOTES};
pub use features::{
    denormalize, extract_performance_features, extract_score_features, invert_features, normalize,
    plain_performance, PerformanceFeatures, ScoreFeatures, ATTR_ARTICULATION, ATTR_TEMPO, ATTR_VELOCITY,
    NUM_ATTRS, NUM_SCORE_FEATURES, SCORE_CLASS_COUNTS,
};

/// Seconds per sixteenth note at the reference tempo of 120 BPM.
pub const SECONDS_PER_16TH: f64 = 0.125;
pub const REFERENCE_BPM: f64 = 120.0;
pub const REFERENCE_VELOCITY: f64 = 64.0;
pub const MIN_VELOCITY: f64 = 24.0;
pub const MAX_VELOCITY: f64 = 104.0;
pub const MIN_PITCH: u8 = 21;
pub const MAX_PITCH: u8 = 108;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Staff {
    #[serde(rename = "G")]
    Treble,
    #[serde(rename = "F")]
    Bass,
}

/// A quantized score note. Times are integer sixteenths, so a beat (quarter
/// note) is 4 units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNote {
    pub onset_16ths: i64,
    pub dur_16ths: i64,
    pub pitch: u8,
    pub staff: Staff,
    pub meter_beats: u32,
    pub measure_pos_16ths: i64,
}

impl ScoreNote {
    pub fn onset_beats(&self) -> f64 {
        self.onset_16ths as f64 / 4.0
    }

    pub fn duration_beats(&self) -> f64 {
        self.dur_16ths as f64 / 4.0
    }

    pub fn onset_seconds(&self) -> f64 {
        self.onset_16ths as f64 * SECONDS_PER_16TH
    }

    pub fn duration_seconds(&self) -> f64 {
        self.dur_16ths as f64 * SECONDS_PER_16TH
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(MIN_PITCH..=MAX_PITCH).contains(&self.pitch) {
            return Err(format!("pitch {} outside [21,108]", self.pitch));
        }
        if self.dur_16ths <= 0 {
            return Err(format!("non-positive duration {}", self.dur_16ths));
        }
        if self.onset_16ths < 0 {
            return Err(format!("negative onset {}", self.onset_16ths));
        }
        if self.meter_beats == 0 {
            return Err("zero meter".into());
        }
        Ok(())
    }
}

/// A performed note. Velocity is kept real-valued so that generated
/// features survive inversion exactly; writers round it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfNote {
    pub onset: f64,
    pub duration: f64,
    pub velocity: f64,
    pub score_index: usize,
}

impl PerfNote {
    pub fn midi_velocity(&self) -> u8 {
        self.velocity.round().clamp(MIN_VELOCITY, MAX_VELOCITY) as u8
    }
}

/// Score and performance of one piece with a 1:1 note correspondence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedPiece {
    pub id: String,
    pub score: Vec<ScoreNote>,
    pub perf: Vec<PerfNote>,
}

impl AlignedPiece {
    /// Sorts the pairs by (score onset, pitch), validates every note and
    /// clips out-of-range velocities (with a warning).
    pub fn new(id: impl Into<String>, mut pairs: Vec<(ScoreNote, PerfNote)>) -> Result<Self> {
        let id = id.into();
        if pairs.is_empty() {
            return Err(Error::EmptyPiece);
        }
        pairs.sort_by(|a, b| (a.0.onset_16ths, a.0.pitch).cmp(&(b.0.onset_16ths, b.0.pitch)));
        let mut score = Vec::with_capacity(pairs.len());
        let mut perf = Vec::with_capacity(pairs.len());
        for (i, (s, mut p)) in pairs.into_iter().enumerate() {
            s.validate().map_err(|reason| Error::InvalidNote { piece: id.clone(), index: i, reason })?;
            if !(p.duration > 0.0) || !p.onset.is_finite() {
                return Err(Error::InvalidNote {
                    piece: id.clone(),
                    index: i,
                    reason: format!("performed duration {} / onset {}", p.duration, p.onset),
                });
            }
            if !(MIN_VELOCITY..=MAX_VELOCITY).contains(&p.velocity) {
                log::warn!("piece {id}: note {i} velocity {} clipped to [24,104]", p.velocity);
                p.velocity = p.velocity.clamp(MIN_VELOCITY, MAX_VELOCITY);
            }
            p.score_index = i;
            score.push(s);
            perf.push(p);
        }
        Ok(Self { id, score, perf })
    }

    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }
}

/// Notes grouped into chords of identical score onset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChordPartition {
    groups: Vec<Vec<usize>>,
    note_chord: Vec<usize>,
}

impl Serialize for ChordPartition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.groups.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ChordPartition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let groups = Vec::<Vec<usize>>::deserialize(d)?;
        ChordPartition::from_groups(groups).map_err(serde::de::Error::custom)
    }
}

impl ChordPartition {
    /// Validates that `groups` partition `0..N` with every group non-empty.
    pub fn from_groups(groups: Vec<Vec<usize>>) -> Result<Self> {
        let n: usize = groups.iter().map(Vec::len).sum();
        let mut note_chord = vec![usize::MAX; n];
        for (c, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::InvalidPartition(format!("chord {c} is empty")));
            }
            for &i in g {
                if i >= n || note_chord[i] != usize::MAX {
                    return Err(Error::InvalidPartition(format!("note {i} out of range or repeated")));
                }
                note_chord[i] = c;
            }
        }
        Ok(Self { groups, note_chord })
    }

    /// Every note its own chord.
    pub fn singletons(n: usize) -> Self {
        Self { groups: (0..n).map(|i| vec![i]).collect(), note_chord: (0..n).collect() }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Chord index of every note.
    pub fn note_chords(&self) -> &[usize] {
        &self.note_chord
    }

    pub fn num_chords(&self) -> usize {
        self.groups.len()
    }

    pub fn num_notes(&self) -> usize {
        self.note_chord.len()
    }

    pub fn chord_size(&self, c: usize) -> usize {
        self.groups[c].len()
    }

    /// Sub-partition over chords `start..end`, renumbered from zero. Assumes
    /// chords are contiguous note ranges, as produced by [`group_chords`].
    pub fn window(&self, start: usize, end: usize) -> (Self, std::ops::Range<usize>) {
        let first = self.groups[start][0];
        let last = *self.groups[end - 1].last().unwrap();
        let groups = self.groups[start..end].iter().map(|g| g.iter().map(|i| i - first).collect()).collect();
        (Self::from_groups(groups).expect("window of a valid partition"), first..last + 1)
    }
}

/// Groups notes sorted by (onset, pitch) into chords by exact onset equality.
pub fn group_chords(score: &[ScoreNote]) -> Result<ChordPartition> {
    if score.is_empty() {
        return Err(Error::EmptyPiece);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = score[0].onset_16ths;
    groups.push(vec![0]);
    for (i, note) in score.iter().enumerate().skip(1) {
        if note.onset_16ths < current {
            return Err(Error::InvalidPartition(format!("score not sorted by onset at note {i}")));
        }
        if note.onset_16ths == current {
            groups.last_mut().unwrap().push(i);
        } else {
            current = note.onset_16ths;
            groups.push(vec![i]);
        }
    }
    ChordPartition::from_groups(groups)
}

/// Dense binary C x N alignment matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix(pub Matrix);

/// `M[c][n] = 1` iff note `n` belongs to chord `c`.
pub fn build_alignment_matrix(p: &ChordPartition) -> AlignmentMatrix {
    let mut m = Matrix::zeros(p.num_chords(), p.num_notes());
    for (c, g) in p.groups().iter().enumerate() {
        for &n in g {
            m.set(c, n, 1.0);
        }
    }
    AlignmentMatrix(m)
}

impl AlignmentMatrix {
    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.0.cols()).map(|n| self.0.col(n).iter().sum()).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.0.rows()).map(|c| self.0.row(c).iter().sum()).collect()
    }
}
