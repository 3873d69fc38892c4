use serde::{Deserialize, Serialize};

use crate::hier;
use crate::tensor::Matrix;

use super::{ChordPartition, ScoreFeatures};

pub const EXCERPT_MAX_CHORDS: usize = 16;
/// Consecutive windows overlap by 12 chords.
pub const EXCERPT_HOP: usize = 4;
pub const EXCERPT_MIN_NOTES: usize = 16;

/// A chord window of one piece with its feature views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Excerpt {
    pub piece_id: String,
    pub start_chord: usize,
    /// Notewise normalized performance features, N x 3.
    pub x: Matrix,
    pub y: ScoreFeatures,
    pub partition: ChordPartition,
    /// Chordwise features `n2c(x)`, C x 3.
    pub k: Matrix,
}

impl Excerpt {
    pub fn num_notes(&self) -> usize {
        self.partition.num_notes()
    }

    pub fn num_chords(&self) -> usize {
        self.partition.num_chords()
    }
}

/// Window start chords for a piece of `num_chords` chords.
pub fn excerpt_starts(num_chords: usize) -> Vec<usize> {
    let mut starts = vec![0];
    let mut s = 0;
    while s + EXCERPT_MAX_CHORDS < num_chords {
        s += EXCERPT_HOP;
        starts.push(s);
    }
    starts
}

/// Sliding 16-chord windows with hop 4. Windows with fewer than 16 notes are
/// dropped.
pub fn slice_excerpts(piece_id: &str, x: &Matrix, y: &ScoreFeatures, p: &ChordPartition) -> Vec<Excerpt> {
    excerpt_starts(p.num_chords())
        .into_iter()
        .filter_map(|start| {
            let end = (start + EXCERPT_MAX_CHORDS).min(p.num_chords());
            let (partition, notes) = p.window(start, end);
            if notes.len() < EXCERPT_MIN_NOTES {
                return None;
            }
            let mut xs = Matrix::zeros(notes.len(), x.cols());
            for (r, i) in notes.clone().enumerate() {
                xs.row_mut(r).copy_from_slice(x.row(i));
            }
            let k = hier::n2c(&xs, &partition).expect("window shapes agree");
            Some(Excerpt { piece_id: piece_id.to_string(), start_chord: start, x: xs, y: y.slice(notes), partition, k })
        })
        .collect()
}
