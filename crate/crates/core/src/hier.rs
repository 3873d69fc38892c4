//! Note-to-chord mean pooling and chord-to-note broadcasting.
//!
//! Both operators are segment operations over a [`ChordPartition`], so they
//! cost O(N * D) instead of the dense `M * e` / `M^T * e` products. The
//! autodiff tape reuses them: the adjoint of `n2c` is a scaled `c2n` and the
//! adjoint of `c2n` is a segment sum.

use crate::error::{Error, Result};
use crate::notedata::ChordPartition;
use crate::tensor::Matrix;

/// Row `c` of the result is the mean of the rows of `e` belonging to chord `c`.
pub fn n2c(e: &Matrix, p: &ChordPartition) -> Result<Matrix> {
    if e.rows() != p.num_notes() {
        return Err(Error::Shape(format!("n2c: {} rows for {} notes", e.rows(), p.num_notes())));
    }
    let mut out = Matrix::zeros(p.num_chords(), e.cols());
    for (c, g) in p.groups().iter().enumerate() {
        let row = out.row_mut(c);
        for &n in g {
            for (o, v) in row.iter_mut().zip(e.row(n)) {
                *o += v;
            }
        }
        let inv = 1.0 / g.len() as f64;
        for o in row.iter_mut() {
            *o *= inv;
        }
    }
    Ok(out)
}

/// Every note receives the row of its chord.
pub fn c2n(e: &Matrix, p: &ChordPartition) -> Result<Matrix> {
    if e.rows() != p.num_chords() {
        return Err(Error::Shape(format!("c2n: {} rows for {} chords", e.rows(), p.num_chords())));
    }
    let mut out = Matrix::zeros(p.num_notes(), e.cols());
    for (n, &c) in p.note_chords().iter().enumerate() {
        out.row_mut(n).copy_from_slice(e.row(c));
    }
    Ok(out)
}
