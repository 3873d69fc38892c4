//! Prepared datasets: excerpts with cached signals, split into training and
//! held-out pieces, stored as a directory.
//!
//! Layout: `excerpts_train.jsonl` / `excerpts_test.jsonl` (one excerpt per
//! line), `features.csv` (notewise dump of every piece) and `signals.csv`
//! (chordwise planning and structure signals of every excerpt).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::notedata::{
    extract_performance_features, extract_score_features, group_chords, io::write_feature_csv, slice_excerpts,
    AlignedPiece, ChordPartition, Excerpt, ScoreFeatures,
};
use crate::regularizers::Signals;
use crate::tensor::Matrix;

pub const SIGNALS_CSV_HEADER: [&str; 9] =
    ["piece_id", "start_chord", "chord_idx", "I_pln_v", "I_pln_t", "I_pln_a", "I_str_v", "I_str_t", "I_str_a"];

/// Features of one whole piece.
#[derive(Clone, Debug)]
pub struct PieceFeatures {
    pub id: String,
    pub x: Matrix,
    pub y: ScoreFeatures,
    pub partition: ChordPartition,
}

pub fn piece_features(piece: &AlignedPiece) -> Result<PieceFeatures> {
    let partition = group_chords(&piece.score)?;
    let x = extract_performance_features(piece, &partition)?.x;
    let y = extract_score_features(&piece.score, &partition);
    Ok(PieceFeatures { id: piece.id.clone(), x, y, partition })
}

impl PieceFeatures {
    pub fn excerpts(&self) -> Vec<Excerpt> {
        slice_excerpts(&self.id, &self.x, &self.y, &self.partition)
    }
}

/// Stable hash used for the held-out split.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Whether a piece goes to the held-out split.
pub fn is_test_piece(id: &str, test_fraction: f64) -> bool {
    (fnv1a(id) % 10_000) as f64 / 10_000.0 < test_fraction
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Excerpt>,
    pub test: Vec<Excerpt>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub pieces: usize,
    pub train_excerpts: usize,
    pub test_excerpts: usize,
}

/// Features, excerpts and split of a list of pieces.
pub fn build_dataset(pieces: &[AlignedPiece], test_fraction: f64) -> Result<(Dataset, Vec<PieceFeatures>)> {
    let feats: Vec<PieceFeatures> = pieces.iter().map(piece_features).collect::<Result<_>>()?;
    let mut ds = Dataset::default();
    for f in &feats {
        let ex = f.excerpts();
        if is_test_piece(&f.id, test_fraction) {
            ds.test.extend(ex);
        } else {
            ds.train.extend(ex);
        }
    }
    Ok((ds, feats))
}

fn write_excerpts(path: &Path, ex: &[Excerpt]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in ex {
        serde_json::to_writer(&mut w, e)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_excerpts(path: impl AsRef<Path>) -> Result<Vec<Excerpt>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Excerpt = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if e.x.rows() != e.partition.num_notes() || e.y.len() != e.x.rows() || e.k.rows() != e.partition.num_chords() {
            return Err(Error::Parse { line: i + 1, msg: "inconsistent excerpt shapes".into() });
        }
        out.push(e);
    }
    Ok(out)
}

pub fn write_signals_csv<W: Write>(w: W, excerpts: &[Excerpt], degree: usize) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SIGNALS_CSV_HEADER)?;
    for e in excerpts {
        let s = Signals::compute(&e.k, degree);
        for c in 0..e.num_chords() {
            let mut rec = vec![e.piece_id.clone(), e.start_chord.to_string(), c.to_string()];
            rec.extend(s.i_pln.row(c).iter().map(|v| v.to_string()));
            rec.extend(s.i_str.row(c).iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes a prepared dataset directory.
pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset, feats: &[PieceFeatures], degree: usize) -> Result<PrepareSummary> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_excerpts(&dir.join("excerpts_train.jsonl"), &ds.train)?;
    write_excerpts(&dir.join("excerpts_test.jsonl"), &ds.test)?;
    let rows: Vec<_> = feats.iter().map(|f| (f.id.as_str(), &f.x, &f.y, &f.partition)).collect();
    write_feature_csv(BufWriter::new(File::create(dir.join("features.csv"))?), &rows)?;
    let all: Vec<Excerpt> = ds.train.iter().chain(&ds.test).cloned().collect();
    write_signals_csv(BufWriter::new(File::create(dir.join("signals.csv"))?), &all, degree)?;
    Ok(PrepareSummary { pieces: feats.len(), train_excerpts: ds.train.len(), test_excerpts: ds.test.len() })
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    Ok(Dataset { train: read_excerpts(dir.join("excerpts_train.jsonl"))?, test: read_excerpts(dir.join("excerpts_test.jsonl"))? })
}
