//! JSON-lines note-pair files and CSV dumps.
//!
//! A note file is a sequence of records, one per line: a header
//! `{"piece_id": ...}` opens a piece and is followed by note pairs
//! `{"score": {...}, "perf": {"onset_s", "dur_s", "vel"}}`. The `perf` member
//! may be omitted in score-only files used for rendering.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{AlignedPiece, ChordPartition, PerfNote, ScoreFeatures, ScoreNote};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PerfRecord {
    onset_s: f64,
    dur_s: f64,
    vel: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Record {
    Header { piece_id: String },
    Pair {
        score: ScoreNote,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        perf: Option<PerfRecord>,
    },
}

/// One piece as read from a note file, performance optional.
#[derive(Clone, Debug)]
pub struct NotePiece {
    pub id: String,
    pub notes: Vec<(ScoreNote, Option<PerfNote>)>,
}

impl NotePiece {
    pub fn aligned(&self) -> Result<AlignedPiece> {
        let mut pairs = Vec::with_capacity(self.notes.len());
        for (i, (s, p)) in self.notes.iter().enumerate() {
            let p = p.clone().ok_or_else(|| Error::InvalidNote {
                piece: self.id.clone(),
                index: i,
                reason: "missing performance".into(),
            })?;
            pairs.push((s.clone(), p));
        }
        AlignedPiece::new(self.id.clone(), pairs)
    }

    /// Score notes sorted by (onset, pitch) and validated.
    pub fn score(&self) -> Result<Vec<ScoreNote>> {
        if self.notes.is_empty() {
            return Err(Error::EmptyPiece);
        }
        let mut score: Vec<ScoreNote> = self.notes.iter().map(|(s, _)| s.clone()).collect();
        score.sort_by(|a, b| (a.onset_16ths, a.pitch).cmp(&(b.onset_16ths, b.pitch)));
        for (i, s) in score.iter().enumerate() {
            s.validate().map_err(|reason| Error::InvalidNote { piece: self.id.clone(), index: i, reason })?;
        }
        Ok(score)
    }
}

pub fn parse_note_lines(reader: impl BufRead) -> Result<Vec<NotePiece>> {
    let mut pieces: Vec<NotePiece> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        match rec {
            Record::Header { piece_id } => pieces.push(NotePiece { id: piece_id, notes: Vec::new() }),
            Record::Pair { score, perf } => {
                let piece = pieces
                    .last_mut()
                    .ok_or_else(|| Error::Parse { line: lineno, msg: "note record before any piece header".into() })?;
                let perf = perf.map(|p| PerfNote { onset: p.onset_s, duration: p.dur_s, velocity: p.vel, score_index: 0 });
                piece.notes.push((score, perf));
            }
        }
    }
    Ok(pieces)
}

pub fn read_note_file(path: impl AsRef<Path>) -> Result<Vec<NotePiece>> {
    parse_note_lines(BufReader::new(File::open(path)?))
}

pub fn read_aligned_pieces(path: impl AsRef<Path>) -> Result<Vec<AlignedPiece>> {
    read_note_file(path)?.iter().map(NotePiece::aligned).collect()
}

/// Writes pieces as a note file; velocities are rounded to integers.
pub fn write_note_file(path: impl AsRef<Path>, pieces: &[AlignedPiece]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for piece in pieces {
        serde_json::to_writer(&mut w, &Record::Header { piece_id: piece.id.clone() })?;
        writeln!(w)?;
        for (s, p) in piece.score.iter().zip(&piece.perf) {
            let rec = serde_json::json!({
                "score": s,
                "perf": {"onset_s": p.onset, "dur_s": p.duration, "vel": p.midi_velocity()},
            });
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const FEATURE_CSV_HEADER: [&str; 14] = [
    "piece_id",
    "note_idx",
    "chord_idx",
    "vel",
    "ioi_ratio",
    "articulation",
    "pitch",
    "rel_duration",
    "rel_ioi",
    "is_top_voice",
    "position_in_chord",
    "num_in_chord",
    "staff",
    "is_downbeat",
];

/// One row per note: ids, the three normalized performance features and the
/// eight score feature classes.
pub fn write_feature_csv<W: Write>(
    w: W,
    rows: &[(&str, &Matrix, &ScoreFeatures, &ChordPartition)],
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(FEATURE_CSV_HEADER)?;
    for (id, x, y, p) in rows {
        for n in 0..x.rows() {
            let mut rec = vec![id.to_string(), n.to_string(), p.note_chords()[n].to_string()];
            rec.extend((0..3).map(|k| x.get(n, k).to_string()));
            rec.extend(y.y[n].iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// A parsed feature dump row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub piece_id: String,
    pub note_idx: usize,
    pub chord_idx: usize,
    pub x: [f64; 3],
    pub y: [u8; 8],
}

pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<Vec<FeatureRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |msg: &str| Error::Parse { line: i + 2, msg: msg.to_string() };
        if rec.len() != FEATURE_CSV_HEADER.len() {
            return Err(bad("wrong column count"));
        }
        let num = |k: usize| rec[k].parse::<f64>().map_err(|_| bad("bad number"));
        let mut y = [0u8; 8];
        for (j, v) in y.iter_mut().enumerate() {
            *v = rec[6 + j].parse().map_err(|_| bad("bad class"))?;
        }
        rows.push(FeatureRow {
            piece_id: rec[0].to_string(),
            note_idx: rec[1].parse().map_err(|_| bad("bad index"))?,
            chord_idx: rec[2].parse().map_err(|_| bad("bad index"))?,
            x: [num(3)?, num(4)?, num(5)?],
            y,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{"piece_id": "a"}
{"score": {"onset_16ths": 4, "dur_16ths": 4, "pitch": 62, "staff": "G", "meter_beats": 4, "measure_pos_16ths": 4}, "perf": {"onset_s": 0.52, "dur_s": 0.4, "vel": 70}}
{"score": {"onset_16ths": 0, "dur_16ths": 4, "pitch": 60, "staff": "G", "meter_beats": 4, "measure_pos_16ths": 0}, "perf": {"onset_s": 0.0, "dur_s": 0.5, "vel": 64}}

{"piece_id": "b"}
{"score": {"onset_16ths": 0, "dur_16ths": 8, "pitch": 40, "staff": "F", "meter_beats": 3, "measure_pos_16ths": 0}}
"#;

    #[test]
    fn parses_headers_and_pairs() {
        let pieces = parse_note_lines(SAMPLE.as_bytes()).unwrap();
        assert_eq!(pieces.len(), 2);
        let a = pieces[0].aligned().unwrap();
        assert_eq!(a.score[0].pitch, 60);
        assert_eq!(a.perf[1].velocity, 70.0);
        assert!(pieces[1].aligned().is_err());
        assert_eq!(pieces[1].score().unwrap()[0].staff, super::super::Staff::Bass);
    }

    #[test]
    fn reports_line_numbers() {
        let bad = "{\"piece_id\": \"a\"}\n{\"score\": 3}\n";
        match parse_note_lines(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let orphan = "{\"score\": {\"onset_16ths\": 0, \"dur_16ths\": 4, \"pitch\": 60, \"staff\": \"G\", \"meter_beats\": 4, \"measure_pos_16ths\": 0}}\n";
        assert!(matches!(parse_note_lines(orphan.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn note_file_round_trip() {
        let pieces: Vec<_> = parse_note_lines(SAMPLE.as_bytes()).unwrap()[..1].iter().map(|p| p.aligned().unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.jsonl");
        write_note_file(&path, &pieces).unwrap();
        let back = read_aligned_pieces(&path).unwrap();
        assert_eq!(back, pieces);
    }
}
