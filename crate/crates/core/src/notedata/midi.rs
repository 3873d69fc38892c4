//! Standard MIDI File output (format 0, 480 ticks per quarter, 120 BPM) and
//! a reader for files written here.

use std::path::Path;

use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};

use crate::error::{Error, Result};

use super::{PerfNote, ScoreNote};

pub const TICKS_PER_QUARTER: u16 = 480;
/// Microseconds per quarter note at 120 BPM.
pub const TEMPO_US_PER_QUARTER: u32 = 500_000;

fn seconds_to_ticks(s: f64) -> u64 {
    let ticks_per_second = TICKS_PER_QUARTER as f64 * 1e6 / TEMPO_US_PER_QUARTER as f64;
    (s.max(0.0) * ticks_per_second).round() as u64
}

fn ticks_to_seconds(t: u64) -> f64 {
    t as f64 * TEMPO_US_PER_QUARTER as f64 / (1e6 * TICKS_PER_QUARTER as f64)
}

/// Encodes performed notes; pitches come from the aligned score notes.
pub fn encode_midi(perf: &[PerfNote], score: &[ScoreNote]) -> Result<Vec<u8>> {
    // (tick, order, message): note-offs sort before note-ons at equal ticks
    let mut events: Vec<(u64, u8, MidiMessage)> = Vec::with_capacity(perf.len() * 2);
    for p in perf {
        let pitch = score
            .get(p.score_index)
            .ok_or_else(|| Error::Midi(format!("score index {} out of range", p.score_index)))?
            .pitch;
        let on = seconds_to_ticks(p.onset);
        let off = seconds_to_ticks(p.onset + p.duration).max(on + 1);
        let key = u7::new(pitch);
        events.push((on, 1, MidiMessage::NoteOn { key, vel: u7::new(p.midi_velocity()) }));
        events.push((off, 0, MidiMessage::NoteOff { key, vel: u7::new(0) }));
    }
    events.sort_by_key(|e| (e.0, e.1));

    let mut track = Vec::with_capacity(events.len() + 2);
    track.push(TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(TEMPO_US_PER_QUARTER))),
    });
    let mut now = 0u64;
    for (tick, _, message) in events {
        track.push(TrackEvent {
            delta: u28::new((tick - now) as u32),
            kind: TrackEventKind::Midi { channel: u4::new(0), message },
        });
        now = tick;
    }
    track.push(TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::EndOfTrack) });

    let smf = Smf {
        header: Header::new(Format::SingleTrack, Timing::Metrical(u15::new(TICKS_PER_QUARTER))),
        tracks: vec![track],
    };
    let mut out = Vec::new();
    smf.write_std(&mut out)?;
    Ok(out)
}

pub fn write_midi(path: impl AsRef<Path>, perf: &[PerfNote], score: &[ScoreNote]) -> Result<()> {
    std::fs::write(path, encode_midi(perf, score)?)?;
    Ok(())
}

/// A note read back from a MIDI file.
#[derive(Clone, Debug, PartialEq)]
pub struct MidiNote {
    pub pitch: u8,
    pub velocity: u8,
    pub onset: f64,
    pub duration: f64,
}

/// Parsed content of a single-tempo file.
#[derive(Clone, Debug, PartialEq)]
pub struct MidiContent {
    pub format_single_track: bool,
    pub ticks_per_quarter: u16,
    pub tempos: Vec<u32>,
    pub notes: Vec<MidiNote>,
}

/// Reads notes assuming the 120 BPM tempo this crate writes.
pub fn decode_midi(bytes: &[u8]) -> Result<MidiContent> {
    let smf = Smf::parse(bytes).map_err(|e| Error::Midi(e.to_string()))?;
    let ticks_per_quarter = match smf.header.timing {
        Timing::Metrical(t) => t.as_int(),
        Timing::Timecode(..) => return Err(Error::Midi("timecode timing not supported".into())),
    };
    let mut tempos = Vec::new();
    let mut notes = Vec::new();
    for track in &smf.tracks {
        let mut now = 0u64;
        let mut open: Vec<(u8, u8, u64)> = Vec::new();
        for ev in track {
            now += ev.delta.as_int() as u64;
            match ev.kind {
                TrackEventKind::Meta(MetaMessage::Tempo(t)) => tempos.push(t.as_int()),
                TrackEventKind::Midi { message, .. } => match message {
                    MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => open.push((key.as_int(), vel.as_int(), now)),
                    MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => {
                        if let Some(pos) = open.iter().position(|o| o.0 == key.as_int()) {
                            let (pitch, velocity, start) = open.remove(pos);
                            notes.push(MidiNote {
                                pitch,
                                velocity,
                                onset: ticks_to_seconds(start),
                                duration: ticks_to_seconds(now - start),
                            });
                        }
                    }
                    _ => {}
                },
                _ => {}
            }
        }
    }
    notes.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.pitch.cmp(&b.pitch)));
    Ok(MidiContent { format_single_track: smf.header.format == Format::SingleTrack, ticks_per_quarter, tempos, notes })
}

pub fn read_midi(path: impl AsRef<Path>) -> Result<MidiContent> {
    decode_midi(&std::fs::read(path)?)
}
