//! Note-list interchange: tab-separated records, a JSON note list, and
//! single-track standard MIDI files.

use std::fs;
use std::path::Path;

use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};
use serde::{Deserialize, Serialize};

use super::{MidiSequence, NoteEvent};
use crate::error::{Error, Result};

/// `{"frame_rate": 50, "notes": [[pitch, duration], ...]}`
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoteListJson {
    pub frame_rate: f64,
    pub notes: Vec<(i32, u32)>,
}

impl From<&MidiSequence> for NoteListJson {
    fn from(m: &MidiSequence) -> Self {
        Self {
            frame_rate: m.frame_rate_hz(),
            notes: m.notes().iter().map(|n| (n.pitch() as i32, n.duration())).collect(),
        }
    }
}

impl TryFrom<NoteListJson> for MidiSequence {
    type Error = Error;

    fn try_from(j: NoteListJson) -> Result<Self> {
        let notes = j.notes.iter().map(|&(p, d)| NoteEvent::new(p, d)).collect::<Result<Vec<_>>>()?;
        MidiSequence::new(notes, j.frame_rate)
    }
}

pub fn write_json(m: &MidiSequence, path: impl AsRef<Path>) -> Result<()> {
    let body = serde_json::to_string(&NoteListJson::from(m))?;
    fs::write(path, body)?;
    Ok(())
}

pub fn read_json(path: impl AsRef<Path>) -> Result<MidiSequence> {
    let j: NoteListJson = serde_json::from_slice(&fs::read(path)?)?;
    j.try_into()
}

/// One `pitch<TAB>duration` record per line; a leading `# frame_rate=R`
/// comment sets the frame rate (50 Hz otherwise).
pub fn write_records(m: &MidiSequence) -> String {
    let mut out = format!("# frame_rate={}\n", m.frame_rate_hz());
    for n in m.notes() {
        out.push_str(&format!("{}\t{}\n", n.pitch(), n.duration()));
    }
    out
}

pub fn read_records(text: &str) -> Result<MidiSequence> {
    let mut rate = super::DEFAULT_FRAME_RATE;
    let mut notes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("frame_rate=") {
                rate = v.trim().parse().map_err(|_| Error::invalid(format!("line {}: bad frame rate", i + 1)))?;
            }
            continue;
        }
        let mut fields = line.split_whitespace();
        let (Some(p), Some(d), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::invalid(format!("line {}: expected `pitch duration`", i + 1)));
        };
        let p: i32 = p.parse().map_err(|_| Error::invalid(format!("line {}: bad pitch", i + 1)))?;
        let d: u32 = d.parse().map_err(|_| Error::invalid(format!("line {}: bad duration", i + 1)))?;
        notes.push(NoteEvent::new(p, d)?);
    }
    MidiSequence::new(notes, rate)
}

// 25 ticks per quarter with a matching tempo makes one tick exactly one frame.
const TICKS_PER_QUARTER: u16 = 25;
const VELOCITY: u8 = 100;

/// Writes a format-0 file: tempo meta event, then note-on/note-off pairs on
/// channel 0 with one tick per frame.
pub fn write_smf(m: &MidiSequence, path: impl AsRef<Path>) -> Result<()> {
    let us_per_quarter = (TICKS_PER_QUARTER as f64 * 1e6 / m.frame_rate_hz()).round() as u32;
    let mut track = vec![TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(us_per_quarter))),
    }];
    let channel = u4::new(0);
    for n in m.notes() {
        let key = u7::new(n.pitch());
        track.push(TrackEvent {
            delta: u28::new(0),
            kind: TrackEventKind::Midi { channel, message: MidiMessage::NoteOn { key, vel: u7::new(VELOCITY) } },
        });
        track.push(TrackEvent {
            delta: u28::new(n.duration()),
            kind: TrackEventKind::Midi { channel, message: MidiMessage::NoteOff { key, vel: u7::new(0) } },
        });
    }
    track.push(TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::EndOfTrack) });
    let smf = Smf {
        header: Header::new(Format::SingleTrack, Timing::Metrical(u15::new(TICKS_PER_QUARTER))),
        tracks: vec![track],
    };
    let mut bytes = Vec::new();
    smf.write_std(&mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads the first track that contains notes and quantizes it to 50 Hz frames.
/// Only the first tempo event is honored. Notes are made contiguous: a gap
/// is absorbed into the preceding note and an overlap cuts it short.
pub fn read_smf(path: impl AsRef<Path>) -> Result<MidiSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let smf = Smf::parse(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let Timing::Metrical(ppq) = smf.header.timing else {
        return Err(Error::format(path, "timecode-based timing is not supported"));
    };
    let ppq = ppq.as_int() as f64;

    let mut us_per_quarter = 500_000.0;
    let mut tempo_seen = false;
    let mut intervals: Vec<(u64, u64, u8)> = Vec::new();
    for track in &smf.tracks {
        let mut tick = 0u64;
        let mut open: [Option<u64>; 128] = [None; 128];
        let mut found = Vec::new();
        for ev in track {
            tick += ev.delta.as_int() as u64;
            match ev.kind {
                TrackEventKind::Meta(MetaMessage::Tempo(t)) if !tempo_seen => {
                    us_per_quarter = t.as_int() as f64;
                    tempo_seen = true;
                }
                TrackEventKind::Midi { message, .. } => match message {
                    MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => {
                        open[key.as_int() as usize] = Some(tick);
                    }
                    MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => {
                        if let Some(start) = open[key.as_int() as usize].take() {
                            found.push((start, tick, key.as_int()));
                        }
                    }
                    _ => {}
                },
                _ => {}
            }
        }
        if !found.is_empty() && intervals.is_empty() {
            intervals = found;
        }
    }
    intervals.sort_by_key(|&(s, _, _)| s);

    let rate = super::DEFAULT_FRAME_RATE;
    let to_frame = |tick: u64| (tick as f64 * us_per_quarter / 1e6 / ppq * rate).round() as i64;
    let mut notes = Vec::new();
    for (i, &(start, end, key)) in intervals.iter().enumerate() {
        let stop = match intervals.get(i + 1) {
            Some(&(next, _, _)) => next,
            None => end,
        };
        let frames = to_frame(stop) - to_frame(start);
        if frames > 0 {
            notes.push(NoteEvent::new(key as i32, frames as u32)?);
        }
    }
    MidiSequence::new(notes, rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_roundtrip_and_errors() {
        let m = MidiSequence::from_pairs(&[(60, 3), (62, 2)]).unwrap();
        assert_eq!(read_records(&write_records(&m)).unwrap(), m);
        assert!(read_records("60\n").is_err());
        assert!(matches!(read_records("90\t2\n"), Err(Error::Range(_))));
    }

    #[test]
    fn json_schema_shape() {
        let m = MidiSequence::from_pairs(&[(60, 3), (62, 2)]).unwrap();
        let v = serde_json::to_value(NoteListJson::from(&m)).unwrap();
        assert_eq!(v, serde_json::json!({"frame_rate": 50.0, "notes": [[60, 3], [62, 2]]}));
    }

    #[test]
    fn smf_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mid");
        let m = MidiSequence::from_pairs(&[(60, 3), (62, 2), (45, 17)]).unwrap();
        write_smf(&m, &path).unwrap();
        assert_eq!(read_smf(&path).unwrap(), m);
    }

    #[test]
    fn smf_gaps_are_absorbed() {
        // 480 ppq at 120 bpm: 1 quarter = 0.5 s = 25 frames
        let ch = u4::new(0);
        let on = |k: u8| TrackEventKind::Midi { channel: ch, message: MidiMessage::NoteOn { key: u7::new(k), vel: u7::new(90) } };
        let off = |k: u8| TrackEventKind::Midi { channel: ch, message: MidiMessage::NoteOff { key: u7::new(k), vel: u7::new(0) } };
        let track = vec![
            TrackEvent { delta: u28::new(0), kind: on(60) },
            TrackEvent { delta: u28::new(480), kind: off(60) },
            TrackEvent { delta: u28::new(480), kind: on(64) },
            TrackEvent { delta: u28::new(240), kind: off(64) },
            TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::EndOfTrack) },
        ];
        let smf = Smf {
            header: Header::new(Format::SingleTrack, Timing::Metrical(u15::new(480))),
            tracks: vec![track],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.mid");
        smf.save(&path).unwrap();
        assert_eq!(read_smf(&path).unwrap().pairs(), vec![(60, 50), (64, 13)]);
    }
}
