//! Symbolic melody model: monophonic note events with frame-quantized
//! durations, plus the per-frame ("expanded") view the vocal model consumes.
//!
//! Notes are contiguous. Silence is expressed by segmenting clips, not by
//! rest events.

mod io;

pub use io::{read_json, read_records, read_smf, write_json, write_records, write_smf, NoteListJson};

use crate::error::{Error, Result};

pub const MIN_PITCH: u8 = 32;
pub const MAX_PITCH: u8 = 80;
/// Number of distinct melody pitches (MIDI 32..=80).
pub const PITCH_COUNT: usize = (MAX_PITCH - MIN_PITCH + 1) as usize;
/// Token rate of every frame-quantized quantity, in Hz (20 ms frames).
pub const DEFAULT_FRAME_RATE: f64 = 50.0;

fn check_pitch(pitch: i32) -> Result<u8> {
    if (MIN_PITCH as i32..=MAX_PITCH as i32).contains(&pitch) {
        Ok(pitch as u8)
    } else {
        Err(Error::Range(format!("pitch {pitch} outside [{MIN_PITCH}, {MAX_PITCH}]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoteEvent {
    pitch: u8,
    duration: u32,
}

impl NoteEvent {
    pub fn new(pitch: i32, duration: u32) -> Result<Self> {
        let pitch = check_pitch(pitch)?;
        if duration == 0 {
            return Err(Error::invalid("note duration must be at least one frame"));
        }
        Ok(Self { pitch, duration })
    }

    pub fn pitch(&self) -> u8 {
        self.pitch
    }

    /// Duration in frames.
    pub fn duration(&self) -> u32 {
        self.duration
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MidiSequence {
    notes: Vec<NoteEvent>,
    frame_rate_hz: f64,
}

impl MidiSequence {
    pub fn new(notes: Vec<NoteEvent>, frame_rate_hz: f64) -> Result<Self> {
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::invalid(format!("frame rate must be positive, got {frame_rate_hz}")));
        }
        Ok(Self { notes, frame_rate_hz })
    }

    /// Builds a 50 Hz sequence from `(pitch, duration)` pairs.
    pub fn from_pairs(pairs: &[(i32, u32)]) -> Result<Self> {
        let notes = pairs.iter().map(|&(p, d)| NoteEvent::new(p, d)).collect::<Result<Vec<_>>>()?;
        Self::new(notes, DEFAULT_FRAME_RATE)
    }

    pub fn notes(&self) -> &[NoteEvent] {
        &self.notes
    }

    pub fn pairs(&self) -> Vec<(u8, u32)> {
        self.notes.iter().map(|n| (n.pitch, n.duration)).collect()
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn total_frames(&self) -> usize {
        self.notes.iter().map(|n| n.duration as usize).sum()
    }

    pub fn total_seconds(&self) -> f64 {
        self.total_frames() as f64 / self.frame_rate_hz
    }

    fn require_nonempty(&self, op: &str) -> Result<()> {
        if self.notes.is_empty() {
            Err(Error::invalid(format!("{op}: empty MIDI sequence")))
        } else {
            Ok(())
        }
    }

    /// Repeats each note's pitch once per frame of its duration.
    pub fn expand(&self) -> Result<ExpandedMelody> {
        self.require_nonempty("expand")?;
        let mut pitches = Vec::with_capacity(self.total_frames());
        for n in &self.notes {
            pitches.extend(std::iter::repeat(n.pitch).take(n.duration as usize));
        }
        Ok(ExpandedMelody { pitches, frame_rate_hz: self.frame_rate_hz })
    }

    pub fn transpose(&self, semitones: i32) -> Result<Self> {
        let notes = self
            .notes
            .iter()
            .map(|n| Ok(NoteEvent { pitch: check_pitch(n.pitch as i32 + semitones)?, duration: n.duration }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { notes, frame_rate_hz: self.frame_rate_hz })
    }

    /// Frames per 1/16 note at `tempo_bpm`.
    pub fn sixteenth_frames(&self, tempo_bpm: f64) -> Result<f64> {
        if !(tempo_bpm.is_finite() && tempo_bpm > 0.0) {
            return Err(Error::invalid(format!("tempo must be positive, got {tempo_bpm}")));
        }
        Ok(self.frame_rate_hz * 60.0 / tempo_bpm / 4.0)
    }

    /// Snaps every duration to the nearest positive multiple of a 1/16 note.
    /// Notes shorter than half a grid unit become one grid unit, never zero.
    pub fn round_to_grid(&self, tempo_bpm: f64) -> Result<Self> {
        let grid = self.sixteenth_frames(tempo_bpm)?;
        let notes = self
            .notes
            .iter()
            .map(|n| {
                let units = (n.duration as f64 / grid).round().max(1.0);
                let frames = (units * grid).round().max(1.0) as u32;
                NoteEvent { pitch: n.pitch, duration: frames }
            })
            .collect();
        Ok(Self { notes, frame_rate_hz: self.frame_rate_hz })
    }

    /// Duration-weighted mean pitch in semitones.
    pub fn average_pitch(&self) -> Result<f64> {
        self.require_nonempty("average_pitch")?;
        let total = self.total_frames() as f64;
        let weighted: f64 = self.notes.iter().map(|n| n.pitch as f64 * n.duration as f64).sum();
        Ok(weighted / total)
    }

    /// Merges adjacent notes with equal pitch.
    pub fn canonical(&self) -> Self {
        let mut notes: Vec<NoteEvent> = Vec::with_capacity(self.notes.len());
        for n in &self.notes {
            match notes.last_mut() {
                Some(last) if last.pitch == n.pitch => last.duration += n.duration,
                _ => notes.push(*n),
            }
        }
        Self { notes, frame_rate_hz: self.frame_rate_hz }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedMelody {
    pitches: Vec<u8>,
    frame_rate_hz: f64,
}

impl ExpandedMelody {
    pub fn new(pitches: Vec<u8>, frame_rate_hz: f64) -> Result<Self> {
        for &p in &pitches {
            check_pitch(p as i32)?;
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::invalid("frame rate must be positive"));
        }
        Ok(Self { pitches, frame_rate_hz })
    }

    pub fn pitches(&self) -> &[u8] {
        &self.pitches
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn len(&self) -> usize {
        self.pitches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitches.is_empty()
    }

    /// Collapses maximal runs of equal pitch into notes.
    pub fn compress(&self) -> Result<MidiSequence> {
        if self.pitches.is_empty() {
            return Err(Error::invalid("compress: empty expanded melody"));
        }
        let mut notes: Vec<NoteEvent> = Vec::new();
        for &p in &self.pitches {
            match notes.last_mut() {
                Some(last) if last.pitch == p => last.duration += 1,
                _ => notes.push(NoteEvent { pitch: p, duration: 1 }),
            }
        }
        MidiSequence::new(notes, self.frame_rate_hz)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(pairs: &[(i32, u32)]) -> MidiSequence {
        MidiSequence::from_pairs(pairs).unwrap()
    }

    #[test]
    fn expand_examples() {
        assert_eq!(seq(&[(60, 3), (62, 2)]).expand().unwrap().pitches(), &[60, 60, 60, 62, 62]);
        assert_eq!(seq(&[(45, 1)]).expand().unwrap().pitches(), &[45]);
        assert!(matches!(seq(&[]).expand(), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn compress_examples() {
        let e = ExpandedMelody::new(vec![60, 60, 62], 50.0).unwrap();
        assert_eq!(e.compress().unwrap().pairs(), vec![(60, 2), (62, 1)]);
        let e = ExpandedMelody::new(vec![70], 50.0).unwrap();
        assert_eq!(e.compress().unwrap().pairs(), vec![(70, 1)]);
        assert!(ExpandedMelody::new(vec![], 50.0).unwrap().compress().is_err());
    }

    #[test]
    fn transpose_examples() {
        let m = seq(&[(60, 2)]);
        assert_eq!(m.transpose(0).unwrap(), m);
        assert_eq!(m.transpose(12).unwrap().pairs(), vec![(72, 2)]);
        assert!(matches!(seq(&[(80, 1)]).transpose(1), Err(Error::Range(_))));
    }

    #[test]
    fn round_to_grid_examples() {
        let m = seq(&[(60, 7)]);
        assert_eq!(m.sixteenth_frames(120.0).unwrap(), 6.25);
        assert_eq!(m.round_to_grid(120.0).unwrap().pairs(), vec![(60, 6)]);
        // 12.5 frames is two grid units; 13 frames rounds back onto itself
        assert_eq!(seq(&[(60, 13)]).round_to_grid(120.0).unwrap().pairs(), vec![(60, 13)]);
        assert_eq!(seq(&[(60, 1)]).round_to_grid(120.0).unwrap().pairs(), vec![(60, 6)]);
        // on-grid: 100 bpm -> 7.5 frames, 15 frames is exactly two units
        assert_eq!(seq(&[(60, 15)]).round_to_grid(100.0).unwrap().pairs(), vec![(60, 15)]);
        assert!(m.round_to_grid(0.0).is_err());
        assert!(m.round_to_grid(-3.0).is_err());
    }

    #[test]
    fn average_pitch_examples() {
        assert_eq!(seq(&[(60, 1), (72, 1)]).average_pitch().unwrap(), 66.0);
        assert_eq!(seq(&[(60, 3), (64, 1)]).average_pitch().unwrap(), 61.0);
        let m = seq(&[(50, 4), (57, 3), (55, 9)]);
        assert_eq!(m.transpose(5).unwrap().average_pitch().unwrap(), m.average_pitch().unwrap() + 5.0);
    }

    #[test]
    fn note_invariants() {
        assert!(NoteEvent::new(31, 1).is_err());
        assert!(NoteEvent::new(81, 1).is_err());
        assert!(NoteEvent::new(60, 0).is_err());
        assert!(MidiSequence::new(vec![], 0.0).is_err());
    }

    fn arb_seq() -> impl Strategy<Value = MidiSequence> {
        prop::collection::vec((40i32..=72, 1u32..40), 1..50).prop_map(|p| seq(&p))
    }

    proptest! {
        #[test]
        fn expand_length_is_total_duration(m in arb_seq()) {
            let e = m.expand().unwrap();
            prop_assert_eq!(e.len(), m.total_frames());
            // frame-by-frame reference
            let mut j = 0;
            for n in m.notes() {
                for _ in 0..n.duration() {
                    prop_assert_eq!(e.pitches()[j], n.pitch());
                    j += 1;
                }
            }
        }

        #[test]
        fn compress_inverts_expand(m in arb_seq()) {
            let e = m.expand().unwrap();
            let c = e.compress().unwrap();
            prop_assert_eq!(&c, &m.canonical());
            prop_assert_eq!(c.expand().unwrap(), e);
        }

        #[test]
        fn transpose_roundtrip(m in arb_seq(), k in -8i32..=8) {
            let up = m.transpose(k).unwrap();
            prop_assert_eq!(up.transpose(-k).unwrap(), m.clone());
            let shift = up.average_pitch().unwrap() - m.average_pitch().unwrap();
            prop_assert!((shift - k as f64).abs() < 1e-12);
        }

        #[test]
        fn grid_rounding_is_idempotent(m in arb_seq(), tempo in 40.0f64..240.0) {
            let once = m.round_to_grid(tempo).unwrap();
            prop_assert_eq!(once.round_to_grid(tempo).unwrap(), once.clone());
            prop_assert_eq!(once.len(), m.len());
        }
    }
}
