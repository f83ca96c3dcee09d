//! Stage 1: pinyin, melody and a reference clip in; per-frame acoustic
//! codes out.
//!
//! A vocal frame (50 per second) carries four tokens: the first three RVQ
//! codes of its acoustic feature and a semitone F0 bin. The acoustic
//! feature is a fixed orthonormal DCT of the frame's 80-bin log-mel
//! spectrum, truncated to 32 coefficients, so rendering is a codebook sum
//! followed by the transposed projection.
//!
//! With the expanded melody as condition, one melody frame occupies one
//! global step and the target length is known, so decoding is length-forced.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::audio::{resample_rows, MelSpec, N_MELS};
use crate::error::{Error, Result};
use crate::lm::{
    AuxTable, ConditionSegment, FrameTokens, GenerateOptions, GlobalLocalModel, LmConfig, LogitConstraint, Preset,
    Sampler, SegmentKind,
};
use crate::melody::{ExpandedMelody, MidiSequence, DEFAULT_FRAME_RATE, MAX_PITCH, MIN_PITCH, PITCH_COUNT};
use crate::midi_stage::{decode_midi_tokens, encode_midi_tokens, OffsetMonotone};
use crate::nn::Adam;
use crate::rvq::{Codebooks, DEFAULT_FEATURE_DIM, LM_BOOKS};
use crate::text::LYRICS_MAX_TOKENS;

pub const UNVOICED_BIN: u32 = PITCH_COUNT as u32;
pub const F0_BINS: usize = PITCH_COUNT + 1;
pub const VOCAL_SLOTS: usize = LM_BOOKS + 1;
/// Reference prompt length: 2 s of frames.
pub const REFERENCE_FRAMES: usize = 100;
pub const PINYIN_TABLE: usize = 0;
pub const MIDI_PITCH_TABLE: usize = 1;
pub const MIDI_OFFSET_TABLE: usize = 2;
pub const STAGE_TAG: &str = "vocal";

pub fn vocal_vocab(book_size: usize) -> Vec<usize> {
    vec![book_size, book_size, book_size, F0_BINS]
}

pub fn hz_to_midi(hz: f64) -> f64 {
    69.0 + 12.0 * (hz / 440.0).log2()
}

pub fn midi_to_hz(pitch: f64) -> f64 {
    440.0 * 2f64.powf((pitch - 69.0) / 12.0)
}

/// Slot-4 tokens and the number of voiced frames clamped into range.
pub fn quantize_f0(f0_hz: &[f64], voiced: &[bool]) -> Result<(Vec<u32>, usize)> {
    if f0_hz.len() != voiced.len() {
        return Err(Error::invalid("F0 and voicing tracks differ in length"));
    }
    let mut clamped = 0;
    let bins = f0_hz
        .iter()
        .zip(voiced)
        .enumerate()
        .map(|(i, (&f, &v))| {
            if !v {
                return Ok(UNVOICED_BIN);
            }
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::invalid(format!("frame {i}: voiced with F0 {f}")));
            }
            let p = hz_to_midi(f).round();
            if p < MIN_PITCH as f64 || p > MAX_PITCH as f64 {
                clamped += 1;
            }
            Ok((p.clamp(MIN_PITCH as f64, MAX_PITCH as f64) - MIN_PITCH as f64) as u32)
        })
        .collect::<Result<Vec<_>>>()?;
    if clamped > 0 {
        log::warn!("{clamped} voiced frames clamped into the F0 range");
    }
    Ok((bins, clamped))
}

/// Center frequency of a bin; `None` for the unvoiced bin.
pub fn f0_bin_hz(bin: u32) -> Option<f64> {
    (bin < UNVOICED_BIN).then(|| midi_to_hz((bin + MIN_PITCH as u32) as f64))
}

/// Fixed orthonormal DCT-II from 80 log-mel bins to `dim` coefficients.
#[derive(Debug, Clone)]
pub struct MelProjection {
    basis: Vec<Vec<f32>>,
}

impl Default for MelProjection {
    fn default() -> Self {
        Self::new(DEFAULT_FEATURE_DIM)
    }
}

impl MelProjection {
    pub fn new(dim: usize) -> Self {
        let n = N_MELS as f64;
        let basis = (0..dim.min(N_MELS))
            .map(|k| {
                let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                (0..N_MELS).map(|j| (scale * (PI * k as f64 * (j as f64 + 0.5) / n).cos()) as f32).collect()
            })
            .collect();
        Self { basis }
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn project(&self, mel_frame: &[f32]) -> Vec<f32> {
        self.basis.iter().map(|b| b.iter().zip(mel_frame).map(|(x, y)| x * y).sum()).collect()
    }

    pub fn invert(&self, feature: &[f32]) -> Vec<f32> {
        let mut out = vec![0f32; N_MELS];
        for (b, &c) in self.basis.iter().zip(feature) {
            for (o, v) in out.iter_mut().zip(b) {
                *o += c * v;
            }
        }
        out
    }

    /// Features of `frames` vocal frames from a mel spectrogram (resampled
    /// to the vocal frame rate first).
    pub fn features(&self, mel: &MelSpec, frames: usize) -> Vec<Vec<f32>> {
        resample_rows(mel.frames(), frames).iter().map(|f| self.project(f)).collect()
    }
}

/// Mel frames for `n` vocal frames: `ceil(1.5 n)`.
pub fn mel_frames_for(n: usize) -> usize {
    (3 * n).div_ceil(2)
}

/// Log-mel rows at the vocal frame rate from the first three codes of each
/// frame.
pub fn render_frames(codes: &[Vec<u32>], cb: &Codebooks, projection: &MelProjection) -> Result<Vec<Vec<f32>>> {
    codes
        .iter()
        .map(|c| {
            let c16: Vec<u16> = c.iter().take(LM_BOOKS).map(|&v| v as u16).collect();
            Ok(projection.invert(&cb.decode(&c16)?))
        })
        .collect()
}

/// Mel spectrogram at 75 frames per second for a vocal token sequence.
pub fn render_toy_vocal(v: &FrameTokens, cb: &Codebooks, expected_hash: &str, projection: &MelProjection) -> Result<MelSpec> {
    if cb.hash() != expected_hash {
        return Err(Error::CodecMismatch { expected: expected_hash.to_string(), found: cb.hash().to_string() });
    }
    if v.slots() != VOCAL_SLOTS {
        return Err(Error::invalid(format!("vocal tokens need {VOCAL_SLOTS} slots")));
    }
    let rows = render_frames(v.steps(), cb, projection)?;
    MelSpec::new(resample_rows(&rows, mel_frames_for(v.len())))
}

/// Vocal tokens together with the hash of the codebooks that made them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocalTokenFile {
    pub codec_hash: String,
    pub tokens: FrameTokens,
}

const TOK_MAGIC: &[u8; 4] = b"VTOK";
const TOK_VERSION: u32 = 1;

impl VocalTokenFile {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let hash = hex::decode(&self.codec_hash).map_err(|_| Error::invalid("codec hash is not hex"))?;
        if hash.len() != 32 {
            return Err(Error::invalid("codec hash must be 32 bytes"));
        }
        w.write_all(TOK_MAGIC)?;
        w.write_all(&TOK_VERSION.to_le_bytes())?;
        w.write_all(&(self.tokens.len() as u32).to_le_bytes())?;
        w.write_all(&(self.tokens.vocab_sizes()[0] as u32).to_le_bytes())?;
        w.write_all(&hash)?;
        for step in self.tokens.steps() {
            for &t in step {
                w.write_all(&(t as u16).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read(r: &mut impl Read, path: &Path) -> Result<Self> {
        let mut head = [0u8; 48];
        r.read_exact(&mut head).map_err(|_| Error::format(path, "truncated token header"))?;
        if &head[..4] != TOK_MAGIC {
            return Err(Error::format(path, "not a vocal token file"));
        }
        let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != TOK_VERSION {
            return Err(Error::format(path, "unsupported token file version"));
        }
        let (n, k) = (word(8) as usize, word(12) as usize);
        let codec_hash = hex::encode(&head[16..48]);
        let mut bytes = vec![0u8; n * VOCAL_SLOTS * 2];
        r.read_exact(&mut bytes).map_err(|_| Error::format(path, "truncated token data"))?;
        let vals: Vec<u32> = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect();
        let steps = vals.chunks(VOCAL_SLOTS).map(|c| c.to_vec()).collect();
        let tokens = FrameTokens::new(steps, vocal_vocab(k)).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self { codec_hash, tokens })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f, path)
    }
}

/// Stacks codes (at least three books) and F0 bins into vocal frames.
pub fn vocal_tokens(codes: &[Vec<u16>], f0_bins: &[u32], book_size: usize) -> Result<FrameTokens> {
    if codes.len() != f0_bins.len() {
        return Err(Error::Alignment(format!("{} code frames vs {} F0 frames", codes.len(), f0_bins.len())));
    }
    let steps = codes
        .iter()
        .zip(f0_bins)
        .map(|(c, &f)| {
            if c.len() < LM_BOOKS {
                return Err(Error::invalid("frame has fewer than three codes"));
            }
            Ok(c[..LM_BOOKS].iter().map(|&v| v as u32).chain([f]).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    FrameTokens::new(steps, vocal_vocab(book_size))
}

/// How the melody reaches the vocal model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocalMode {
    /// One condition step per melody frame; length-forced decoding.
    Expanded,
    /// One condition step per note, embedding (pitch, end offset).
    Unexpanded,
    /// One model emits note tokens, then vocal frames.
    E2eWithMidi,
    /// One model emits vocal frames from text and reference alone.
    E2eWithoutMidi,
}

impl VocalMode {
    pub const ALL: [VocalMode; 4] = [VocalMode::Expanded, VocalMode::Unexpanded, VocalMode::E2eWithMidi, VocalMode::E2eWithoutMidi];

    pub fn label(self) -> &'static str {
        match self {
            VocalMode::Expanded => "expanded",
            VocalMode::Unexpanded => "unexpand",
            VocalMode::E2eWithMidi => "e2e w/ MIDI",
            VocalMode::E2eWithoutMidi => "e2e w/o MIDI",
        }
    }

    pub fn needs_midi(self) -> bool {
        matches!(self, VocalMode::Expanded | VocalMode::Unexpanded)
    }
}

impl std::str::FromStr for VocalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expanded" => Ok(VocalMode::Expanded),
            "unexpand" | "unexpanded" => Ok(VocalMode::Unexpanded),
            "e2e-with-midi" | "e2e-w-midi" => Ok(VocalMode::E2eWithMidi),
            "e2e-without-midi" | "e2e-wo-midi" => Ok(VocalMode::E2eWithoutMidi),
            other => Err(Error::Config(format!("unknown vocal mode {other:?}"))),
        }
    }
}

/// Layout `[pinyin, expanded_midi, reference, BOS, target]`.
pub fn build_stage1_sequence(
    pinyin: &[u32],
    midi: &ExpandedMelody,
    reference: &FrameTokens,
    target: Option<&FrameTokens>,
) -> Result<Vec<ConditionSegment>> {
    if reference.is_empty() {
        return Err(Error::invalid("reference is empty"));
    }
    if let Some(t) = target {
        if t.len() != midi.len() {
            return Err(Error::Alignment(format!("target has {} frames, melody has {}", t.len(), midi.len())));
        }
    }
    let mut segs = pinyin_segment(pinyin)?;
    let pitch_ids = midi.pitches().iter().map(|&p| (p - MIN_PITCH) as u32).collect();
    segs.push(ConditionSegment::symbols(SegmentKind::ExpandedMidi, MIDI_PITCH_TABLE, pitch_ids));
    segs.push(ConditionSegment::frames(SegmentKind::ReferenceAcoustic, reference.clone()));
    segs.push(ConditionSegment::bos());
    if let Some(t) = target {
        segs.push(ConditionSegment::target(t.clone(), false));
    }
    Ok(segs)
}

fn pinyin_segment(pinyin: &[u32]) -> Result<Vec<ConditionSegment>> {
    if pinyin.is_empty() {
        return Err(Error::invalid("pinyin tokens are required"));
    }
    let ids = crate::text::truncate_tokens(pinyin.to_vec(), LYRICS_MAX_TOKENS, "pinyin");
    Ok(vec![ConditionSegment::symbols(SegmentKind::Pinyin, PINYIN_TABLE, ids)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocalStageConfig {
    pub mode: VocalMode,
    pub book_size: usize,
    pub pinyin_vocab: usize,
    pub max_frames: usize,
    pub reference_frames: usize,
    pub pinyin_encoder_layers: usize,
}

impl Default for VocalStageConfig {
    fn default() -> Self {
        Self {
            mode: VocalMode::Expanded,
            book_size: crate::rvq::DEFAULT_BOOK_SIZE,
            pinyin_vocab: 128,
            max_frames: crate::midi_stage::MAX_FRAMES,
            reference_frames: REFERENCE_FRAMES,
            pinyin_encoder_layers: 1,
        }
    }
}

impl VocalStageConfig {
    /// Per-slot vocabularies of the model. The joint model of the e2e-with-
    /// MIDI mode puts note tokens above the acoustic ranges of slots 1–2
    /// and adds a padding id to slots 3–4.
    pub fn model_vocab(&self) -> Vec<usize> {
        let k = self.book_size;
        match self.mode {
            VocalMode::E2eWithMidi => vec![k + PITCH_COUNT, k + self.max_frames, k + 1, F0_BINS + 1],
            _ => vocal_vocab(k),
        }
    }

    pub fn lm_config(&self, preset: Preset, seed: u64) -> LmConfig {
        let aux = vec![
            AuxTable {
                name: "pinyin".into(),
                vocab: self.pinyin_vocab,
                encoder_layers: self.pinyin_encoder_layers,
                max_len: LYRICS_MAX_TOKENS,
            },
            AuxTable { name: "midi_pitch".into(), vocab: PITCH_COUNT, encoder_layers: 0, max_len: 0 },
            AuxTable { name: "midi_offset".into(), vocab: self.max_frames, encoder_layers: 0, max_len: 0 },
        ];
        // Pinyin, melody (frames or notes), reference, BOS, and the target.
        let max_steps = LYRICS_MAX_TOKENS + 2 * self.max_frames + self.reference_frames + 3;
        let mut cfg = LmConfig::preset(preset, self.model_vocab(), aux, max_steps);
        cfg.seed = seed;
        cfg
    }
}

struct SlotRanges {
    ranges: Vec<(u32, u32)>,
}

impl LogitConstraint for SlotRanges {
    fn apply(&self, _generated: &[Vec<u32>], slot: usize, _current: &[u32], logits: &mut [f32]) {
        let (lo, hi) = self.ranges[slot];
        let n = logits.len() - 2;
        for (i, l) in logits.iter_mut().enumerate() {
            if i < n && !(lo as usize..hi as usize).contains(&i) {
                *l = f32::NEG_INFINITY;
            }
        }
    }
}

/// Note phase of the joint model: monotone offsets in the shifted ranges,
/// padding in slots 3–4.
struct JointNotes {
    k: u32,
    max_frames: usize,
    ranges: SlotRanges,
}

impl LogitConstraint for JointNotes {
    fn apply(&self, generated: &[Vec<u32>], slot: usize, current: &[u32], logits: &mut [f32]) {
        self.ranges.apply(generated, slot, current, logits);
        let shifted: Vec<Vec<u32>> = generated.iter().map(|s| vec![s[0] - self.k, s[1] - self.k]).collect();
        if slot < 2 {
            let inner = OffsetMonotone { max_frames: self.max_frames };
            inner.apply(&shifted, slot, current, &mut logits[self.k as usize..]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocalGenOptions {
    pub sampler: Sampler,
    pub seed: u64,
}

impl Default for VocalGenOptions {
    fn default() -> Self {
        Self { sampler: Sampler::TopK { k: 32, temperature: 0.9 }, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocalGeneration {
    /// Acoustic frames in the plain `[K, K, K, F0_BINS]` vocabulary.
    pub vocal: FrameTokens,
    /// Notes emitted by the joint model, if any.
    pub midi: Option<MidiSequence>,
}

pub struct VocalLm {
    pub model: GlobalLocalModel,
    pub stage: VocalStageConfig,
}

impl VocalLm {
    pub fn new(stage: VocalStageConfig, preset: Preset, seed: u64, device: &Device) -> Result<Self> {
        let model = GlobalLocalModel::new(stage.lm_config(preset, seed), DType::F32, device)?;
        Ok(Self { model, stage })
    }

    fn note_steps(&self, midi: &MidiSequence, shift: u32) -> Result<Vec<Vec<u32>>> {
        Ok(encode_midi_tokens(midi, self.stage.max_frames)?
            .steps()
            .iter()
            .map(|s| vec![s[0] + shift, s[1] + shift])
            .collect())
    }

    fn reference(&self, reference: &FrameTokens) -> Result<FrameTokens> {
        let n = reference.len().min(self.stage.reference_frames);
        FrameTokens::new(reference.steps()[..n].to_vec(), reference.vocab_sizes().to_vec())
    }

    /// Training or prompting sequence for the configured mode.
    pub fn sequence(
        &self,
        pinyin: &[u32],
        midi: Option<&MidiSequence>,
        reference: &FrameTokens,
        target: Option<&FrameTokens>,
    ) -> Result<Vec<ConditionSegment>> {
        let reference = self.reference(reference)?;
        let need = || midi.ok_or_else(|| Error::invalid(format!("{} mode needs a melody", self.stage.mode.label())));
        match self.stage.mode {
            VocalMode::Expanded => build_stage1_sequence(pinyin, &need()?.expand()?, &reference, target),
            VocalMode::Unexpanded => {
                let m = need()?;
                if let Some(t) = target {
                    if t.len() != m.total_frames() {
                        return Err(Error::Alignment(format!("target {} frames, melody {}", t.len(), m.total_frames())));
                    }
                }
                let mut segs = pinyin_segment(pinyin)?;
                let notes = self.note_steps(m, 0)?;
                segs.push(ConditionSegment::symbol_tuples(
                    SegmentKind::NoteMidi,
                    vec![MIDI_PITCH_TABLE, MIDI_OFFSET_TABLE],
                    notes,
                ));
                segs.push(ConditionSegment::frames(SegmentKind::ReferenceAcoustic, reference));
                segs.push(ConditionSegment::bos());
                if let Some(t) = target {
                    segs.push(ConditionSegment::target(t.clone(), false));
                }
                Ok(segs)
            }
            VocalMode::E2eWithMidi => {
                let mut segs = pinyin_segment(pinyin)?;
                segs.push(ConditionSegment::frames(SegmentKind::ReferenceAcoustic, reference));
                segs.push(ConditionSegment::bos());
                if let Some(t) = target {
                    let m = need()?;
                    if t.len() != m.total_frames() {
                        return Err(Error::Alignment(format!("target {} frames, melody {}", t.len(), m.total_frames())));
                    }
                    segs.extend(self.joint_targets(m, Some(t))?);
                }
                Ok(segs)
            }
            VocalMode::E2eWithoutMidi => {
                let mut segs = pinyin_segment(pinyin)?;
                segs.push(ConditionSegment::frames(SegmentKind::ReferenceAcoustic, reference));
                segs.push(ConditionSegment::bos());
                if let Some(t) = target {
                    segs.push(ConditionSegment::target(t.clone(), true));
                }
                Ok(segs)
            }
        }
    }

    /// Note steps (ending in EOS) and, when given, the vocal frames of the
    /// joint model, both as loss segments.
    fn joint_targets(&self, midi: &MidiSequence, vocal: Option<&FrameTokens>) -> Result<Vec<ConditionSegment>> {
        let k = self.stage.book_size as u32;
        let vocab = self.stage.model_vocab();
        let pad = (k, F0_BINS as u32);
        let notes: Vec<Vec<u32>> = self.note_steps(midi, k)?.into_iter().map(|s| vec![s[0], s[1], pad.0, pad.1]).collect();
        let mut segs = vec![ConditionSegment::target(FrameTokens::new(notes, vocab.clone())?, true)];
        if let Some(v) = vocal {
            segs.push(ConditionSegment::target(FrameTokens::new(v.steps().to_vec(), vocab)?, false));
        }
        Ok(segs)
    }

    pub fn generate(
        &self,
        pinyin: &[u32],
        midi: Option<&MidiSequence>,
        reference: &FrameTokens,
        opts: &VocalGenOptions,
    ) -> Result<VocalGeneration> {
        let k = self.stage.book_size as u32;
        let acoustic = SlotRanges { ranges: vec![(0, k), (0, k), (0, k), (0, F0_BINS as u32)] };
        let prefix = self.sequence(pinyin, midi, reference, None)?;
        let forced = |len: usize, prefix: &[ConditionSegment], seed: u64| -> Result<FrameTokens> {
            let gen = GenerateOptions { max_steps: len, sampler: opts.sampler, stop_on_eos: false, seed };
            let out = self.model.generate(prefix, &gen, Some(&acoustic))?;
            FrameTokens::new(out.steps, vocal_vocab(self.stage.book_size))
        };
        match self.stage.mode {
            VocalMode::Expanded | VocalMode::Unexpanded => {
                let m = midi.expect("checked by sequence");
                Ok(VocalGeneration { vocal: forced(m.total_frames(), &prefix, opts.seed)?, midi: None })
            }
            VocalMode::E2eWithMidi => {
                let notes = JointNotes {
                    k,
                    max_frames: self.stage.max_frames,
                    ranges: SlotRanges {
                        ranges: vec![(k, k + PITCH_COUNT as u32), (k, k + self.stage.max_frames as u32), (k, k + 1), (F0_BINS as u32, F0_BINS as u32 + 1)],
                    },
                };
                let gen = GenerateOptions { max_steps: self.stage.max_frames, sampler: opts.sampler, stop_on_eos: true, seed: opts.seed };
                let out = self.model.generate(&prefix, &gen, Some(&notes))?;
                if out.steps.is_empty() {
                    return Err(Error::EmptyGeneration { attempts: 1 });
                }
                let note_tokens = FrameTokens::new(
                    out.steps.iter().map(|s| vec![s[0] - k, s[1] - k]).collect(),
                    crate::midi_stage::midi_vocab(self.stage.max_frames),
                )?;
                let m = decode_midi_tokens(&note_tokens, DEFAULT_FRAME_RATE)?;
                let mut full = prefix.clone();
                full.extend(self.joint_targets(&m, None)?);
                let vocal = forced(m.total_frames(), &full, opts.seed.wrapping_add(1))?;
                Ok(VocalGeneration { vocal, midi: Some(m) })
            }
            VocalMode::E2eWithoutMidi => {
                let gen = GenerateOptions { max_steps: self.stage.max_frames, sampler: opts.sampler, stop_on_eos: true, seed: opts.seed };
                let out = self.model.generate(&prefix, &gen, Some(&acoustic))?;
                if out.steps.is_empty() {
                    return Err(Error::EmptyGeneration { attempts: 1 });
                }
                Ok(VocalGeneration { vocal: FrameTokens::new(out.steps, vocal_vocab(self.stage.book_size))?, midi: None })
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, optimizer: Option<&Adam>) -> Result<()> {
        let mut extra = BTreeMap::new();
        extra.insert("stage".to_string(), STAGE_TAG.to_string());
        extra.insert("stage_config".to_string(), serde_json::to_string(&self.stage)?);
        self.model.save(path, optimizer, &extra)
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let (model, meta) = GlobalLocalModel::load(path, DType::F32, device)?;
        if meta.get("stage").map(String::as_str) != Some(STAGE_TAG) {
            return Err(Error::Dependency(format!("{} is not a vocal model checkpoint", path.display())));
        }
        let stage = serde_json::from_str(meta.get("stage_config").ok_or_else(|| Error::format(path, "no stage config"))?)?;
        Ok(Self { model, stage })
    }
}

/// Per-frame pitch contour of the F0 slot, with unvoiced frames carrying
/// the nearest voiced pitch (earlier first). `None` if nothing is voiced.
pub fn f0_pitch_track(f0_bins: &[u32]) -> Option<Vec<u8>> {
    let first = f0_bins.iter().find(|&&b| b < UNVOICED_BIN)?;
    let mut last = *first;
    Some(
        f0_bins
            .iter()
            .map(|&b| {
                if b < UNVOICED_BIN {
                    last = b;
                }
                (last + MIN_PITCH as u32) as u8
            })
            .collect(),
    )
}
