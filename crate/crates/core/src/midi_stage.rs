//! Stage 0: lyrics and an optional melody prompt in, note events out.
//!
//! Each note is one global step with two slots: the pitch (shifted so that
//! pitch 32 is token 0) and the note's cumulative end frame (end frame `o`
//! is token `o - 1`). Durations come back by first-differencing, and
//! sampling masks every offset that would not move forward.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{
    AuxTable, ConditionSegment, FrameTokens, GenerateOptions, GlobalLocalModel, LmConfig, LogitConstraint, Preset,
    Sampler, SegmentContent, SegmentKind,
};
use crate::melody::{MidiSequence, NoteEvent, DEFAULT_FRAME_RATE, MIN_PITCH, PITCH_COUNT};
use crate::nn::Adam;
use crate::text::{truncate_tokens, HashTokenizer, LYRICS_MAX_TOKENS, MELODY_PROMPT_MAX_TOKENS};

/// 30 s at 50 frames per second.
pub const MAX_FRAMES: usize = 1500;
pub const LYRICS_TABLE: usize = 0;
pub const PROMPT_TABLE: usize = 1;
pub const STAGE_TAG: &str = "midi";

pub fn midi_vocab(max_frames: usize) -> Vec<usize> {
    vec![PITCH_COUNT, max_frames]
}

pub fn encode_midi_tokens(m: &MidiSequence, max_frames: usize) -> Result<FrameTokens> {
    if m.total_frames() > max_frames {
        return Err(Error::ClipTooLong { frames: m.total_frames(), max: max_frames });
    }
    let mut end = 0u32;
    let steps = m
        .notes()
        .iter()
        .map(|n| {
            end += n.duration();
            vec![(n.pitch() - MIN_PITCH) as u32, end - 1]
        })
        .collect();
    FrameTokens::new(steps, midi_vocab(max_frames))
}

pub fn decode_midi_tokens(t: &FrameTokens, frame_rate_hz: f64) -> Result<MidiSequence> {
    if t.slots() != 2 {
        return Err(Error::MalformedSequence(format!("MIDI tokens need 2 slots, got {}", t.slots())));
    }
    let mut prev = 0u32;
    let mut notes = Vec::with_capacity(t.len());
    for (i, step) in t.steps().iter().enumerate() {
        if step[0] as usize >= PITCH_COUNT {
            return Err(Error::MalformedSequence(format!("step {i}: pitch token {} out of range", step[0])));
        }
        let end = step[1] + 1;
        if end <= prev {
            return Err(Error::MalformedSequence(format!("step {i}: offset {end} does not exceed {prev}")));
        }
        notes.push(NoteEvent::new(step[0] as i32 + MIN_PITCH as i32, end - prev)?);
        prev = end;
    }
    MidiSequence::new(notes, frame_rate_hz)
}

/// Lyrics as hashed word ids, capped at 80 tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LyricsEncoding {
    ids: Vec<u32>,
}

impl LyricsEncoding {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids: truncate_tokens(ids, LYRICS_MAX_TOKENS, "lyrics") }
    }

    pub fn from_text(tokenizer: &HashTokenizer, text: &str) -> Self {
        Self::new(tokenizer.tokenize(text))
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Layout `[melody_prompt?, lyrics, BOS, target + EOS]`.
pub fn build_stage0_sequence(
    lyrics: &LyricsEncoding,
    prompt: Option<SegmentContent>,
    target: Option<&FrameTokens>,
) -> Result<Vec<ConditionSegment>> {
    if lyrics.is_empty() {
        return Err(Error::invalid("lyrics are required"));
    }
    let mut segs = Vec::with_capacity(4);
    if let Some(content) = prompt {
        segs.push(ConditionSegment { kind: SegmentKind::MelodyPrompt, content, eos: false });
    }
    segs.push(ConditionSegment::symbols(SegmentKind::TextSemantic, LYRICS_TABLE, lyrics.ids().to_vec()));
    segs.push(ConditionSegment::bos());
    if let Some(t) = target {
        segs.push(ConditionSegment::target(t.clone(), true));
    }
    Ok(segs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MidiStageConfig {
    pub lyrics_vocab: usize,
    pub prompt_vocab: usize,
    pub max_frames: usize,
    pub max_notes: usize,
    pub lyrics_encoder_layers: usize,
    pub prompt_encoder_layers: usize,
}

impl Default for MidiStageConfig {
    fn default() -> Self {
        Self {
            lyrics_vocab: 4096,
            prompt_vocab: 2048,
            max_frames: MAX_FRAMES,
            max_notes: 256,
            lyrics_encoder_layers: 2,
            prompt_encoder_layers: 1,
        }
    }
}

impl MidiStageConfig {
    pub fn lm_config(&self, preset: Preset, seed: u64) -> LmConfig {
        let aux = vec![
            AuxTable {
                name: "lyrics".into(),
                vocab: self.lyrics_vocab,
                encoder_layers: self.lyrics_encoder_layers,
                max_len: LYRICS_MAX_TOKENS,
            },
            AuxTable {
                name: "melody_prompt".into(),
                vocab: self.prompt_vocab,
                encoder_layers: self.prompt_encoder_layers,
                max_len: MELODY_PROMPT_MAX_TOKENS,
            },
        ];
        let max_steps = MELODY_PROMPT_MAX_TOKENS + LYRICS_MAX_TOKENS + self.max_notes + 2;
        let mut cfg = LmConfig::preset(preset, midi_vocab(self.max_frames), aux, max_steps);
        cfg.seed = seed;
        cfg
    }

    pub fn lyrics_tokenizer(&self) -> HashTokenizer {
        HashTokenizer::new(self.lyrics_vocab).expect("vocabulary checked by config")
    }

    pub fn prompt_tokenizer(&self) -> HashTokenizer {
        HashTokenizer::new(self.prompt_vocab).expect("vocabulary checked by config")
    }
}

/// Masks offsets that would not advance past the previous note's end, and
/// forces EOS once the frame budget is used up.
pub struct OffsetMonotone {
    pub max_frames: usize,
}

impl LogitConstraint for OffsetMonotone {
    fn apply(&self, generated: &[Vec<u32>], slot: usize, _current: &[u32], logits: &mut [f32]) {
        let prev = generated.last().map_or(0, |s| s[1] as usize + 1);
        match slot {
            0 if prev >= self.max_frames => logits[..PITCH_COUNT].fill(f32::NEG_INFINITY),
            1 => logits[..prev.min(self.max_frames)].fill(f32::NEG_INFINITY),
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MidiGenOptions {
    pub sampler: Sampler,
    pub seed: u64,
    /// Extra attempts (with derived seeds) after an empty generation.
    pub retries: usize,
}

impl Default for MidiGenOptions {
    fn default() -> Self {
        Self { sampler: Sampler::TopK { k: 32, temperature: 0.9 }, seed: 0, retries: 3 }
    }
}

/// The stage-0 model with its tokenization settings.
pub struct MidiLm {
    pub model: GlobalLocalModel,
    pub stage: MidiStageConfig,
}

impl MidiLm {
    pub fn new(stage: MidiStageConfig, preset: Preset, seed: u64, device: &Device) -> Result<Self> {
        let model = GlobalLocalModel::new(stage.lm_config(preset, seed), DType::F32, device)?;
        Ok(Self { model, stage })
    }

    pub fn sequence(
        &self,
        lyrics: &LyricsEncoding,
        prompt: Option<SegmentContent>,
        target: Option<&MidiSequence>,
    ) -> Result<Vec<ConditionSegment>> {
        let target = target.map(|m| encode_midi_tokens(m, self.stage.max_frames)).transpose()?;
        build_stage0_sequence(lyrics, prompt, target.as_ref())
    }

    pub fn generate(&self, lyrics: &LyricsEncoding, prompt: Option<SegmentContent>, opts: &MidiGenOptions) -> Result<MidiSequence> {
        let prefix = build_stage0_sequence(lyrics, prompt, None)?;
        let constraint = OffsetMonotone { max_frames: self.stage.max_frames };
        for attempt in 0..=opts.retries {
            let gen = GenerateOptions {
                max_steps: self.stage.max_notes,
                sampler: opts.sampler,
                stop_on_eos: true,
                seed: opts.seed.wrapping_add(attempt as u64),
            };
            let out = self.model.generate(&prefix, &gen, Some(&constraint))?;
            if out.steps.is_empty() {
                log::warn!("MIDI generation attempt {} ended immediately", attempt + 1);
                continue;
            }
            if out.truncated {
                log::warn!("MIDI generation hit the {}-note limit without an end token", self.stage.max_notes);
            }
            let tokens = FrameTokens::new(out.steps, midi_vocab(self.stage.max_frames))?;
            let m = decode_midi_tokens(&tokens, DEFAULT_FRAME_RATE)?;
            debug_assert!(m.total_frames() <= self.stage.max_frames);
            return Ok(m);
        }
        Err(Error::EmptyGeneration { attempts: opts.retries + 1 })
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
            return Err(Error::Dependency(format!("{} is not a MIDI model checkpoint", path.display())));
        }
        let stage = serde_json::from_str(meta.get("stage_config").ok_or_else(|| Error::format(path, "no stage config"))?)?;
        Ok(Self { model, stage })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::loss_mask;
    use crate::nn::AdamConfig;
    use proptest::prelude::*;

    #[test]
    fn offsets_are_cumulative_ends() {
        let m = MidiSequence::from_pairs(&[(60, 3), (62, 2)]).unwrap();
        let t = encode_midi_tokens(&m, MAX_FRAMES).unwrap();
        assert_eq!(t.slot(0), vec![28, 30]);
        // Token o - 1 stands for end frame o.
        assert_eq!(t.slot(1), vec![2, 4]);
        let single = encode_midi_tokens(&MidiSequence::from_pairs(&[(50, 7)]).unwrap(), MAX_FRAMES).unwrap();
        assert_eq!(single.slot(1), vec![6]);
    }

    #[test]
    fn overlong_clip_is_rejected() {
        let m = MidiSequence::from_pairs(&[(60, 1000), (61, 501)]).unwrap();
        assert!(matches!(encode_midi_tokens(&m, MAX_FRAMES), Err(Error::ClipTooLong { frames: 1501, max: 1500 })));
    }

    #[test]
    fn non_increasing_offsets_are_malformed() {
        let t = FrameTokens::new(vec![vec![0, 5], vec![1, 5]], midi_vocab(MAX_FRAMES)).unwrap();
        assert!(matches!(decode_midi_tokens(&t, 50.0), Err(Error::MalformedSequence(_))));
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(notes in proptest::collection::vec((32i32..=80, 1u32..40), 1..30)) {
            let m = MidiSequence::from_pairs(&notes).unwrap();
            let t = encode_midi_tokens(&m, MAX_FRAMES).unwrap();
            prop_assert_eq!(decode_midi_tokens(&t, 50.0).unwrap(), m);
        }
    }

    #[test]
    fn stage0_layout() {
        let lyrics = LyricsEncoding::new(vec![1, 2, 3, 4]);
        let target = encode_midi_tokens(&MidiSequence::from_pairs(&[(60, 3), (62, 2), (64, 4)]).unwrap(), MAX_FRAMES).unwrap();
        let bare = build_stage0_sequence(&lyrics, None, Some(&target)).unwrap();
        assert_eq!(bare[0].kind, SegmentKind::TextSemantic);
        let prompt = SegmentContent::Symbols { tables: vec![PROMPT_TABLE], ids: vec![vec![5], vec![6]] };
        let full = build_stage0_sequence(&lyrics, Some(prompt), Some(&target)).unwrap();
        let mask = loss_mask(&full);
        // Prompt, lyrics, BOS, then three notes and the end step.
        assert_eq!(mask.len(), 2 + 4 + 1 + 3 + 1);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 3 + 1);
        assert!(build_stage0_sequence(&LyricsEncoding::new(vec![]), None, None).is_err());
    }

    #[test]
    fn offset_mask_blocks_backward_steps() {
        let c = OffsetMonotone { max_frames: 10 };
        let mut logits = vec![0.0f32; 12];
        c.apply(&[vec![0, 3]], 1, &[5], &mut logits);
        assert!(logits[..4].iter().all(|l| l.is_infinite()));
        assert!(logits[4..].iter().all(|l| l.is_finite()));
        let mut pitch = vec![0.0f32; PITCH_COUNT + 2];
        c.apply(&[vec![0, 9]], 0, &[], &mut pitch);
        assert!(pitch[..PITCH_COUNT].iter().all(|l| l.is_infinite()));
        assert!(pitch[PITCH_COUNT + 1].is_finite());
    }

    fn small_stage() -> MidiStageConfig {
        MidiStageConfig { lyrics_vocab: 64, prompt_vocab: 32, max_frames: 200, max_notes: 24, ..Default::default() }
    }

    #[test]
    fn overfit_pair_is_reproduced() {
        let lm = MidiLm::new(small_stage(), Preset::Tiny, 3, &Device::Cpu).unwrap();
        let lyrics = LyricsEncoding::new(vec![3, 9, 17, 4]);
        let melody = MidiSequence::from_pairs(&[(60, 10), (62, 5), (64, 20), (59, 8), (67, 12), (65, 6)]).unwrap();
        let segs = lm.sequence(&lyrics, None, Some(&melody)).unwrap();
        let mut opt = Adam::new(lm.model.store(), AdamConfig { lr: 3e-3, ..Default::default() }).unwrap();
        for _ in 0..400 {
            let loss = lm.model.nll_loss(&segs).unwrap();
            if loss.to_scalar::<f32>().unwrap() < 0.02 {
                break;
            }
            opt.backward_step(&loss).unwrap();
        }
        let opts = MidiGenOptions { sampler: Sampler::Greedy, seed: 0, retries: 0 };
        let out = lm.generate(&lyrics, None, &opts).unwrap();
        assert_eq!(out, melody);

        let sampled = MidiGenOptions { sampler: Sampler::TopK { k: 8, temperature: 1.0 }, seed: 11, retries: 2 };
        let a = lm.generate(&lyrics, None, &sampled).unwrap();
        assert_eq!(a, lm.generate(&lyrics, None, &sampled).unwrap());
        assert!(a.notes().iter().all(|n| (32..=80).contains(&n.pitch())));
        assert!(a.total_frames() <= 200);
    }

    #[test]
    fn checkpoint_tags_the_stage() {
        let lm = MidiLm::new(small_stage(), Preset::Tiny, 0, &Device::Cpu).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("midi.safetensors");
        lm.save(&p, None).unwrap();
        let back = MidiLm::load(&p, &Device::Cpu).unwrap();
        assert_eq!(back.stage, lm.stage);
    }
}
