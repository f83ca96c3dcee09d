//! Multi-scale autoregressive modeling of frames that carry `P` parallel
//! tokens each.
//!
//! A global causal transformer runs over time steps. Its input at step `i`
//! is the channel-wise concatenation of the `P` slot embeddings of step
//! `i - 1` (inputs are shifted right by one, so the context `o_i` sees
//! exactly the steps before `i`). A local causal transformer then runs over
//! the `P` slots of step `i`, with the projected context added to every
//! slot input, and predicts the slots one after another.
//!
//! Conditions (text, melody, reference audio) are prepended as extra steps.
//! Text-like conditions carry one vector per step, which is repeated across
//! the `P` slots before the concatenation. Only target steps enter the loss.

mod model;
mod sample;

pub use model::{GlobalLocalModel, PreparedSequence};
pub use sample::{Generation, GenerateOptions, LogitConstraint, Sampler};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `N × P` token grid with a per-slot vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameTokens {
    tokens: Vec<Vec<u32>>,
    vocab_sizes: Vec<usize>,
}

impl FrameTokens {
    pub fn new(tokens: Vec<Vec<u32>>, vocab_sizes: Vec<usize>) -> Result<Self> {
        if vocab_sizes.is_empty() {
            return Err(Error::invalid("at least one token slot is required"));
        }
        if tokens.is_empty() {
            return Err(Error::invalid("frame token sequence is empty"));
        }
        for (i, step) in tokens.iter().enumerate() {
            if step.len() != vocab_sizes.len() {
                return Err(Error::invalid(format!("step {i} has {} tokens, expected {}", step.len(), vocab_sizes.len())));
            }
            for (slot, (&t, &v)) in step.iter().zip(&vocab_sizes).enumerate() {
                if t as usize >= v {
                    return Err(Error::invalid(format!("step {i} slot {slot}: token {t} outside vocabulary {v}")));
                }
            }
        }
        Ok(Self { tokens, vocab_sizes })
    }

    pub fn steps(&self) -> &[Vec<u32>] {
        &self.tokens
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        &self.vocab_sizes
    }

    pub fn slots(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token stream of one slot.
    pub fn slot(&self, slot: usize) -> Vec<u32> {
        self.tokens.iter().map(|s| s[slot]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    TextSemantic,
    MelodyPrompt,
    Pinyin,
    ExpandedMidi,
    /// Note-level (pitch, offset) pairs; the unexpanded melody condition.
    NoteMidi,
    ReferenceAcoustic,
    Bos,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentContent {
    /// Steps embedded with the model's own slot tables.
    Frames(FrameTokens),
    /// One step per entry; the step's vector is the sum of the listed
    /// auxiliary-table embeddings (tables in `tables`, ids per step).
    Symbols { tables: Vec<usize>, ids: Vec<Vec<u32>> },
    /// Precomputed vectors of the model's embedding width.
    Vectors(Vec<Vec<f32>>),
    /// A single begin-of-target step.
    Bos,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSegment {
    pub kind: SegmentKind,
    pub content: SegmentContent,
    /// Append an end-of-sequence step (target segments only).
    pub eos: bool,
}

impl ConditionSegment {
    pub fn target(frames: FrameTokens, eos: bool) -> Self {
        Self { kind: SegmentKind::Target, content: SegmentContent::Frames(frames), eos }
    }

    pub fn frames(kind: SegmentKind, frames: FrameTokens) -> Self {
        Self { kind, content: SegmentContent::Frames(frames), eos: false }
    }

    pub fn symbols(kind: SegmentKind, table: usize, ids: Vec<u32>) -> Self {
        Self { kind, content: SegmentContent::Symbols { tables: vec![table], ids: ids.into_iter().map(|i| vec![i]).collect() }, eos: false }
    }

    pub fn symbol_tuples(kind: SegmentKind, tables: Vec<usize>, ids: Vec<Vec<u32>>) -> Self {
        Self { kind, content: SegmentContent::Symbols { tables, ids }, eos: false }
    }

    pub fn vectors(kind: SegmentKind, rows: Vec<Vec<f32>>) -> Self {
        Self { kind, content: SegmentContent::Vectors(rows), eos: false }
    }

    pub fn bos() -> Self {
        Self { kind: SegmentKind::Bos, content: SegmentContent::Bos, eos: false }
    }

    pub fn is_target(&self) -> bool {
        self.kind == SegmentKind::Target
    }

    /// Number of global steps this segment occupies.
    pub fn len(&self) -> usize {
        let body = match &self.content {
            SegmentContent::Frames(f) => f.len(),
            SegmentContent::Symbols { ids, .. } => ids.len(),
            SegmentContent::Vectors(v) => v.len(),
            SegmentContent::Bos => 1,
        };
        body + usize::from(self.eos)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-step loss mask of an assembled sequence: true exactly on target steps.
pub fn loss_mask(segments: &[ConditionSegment]) -> Vec<bool> {
    segments.iter().flat_map(|s| std::iter::repeat(s.is_target()).take(s.len())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

/// A lookup table for condition symbols, optionally followed by a
/// bidirectional encoder (the toy stand-in for a pretrained text encoder).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxTable {
    pub name: String,
    pub vocab: usize,
    pub encoder_layers: usize,
    pub max_len: usize,
}

/// Named model sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Tiny,
    Desk,
    PaperMidi,
    PaperVocal,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" | "smoke" => Ok(Preset::Tiny),
            "desk" => Ok(Preset::Desk),
            "paper-midi" => Ok(Preset::PaperMidi),
            "paper-vocal" => Ok(Preset::PaperVocal),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    /// Content vocabulary per slot; the model adds BOS and EOS to each.
    pub vocab_sizes: Vec<usize>,
    pub aux_tables: Vec<AuxTable>,
    /// Width of one slot embedding; the concatenation is `P ×` this.
    pub emb_dim: usize,
    pub global: StackConfig,
    pub local: StackConfig,
    /// Capacity of the global positional table.
    pub max_steps: usize,
    pub seed: u64,
}

impl LmConfig {
    pub fn slots(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn bos(&self, slot: usize) -> u32 {
        self.vocab_sizes[slot] as u32
    }

    pub fn eos(&self, slot: usize) -> u32 {
        self.vocab_sizes[slot] as u32 + 1
    }

    /// Vocabulary of the slot's output head.
    pub fn model_vocab(&self, slot: usize) -> usize {
        self.vocab_sizes[slot] + 2
    }

    /// Desk-scale sizes: global 256 wide × 4 layers × 4 heads, local
    /// 128 × 2 × 4.
    pub fn desk(vocab_sizes: Vec<usize>, aux_tables: Vec<AuxTable>, max_steps: usize) -> Self {
        Self {
            vocab_sizes,
            aux_tables,
            emb_dim: 64,
            global: StackConfig { dim: 256, layers: 4, heads: 4 },
            local: StackConfig { dim: 128, layers: 2, heads: 4 },
            max_steps,
            seed: 0,
        }
    }

    /// Full-size MIDI model (16 × 12 heads × 768; local 6 × 8 heads).
    pub fn paper_midi(vocab_sizes: Vec<usize>, aux_tables: Vec<AuxTable>, max_steps: usize) -> Self {
        Self {
            vocab_sizes,
            aux_tables,
            emb_dim: 384,
            global: StackConfig { dim: 768, layers: 16, heads: 12 },
            local: StackConfig { dim: 768, layers: 6, heads: 8 },
            max_steps,
            seed: 0,
        }
    }

    /// Full-size vocal model (20 × 16 heads × 1152; local 6 × 8 heads).
    pub fn paper_vocal(vocab_sizes: Vec<usize>, aux_tables: Vec<AuxTable>, max_steps: usize) -> Self {
        Self {
            vocab_sizes,
            aux_tables,
            emb_dim: 288,
            global: StackConfig { dim: 1152, layers: 20, heads: 16 },
            local: StackConfig { dim: 1152, layers: 6, heads: 8 },
            max_steps,
            seed: 0,
        }
    }

    /// Tiny sizes for tests and smoke runs.
    pub fn tiny(vocab_sizes: Vec<usize>, aux_tables: Vec<AuxTable>, max_steps: usize) -> Self {
        Self {
            vocab_sizes,
            aux_tables,
            emb_dim: 16,
            global: StackConfig { dim: 32, layers: 2, heads: 2 },
            local: StackConfig { dim: 32, layers: 1, heads: 2 },
            max_steps,
            seed: 0,
        }
    }

    pub fn preset(preset: Preset, vocab_sizes: Vec<usize>, aux_tables: Vec<AuxTable>, max_steps: usize) -> Self {
        match preset {
            Preset::Tiny => Self::tiny(vocab_sizes, aux_tables, max_steps),
            Preset::Desk => Self::desk(vocab_sizes, aux_tables, max_steps),
            Preset::PaperMidi => Self::paper_midi(vocab_sizes, aux_tables, max_steps),
            Preset::PaperVocal => Self::paper_vocal(vocab_sizes, aux_tables, max_steps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_sizes.is_empty() || self.vocab_sizes.iter().any(|&v| v == 0) {
            return Err(Error::Config("every slot needs a nonempty vocabulary".into()));
        }
        for s in [self.global, self.local] {
            if s.dim == 0 || s.heads == 0 || s.dim % s.heads != 0 {
                return Err(Error::Config(format!("bad stack config {s:?}")));
            }
        }
        if self.max_steps == 0 || self.emb_dim == 0 {
            return Err(Error::Config("max_steps and emb_dim must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_tokens_validation() {
        assert!(FrameTokens::new(vec![vec![0, 1]], vec![2, 2]).is_ok());
        assert!(FrameTokens::new(vec![vec![0, 2]], vec![2, 2]).is_err());
        assert!(FrameTokens::new(vec![vec![0]], vec![2, 2]).is_err());
        assert!(FrameTokens::new(vec![], vec![2]).is_err());
        assert!(FrameTokens::new(vec![vec![]], vec![]).is_err());
    }

    #[test]
    fn mask_covers_targets_only() {
        let t = FrameTokens::new(vec![vec![0, 0], vec![1, 1]], vec![2, 2]).unwrap();
        let segs = vec![
            ConditionSegment::symbols(SegmentKind::Pinyin, 0, vec![1, 2, 3]),
            ConditionSegment::bos(),
            ConditionSegment::target(t, true),
        ];
        assert_eq!(loss_mask(&segs), vec![false, false, false, false, true, true, true]);
    }
}
