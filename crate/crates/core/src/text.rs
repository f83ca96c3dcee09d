//! Toy text front ends: a hashed word tokenizer, the closed syllable
//! inventory that stands in for pinyin, and pluggable prompt encoders.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lm::SegmentContent;

pub const LYRICS_MAX_TOKENS: usize = 80;
pub const MELODY_PROMPT_MAX_TOKENS: usize = 50;
pub const ACCOMP_PROMPT_MAX_TOKENS: usize = 80;

static TRUNCATED: AtomicUsize = AtomicUsize::new(0);

/// Number of token sequences cut by [`truncate_tokens`] in this process.
pub fn truncation_count() -> usize {
    TRUNCATED.load(Ordering::Relaxed)
}

/// Keeps the first `max` ids, warning when anything is cut.
pub fn truncate_tokens(mut ids: Vec<u32>, max: usize, what: &str) -> Vec<u32> {
    if ids.len() > max {
        let n = TRUNCATED.fetch_add(1, Ordering::Relaxed) + 1;
        log::warn!("{what}: truncated {} tokens to {max} ({n} truncations so far)", ids.len());
        ids.truncate(max);
    }
    ids
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Lower-cased words hashed into `1..vocab`; id 0 is never produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashTokenizer {
    vocab: usize,
}

impl HashTokenizer {
    pub fn new(vocab: usize) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::Config("tokenizer vocabulary must hold at least two ids".into()));
        }
        Ok(Self { vocab })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
    }

    pub fn word_id(&self, word: &str) -> u32 {
        1 + (fnv1a(word.as_bytes()) % (self.vocab as u64 - 1)) as u32
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        Self::words(text).map(|w| self.word_id(&w)).collect()
    }
}

/// Converts lyrics to pronunciation syllables. Real pinyin conversion
/// plugs in here; the synthetic corpus writes syllables directly.
pub trait Romanizer: Send + Sync {
    fn syllables(&self, lyrics: &str) -> Vec<String>;
}

/// Treats whitespace-separated lyrics as syllables already.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRomanizer;

impl Romanizer for IdentityRomanizer {
    fn syllables(&self, lyrics: &str) -> Vec<String> {
        HashTokenizer::words(lyrics).collect()
    }
}

const SYLLABLES: &[&str] = &[
    "a", "ai", "an", "ba", "bei", "bu", "cha", "chu", "da", "de", "di", "dong", "fa", "fei", "feng", "ge", "guang",
    "hai", "he", "hua", "huo", "ji", "jia", "jin", "kai", "kong", "lai", "lan", "le", "li", "liu", "long", "ma",
    "mei", "meng", "ming", "na", "ni", "qi", "qing", "ran", "ren", "ri", "ru", "shan", "shi", "shui", "si", "tian",
    "wo", "xi", "xin", "xue", "yan", "ye", "yi", "yu", "yue", "yun", "zai", "zhi", "zhong",
];

/// Closed syllable vocabulary; id 0 is the unknown syllable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyllableInventory {
    syllables: Vec<String>,
}

impl Default for SyllableInventory {
    fn default() -> Self {
        Self { syllables: SYLLABLES.iter().map(|s| s.to_string()).collect() }
    }
}

impl SyllableInventory {
    pub fn new(syllables: Vec<String>) -> Self {
        Self { syllables }
    }

    /// Vocabulary size including the unknown id.
    pub fn vocab(&self) -> usize {
        self.syllables.len() + 1
    }

    pub fn len(&self) -> usize {
        self.syllables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.syllables.is_empty()
    }

    pub fn syllable(&self, i: usize) -> Option<&str> {
        self.syllables.get(i).map(String::as_str)
    }

    pub fn id(&self, syllable: &str) -> u32 {
        self.syllables.iter().position(|s| s == syllable).map_or(0, |i| i as u32 + 1)
    }

    pub fn encode(&self, romanizer: &dyn Romanizer, lyrics: &str) -> Vec<u32> {
        romanizer.syllables(lyrics).iter().map(|s| self.id(s)).collect()
    }
}

/// Turns a prompt string into a condition segment body.
pub trait PromptEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn encode(&self, text: &str, max_tokens: usize) -> Result<SegmentContent>;
}

/// Hashed word ids looked up in one of the language model's own (trainable)
/// auxiliary tables.
#[derive(Debug, Clone, Copy)]
pub struct TrainablePromptEncoder {
    pub tokenizer: HashTokenizer,
    pub table: usize,
}

impl PromptEncoder for TrainablePromptEncoder {
    fn name(&self) -> &str {
        "trainable"
    }

    fn encode(&self, text: &str, max_tokens: usize) -> Result<SegmentContent> {
        let ids = truncate_tokens(self.tokenizer.tokenize(text), max_tokens, "prompt");
        if ids.is_empty() {
            return Err(Error::invalid("prompt has no words"));
        }
        Ok(SegmentContent::Symbols { tables: vec![self.table], ids: ids.into_iter().map(|i| vec![i]).collect() })
    }
}

/// Frozen encoder: every word maps to a fixed pseudo-random vector derived
/// from its hash, the way a pretrained encoder's outputs stay fixed during
/// training.
#[derive(Debug, Clone, Copy)]
pub struct FrozenPromptEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl FrozenPromptEncoder {
    pub fn word_vector(&self, word: &str) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()) ^ self.seed);
        let scale = 1.0 / (self.dim as f64).sqrt();
        (0..self.dim).map(|_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32).collect()
    }
}

impl PromptEncoder for FrozenPromptEncoder {
    fn name(&self) -> &str {
        "frozen"
    }

    fn encode(&self, text: &str, max_tokens: usize) -> Result<SegmentContent> {
        let mut words: Vec<String> = HashTokenizer::words(text).collect();
        if words.len() > max_tokens {
            TRUNCATED.fetch_add(1, Ordering::Relaxed);
            log::warn!("prompt: truncated {} words to {max_tokens}", words.len());
            words.truncate(max_tokens);
        }
        if words.is_empty() {
            return Err(Error::invalid("prompt has no words"));
        }
        Ok(SegmentContent::Vectors(words.iter().map(|w| self.word_vector(w)).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashing_is_stable_and_in_range() {
        let t = HashTokenizer::new(100).unwrap();
        let a = t.tokenize("Hello, hello world!");
        assert_eq!(a.len(), 3);
        assert_eq!(a[0], a[1]);
        assert!(a.iter().all(|&i| (1..100).contains(&i)));
        assert_eq!(t.tokenize("hello world"), t.tokenize("HELLO   world"));
    }

    #[test]
    fn truncation_keeps_prefix() {
        let before = truncation_count();
        assert_eq!(truncate_tokens((0..100).collect(), 80, "lyrics").len(), 80);
        assert_eq!(truncate_tokens(vec![1, 2], 80, "lyrics"), vec![1, 2]);
        assert!(truncation_count() > before);
    }

    #[test]
    fn syllables_roundtrip() {
        let inv = SyllableInventory::default();
        let ids = inv.encode(&IdentityRomanizer, "wo ai ni zzz");
        assert_eq!(ids[3], 0);
        assert_eq!(inv.syllable(ids[0] as usize - 1), Some("wo"));
        assert!(ids.iter().all(|&i| (i as usize) < inv.vocab()));
    }

    #[test]
    fn frozen_encoder_is_deterministic() {
        let e = FrozenPromptEncoder { dim: 8, seed: 1 };
        let a = e.encode("a bright song", 50).unwrap();
        assert_eq!(a, e.encode("a bright song", 50).unwrap());
        match e.encode(&"la ".repeat(60), 50).unwrap() {
            SegmentContent::Vectors(v) => assert_eq!(v.len(), 50),
            _ => unreachable!(),
        }
    }
}
