//! Melody attribute extraction, prompt templates, and conditioning dropout.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::key::{estimate_key, note_profile, KeyEstimate};
use crate::melody::{MidiSequence, MAX_PITCH, MIN_PITCH};

pub const PITCH_LABELS: [&str; 5] = ["very low", "low", "medium", "high", "very high"];
pub const TEMPO_LABELS: [&str; 5] = ["very slow", "slow", "moderate", "fast", "very fast"];
pub const DURATION_LABELS: [&str; 4] = ["short", "medium-length", "long", "very long"];

const DEFAULT_TEMPLATES: &str = include_str!("../data/melody_templates.txt");

/// Equal-width bin edges for each attribute, plus the rejection thresholds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttributeBins {
    pub pitch_range: (f64, f64),
    pub tempo_range_bpm: (f64, f64),
    pub duration_range_s: (f64, f64),
    /// Half-width of the "near an edge" zone, as a fraction of the range.
    pub boundary_margin: f64,
    pub min_tempo_confidence: f64,
    pub min_key_correlation: f64,
}

impl Default for AttributeBins {
    fn default() -> Self {
        Self {
            pitch_range: (MIN_PITCH as f64, MAX_PITCH as f64),
            tempo_range_bpm: (40.0, 200.0),
            duration_range_s: (1.0, 30.0),
            boundary_margin: 0.02,
            min_tempo_confidence: 0.3,
            min_key_correlation: 0.5,
        }
    }
}

/// Category index of `value` among `n` equal bins over `range`, or `None`
/// when the value lies within `margin · width(range)` of an interior edge.
pub fn bin_with_margin(value: f64, range: (f64, f64), n: usize, margin: f64) -> Option<usize> {
    let (lo, hi) = range;
    let span = hi - lo;
    let width = span / n as f64;
    let guard = margin * span;
    for i in 1..n {
        let edge = lo + width * i as f64;
        if (value - edge).abs() <= guard {
            return None;
        }
    }
    let idx = ((value - lo) / width).floor();
    Some(idx.clamp(0.0, (n - 1) as f64) as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AttributeSet {
    pub key: Option<KeyEstimate>,
    pub pitch_category: Option<usize>,
    pub tempo_category: Option<usize>,
    pub duration_category: Option<usize>,
    pub emotion: Vec<String>,
}

impl AttributeSet {
    pub fn pitch_label(&self) -> Option<&'static str> {
        self.pitch_category.map(|i| PITCH_LABELS[i])
    }

    pub fn tempo_label(&self) -> Option<&'static str> {
        self.tempo_category.map(|i| TEMPO_LABELS[i])
    }

    pub fn duration_label(&self) -> Option<&'static str> {
        self.duration_category.map(|i| DURATION_LABELS[i])
    }
}

pub fn bin_attributes(
    m: &MidiSequence,
    tempo_bpm: Option<f64>,
    tempo_confidence: Option<f64>,
    emotion: &[String],
    bins: &AttributeBins,
) -> Result<AttributeSet> {
    let key = estimate_key(&note_profile(m)).ok().filter(|k| k.r >= bins.min_key_correlation);
    let pitch_category = bin_with_margin(m.average_pitch()?, bins.pitch_range, 5, bins.boundary_margin);
    let tempo_category = match (tempo_bpm, tempo_confidence) {
        (Some(_), Some(c)) if c < bins.min_tempo_confidence => None,
        (Some(t), _) => bin_with_margin(t, bins.tempo_range_bpm, 5, bins.boundary_margin),
        (None, _) => None,
    };
    let duration_category = bin_with_margin(m.total_seconds(), bins.duration_range_s, 4, bins.boundary_margin);
    Ok(AttributeSet { key, pitch_category, tempo_category, duration_category, emotion: emotion.to_vec() })
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq)]
struct Template {
    /// Each clause is dropped whole when one of its slots has no value.
    clauses: Vec<(bool, Vec<Piece>)>,
}

/// Prompt templates: one per line, `{key} {pitch_cat} {tempo_cat} {dur_cat}
/// {emotion}` placeholders, `[...]` marking an optional clause.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    templates: Vec<Template>,
}

const SLOTS: [&str; 5] = ["key", "pitch_cat", "tempo_cat", "dur_cat", "emotion"];

fn parse_pieces(text: &str, line: usize) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            pieces.push(Piece::Text(rest[..open].to_string()));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::invalid(format!("template line {line}: unclosed placeholder")))?;
        let name = &rest[open + 1..open + close];
        if !SLOTS.contains(&name) {
            return Err(Error::invalid(format!("template line {line}: unknown placeholder {{{name}}}")));
        }
        pieces.push(Piece::Slot(name.to_string()));
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest.to_string()));
    }
    Ok(pieces)
}

impl Templates {
    pub fn parse(text: &str) -> Result<Self> {
        let mut templates = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut clauses = Vec::new();
            let mut rest = line;
            while let Some(open) = rest.find('[') {
                if open > 0 {
                    clauses.push((false, parse_pieces(&rest[..open], i + 1)?));
                }
                let close = rest[open..]
                    .find(']')
                    .ok_or_else(|| Error::invalid(format!("template line {}: unclosed clause", i + 1)))?;
                clauses.push((true, parse_pieces(&rest[open + 1..open + close], i + 1)?));
                rest = &rest[open + close + 1..];
            }
            if !rest.is_empty() {
                clauses.push((false, parse_pieces(rest, i + 1)?));
            }
            templates.push(Template { clauses });
        }
        if templates.is_empty() {
            return Err(Error::invalid("no templates"));
        }
        Ok(Self { templates })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Fills template `template_id`. With probability 0.5 the key is
    /// replaced by its relative before rendering; the coin is always drawn.
    pub fn render<R: Rng + ?Sized>(&self, a: &AttributeSet, template_id: usize, rng: &mut R) -> Result<String> {
        let template = self.templates.get(template_id).ok_or_else(|| {
            Error::invalid(format!("template {template_id} out of range (have {})", self.templates.len()))
        })?;
        let switch = rng.gen_bool(0.5);
        let key = a.key.map(|k| if switch { k.key.relative() } else { k.key });
        let emotion = (!a.emotion.is_empty()).then(|| a.emotion.join(", "));
        let value = |slot: &str| -> Option<String> {
            match slot {
                "key" => key.map(|k| k.name()),
                "pitch_cat" => a.pitch_label().map(str::to_string),
                "tempo_cat" => a.tempo_label().map(str::to_string),
                "dur_cat" => a.duration_label().map(str::to_string),
                "emotion" => emotion.clone(),
                _ => None,
            }
        };
        let mut out = String::new();
        for (optional, pieces) in &template.clauses {
            let mut clause = String::new();
            let mut complete = true;
            for piece in pieces {
                match piece {
                    Piece::Text(t) => clause.push_str(t),
                    Piece::Slot(s) => match value(s) {
                        Some(v) => clause.push_str(&v),
                        None => complete = false,
                    },
                }
            }
            if complete || !optional {
                out.push_str(&clause);
            }
        }
        Ok(out)
    }
}

impl Default for Templates {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates parse")
    }
}

/// Renders with the bundled template set.
pub fn render_prompt<R: Rng + ?Sized>(a: &AttributeSet, template_id: usize, rng: &mut R) -> Result<String> {
    Templates::default().render(a, template_id, rng)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub lyrics: String,
    pub melody_prompt: Option<String>,
    pub accomp_prompt: Option<String>,
}

/// Two-level conditioning dropout: all optional conditions together with
/// `p_joint`, otherwise each one independently with `p_each`. The marginal
/// drop rate of one condition is `p_joint + (1 - p_joint) · p_each`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionDropout {
    pub p_each: f64,
    pub p_joint: f64,
}

impl Default for ConditionDropout {
    fn default() -> Self {
        Self { p_each: 0.1, p_joint: 0.1 }
    }
}

impl ConditionDropout {
    pub fn new(p_each: f64, p_joint: f64) -> Result<Self> {
        for p in [p_each, p_joint] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("dropout probability {p} outside [0, 1]")));
            }
        }
        Ok(Self { p_each, p_joint })
    }

    pub fn none() -> Self {
        Self { p_each: 0.0, p_joint: 0.0 }
    }

    pub fn marginal(&self) -> f64 {
        self.p_joint + (1.0 - self.p_joint) * self.p_each
    }

    /// Keep-flags for `n` optional conditions.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<bool> {
        if rng.gen::<f64>() < self.p_joint {
            return vec![false; n];
        }
        (0..n).map(|_| rng.gen::<f64>() >= self.p_each).collect()
    }
}

/// Drops the optional prompts of a bundle; lyrics are always kept.
pub fn apply_condition_dropout<R: Rng + ?Sized>(
    b: &PromptBundle,
    rng: &mut R,
    p_each: f64,
    p_joint: f64,
) -> Result<PromptBundle> {
    let keep = ConditionDropout::new(p_each, p_joint)?.sample(2, rng);
    Ok(PromptBundle {
        lyrics: b.lyrics.clone(),
        melody_prompt: b.melody_prompt.clone().filter(|_| keep[0]),
        accomp_prompt: b.accomp_prompt.clone().filter(|_| keep[1]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::key::{Key, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full_set() -> AttributeSet {
        AttributeSet {
            key: Some(KeyEstimate { key: Key::new(0, Mode::Major), r: 0.9 }),
            pitch_category: Some(2),
            tempo_category: Some(3),
            duration_category: Some(0),
            emotion: vec!["joyful".into()],
        }
    }

    #[test]
    fn binning() {
        let bins = AttributeBins::default();
        let m = MidiSequence::from_pairs(&[(56, 100)]).unwrap();
        let a = bin_attributes(&m, Some(120.0), Some(0.2), &[], &bins).unwrap();
        assert_eq!(a.pitch_label(), Some("medium"));
        assert_eq!(a.tempo_category, None);
        let a = bin_attributes(&m, Some(120.0), Some(0.9), &[], &bins).unwrap();
        assert_eq!(a.tempo_label(), Some("moderate"));
        // 41.6 is the first pitch edge
        assert_eq!(bin_with_margin(41.6, (32.0, 80.0), 5, 0.02), None);
        assert_eq!(bin_with_margin(42.0, (32.0, 80.0), 5, 0.02), None);
        assert_eq!(bin_with_margin(43.0, (32.0, 80.0), 5, 0.02), Some(1));
        assert_eq!(bin_with_margin(32.0, (32.0, 80.0), 5, 0.02), Some(0));
        assert_eq!(bin_with_margin(80.0, (32.0, 80.0), 5, 0.02), Some(4));
    }

    #[test]
    fn low_correlation_key_is_dropped() {
        let bins = AttributeBins::default();
        let pairs: Vec<(i32, u32)> = (60..71).map(|p| (p, 2)).collect();
        let m = MidiSequence::from_pairs(&pairs).unwrap();
        let a = bin_attributes(&m, None, None, &[], &bins).unwrap();
        assert!(a.key.is_none());
        let scale = MidiSequence::from_pairs(&[(60, 4), (62, 2), (64, 3), (65, 2), (67, 4), (69, 2), (71, 1), (72, 4)])
            .unwrap();
        let a = bin_attributes(&scale, None, None, &[], &bins).unwrap();
        assert_eq!(a.key.unwrap().key, Key::new(0, Mode::Major));
    }

    #[test]
    fn bundled_templates() {
        assert_eq!(Templates::default().len(), 8);
    }

    #[test]
    fn render_full_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = render_prompt(&full_set(), 0, &mut rng).unwrap();
        assert!(s.contains("C major") || s.contains("A minor"), "{s}");
        for label in ["medium", "fast", "short", "joyful"] {
            assert!(s.contains(label), "{s} lacks {label}");
        }
        let s = render_prompt(&AttributeSet::default(), 0, &mut rng).unwrap();
        assert_eq!(s, "Compose a melody.");
        assert!(render_prompt(&full_set(), 8, &mut rng).is_err());
    }

    #[test]
    fn relative_switch_and_determinism() {
        let mut seen_relative = false;
        let mut seen_original = false;
        for seed in 0..32 {
            let s = render_prompt(&full_set(), 6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let again = render_prompt(&full_set(), 6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(s, again);
            seen_relative |= s.contains("A minor");
            seen_original |= s.contains("C major");
        }
        assert!(seen_relative && seen_original);
    }

    #[test]
    fn dropout_edge_cases() {
        let b = PromptBundle { lyrics: "la la".into(), melody_prompt: Some("m".into()), accomp_prompt: Some("a".into()) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(apply_condition_dropout(&b, &mut rng, 0.0, 0.0).unwrap(), b);
            let d = apply_condition_dropout(&b, &mut rng, 0.0, 1.0).unwrap();
            assert_eq!(d.lyrics, "la la");
            assert!(d.melody_prompt.is_none() && d.accomp_prompt.is_none());
        }
        assert!(apply_condition_dropout(&b, &mut rng, 1.5, 0.0).is_err());
    }

    #[test]
    fn dropout_marginal() {
        let b = PromptBundle { lyrics: "x".into(), melody_prompt: Some("m".into()), accomp_prompt: Some("a".into()) };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut dropped = [0usize; 2];
        for _ in 0..n {
            let d = apply_condition_dropout(&b, &mut rng, 0.1, 0.1).unwrap();
            dropped[0] += d.melody_prompt.is_none() as usize;
            dropped[1] += d.accomp_prompt.is_none() as usize;
        }
        for d in dropped {
            assert!((d as f64 / n as f64 - 0.19).abs() < 0.01);
        }
        assert!((ConditionDropout::default().marginal() - 0.19).abs() < 1e-12);
    }
}
