//! Synthetic singing corpus: in-key random-walk melodies, harmonic "vocals"
//! and rule-based accompaniment, with an NDJSON manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{render_harmonic, MelAnalyzer, MelSpec};
use crate::error::{Error, Result};
use crate::key::{Key, Mode};
use crate::melody::{read_json, write_json};
use crate::melody::{MidiSequence, NoteEvent, DEFAULT_FRAME_RATE, MAX_PITCH, MIN_PITCH};
use crate::prompt::{bin_attributes, AttributeBins, Templates};
use crate::text::{IdentityRomanizer, SyllableInventory};
use crate::vocal_stage::midi_to_hz;

pub const MANIFEST_FILE: &str = "manifest.ndjson";
pub const MIN_CLIP_SECONDS: f64 = 1.0;
pub const MAX_CLIP_SECONDS: f64 = 30.0;
/// Boundary-confidence thresholds of the three segmentation variants.
pub const SEGMENTATION_THRESHOLDS: [f64; 3] = [0.8, 0.85, 0.9];

const EMOTIONS: [&str; 8] = ["happy", "sad", "calm", "energetic", "romantic", "nostalgic", "dreamy", "tense"];
const ACCOMP_TEMPLATES: [&str; 4] = [
    "{emotion} accompaniment in {key} at {tempo} bpm",
    "a {emotion} backing track with soft pads in {key}",
    "{emotion} band arrangement, {tempo} beats per minute",
    "warm {emotion} chords under the voice, key of {key}",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkParams {
    /// Largest move between notes, in scale degrees.
    pub max_step: u8,
    /// Probability of repeating the previous pitch.
    pub repeat_prob: f64,
    /// Semitones either side of the singer's center pitch.
    pub span: u8,
    /// Note lengths to draw from, in sixteenths.
    pub sixteenths: Vec<u32>,
    /// Length multiplier for tonic-triad notes.
    pub chord_tone_weight: u32,
    /// Relative odds of stepping onto a tonic-triad note.
    pub triad_pull: f64,
}

impl Default for WalkParams {
    fn default() -> Self {
        Self { max_step: 2, repeat_prob: 0.15, span: 8, sixteenths: vec![1, 2, 2, 3, 4], chord_tone_weight: 2, triad_pull: 3.0 }
    }
}

/// Accompaniment: the melody shifted by a fixed interval plus sustained
/// tonic-triad pad tones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarmonyRule {
    pub melody_interval: i32,
    /// Scale degrees of the pad (0-based), placed in the octave above MIDI 48.
    pub pad_degrees: Vec<usize>,
    pub pad_gain: f32,
}

impl Default for HarmonyRule {
    fn default() -> Self {
        Self { melody_interval: -12, pad_degrees: vec![0, 2, 4], pad_gain: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCorpusSpec {
    pub n_clips: usize,
    pub n_singers: usize,
    /// Keys to draw from uniformly; empty means all 24.
    pub keys: Vec<Key>,
    pub tempo_bpm: (f64, f64),
    pub clip_seconds: (f64, f64),
    pub walk: WalkParams,
    pub harmony: HarmonyRule,
    /// The last `holdout` clips form the holdout split.
    pub holdout: usize,
}

impl Default for SynthCorpusSpec {
    fn default() -> Self {
        Self {
            n_clips: 200,
            n_singers: 4,
            keys: Vec::new(),
            tempo_bpm: (80.0, 140.0),
            clip_seconds: (1.2, 2.4),
            walk: WalkParams::default(),
            harmony: HarmonyRule::default(),
            holdout: 10,
        }
    }
}

impl SynthCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_clips == 0 || self.n_singers == 0 {
            return bad("corpus needs at least one clip and one singer".into());
        }
        if self.holdout >= self.n_clips {
            return bad(format!("holdout {} leaves no training clips out of {}", self.holdout, self.n_clips));
        }
        let (lo, hi) = self.clip_seconds;
        if !(MIN_CLIP_SECONDS..=MAX_CLIP_SECONDS).contains(&lo) || !(lo..=MAX_CLIP_SECONDS).contains(&hi) {
            return bad(format!("clip length range {lo}..{hi} s must lie within 1..30 s"));
        }
        let (t0, t1) = self.tempo_bpm;
        if !(t0 > 0.0 && t0 <= t1) {
            return bad(format!("tempo range {t0}..{t1} is empty"));
        }
        if self.walk.sixteenths.is_empty() || self.walk.sixteenths.contains(&0) {
            return bad("note lengths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.walk.repeat_prob) || self.walk.max_step == 0 || !(self.walk.triad_pull > 0.0) {
            return bad("walk needs 0 <= repeat_prob < 1, a positive step and a positive triad pull".into());
        }
        if self.harmony.pad_degrees.iter().any(|&d| d >= 7) {
            return bad("pad degrees are 0..6".into());
        }
        Ok(())
    }

    fn key_pool(&self) -> Vec<Key> {
        if self.keys.is_empty() {
            (0..12).flat_map(|t| [Key::new(t, Mode::Major), Key::new(t, Mode::Minor)]).collect()
        } else {
            self.keys.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

/// One manifest line. Paths are relative to the corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub id: String,
    pub lyrics: String,
    pub pinyin: Vec<u32>,
    pub midi: PathBuf,
    /// Segmentation variants, one per boundary threshold.
    pub midi_variants: Vec<PathBuf>,
    /// Vocal log-mel; acoustic features are derived from it.
    pub vocal_mel: PathBuf,
    pub accomp_mel: PathBuf,
    pub singer: u32,
    pub key: Option<Key>,
    pub tempo_bpm: f64,
    pub tempo_confidence: f64,
    pub emotion: Vec<String>,
    pub melody_prompt: Option<String>,
    pub accomp_prompt: Option<String>,
    pub split: Split,
}

impl ClipManifest {
    /// Referenced files exist and parse, and the clip is 1 to 30 s long.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let m = read_json(root.join(&self.midi))?;
        let secs = m.total_seconds();
        if !(MIN_CLIP_SECONDS..=MAX_CLIP_SECONDS).contains(&secs) {
            return Err(Error::invalid(format!("clip {} lasts {secs:.2} s", self.id)));
        }
        for v in &self.midi_variants {
            let variant = read_json(root.join(v))?;
            if variant.expand()? != m.expand()? {
                return Err(Error::invalid(format!("clip {}: variant {} changes the melody", self.id, v.display())));
            }
        }
        MelSpec::load(root.join(&self.vocal_mel))?;
        MelSpec::load(root.join(&self.accomp_mel))?;
        if self.pinyin.is_empty() {
            return Err(Error::invalid(format!("clip {} has no pinyin", self.id)));
        }
        Ok(())
    }
}

/// A manifest with the directory its paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub root: PathBuf,
    pub clips: Vec<ClipManifest>,
}

impl Corpus {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let f = fs::File::open(&path).map_err(|e| Error::Dependency(format!("no corpus manifest at {}: {e}", path.display())))?;
        let clips = read_manifest(BufReader::new(f), &path)?;
        Ok(Self { root, clips })
    }

    pub fn path(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn midi(&self, clip: &ClipManifest) -> Result<MidiSequence> {
        read_json(self.path(&clip.midi))
    }

    pub fn vocal_mel(&self, clip: &ClipManifest) -> Result<MelSpec> {
        MelSpec::load(self.path(&clip.vocal_mel))
    }

    pub fn accomp_mel(&self, clip: &ClipManifest) -> Result<MelSpec> {
        MelSpec::load(self.path(&clip.accomp_mel))
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.clips.len()).filter(|&i| self.clips[i].split == split).collect()
    }

    /// Reference clip for `i`: the next training clip by the same singer
    /// (cyclically), or `i` itself when there is none.
    pub fn reference_for(&self, i: usize) -> usize {
        let n = self.clips.len();
        (1..n)
            .map(|d| (i + d) % n)
            .find(|&j| self.clips[j].singer == self.clips[i].singer && self.clips[j].split == Split::Train)
            .unwrap_or(i)
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.clips.iter().position(|c| c.id == id)
    }
}

pub fn write_manifest(clips: &[ClipManifest], w: &mut impl Write) -> Result<()> {
    for c in clips {
        serde_json::to_writer(&mut *w, c)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest(r: impl BufRead, path: &Path) -> Result<Vec<ClipManifest>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

/// Ground-truth F0 at 50 Hz: the note pitch, with the first frame of every
/// note unvoiced (a consonant onset).
pub fn gt_f0(m: &MidiSequence) -> (Vec<f64>, Vec<bool>) {
    let mut f0 = Vec::with_capacity(m.total_frames());
    let mut voiced = Vec::with_capacity(m.total_frames());
    for n in m.notes() {
        for k in 0..n.duration() {
            let v = k > 0;
            voiced.push(v);
            f0.push(if v { midi_to_hz(n.pitch() as f64) } else { 0.0 });
        }
    }
    (f0, voiced)
}

fn singer_center(singer: u32) -> i32 {
    52 + 4 * (singer % 5) as i32
}

fn singer_timbre(singer: u32) -> Vec<f32> {
    let tilt = 0.9 + 0.35 * (singer % 4) as f32;
    let formant = 2 + (singer % 3) as usize;
    let mut h: Vec<f32> = (1..=8).map(|k| (k as f32).powf(-tilt)).collect();
    h[formant] *= 2.0;
    let total: f32 = h.iter().sum();
    h.iter().map(|w| w / total).collect()
}

/// In-key random walk around `center`, exactly `frames` frames long. It
/// opens with an arpeggio of the tonic triad and ends on the tonic; short
/// clips hold few notes, and without the third the mode is ambiguous.
pub fn random_melody<R: Rng + ?Sized>(
    key: Key,
    center: i32,
    tempo_bpm: f64,
    frames: usize,
    walk: &WalkParams,
    rng: &mut R,
) -> Result<MidiSequence> {
    let scale = key.scale();
    let lo = (center - walk.span as i32).max(MIN_PITCH as i32);
    let hi = (center + walk.span as i32).min(MAX_PITCH as i32);
    let pitches: Vec<i32> = (lo..=hi).filter(|p| scale.contains(&((p % 12) as u8))).collect();
    if pitches.len() < 3 || frames < 2 {
        return Err(Error::invalid("melody range or length too small"));
    }
    let tonic_near = |p: i32| {
        *pitches
            .iter()
            .filter(|&&q| (q % 12) as u8 == key.tonic)
            .min_by_key(|&&q| (q - p).abs())
            .expect("range spans an octave")
    };
    let triad = [scale[0], scale[2], scale[4]];
    let sixteenth = DEFAULT_FRAME_RATE * 60.0 / tempo_bpm / 4.0;
    let mut idx = pitches.iter().position(|&p| p == tonic_near(center)).expect("tonic in range") as i32;
    let mut notes: Vec<(i32, u32)> = Vec::new();
    let mut total = 0usize;
    let mut opening = triad.into_iter().skip(1);
    let mut ending = (frames / 5).max(2);
    if frames - ending < 2 {
        ending = frames;
    }
    let body = frames - ending;
    while total < body {
        if !notes.is_empty() {
            if let Some(pc) = opening.next() {
                idx = (0..pitches.len() as i32)
                    .filter(|&j| (pitches[j as usize] % 12) as u8 == pc)
                    .min_by_key(|&j| (j - idx).abs())
                    .expect("range spans an octave");
            }
        }
        let p = pitches[idx as usize];
        let mut units = *walk.sixteenths.choose(rng).expect("nonempty");
        if triad.contains(&((p % 12) as u8)) {
            units *= walk.chord_tone_weight.max(1);
        }
        let d = ((units as f64 * sixteenth).round() as usize).min(frames / 5).max(2).min(body - total);
        if d < 2 {
            notes.last_mut().expect("first note fits").1 += d as u32;
            break;
        }
        notes.push((p, d as u32));
        total += d;
        if !rng.gen_bool(walk.repeat_prob) {
            let reach = walk.max_step as i32;
            let moves: Vec<(i32, f64)> = (idx - reach..=idx + reach)
                .filter(|&j| j != idx && j >= 0 && j < pitches.len() as i32)
                .map(|j| {
                    let pc = (pitches[j as usize] % 12) as u8;
                    (j, if triad.contains(&pc) { walk.triad_pull } else { 1.0 })
                })
                .collect();
            idx = moves.choose_weighted(rng, |m| m.1).expect("neighbors exist").0;
        }
    }
    let home = tonic_near(notes.last().map_or(center, |n| n.0));
    match notes.last_mut() {
        Some(n) if n.0 == home => n.1 += ending as u32,
        _ => notes.push((home, ending as u32)),
    }
    MidiSequence::from_pairs(&notes)
}

/// Three segmentations of `m`: each note of 4+ frames carries a candidate
/// split with a boundary confidence; a variant keeps the boundaries whose
/// confidence reaches its threshold.
pub fn segmentation_variants<R: Rng + ?Sized>(m: &MidiSequence, rng: &mut R) -> Result<Vec<MidiSequence>> {
    let candidates: Vec<Option<(f64, u32)>> = m
        .notes()
        .iter()
        .map(|n| {
            let d = n.duration();
            (d >= 4).then(|| (rng.gen_range(0.7..1.0), rng.gen_range(2..=d - 2)))
        })
        .collect();
    SEGMENTATION_THRESHOLDS
        .iter()
        .map(|&th| {
            let mut notes = Vec::new();
            for (n, c) in m.notes().iter().zip(&candidates) {
                match c {
                    Some((conf, at)) if *conf >= th => {
                        notes.push(NoteEvent::new(n.pitch() as i32, *at)?);
                        notes.push(NoteEvent::new(n.pitch() as i32, n.duration() - at)?);
                    }
                    _ => notes.push(*n),
                }
            }
            MidiSequence::new(notes, m.frame_rate_hz())
        })
        .collect()
}

fn render_vocal(m: &MidiSequence, singer: u32) -> Vec<f32> {
    let (f0, voiced) = gt_f0(m);
    let amp: Vec<f32> = voiced.iter().map(|&v| if v { 0.5 } else { 0.0 }).collect();
    render_harmonic(&f0, &amp, &singer_timbre(singer), DEFAULT_FRAME_RATE)
}

fn render_accomp(m: &MidiSequence, key: Key, rule: &HarmonyRule) -> Vec<f32> {
    let shifted: Vec<f64> = m
        .expand()
        .expect("valid melody")
        .pitches()
        .iter()
        .map(|&p| midi_to_hz((p as i32 + rule.melody_interval) as f64))
        .collect();
    let n = shifted.len();
    let bass = [0.6f32, 0.25, 0.1, 0.05];
    let mut out = render_harmonic(&shifted, &vec![0.5; n], &bass, DEFAULT_FRAME_RATE);
    let scale = key.scale();
    let pad_timbre = [0.5f32, 0.3, 0.2];
    for &deg in &rule.pad_degrees {
        let pc = scale[deg] as i32;
        let pitch = 48 + (pc - 48 % 12).rem_euclid(12);
        let f = vec![midi_to_hz(pitch as f64); n];
        let voice = render_harmonic(&f, &vec![rule.pad_gain; n], &pad_timbre, DEFAULT_FRAME_RATE);
        out.iter_mut().zip(voice).for_each(|(o, v)| *o += v);
    }
    out
}

fn accomp_prompt<R: Rng + ?Sized>(key: Key, tempo: f64, emotion: &[String], rng: &mut R) -> String {
    ACCOMP_TEMPLATES
        .choose(rng)
        .expect("templates")
        .replace("{emotion}", &emotion.join(" and "))
        .replace("{key}", &key.name())
        .replace("{tempo}", &format!("{}", tempo.round() as i64))
}

struct ClipData {
    manifest: ClipManifest,
    midi: MidiSequence,
    variants: Vec<MidiSequence>,
    vocal: MelSpec,
    accomp: MelSpec,
}

fn make_clip(spec: &SynthCorpusSpec, seed: u64, i: usize, keys: &[Key], analyzer: &MelAnalyzer) -> Result<ClipData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    let singer = (i % spec.n_singers) as u32;
    let key = *keys.choose(&mut rng).expect("key pool");
    let tempo = rng.gen_range(spec.tempo_bpm.0..=spec.tempo_bpm.1).round();
    let frames = {
        let (lo, hi) = spec.clip_seconds;
        (rng.gen_range(lo..=hi) * DEFAULT_FRAME_RATE).round() as usize
    };
    let midi = random_melody(key, singer_center(singer), tempo, frames, &spec.walk, &mut rng)?;
    let variants = segmentation_variants(&midi, &mut rng)?;
    let inventory = SyllableInventory::default();
    let lyrics: Vec<&str> = (0..midi.len())
        .map(|_| inventory.syllable(rng.gen_range(0..inventory.len())).expect("in range"))
        .collect();
    let lyrics = lyrics.join(" ");
    let pinyin = inventory.encode(&IdentityRomanizer, &lyrics);
    let n_emotion = rng.gen_range(1..=2);
    let emotion: Vec<String> = EMOTIONS.choose_multiple(&mut rng, n_emotion).map(|s| s.to_string()).collect();
    let attrs = bin_attributes(&midi, Some(tempo), Some(1.0), &emotion, &AttributeBins::default())?;
    let templates = Templates::default();
    let melody_prompt = templates.render(&attrs, rng.gen_range(0..templates.len()), &mut rng)?;
    let accomp_prompt = accomp_prompt(key, tempo, &emotion, &mut rng);
    let vocal = analyzer.mel(&render_vocal(&midi, singer));
    let accomp = analyzer.mel(&render_accomp(&midi, key, &spec.harmony));
    let id = format!("clip-{i:05}");
    let dir = PathBuf::from("clips").join(&id);
    let manifest = ClipManifest {
        lyrics,
        pinyin,
        midi: dir.join("midi.json"),
        midi_variants: SEGMENTATION_THRESHOLDS
            .iter()
            .map(|t| dir.join(format!("midi_b{:03}.json", (t * 100.0).round() as u32)))
            .collect(),
        vocal_mel: dir.join("vocal.mel"),
        accomp_mel: dir.join("accomp.mel"),
        singer,
        key: Some(key),
        tempo_bpm: tempo,
        tempo_confidence: 1.0,
        emotion,
        melody_prompt: Some(melody_prompt),
        accomp_prompt: Some(accomp_prompt),
        split: if i + spec.holdout >= spec.n_clips { Split::Holdout } else { Split::Train },
        id,
    };
    Ok(ClipData { manifest, midi, variants, vocal, accomp })
}

/// Generates the clips in memory; deterministic in `(spec, seed)`.
pub fn synth_clips(spec: &SynthCorpusSpec, seed: u64) -> Result<Vec<(ClipManifest, MidiSequence)>> {
    spec.validate()?;
    let keys = spec.key_pool();
    let analyzer = MelAnalyzer::new();
    (0..spec.n_clips)
        .into_par_iter()
        .map(|i| make_clip(spec, seed, i, &keys, &analyzer).map(|c| (c.manifest, c.midi)))
        .collect()
}

/// Writes the corpus under `out` (clip files plus `manifest.ndjson`).
pub fn make_synth_corpus(spec: &SynthCorpusSpec, seed: u64, out: impl AsRef<Path>) -> Result<Corpus> {
    spec.validate()?;
    let root = out.as_ref().to_path_buf();
    let keys = spec.key_pool();
    let analyzer = MelAnalyzer::new();
    let clips = (0..spec.n_clips)
        .into_par_iter()
        .map(|i| {
            let c = make_clip(spec, seed, i, &keys, &analyzer)?;
            let m = &c.manifest;
            fs::create_dir_all(root.join(&m.midi).parent().expect("clip dir"))?;
            write_json(&c.midi, root.join(&m.midi))?;
            for (v, p) in c.variants.iter().zip(&m.midi_variants) {
                write_json(v, root.join(p))?;
            }
            c.vocal.save(root.join(&m.vocal_mel))?;
            c.accomp.save(root.join(&m.accomp_mel))?;
            Ok(c.manifest)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut f = std::io::BufWriter::new(fs::File::create(root.join(MANIFEST_FILE))?);
    write_manifest(&clips, &mut f)?;
    f.flush()?;
    log::info!("wrote {} clips to {}", clips.len(), root.display());
    Ok(Corpus { root, clips })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::key::{estimate_key, note_profile};

    fn small() -> SynthCorpusSpec {
        SynthCorpusSpec { n_clips: 12, holdout: 2, ..Default::default() }
    }

    #[test]
    fn corpus_is_deterministic_and_valid() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = make_synth_corpus(&small(), 3, a.path()).unwrap();
        let cb = make_synth_corpus(&small(), 3, b.path()).unwrap();
        assert_eq!(ca.clips, cb.clips);
        assert_eq!(fs::read(a.path().join(MANIFEST_FILE)).unwrap(), fs::read(b.path().join(MANIFEST_FILE)).unwrap());
        let loaded = Corpus::load(a.path()).unwrap();
        assert_eq!(loaded.clips, ca.clips);
        for c in &loaded.clips {
            c.validate(a.path()).unwrap();
            assert_eq!(fs::read(a.path().join(&c.vocal_mel)).unwrap(), fs::read(b.path().join(&c.vocal_mel)).unwrap());
        }
        assert_eq!(loaded.split(Split::Holdout).len(), 2);
        let other = synth_clips(&small(), 4).unwrap();
        assert_ne!(other[0].0, ca.clips[0]);
    }

    #[test]
    fn melodies_stay_in_key_and_fit_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..100 {
            let key = Key::new(i % 12, if i % 2 == 0 { Mode::Major } else { Mode::Minor });
            let frames = rng.gen_range(50..1500);
            let m = random_melody(key, 60, 110.0, frames, &WalkParams::default(), &mut rng).unwrap();
            assert_eq!(m.total_frames(), frames);
            assert!(m.notes().iter().all(|n| key.scale().contains(&(n.pitch() % 12))));
            assert!(m.notes().iter().all(|n| n.duration() >= 2));
            assert_eq!(m.notes().last().unwrap().pitch() % 12, key.tonic);
        }
    }

    #[test]
    fn estimated_keys_match() {
        let clips = synth_clips(&SynthCorpusSpec { n_clips: 100, holdout: 1, ..Default::default() }, 11).unwrap();
        let hits = clips
            .iter()
            .filter(|(c, m)| estimate_key(&note_profile(m)).map(|e| Some(e.key) == c.key).unwrap_or(false))
            .count();
        assert!(hits >= 90, "{hits}/100");
    }

    #[test]
    fn variants_share_the_melody() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_melody(Key::new(2, Mode::Major), 60, 90.0, 400, &WalkParams::default(), &mut rng).unwrap();
        let v = segmentation_variants(&m, &mut rng).unwrap();
        assert_eq!(v.len(), 3);
        for x in &v {
            assert_eq!(x.expand().unwrap(), m.expand().unwrap());
        }
        // A higher threshold keeps fewer boundaries.
        assert!(v[0].len() >= v[1].len() && v[1].len() >= v[2].len());
        assert!(v[0].len() > m.len());
    }

    #[test]
    fn gt_f0_marks_onsets_unvoiced() {
        let m = MidiSequence::from_pairs(&[(60, 3), (62, 2)]).unwrap();
        let (f0, v) = gt_f0(&m);
        assert_eq!(v, vec![false, true, true, false, true]);
        assert_eq!(f0[0], 0.0);
        assert!((f0[1] - 261.6256).abs() < 1e-3);
    }
}
