//! Run configuration: one TOML document with a section per stage. A
//! document names a preset (`smoke`, `desk`, `paper`) and overrides any
//! field of it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::SynthCorpusSpec;
use crate::error::{Error, Result};
use crate::lm::{Preset, Sampler};
use crate::vocal_stage::VocalMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RvqSection {
    pub num_books: usize,
    pub book_size: usize,
    pub iters: usize,
}

/// Optimizer and schedule shared by the gradient-trained stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub model: Preset,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Linear warm-up length; the rate then decays by cosine to a tenth.
    pub warmup: usize,
    pub checkpoint_every: usize,
}

impl TrainSection {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1);
        let frac = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MidiSection {
    #[serde(flatten)]
    pub train: TrainSection,
    pub lyrics_vocab: usize,
    pub prompt_vocab: usize,
    pub max_notes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocalSection {
    #[serde(flatten)]
    pub train: TrainSection,
    pub mode: VocalMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdmSection {
    #[serde(flatten)]
    pub train: TrainSection,
    pub prompt_vocab: usize,
    /// Diffusion steps; the preset's value when absent.
    pub diffusion_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub sampler: Sampler,
    pub midi_retries: usize,
    pub guidance: f64,
    pub griffin_lim_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub corpus: SynthCorpusSpec,
    pub rvq: RvqSection,
    pub vae: TrainSection,
    pub midi: MidiSection,
    pub vocal: VocalSection,
    pub ldm: LdmSection,
    pub generate: GenerateSection,
}

fn train(model: Preset, steps: usize, batch: usize, lr: f64) -> TrainSection {
    TrainSection { model, steps, batch, lr, warmup: steps / 20, checkpoint_every: steps.max(1) }
}

impl RunConfig {
    /// Minutes on one CPU core: tiny models on 1–2.4 s clips.
    pub fn smoke() -> Self {
        Self {
            preset: "smoke".into(),
            seed: 0,
            corpus: SynthCorpusSpec::default(),
            rvq: RvqSection { num_books: 8, book_size: 64, iters: 8 },
            vae: train(Preset::Tiny, 150, 4, 3e-3),
            midi: MidiSection { train: train(Preset::Tiny, 800, 8, 3e-3), lyrics_vocab: 512, prompt_vocab: 512, max_notes: 64 },
            vocal: VocalSection { train: train(Preset::Tiny, 800, 4, 3e-3), mode: VocalMode::Expanded },
            ldm: LdmSection { train: train(Preset::Tiny, 200, 4, 2e-3), prompt_vocab: 512, diffusion_steps: None },
            generate: GenerateSection {
                sampler: Sampler::TopK { k: 8, temperature: 0.8 },
                midi_retries: 3,
                guidance: 3.0,
                griffin_lim_iters: 8,
            },
        }
    }

    /// Hours on a laptop: desk-size models, longer clips.
    pub fn desk() -> Self {
        let mut c = Self::smoke();
        c.preset = "desk".into();
        c.corpus.n_clips = 1000;
        c.corpus.n_singers = 8;
        c.corpus.clip_seconds = (2.0, 8.0);
        c.corpus.holdout = 50;
        c.rvq = RvqSection { num_books: 8, book_size: 256, iters: 15 };
        c.vae = train(Preset::Desk, 3000, 8, 1e-3);
        c.midi = MidiSection { train: train(Preset::Desk, 10_000, 16, 5e-4), lyrics_vocab: 4096, prompt_vocab: 2048, max_notes: 256 };
        c.vocal.train = train(Preset::Desk, 20_000, 8, 5e-4);
        c.ldm = LdmSection { train: train(Preset::Desk, 20_000, 8, 3e-4), prompt_vocab: 2048, diffusion_steps: None };
        c.generate.sampler = Sampler::TopK { k: 32, temperature: 0.9 };
        c.generate.griffin_lim_iters = 32;
        c
    }

    /// Full-size models and optimizer settings; not trainable on a laptop.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = "paper".into();
        c.corpus.clip_seconds = (1.0, 30.0);
        c.corpus.holdout = 300;
        c.rvq = RvqSection { num_books: 8, book_size: 1024, iters: 20 };
        c.vae = train(Preset::PaperVocal, 80_000, 32, 1e-4);
        c.midi = MidiSection {
            train: train(Preset::PaperMidi, 50_000, 1400, 5e-4),
            lyrics_vocab: 30_522,
            prompt_vocab: 32_128,
            max_notes: 256,
        };
        c.vocal.train = train(Preset::PaperVocal, 100_000, 32, 5e-4);
        c.ldm = LdmSection { train: train(Preset::PaperVocal, 80_000, 240, 3e-6), prompt_vocab: 32_128, diffusion_steps: Some(1000) };
        c.generate.griffin_lim_iters = 64;
        c
    }

    pub fn named(preset: &str) -> Result<Self> {
        match preset {
            "smoke" => Ok(Self::smoke()),
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?} (smoke, desk, paper)"))),
        }
    }

    /// Parses a document: the named preset (smoke by default) with the
    /// document's fields laid over it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match doc.get("preset") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::Config("preset must be a string".into())),
            None => "smoke".into(),
        };
        let base = toml::Value::try_from(Self::named(&preset)?).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, toml::Value::Table(doc));
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if self.rvq.num_books < crate::rvq::LM_BOOKS || self.rvq.book_size < 2 {
            return Err(Error::Config(format!("RVQ needs at least {} books of 2+ codewords", crate::rvq::LM_BOOKS)));
        }
        for (name, t) in [("vae", &self.vae), ("midi", &self.midi.train), ("vocal", &self.vocal.train), ("ldm", &self.ldm.train)] {
            if t.steps == 0 || t.batch == 0 || !(t.lr > 0.0) || t.checkpoint_every == 0 {
                return Err(Error::Config(format!("[{name}] needs positive steps, batch, lr and checkpoint_every")));
            }
        }
        if self.midi.max_notes == 0 || self.midi.lyrics_vocab < 2 || self.midi.prompt_vocab < 2 || self.ldm.prompt_vocab < 2 {
            return Err(Error::Config("vocabularies and note limit must be positive".into()));
        }
        if self.generate.guidance < 0.0 {
            return Err(Error::Config("guidance must be non-negative".into()));
        }
        Ok(())
    }
}

fn merge(base: toml::Value, over: toml::Value) -> toml::Value {
    match (base, over) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, o) => o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in ["smoke", "desk", "paper"] {
            let c = RunConfig::named(name).unwrap();
            c.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn overrides_layer_on_the_preset() {
        let c = RunConfig::from_toml("preset = \"desk\"\nseed = 7\n[corpus]\nn_clips = 300\n[vocal]\nmode = \"unexpanded\"\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.corpus.n_clips, 300);
        assert_eq!(c.corpus.n_singers, RunConfig::desk().corpus.n_singers);
        assert_eq!(c.vocal.mode, VocalMode::Unexpanded);
        assert_eq!(c.vocal.train, RunConfig::desk().vocal.train);
    }

    #[test]
    fn bad_documents_are_config_errors() {
        for doc in ["preset = \"huge\"", "[corpus]\nbogus = 1", "[vae]\nsteps = 0", "[corpus]\nclip_seconds = [0.5, 2.0]", "seed = "] {
            assert!(matches!(RunConfig::from_toml(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let t = train(Preset::Tiny, 100, 1, 1.0);
        assert!((t.lr_at(0) - 0.2).abs() < 1e-12);
        assert!((t.lr_at(5) - 1.0).abs() < 1e-12);
        assert!((t.lr_at(100) - 0.1).abs() < 1e-12);
        assert!((6..=100).all(|s| t.lr_at(s) <= t.lr_at(s - 1) + 1e-12));
    }
}
