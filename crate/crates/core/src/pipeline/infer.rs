//! The inference chain: lyrics to melody, melody to vocal tokens, vocal to
//! accompaniment, then a mixed waveform.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Device;

use super::config::RunConfig;
use super::corpus::Corpus;
use super::train::{accomp_prompt_content, melody_prompt_content, Stage};
use super::RunDir;
use crate::accomp_diffusion::{sample_accompaniment, AccompGenOptions, Ldm, Vae};
use crate::audio::{remix, write_wav, MelAnalyzer, MelSpec};
use crate::error::{Error, Result};
use crate::lm::FrameTokens;
use crate::melody::{read_json, read_records, read_smf, write_json};
use crate::melody::MidiSequence;
use crate::midi_stage::{LyricsEncoding, MidiGenOptions, MidiLm};
use crate::rvq::{Codebooks, DEFAULT_FEATURE_DIM};
use crate::text::{IdentityRomanizer, SyllableInventory};
use crate::vocal_stage::{render_toy_vocal, MelProjection, VocalGenOptions, VocalLm, VocalTokenFile};

pub const SING_LOG: &str = "sing.log";

fn require(path: &Path, what: &str, cmd: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(format!("no {what} at {}; run {cmd} first", path.display())))
    }
}

/// Reads a melody by extension: `.json` note list, `.mid`/`.midi`, or
/// tab-separated records.
pub fn read_midi_file(path: &Path) -> Result<MidiSequence> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => read_json(path),
        Some("mid" | "midi") => read_smf(path),
        _ => read_records(&fs::read_to_string(path)?),
    }
}

/// Reference vocal tokens from a `.vtok` file or a corpus clip id.
pub fn resolve_reference(run: &RunDir, books: &Codebooks, reference: &str) -> Result<FrameTokens> {
    let as_path = Path::new(reference);
    let path = if as_path.extension().is_some_and(|e| e == "vtok") {
        as_path.to_path_buf()
    } else {
        let corpus = Corpus::load(run.corpus_dir())?;
        if corpus.find(reference).is_none() {
            return Err(Error::Config(format!("reference {reference:?} is neither a .vtok file nor a corpus clip")));
        }
        run.token_path(reference)
    };
    require(&path, "reference tokens", "fit-rvq")?;
    let f = VocalTokenFile::load(&path)?;
    if f.codec_hash != books.hash() {
        return Err(Error::CodecMismatch { expected: books.hash().to_string(), found: f.codec_hash });
    }
    Ok(f.tokens)
}

pub fn generate_midi(run: &RunDir, cfg: &RunConfig, lyrics: &str, melody_prompt: Option<&str>, seed: u64) -> Result<MidiSequence> {
    let ckpt = run.checkpoint(Stage::Midi);
    require(&ckpt, "MIDI model", "train-midi-lm")?;
    let lm = MidiLm::load(&ckpt, &Device::Cpu)?;
    let enc = LyricsEncoding::from_text(&lm.stage.lyrics_tokenizer(), lyrics);
    let prompt = melody_prompt.map(|p| melody_prompt_content(&lm.stage, p)).transpose()?;
    lm.generate(&enc, prompt, &MidiGenOptions { sampler: cfg.generate.sampler, seed, retries: cfg.generate.midi_retries })
}

/// Vocal tokens for a melody and their rendered mel.
pub fn generate_vocal(
    run: &RunDir,
    cfg: &RunConfig,
    lyrics: &str,
    midi: Option<&MidiSequence>,
    reference: &str,
    seed: u64,
) -> Result<(VocalTokenFile, MelSpec)> {
    require(&run.codebooks(), "codebooks", "fit-rvq")?;
    let ckpt = run.checkpoint(Stage::Vocal);
    require(&ckpt, "vocal model", "train-vocal-lm")?;
    let books = Codebooks::load(run.codebooks())?;
    let reference = resolve_reference(run, &books, reference)?;
    let lm = VocalLm::load(&ckpt, &Device::Cpu)?;
    if lm.stage.book_size != books.book_size() {
        return Err(Error::Dependency("vocal model and codebooks disagree on codebook size; retrain the vocal model".into()));
    }
    let pinyin = SyllableInventory::default().encode(&IdentityRomanizer, lyrics);
    let gen = lm.generate(&pinyin, midi, &reference, &VocalGenOptions { sampler: cfg.generate.sampler, seed })?;
    if gen.vocal.is_empty() {
        return Err(Error::EmptyGeneration { attempts: 1 });
    }
    let file = VocalTokenFile { codec_hash: books.hash().to_string(), tokens: gen.vocal };
    let mel = render_toy_vocal(&file.tokens, &books, &file.codec_hash, &MelProjection::new(DEFAULT_FEATURE_DIM))?;
    Ok((file, mel))
}

pub fn generate_accomp(
    run: &RunDir,
    cfg: &RunConfig,
    vocal: &VocalTokenFile,
    melody_prompt: Option<&str>,
    accomp_prompt: Option<&str>,
    seed: u64,
) -> Result<MelSpec> {
    let (vae_path, ldm_path) = (run.checkpoint(Stage::Vae), run.checkpoint(Stage::Ldm));
    require(&vae_path, "VAE", "train-vae")?;
    require(&ldm_path, "diffusion model", "train-ldm")?;
    require(&run.codebooks(), "codebooks", "fit-rvq")?;
    let books = Codebooks::load(run.codebooks())?;
    if vocal.codec_hash != books.hash() {
        return Err(Error::CodecMismatch { expected: books.hash().to_string(), found: vocal.codec_hash.clone() });
    }
    let dev = Device::Cpu;
    let vae = Vae::load(&vae_path, &dev)?;
    let (ldm, _) = Ldm::load(&ldm_path, &dev)?;
    let prompt = accomp_prompt_content(ldm.config().prompt_vocab, melody_prompt, accomp_prompt)?;
    sample_accompaniment(&ldm, &vae, &vocal.tokens, prompt.as_ref(), &AccompGenOptions { guidance: cfg.generate.guidance, seed })
}

/// Griffin-Lim on both mels, then the −3 dB normalized mix.
pub fn remix_mels(vocal: &MelSpec, accomp: &MelSpec, iters: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let analyzer = MelAnalyzer::new();
    let v = analyzer.griffin_lim(vocal, iters);
    let a = analyzer.griffin_lim(accomp, iters);
    let mix = remix(&v, &a);
    (v, a, mix)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingRequest {
    pub lyrics: String,
    /// Clip id or `.vtok` path.
    pub reference: String,
    pub melody_prompt: Option<String>,
    pub accomp_prompt: Option<String>,
    /// A given melody replaces stage 0.
    pub midi_override: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingOutput {
    pub midi: PathBuf,
    pub vocal_tokens: PathBuf,
    pub vocal_mel: PathBuf,
    pub accomp_mel: PathBuf,
    pub mix: PathBuf,
    pub log: PathBuf,
    /// Stage tags in the order they ran.
    pub stages: Vec<&'static str>,
}

struct StageLog {
    lines: Vec<String>,
}

impl StageLog {
    fn note(&mut self, line: String) {
        log::info!("{line}");
        self.lines.push(line);
    }
}

/// Lyrics and a reference in; melody, vocal, accompaniment and mix out.
pub fn sing(run: &RunDir, cfg: &RunConfig, req: &SingRequest) -> Result<SingOutput> {
    fs::create_dir_all(&req.out_dir)?;
    let out = |name: &str| req.out_dir.join(name);
    let mut log = StageLog { lines: Vec::new() };
    let mut stages = Vec::new();
    let seed = req.seed;

    let midi = match &req.midi_override {
        Some(path) => {
            let m = read_midi_file(path).map_err(|e| e.in_stage("midi-override"))?;
            log.note(format!("melody: {} notes, {} frames, from {}", m.len(), m.total_frames(), path.display()));
            m
        }
        None => {
            let m = generate_midi(run, cfg, &req.lyrics, req.melody_prompt.as_deref(), seed).map_err(|e| e.in_stage("stage0"))?;
            stages.push("stage0");
            log.note(format!("stage0: {} notes, {} frames", m.len(), m.total_frames()));
            m
        }
    };
    write_json(&midi, out("midi.json"))?;

    let (vocal, vocal_mel) =
        generate_vocal(run, cfg, &req.lyrics, Some(&midi), &req.reference, seed.wrapping_add(1)).map_err(|e| e.in_stage("stage1"))?;
    stages.push("stage1");
    log.note(format!("stage1: {} vocal frames, {} mel frames", vocal.tokens.len(), vocal_mel.len()));
    vocal.save(out("vocal.tok"))?;
    vocal_mel.save(out("vocal.mel"))?;

    let accomp = generate_accomp(run, cfg, &vocal, req.melody_prompt.as_deref(), req.accomp_prompt.as_deref(), seed.wrapping_add(2))
        .map_err(|e| e.in_stage("stage2"))?;
    stages.push("stage2");
    log.note(format!("stage2: {} accompaniment mel frames", accomp.len()));
    accomp.save(out("accomp.mel"))?;

    let (v, a, mix) = remix_mels(&vocal_mel, &accomp, cfg.generate.griffin_lim_iters);
    write_wav(out("vocal.wav"), &v)?;
    write_wav(out("accomp.wav"), &a)?;
    write_wav(out("mix.wav"), &mix)?;
    stages.push("mix");
    log.note(format!("mix: {} samples", mix.len()));

    let mut f = fs::File::create(out(SING_LOG))?;
    for l in &log.lines {
        writeln!(f, "{l}")?;
    }
    Ok(SingOutput {
        midi: out("midi.json"),
        vocal_tokens: out("vocal.tok"),
        vocal_mel: out("vocal.mel"),
        accomp_mel: out("accomp.mel"),
        mix: out("mix.wav"),
        log: out(SING_LOG),
        stages,
    })
}
