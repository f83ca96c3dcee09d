//! Per-stage training with loss logs, checkpoints and exact resume.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, TrainSection};
use super::corpus::{gt_f0, Corpus, Split};
use super::RunDir;
use crate::accomp_diffusion::{Ldm, LdmConfig, Vae, VaeConfig};
use crate::audio::MelSpec;
use crate::error::{Error, Result};
use crate::lm::{FrameTokens, SegmentContent};
use crate::melody::read_json;
use crate::melody::MidiSequence;
use crate::midi_stage::{LyricsEncoding, MidiLm, MidiStageConfig, PROMPT_TABLE};
use crate::nn::{Adam, AdamConfig};
use crate::prompt::ConditionDropout;
use crate::rvq::{fit, Codebooks, FitOptions, DEFAULT_FEATURE_DIM};
use crate::text::{HashTokenizer, PromptEncoder, TrainablePromptEncoder, MELODY_PROMPT_MAX_TOKENS};
use crate::vocal_stage::{quantize_f0, vocal_tokens, MelProjection, VocalLm, VocalMode, VocalStageConfig, VocalTokenFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Rvq,
    Vae,
    Midi,
    Vocal,
    Ldm,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Rvq, Stage::Vae, Stage::Midi, Stage::Vocal, Stage::Ldm];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Rvq => "rvq",
            Stage::Vae => "vae",
            Stage::Midi => "midi",
            Stage::Vocal => "vocal",
            Stage::Ldm => "ldm",
        }
    }

    /// Stages whose outputs must exist first.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Rvq | Stage::Vae | Stage::Midi => &[],
            Stage::Vocal => &[Stage::Rvq],
            Stage::Ldm => &[Stage::Vae, Stage::Rvq],
        }
    }

    fn salt(self) -> u64 {
        0x5eed_0000 + self as u64
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from the stage checkpoint (parameters and optimizer moments).
    pub resume: bool,
    /// Stop (and checkpoint) after this many total steps.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage: Stage,
    pub steps: usize,
    /// Loss of the first step, before any update.
    pub initial_loss: f64,
    /// Mean loss over the last tenth of the run.
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl TrainReport {
    fn from_log(stage: Stage, points: &[LossPoint], checkpoint: PathBuf, log: PathBuf) -> Result<Self> {
        let first = points.first().ok_or_else(|| Error::InsufficientData("empty loss log".into()))?;
        let tail = (points.len() / 10).max(1);
        let final_loss = points[points.len() - tail..].iter().map(|p| p.loss).sum::<f64>() / tail as f64;
        Ok(Self { stage, steps: points.len(), initial_loss: first.loss, final_loss, checkpoint, log })
    }
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LossPoint>> {
    let path = path.as_ref();
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

fn write_loss_log(path: &Path, points: &[LossPoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for p in points {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Fails with a dependency error naming the first missing prerequisite.
pub fn check_prerequisites(run: &RunDir, stage: Stage) -> Result<()> {
    if !run.corpus_dir().join(super::corpus::MANIFEST_FILE).exists() {
        return Err(Error::Dependency(format!("training {stage} needs a corpus; run prepare-synth first")));
    }
    for &p in stage.prerequisites() {
        let path = match p {
            Stage::Rvq => run.codebooks(),
            other => run.checkpoint(other),
        };
        if !path.exists() {
            return Err(Error::Dependency(format!("training {stage} needs the {p} stage output {}", path.display())));
        }
    }
    Ok(())
}

fn step_rng(seed: u64, stage: Stage, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stage.salt());
    rng.set_stream(step as u64);
    rng
}

fn scalar(loss: &Tensor) -> Result<f64> {
    Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// The optimizer loop shared by the gradient-trained stages.
struct Loop<'a> {
    stage: Stage,
    section: &'a TrainSection,
    seed: u64,
    log: PathBuf,
    points: Vec<LossPoint>,
}

impl<'a> Loop<'a> {
    fn new(run: &RunDir, stage: Stage, section: &'a TrainSection, seed: u64, log: PathBuf, start: usize) -> Result<Self> {
        fs::create_dir_all(run.root().join("logs"))?;
        let mut points = if start > 0 && log.exists() { read_loss_log(&log)? } else { Vec::new() };
        points.retain(|p| p.step < start);
        Ok(Self { stage, section, seed, log, points })
    }

    fn run(
        &mut self,
        opt: &mut Adam,
        stop: usize,
        mut loss_fn: impl FnMut(&mut ChaCha8Rng) -> Result<Tensor>,
        mut save: impl FnMut(&Adam) -> Result<()>,
    ) -> Result<()> {
        let start = opt.steps_taken();
        for step in start..stop {
            let lr = self.section.lr_at(step);
            opt.set_lr(lr);
            let mut rng = step_rng(self.seed, self.stage, step);
            let loss = loss_fn(&mut rng)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::InvalidInput(format!("{} loss diverged at step {step}", self.stage)));
            }
            opt.backward_step(&loss)?;
            self.points.push(LossPoint { step, loss: value, lr });
            if step % 50 == 0 {
                log::info!("{} step {step}: loss {value:.4}", self.stage);
            }
            if (step + 1) % self.section.checkpoint_every == 0 || step + 1 == stop {
                save(opt)?;
                write_loss_log(&self.log, &self.points)?;
            }
        }
        if start >= stop {
            write_loss_log(&self.log, &self.points)?;
        }
        Ok(())
    }
}

fn batch_indices(rng: &mut ChaCha8Rng, pool: &[usize], n: usize) -> Vec<usize> {
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

fn adam(store: &crate::nn::ParamStore, section: &TrainSection) -> Result<Adam> {
    Adam::new(store, AdamConfig { lr: section.lr, ..Default::default() })
}

fn stop_at(section: &TrainSection, opts: &TrainOptions) -> usize {
    opts.stop_after.map_or(section.steps, |s| s.min(section.steps))
}

/// Acoustic features of a clip's vocal mel at the 50 Hz melody rate.
pub fn clip_features(corpus: &Corpus, i: usize, projection: &MelProjection) -> Result<Vec<Vec<f32>>> {
    let clip = &corpus.clips[i];
    let frames = corpus.midi(clip)?.total_frames();
    Ok(projection.features(&corpus.vocal_mel(clip)?, frames))
}

/// Fits the codebooks on training clips, then tokenizes every clip.
pub fn fit_rvq(run: &RunDir, cfg: &RunConfig) -> Result<TrainReport> {
    check_prerequisites(run, Stage::Rvq)?;
    let corpus = Corpus::load(run.corpus_dir())?;
    let projection = MelProjection::new(DEFAULT_FEATURE_DIM);
    let all: Vec<Vec<Vec<f32>>> =
        (0..corpus.clips.len()).into_par_iter().map(|i| clip_features(&corpus, i, &projection)).collect::<Result<_>>()?;
    let train: Vec<Vec<f32>> = corpus.split(Split::Train).into_iter().flat_map(|i| all[i].clone()).collect();
    let opts = FitOptions { num_books: cfg.rvq.num_books, book_size: cfg.rvq.book_size, iters: cfg.rvq.iters, seed: cfg.seed };
    let (books, report) = fit(&train, opts)?;
    fs::create_dir_all(run.tokens_dir())?;
    books.save(run.codebooks())?;
    all.par_iter().zip(&corpus.clips).try_for_each(|(feats, clip)| -> Result<()> {
        let codes = books.encode_frames(feats)?;
        let (f0, voiced) = gt_f0(&corpus.midi(clip)?);
        let (bins, _) = quantize_f0(&f0, &voiced)?;
        let tokens = vocal_tokens(codes.frames(), &bins, books.book_size())?;
        VocalTokenFile { codec_hash: books.hash().to_string(), tokens }.save(run.token_path(&clip.id))
    })?;
    let norm0 = train.iter().map(|f| f.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()).sum::<f64>() / train.len() as f64;
    let points: Vec<LossPoint> = std::iter::once(norm0)
        .chain(report.mean_residual_norm.iter().copied())
        .enumerate()
        .map(|(q, loss)| LossPoint { step: q, loss, lr: 0.0 })
        .collect();
    fs::create_dir_all(run.root().join("logs"))?;
    write_loss_log(&run.loss_log(Stage::Rvq), &points)?;
    log::info!("fitted {} x {} codebooks on {} frames", books.num_books(), books.book_size(), train.len());
    TrainReport::from_log(Stage::Rvq, &points, run.codebooks(), run.loss_log(Stage::Rvq))
}

pub fn train_vae(run: &RunDir, cfg: &RunConfig, opts: TrainOptions) -> Result<TrainReport> {
    check_prerequisites(run, Stage::Vae)?;
    let corpus = Corpus::load(run.corpus_dir())?;
    let pool = corpus.split(Split::Train);
    let mels: Vec<MelSpec> = corpus.clips.par_iter().map(|c| corpus.accomp_mel(c)).collect::<Result<_>>()?;
    let ckpt = run.checkpoint(Stage::Vae);
    let dev = Device::Cpu;
    let section = &cfg.vae;
    let (vae, mut opt) = if opts.resume && ckpt.exists() {
        let vae = Vae::load(&ckpt, &dev)?;
        let mut opt = adam(vae.store(), section)?;
        vae.resume(&ckpt, &mut opt)?;
        (vae, opt)
    } else {
        let mut vc = VaeConfig::preset(section.model);
        vc.seed = cfg.seed;
        vc.fit_normalization(&pool.iter().map(|&i| mels[i].clone()).collect::<Vec<_>>());
        let vae = Vae::new(vc, DType::F32, &dev)?;
        let opt = adam(vae.store(), section)?;
        (vae, opt)
    };
    let log = run.loss_log(Stage::Vae);
    let mut lp = Loop::new(run, Stage::Vae, section, cfg.seed, log.clone(), opt.steps_taken())?;
    lp.run(
        &mut opt,
        stop_at(section, &opts),
        |rng| {
            let batch: Vec<MelSpec> = batch_indices(rng, &pool, section.batch).into_iter().map(|i| mels[i].clone()).collect();
            vae.loss(&batch, rng)
        },
        |o| vae.save(&ckpt, Some(o)),
    )?;
    TrainReport::from_log(Stage::Vae, &lp.points, ckpt, log)
}

pub fn midi_stage_config(cfg: &RunConfig) -> MidiStageConfig {
    MidiStageConfig {
        lyrics_vocab: cfg.midi.lyrics_vocab,
        prompt_vocab: cfg.midi.prompt_vocab,
        max_notes: cfg.midi.max_notes,
        ..Default::default()
    }
}

/// Melody prompt as ids in the MIDI model's prompt table.
pub fn melody_prompt_content(stage: &MidiStageConfig, prompt: &str) -> Result<SegmentContent> {
    TrainablePromptEncoder { tokenizer: stage.prompt_tokenizer(), table: PROMPT_TABLE }.encode(prompt, MELODY_PROMPT_MAX_TOKENS)
}

pub fn train_midi(run: &RunDir, cfg: &RunConfig, opts: TrainOptions) -> Result<TrainReport> {
    check_prerequisites(run, Stage::Midi)?;
    let corpus = Corpus::load(run.corpus_dir())?;
    let pool = corpus.split(Split::Train);
    let variants: Vec<Vec<MidiSequence>> = corpus
        .clips
        .par_iter()
        .map(|c| std::iter::once(&c.midi).chain(&c.midi_variants).map(|p| read_json(corpus.path(p))).collect())
        .collect::<Result<_>>()?;
    let ckpt = run.checkpoint(Stage::Midi);
    let dev = Device::Cpu;
    let section = &cfg.midi.train;
    let (lm, mut opt) = if opts.resume && ckpt.exists() {
        let lm = MidiLm::load(&ckpt, &dev)?;
        let mut opt = adam(lm.model.store(), section)?;
        lm.model.resume(&ckpt, &mut opt)?;
        (lm, opt)
    } else {
        let lm = MidiLm::new(midi_stage_config(cfg), section.model, cfg.seed, &dev)?;
        let opt = adam(lm.model.store(), section)?;
        (lm, opt)
    };
    let lyrics_tok = lm.stage.lyrics_tokenizer();
    let dropout = ConditionDropout::default();
    let log = run.loss_log(Stage::Midi);
    let mut lp = Loop::new(run, Stage::Midi, section, cfg.seed, log.clone(), opt.steps_taken())?;
    lp.run(
        &mut opt,
        stop_at(section, &opts),
        |rng| {
            let mut seqs = Vec::with_capacity(section.batch);
            for i in batch_indices(rng, &pool, section.batch) {
                let clip = &corpus.clips[i];
                let target = variants[i].choose(rng).expect("at least the melody");
                let keep = dropout.sample(1, rng)[0];
                let prompt = match (&clip.melody_prompt, keep) {
                    (Some(p), true) => Some(melody_prompt_content(&lm.stage, p)?),
                    _ => None,
                };
                seqs.push(lm.sequence(&LyricsEncoding::from_text(&lyrics_tok, &clip.lyrics), prompt, Some(target))?);
            }
            lm.model.nll_loss_batch(&seqs)
        },
        |o| lm.save(&ckpt, Some(o)),
    )?;
    TrainReport::from_log(Stage::Midi, &lp.points, ckpt, log)
}

/// Token files of every clip, checked against the codebook hash.
pub fn load_tokens(run: &RunDir, corpus: &Corpus, books: &Codebooks) -> Result<Vec<FrameTokens>> {
    corpus
        .clips
        .par_iter()
        .map(|c| {
            let path = run.token_path(&c.id);
            let f = VocalTokenFile::load(&path).map_err(|e| Error::Dependency(format!("{}: {e}; rerun fit-rvq", path.display())))?;
            if f.codec_hash != books.hash() {
                return Err(Error::CodecMismatch { expected: books.hash().to_string(), found: f.codec_hash });
            }
            Ok(f.tokens)
        })
        .collect()
}

/// Trains the vocal model in `mode`, writing to `ckpt` and `log`.
pub fn train_vocal_mode(
    run: &RunDir,
    cfg: &RunConfig,
    mode: VocalMode,
    ckpt: &Path,
    log: &Path,
    opts: TrainOptions,
) -> Result<TrainReport> {
    check_prerequisites(run, Stage::Vocal)?;
    let corpus = Corpus::load(run.corpus_dir())?;
    let books = Codebooks::load(run.codebooks())?;
    let tokens = load_tokens(run, &corpus, &books)?;
    let midis: Vec<MidiSequence> = corpus.clips.par_iter().map(|c| corpus.midi(c)).collect::<Result<_>>()?;
    let pool = corpus.split(Split::Train);
    let dev = Device::Cpu;
    let section = &cfg.vocal.train;
    let (lm, mut opt) = if opts.resume && ckpt.exists() {
        let lm = VocalLm::load(ckpt, &dev)?;
        let mut opt = adam(lm.model.store(), section)?;
        lm.model.resume(ckpt, &mut opt)?;
        (lm, opt)
    } else {
        let stage = VocalStageConfig { mode, book_size: books.book_size(), ..Default::default() };
        let lm = VocalLm::new(stage, section.model, cfg.seed, &dev)?;
        let opt = adam(lm.model.store(), section)?;
        (lm, opt)
    };
    let mut lp = Loop::new(run, Stage::Vocal, section, cfg.seed, log.to_path_buf(), opt.steps_taken())?;
    lp.run(
        &mut opt,
        stop_at(section, &opts),
        |rng| {
            let seqs = batch_indices(rng, &pool, section.batch)
                .into_iter()
                .map(|i| {
                    let reference = &tokens[corpus.reference_for(i)];
                    lm.sequence(&corpus.clips[i].pinyin, Some(&midis[i]), reference, Some(&tokens[i]))
                })
                .collect::<Result<Vec<_>>>()?;
            lm.model.nll_loss_batch(&seqs)
        },
        |o| lm.save(ckpt, Some(o)),
    )?;
    TrainReport::from_log(Stage::Vocal, &lp.points, ckpt.to_path_buf(), log.to_path_buf())
}

pub fn train_vocal(run: &RunDir, cfg: &RunConfig, opts: TrainOptions) -> Result<TrainReport> {
    train_vocal_mode(run, cfg, cfg.vocal.mode, &run.checkpoint(Stage::Vocal), &run.loss_log(Stage::Vocal), opts)
}

/// The combined melody and accompaniment prompt as diffusion prompt ids.
pub fn accomp_prompt_content(prompt_vocab: usize, melody: Option<&str>, accomp: Option<&str>) -> Result<Option<SegmentContent>> {
    let text = [melody, accomp].into_iter().flatten().collect::<Vec<_>>().join(" ");
    let ids = HashTokenizer::new(prompt_vocab)?.tokenize(&text);
    if ids.is_empty() {
        return Ok(None);
    }
    Ok(Some(SegmentContent::Symbols { tables: vec![0], ids: ids.into_iter().map(|i| vec![i]).collect() }))
}

pub fn train_ldm(run: &RunDir, cfg: &RunConfig, opts: TrainOptions) -> Result<TrainReport> {
    check_prerequisites(run, Stage::Ldm)?;
    let corpus = Corpus::load(run.corpus_dir())?;
    let books = Codebooks::load(run.codebooks())?;
    let tokens = load_tokens(run, &corpus, &books)?;
    let dev = Device::Cpu;
    let vae = Vae::load(run.checkpoint(Stage::Vae), &dev)?;
    let pool = corpus.split(Split::Train);
    let means: Vec<Tensor> = corpus
        .clips
        .iter()
        .map(|c| {
            let (x, _) = vae.mel_tensor(&corpus.accomp_mel(c)?)?;
            Ok(vae.encode_tensor(&x)?.0.squeeze(0)?.detach())
        })
        .collect::<Result<_>>()?;
    let ckpt = run.checkpoint(Stage::Ldm);
    let section = &cfg.ldm.train;
    let (ldm, mut opt) = if opts.resume && ckpt.exists() {
        let (ldm, _) = Ldm::load(&ckpt, &dev)?;
        let mut opt = adam(ldm.store(), section)?;
        ldm.resume(&ckpt, &mut opt)?;
        (ldm, opt)
    } else {
        let mut lc = LdmConfig::preset(section.model, books.book_size(), cfg.ldm.prompt_vocab);
        lc.latent_dim = vae.config().latent_dim;
        if let Some(t) = cfg.ldm.diffusion_steps {
            lc.steps = t;
        }
        lc.seed = cfg.seed;
        let train_means: Vec<Tensor> = pool.iter().map(|&i| means[i].flatten_all()).collect::<candle_core::Result<_>>()?;
        let flat = Tensor::cat(&train_means, 0)?.to_dtype(DType::F64)?;
        let std = flat.sqr()?.mean_all()?.to_scalar::<f64>()?.sqrt();
        lc.latent_scale = std.max(1e-3) as f32;
        let ldm = Ldm::new(lc, DType::F32, &dev)?;
        let opt = adam(ldm.store(), section)?;
        (ldm, opt)
    };
    let scale = ldm.config().latent_scale as f64;
    let z0: Vec<Tensor> = means.iter().map(|m| m / scale).collect::<candle_core::Result<_>>()?;
    let prompts: Vec<Option<SegmentContent>> = corpus
        .clips
        .iter()
        .map(|c| accomp_prompt_content(cfg.ldm.prompt_vocab, c.melody_prompt.as_deref(), c.accomp_prompt.as_deref()))
        .collect::<Result<_>>()?;
    let log = run.loss_log(Stage::Ldm);
    let mut lp = Loop::new(run, Stage::Ldm, section, cfg.seed, log.clone(), opt.steps_taken())?;
    lp.run(
        &mut opt,
        stop_at(section, &opts),
        |rng| {
            let mut total: Option<Tensor> = None;
            for i in batch_indices(rng, &pool, section.batch) {
                let l = ldm.train_loss(&z0[i], &tokens[i], prompts[i].as_ref(), rng)?;
                total = Some(match total {
                    Some(t) => (t + l)?,
                    None => l,
                });
            }
            Ok((total.expect("batch is nonempty") / section.batch as f64)?)
        },
        |o| ldm.save(&ckpt, Some(o), &Default::default()),
    )?;
    TrainReport::from_log(Stage::Ldm, &lp.points, ckpt, log)
}

pub fn train(run: &RunDir, cfg: &RunConfig, stage: Stage, opts: TrainOptions) -> Result<TrainReport> {
    let out = match stage {
        Stage::Rvq => fit_rvq(run, cfg),
        Stage::Vae => train_vae(run, cfg, opts),
        Stage::Midi => train_midi(run, cfg, opts),
        Stage::Vocal => train_vocal(run, cfg, opts),
        Stage::Ldm => train_ldm(run, cfg, opts),
    };
    out.map_err(|e| e.in_stage(stage.name()))
}
