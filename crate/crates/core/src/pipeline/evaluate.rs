//! Holdout evaluation and the vocal-stage ablation.

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::corpus::{gt_f0, Corpus, Split};
use super::train::{load_tokens, melody_prompt_content, train_vocal_mode, Stage, TrainOptions};
use super::RunDir;
use crate::error::{Error, Result};
use crate::eval_metrics::{evaluate_corpus, ffe, track_distance, AblationRow, EvalOptions, EvalPair, F0Tracks, MetricReport};
use crate::lm::FrameTokens;
use crate::melody::{MidiSequence, MIN_PITCH};
use crate::midi_stage::{LyricsEncoding, MidiGenOptions, MidiLm};
use crate::rvq::Codebooks;
use crate::vocal_stage::{f0_bin_hz, f0_pitch_track, VocalGenOptions, VocalLm, VocalMode, F0_BINS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluateOptions {
    pub rounded: bool,
    /// Score the ground truth against itself instead of generating.
    pub oracle: bool,
    /// Also generate vocals from the reference melody and score FFE.
    pub f0: bool,
    /// Evaluate at most this many holdout clips.
    pub limit: Option<usize>,
    pub seed: u64,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self { rounded: false, oracle: false, f0: true, limit: None, seed: 0 }
    }
}

fn holdout(corpus: &Corpus, limit: Option<usize>) -> Result<Vec<usize>> {
    let mut idx = corpus.split(Split::Holdout);
    if idx.is_empty() {
        return Err(Error::InsufficientData("corpus has no holdout clips".into()));
    }
    if let Some(n) = limit {
        idx.truncate(n);
    }
    Ok(idx)
}

/// Predicted F0 track of the vocal F0 slot, brought to `n` frames by
/// nearest-frame resampling.
fn predicted_f0(vocal: &FrameTokens, n: usize) -> (Vec<f64>, Vec<bool>) {
    let bins = vocal.slot(F0_SLOT);
    let m = bins.len().max(1);
    (0..n)
        .map(|i| {
            let b = bins.get(i * m / n.max(1)).copied().unwrap_or(F0_BINS as u32 - 1);
            match f0_bin_hz(b) {
                Some(hz) => (hz, true),
                None => (0.0, false),
            }
        })
        .unzip()
}

const F0_SLOT: usize = 3;

/// Generates melodies (and, optionally, vocals) for the holdout clips and
/// scores them against the ground truth.
pub fn evaluate(run: &RunDir, cfg: &RunConfig, opts: &EvaluateOptions) -> Result<MetricReport> {
    let corpus = Corpus::load(run.corpus_dir())?;
    let idx = holdout(&corpus, opts.limit)?;
    let dev = Device::Cpu;
    let midi_lm = if opts.oracle {
        None
    } else {
        let ckpt = run.checkpoint(Stage::Midi);
        if !ckpt.exists() {
            return Err(Error::Dependency(format!("no MIDI model at {}; run train-midi-lm first", ckpt.display())));
        }
        Some(MidiLm::load(ckpt, &dev)?)
    };
    let vocal = if opts.f0 && !opts.oracle && run.checkpoint(Stage::Vocal).exists() && run.codebooks().exists() {
        let books = Codebooks::load(run.codebooks())?;
        Some((VocalLm::load(run.checkpoint(Stage::Vocal), &dev)?, load_tokens(run, &corpus, &books)?))
    } else {
        None
    };
    let mut pairs = Vec::with_capacity(idx.len());
    for (n, &i) in idx.iter().enumerate() {
        let clip = &corpus.clips[i];
        let gt = corpus.midi(clip)?;
        let seed = opts.seed.wrapping_add(n as u64);
        let pred = match &midi_lm {
            None => gt.clone(),
            Some(lm) => {
                let prompt = clip.melody_prompt.as_deref().map(|p| melody_prompt_content(&lm.stage, p)).transpose()?;
                let enc = LyricsEncoding::from_text(&lm.stage.lyrics_tokenizer(), &clip.lyrics);
                lm.generate(&enc, prompt, &MidiGenOptions { sampler: cfg.generate.sampler, seed, retries: cfg.generate.midi_retries })?
            }
        };
        let (gt_hz, gt_v) = gt_f0(&gt);
        let f0 = if opts.oracle && opts.f0 {
            Some(F0Tracks { pred_f0: gt_hz.clone(), pred_voiced: gt_v.clone(), gt_f0: gt_hz, gt_voiced: gt_v })
        } else if let Some((lm, tokens)) = &vocal {
            let reference = &tokens[corpus.reference_for(i)];
            let midi = lm.stage.mode.needs_midi().then_some(&gt);
            let g = lm.generate(&clip.pinyin, midi, reference, &VocalGenOptions { sampler: cfg.generate.sampler, seed })?;
            let (pred_f0, pred_voiced) = predicted_f0(&g.vocal, gt_hz.len());
            Some(F0Tracks { gt_f0: gt_hz, gt_voiced: gt_v, pred_f0, pred_voiced })
        } else {
            None
        };
        pairs.push(EvalPair { id: clip.id.clone(), gt, pred, key: clip.key, tempo_bpm: clip.tempo_bpm, f0 });
    }
    let report = evaluate_corpus(&pairs, EvalOptions { rounded: opts.rounded })?;
    log::info!(
        "evaluated {} clips; {} excluded from KA, {} with FFE",
        report.count,
        report.ka_excluded,
        report.ffe_count
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOptions {
    pub modes: Vec<VocalMode>,
    /// Evaluate at most this many holdout clips per configuration.
    pub limit: Option<usize>,
    pub seed: u64,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self { modes: VocalMode::ALL.to_vec(), limit: None, seed: 0 }
    }
}

fn mode_slug(mode: VocalMode) -> &'static str {
    match mode {
        VocalMode::Expanded => "expanded",
        VocalMode::Unexpanded => "unexpanded",
        VocalMode::E2eWithMidi => "e2e-with-midi",
        VocalMode::E2eWithoutMidi => "e2e-without-midi",
    }
}

/// Pitch track of a generation against the conditioning melody. A fully
/// unvoiced generation is scored as a flat track at the lowest pitch.
fn generation_md(melody: &MidiSequence, vocal: &FrameTokens) -> Result<f64> {
    let gt: Vec<f64> = melody.expand()?.pitches().iter().map(|&p| p as f64).collect();
    let pred: Vec<f64> = match f0_pitch_track(&vocal.slot(F0_SLOT)) {
        Some(t) => t.into_iter().map(|p| p as f64).collect(),
        None => vec![MIN_PITCH as f64; vocal.len().max(1)],
    };
    track_distance(&gt, &pred)
}

/// Trains one vocal model per configuration on the run's corpus and scores
/// FFE and melody distance on holdout generations.
pub fn ablation(run: &RunDir, cfg: &RunConfig, opts: &AblationOptions) -> Result<Vec<AblationRow>> {
    let corpus = Corpus::load(run.corpus_dir())?;
    let idx = holdout(&corpus, opts.limit)?;
    let books = Codebooks::load(run.codebooks()).map_err(|_| Error::Dependency("ablation needs codebooks; run fit-rvq".into()))?;
    let tokens = load_tokens(run, &corpus, &books)?;
    let mut rows = Vec::new();
    for &mode in &opts.modes {
        let slug = mode_slug(mode);
        let ckpt = run.root().join("checkpoints").join(format!("vocal-{slug}.safetensors"));
        let log = run.root().join("logs").join(format!("vocal-{slug}.jsonl"));
        let report = train_vocal_mode(run, cfg, mode, &ckpt, &log, TrainOptions::default())?;
        log::info!("{}: loss {:.3} -> {:.3}", mode.label(), report.initial_loss, report.final_loss);
        let lm = VocalLm::load(&ckpt, &Device::Cpu)?;
        let (mut ffe_sum, mut md_sum) = (0.0, 0.0);
        for (n, &i) in idx.iter().enumerate() {
            let clip = &corpus.clips[i];
            let gt = corpus.midi(clip)?;
            let reference = &tokens[corpus.reference_for(i)];
            let midi = mode.needs_midi().then_some(&gt);
            let gen_opts = VocalGenOptions { sampler: cfg.generate.sampler, seed: opts.seed.wrapping_add(n as u64) };
            let g = lm.generate(&clip.pinyin, midi, reference, &gen_opts)?;
            let (gt_hz, gt_v) = gt_f0(&gt);
            let (p_hz, p_v) = predicted_f0(&g.vocal, gt_hz.len());
            ffe_sum += ffe(&gt_hz, &gt_v, &p_hz, &p_v)?;
            md_sum += generation_md(&gt, &g.vocal)?;
        }
        let k = idx.len() as f64;
        rows.push(AblationRow { config: mode.label().to_string(), ffe: ffe_sum / k, md: md_sum / k });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocal_stage::vocal_vocab;

    #[test]
    fn f0_resampling_and_md() {
        let steps: Vec<Vec<u32>> = [49u32, 28, 28, 30].iter().map(|&b| vec![0, 0, 0, b]).collect();
        let v = FrameTokens::new(steps, vocal_vocab(4)).unwrap();
        let (hz, voiced) = predicted_f0(&v, 8);
        assert_eq!(voiced, vec![false, false, true, true, true, true, true, true]);
        assert!((hz[2] - 261.6256).abs() < 1e-3);
        let m = MidiSequence::from_pairs(&[(60, 3), (62, 1)]).unwrap();
        assert_eq!(generation_md(&m, &v).unwrap(), 0.0);
        let silent = FrameTokens::new(vec![vec![0, 0, 0, 49]; 4], vocal_vocab(4)).unwrap();
        assert!(generation_md(&m, &silent).unwrap() > 20.0);
    }
}
