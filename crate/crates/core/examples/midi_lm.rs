//! Lyrics to notes: train the note model on a handful of synthetic clips and
//! sample melodies for their lyrics.

use candle_core::Device;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tunesmith::eval_metrics::melody_distance;
use tunesmith::lm::{Preset, Sampler};
use tunesmith::midi_stage::{LyricsEncoding, MidiGenOptions, MidiLm, MidiStageConfig};
use tunesmith::nn::{Adam, AdamConfig};
use tunesmith::pipeline::{synth_clips, SynthCorpusSpec};

fn main() -> tunesmith::Result<()> {
    let clips = synth_clips(&SynthCorpusSpec { n_clips: 8, holdout: 1, clip_seconds: (1.0, 1.4), ..Default::default() }, 5)?;
    let stage = MidiStageConfig { lyrics_vocab: 256, prompt_vocab: 64, max_frames: 200, max_notes: 32, ..Default::default() };
    let lm = MidiLm::new(stage.clone(), Preset::Tiny, 0, &Device::Cpu)?;
    let tok = stage.lyrics_tokenizer();
    let data: Vec<_> = clips.iter().map(|(c, m)| (LyricsEncoding::from_text(&tok, &c.lyrics), m.clone())).collect();

    let mut opt = Adam::new(lm.model.store(), AdamConfig { lr: 3e-3, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for step in 0..=400 {
        order.shuffle(&mut rng);
        let batch = order[..4].iter().map(|&i| lm.sequence(&data[i].0, None, Some(&data[i].1))).collect::<tunesmith::Result<Vec<_>>>()?;
        let loss = lm.model.nll_loss_batch(&batch)?;
        if step % 100 == 0 {
            println!("step {step}: loss {:.3}", loss.to_scalar::<f32>()?);
        }
        opt.backward_step(&loss)?;
    }

    for ((c, gt), (lyrics, _)) in clips.iter().zip(&data).take(4) {
        let greedy = lm.generate(lyrics, None, &MidiGenOptions { sampler: Sampler::Greedy, ..Default::default() })?;
        let sampled = lm.generate(lyrics, None, &MidiGenOptions { seed: 1, ..Default::default() })?;
        println!("{:?}", c.lyrics);
        println!("  truth   {:?}", gt.pairs());
        println!("  greedy  {:?} (MD {:.2})", greedy.pairs(), melody_distance(gt, &greedy)?);
        println!("  sampled {:?} (MD {:.2})", sampled.pairs(), melody_distance(gt, &sampled)?);
    }
    Ok(())
}
