//! Notes to acoustic tokens. Decoding is forced to one acoustic frame per
//! melody frame, and after a short fit the F0 slot follows the melody.

use candle_core::Device;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tunesmith::lm::{FrameTokens, Preset, Sampler};
use tunesmith::nn::{Adam, AdamConfig};
use tunesmith::pipeline::{gt_f0, synth_clips, SynthCorpusSpec};
use tunesmith::vocal_stage::{
    f0_bin_hz, f0_pitch_track, quantize_f0, vocal_tokens, VocalGenOptions, VocalLm, VocalMode, VocalStageConfig,
};

fn main() -> tunesmith::Result<()> {
    let book = 16;
    let clips = synth_clips(&SynthCorpusSpec { n_clips: 6, holdout: 1, clip_seconds: (1.0, 1.2), ..Default::default() }, 2)?;
    // Stand-in acoustic codes that depend on pitch, so the model has something to learn.
    let data = clips
        .iter()
        .map(|(c, m)| {
            let (hz, voiced) = gt_f0(m);
            let (bins, _) = quantize_f0(&hz, &voiced)?;
            let codes: Vec<Vec<u16>> = m.expand()?.pitches().iter().map(|&p| vec![p as u16 % 16, (p as u16 + 5) % 16, 0]).collect();
            Ok((c.pinyin.clone(), m.clone(), vocal_tokens(&codes, &bins, book)?))
        })
        .collect::<tunesmith::Result<Vec<_>>>()?;
    let reference = |i: usize| {
        let r = &data[(i + 1) % data.len()].2;
        FrameTokens::new(r.steps()[..8].to_vec(), r.vocab_sizes().to_vec())
    };

    let stage = VocalStageConfig { mode: VocalMode::Expanded, book_size: book, max_frames: 200, reference_frames: 8, ..Default::default() };
    let lm = VocalLm::new(stage, Preset::Tiny, 0, &Device::Cpu)?;
    let mut opt = Adam::new(lm.model.store(), AdamConfig { lr: 3e-3, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for step in 0..=300 {
        order.shuffle(&mut rng);
        let batch = order[..3]
            .iter()
            .map(|&i| lm.sequence(&data[i].0, Some(&data[i].1), &reference(i)?, Some(&data[i].2)))
            .collect::<tunesmith::Result<Vec<_>>>()?;
        let loss = lm.model.nll_loss_batch(&batch)?;
        if step % 100 == 0 {
            println!("step {step}: loss {:.3}", loss.to_scalar::<f32>()?);
        }
        opt.backward_step(&loss)?;
    }

    for (i, (pinyin, m, _)) in data.iter().enumerate().take(3) {
        let g = lm.generate(pinyin, Some(m), &reference(i)?, &VocalGenOptions { sampler: Sampler::Greedy, seed: 0 })?;
        let sung = f0_pitch_track(&g.vocal.slot(3));
        let hits = sung.as_ref().map_or(0, |s| s.iter().zip(m.expand().unwrap().pitches()).filter(|(a, b)| a == b).count());
        let hz: Vec<f64> = g.vocal.slot(3).into_iter().filter_map(f0_bin_hz).collect();
        println!(
            "clip {i}: {} melody frames -> {} vocal frames, {hits} with the melody's pitch, mean F0 {:.0} Hz",
            m.total_frames(),
            g.vocal.len(),
            hz.iter().sum::<f64>() / hz.len().max(1) as f64
        );
    }
    Ok(())
}
