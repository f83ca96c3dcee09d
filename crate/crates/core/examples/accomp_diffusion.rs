//! Latent diffusion conditioned on vocal tokens: the noise schedule, a small
//! denoiser fit to one latent target, and guided sampling.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tunesmith::accomp_diffusion::{latent_frames_for, Ldm, LdmConfig, NoiseSchedule};
use tunesmith::lm::{FrameTokens, Preset, SegmentContent};
use tunesmith::nn::{Adam, AdamConfig};
use tunesmith::vocal_stage::vocal_vocab;

fn main() -> tunesmith::Result<()> {
    let sched = NoiseSchedule::scaled_linear(1000)?;
    for t in [1, 250, 500, 750, 1000] {
        println!("t={t:4}  alpha_bar {:.5}", sched.alpha_bar(t)?);
    }

    let mut cfg = LdmConfig::preset(Preset::Tiny, 8, 16);
    cfg.latent_dim = 4;
    let ldm = Ldm::new(cfg, DType::F32, &Device::Cpu)?;
    let vocal = FrameTokens::new((0..48).map(|i| vec![(i % 8) as u32, (i / 6 % 8) as u32, 1, 3]).collect(), vocal_vocab(8))?;
    let n_lat = latent_frames_for(vocal.len());
    let rows: Vec<f32> = (0..n_lat * 4).map(|i| ((i / 4) as f32 * 0.7 + (i % 4) as f32).sin()).collect();
    let z0 = Tensor::from_vec(rows, (n_lat, 4), &Device::Cpu)?;
    let prompt = SegmentContent::Symbols { tables: vec![0], ids: vec![vec![3], vec![7]] };

    let mut opt = Adam::new(ldm.store(), AdamConfig { lr: 2e-3, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for step in 0..=1500 {
        let loss = ldm.train_loss(&z0, &vocal, Some(&prompt), &mut rng)?;
        if step % 300 == 0 {
            println!("step {step}: eps loss {:.4}", loss.to_scalar::<f32>()?);
        }
        opt.backward_step(&loss)?;
    }

    let a = ldm.vocal_condition(&vocal, n_lat)?;
    let s = ldm.prompt_repr(Some(&prompt))?;
    let mse = |z: &Tensor| -> tunesmith::Result<f32> { Ok((z - &z0)?.sqr()?.mean_all()?.to_scalar()?) };
    println!("target energy {:.3}", z0.sqr()?.mean_all()?.to_scalar::<f32>()?);
    for w in [1.0, 3.0] {
        let z = ldm.sample(&a, s.as_ref(), w, 9)?;
        println!("guidance {w}: {} latent frames, MSE to target {:.3}", z.dim(0)?, mse(&z)?);
    }
    Ok(())
}
