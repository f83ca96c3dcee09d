//! The global/local token model memorizes one sequence and greedy decoding
//! gives it back.

use candle_core::{DType, Device};
use tunesmith::lm::{AuxTable, ConditionSegment, FrameTokens, GenerateOptions, GlobalLocalModel, LmConfig, Sampler, SegmentKind};
use tunesmith::nn::{Adam, AdamConfig};

fn main() -> tunesmith::Result<()> {
    let vocab = vec![8, 8];
    let aux = vec![AuxTable { name: "text".into(), vocab: 20, encoder_layers: 1, max_len: 16 }];
    let m = GlobalLocalModel::new(LmConfig::tiny(vocab.clone(), aux, 64), DType::F32, &Device::Cpu)?;
    let target: Vec<Vec<u32>> = (0..12).map(|i| vec![(i * 3) % 8, (i * 5 + 1) % 8]).collect();
    let prompt = ConditionSegment::symbols(SegmentKind::TextSemantic, 0, vec![4, 9, 2]);
    let segs = vec![prompt.clone(), ConditionSegment::bos(), ConditionSegment::target(FrameTokens::new(target.clone(), vocab)?, true)];

    let mut opt = Adam::new(m.store(), AdamConfig { lr: 3e-3, ..Default::default() })?;
    for step in 0..500 {
        let loss = m.nll_loss(&segs)?;
        let l: f32 = loss.to_scalar()?;
        if step % 20 == 0 || l < 0.05 {
            println!("step {step}: loss {l:.4}");
        }
        if l < 0.05 {
            break;
        }
        opt.backward_step(&loss)?;
    }
    let opts = GenerateOptions { max_steps: 40, sampler: Sampler::Greedy, stop_on_eos: true, seed: 0 };
    let g = m.generate(&[prompt, ConditionSegment::bos()], &opts, None)?;
    println!("decoded {} steps, eos {}, exact {}", g.steps.len(), g.hit_eos, g.steps == target);
    Ok(())
}
