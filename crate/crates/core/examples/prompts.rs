//! Attribute binning, prompt templates and conditioning dropout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tunesmith::melody::MidiSequence;
use tunesmith::prompt::{apply_condition_dropout, bin_attributes, AttributeBins, ConditionDropout, PromptBundle, Templates};

fn main() -> tunesmith::Result<()> {
    let m = MidiSequence::from_pairs(&[(67, 40), (69, 20), (71, 20), (72, 60), (74, 20), (72, 40)])?;
    let attrs = bin_attributes(&m, Some(132.0), Some(0.9), &["bright".into(), "hopeful".into()], &AttributeBins::default())?;
    println!("{attrs:?}");

    let templates = Templates::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for id in 0..templates.len().min(4) {
        println!("[{id}] {}", templates.render(&attrs, id, &mut rng)?);
    }

    let d = ConditionDropout::default();
    println!("marginal drop rate per prompt: {:.2}", d.marginal());
    let bundle = PromptBundle {
        lyrics: "under the bridge".into(),
        melody_prompt: Some(templates.render(&attrs, 0, &mut rng)?),
        accomp_prompt: Some("soft piano".into()),
    };
    let (mut melody, mut accomp, mut both) = (0, 0, 0);
    for _ in 0..10_000 {
        let b = apply_condition_dropout(&bundle, &mut rng, d.p_each, d.p_joint)?;
        melody += b.melody_prompt.is_none() as u32;
        accomp += b.accomp_prompt.is_none() as u32;
        both += (b.melody_prompt.is_none() && b.accomp_prompt.is_none()) as u32;
    }
    println!("over 10k draws dropped: melody {melody}, accomp {accomp}, both {both}");
    Ok(())
}
