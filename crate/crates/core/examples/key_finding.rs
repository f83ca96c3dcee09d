//! Key of a melody from its duration-weighted pitch-class profile, and the
//! KA ratio of a prediction against a reference.

use tunesmith::key::{estimate_key, key_accuracy, note_profile};
use tunesmith::melody::MidiSequence;

fn main() -> tunesmith::Result<()> {
    // A phrase in A minor.
    let gt = MidiSequence::from_pairs(&[(57, 20), (60, 10), (64, 10), (62, 5), (60, 5), (59, 10), (56, 5), (57, 30)])?;
    let est = estimate_key(&note_profile(&gt))?;
    println!("estimated {} (r = {:.3}), relative {}", est.key.name(), est.r, est.key.relative().name());

    for shift in [0, 2, 7] {
        let e = estimate_key(&note_profile(&gt.transpose(shift)?))?;
        println!("transposed +{shift}: {}", e.key.name());
    }

    let wandering = MidiSequence::from_pairs(&[(57, 20), (61, 10), (63, 10), (66, 10), (57, 20)])?;
    println!("KA of itself {:.3}, of a chromatic wander {:.3}", key_accuracy(&gt, &gt, est.key)?, key_accuracy(&gt, &wandering, est.key)?);
    Ok(())
}
