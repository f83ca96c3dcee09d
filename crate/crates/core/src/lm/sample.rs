use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Arg-max; ties go to the lowest id.
    Greedy,
    TopK { k: usize, temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub max_steps: usize,
    pub sampler: Sampler,
    /// Allow EOS in the first slot and stop on it. Without it decoding runs
    /// for exactly `max_steps` steps.
    pub stop_on_eos: bool,
    pub seed: u64,
}

/// Edits the logits of one slot before sampling. Masked entries are set to
/// negative infinity.
pub trait LogitConstraint {
    fn apply(&self, generated: &[Vec<u32>], slot: usize, current: &[u32], logits: &mut [f32]);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub steps: Vec<Vec<u32>>,
    pub hit_eos: bool,
    /// EOS was allowed but never produced before the step budget ran out.
    pub truncated: bool,
}

pub(crate) fn pick_token(logits: &[f32], sampler: &Sampler, rng: &mut ChaCha8Rng) -> Result<u32> {
    let mut order: Vec<usize> = (0..logits.len()).filter(|&i| logits[i].is_finite()).collect();
    if order.is_empty() {
        return Err(Error::MalformedSequence("every token is masked".into()));
    }
    // Stable sort keeps lower ids first among equal logits.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    match *sampler {
        Sampler::Greedy => Ok(order[0] as u32),
        Sampler::TopK { k, temperature } => {
            if temperature <= 0.0 {
                return Ok(order[0] as u32);
            }
            order.truncate(k.max(1));
            let top = logits[order[0]] as f64;
            let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] as f64 - top) / temperature).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (&i, w) in order.iter().zip(&weights) {
                if u < *w {
                    return Ok(i as u32);
                }
                u -= w;
            }
            Ok(*order.last().expect("nonempty") as u32)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn greedy_prefers_lowest_on_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(pick_token(&[0.5, 2.0, 2.0, f32::NEG_INFINITY], &Sampler::Greedy, &mut rng).unwrap(), 1);
    }

    #[test]
    fn top_k_stays_in_top_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = [0.0, 5.0, 1.0, 4.0, f32::NEG_INFINITY];
        for _ in 0..200 {
            let t = pick_token(&logits, &Sampler::TopK { k: 2, temperature: 2.0 }, &mut rng).unwrap();
            assert!(t == 1 || t == 3);
        }
    }

    #[test]
    fn all_masked_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(pick_token(&[f32::NEG_INFINITY; 3], &Sampler::Greedy, &mut rng).is_err());
    }
}
