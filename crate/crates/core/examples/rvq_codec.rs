//! Fit residual codebooks on frame features and watch the error fall with
//! depth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tunesmith::rvq::{fit, FitOptions};

fn main() -> tunesmith::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let frames: Vec<Vec<f32>> = (0..3000).map(|_| (0..16).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let (books, report) = fit(&frames, FitOptions { num_books: 8, book_size: 64, iters: 6, seed: 1 })?;
    println!("codebook hash {}", books.hash());
    for (q, r) in report.mean_residual_norm.iter().enumerate() {
        println!("after {} books: mean residual {r:.3}", q + 1);
    }
    let codes = books.encode_frames(&frames[..4])?;
    println!("codes of 4 frames: {:?}", codes.frames());
    println!("kept for the language models: {:?}", codes.truncate(3)?.frames());
    Ok(())
}
