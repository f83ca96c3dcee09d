//! Harmonic synthesis, log-mel analysis, Griffin-Lim inversion and the final
//! mix, written as WAVs.
//!
//! cargo run --example audio -- [out-dir]

use std::path::PathBuf;

use tunesmith::audio::{mel_bin_of, remix, render_harmonic, write_wav, MelAnalyzer};
use tunesmith::melody::MidiSequence;
use tunesmith::pipeline::gt_f0;

fn main() -> tunesmith::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(std::env::temp_dir);
    let m = MidiSequence::from_pairs(&[(60, 25), (64, 25), (67, 25), (72, 50)])?;
    let (f0, voiced) = gt_f0(&m);
    let amp: Vec<f32> = voiced.iter().map(|&v| if v { 0.3 } else { 0.0 }).collect();
    let vocal = render_harmonic(&f0, &amp, &[1.0, 0.5, 0.25, 0.12], m.frame_rate_hz());
    let bass_f0: Vec<f64> = f0.iter().map(|&h| if h > 0.0 { h / 4.0 } else { 0.0 }).collect();
    let accomp = render_harmonic(&bass_f0, &vec![0.2; f0.len()], &[1.0, 0.3], m.frame_rate_hz());

    let analyzer = MelAnalyzer::new();
    let mel = analyzer.mel(&vocal);
    println!("{} samples -> {} mel frames", vocal.len(), mel.len());
    let expected: Vec<usize> = m.pairs().iter().map(|&(p, _)| mel_bin_of(440.0 * 2f64.powf((p as f64 - 69.0) / 12.0))).collect();
    println!("fundamental mel bins per note {expected:?}");
    let bins = mel.dominant_bins();
    println!("dominant bins every 10th frame {:?}", bins.iter().step_by(10).collect::<Vec<_>>());

    let rebuilt = analyzer.griffin_lim(&mel, 32);
    let again = analyzer.mel(&rebuilt);
    let err = mel.frames().iter().zip(again.frames()).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs())).sum::<f32>()
        / (mel.len() * mel.frames()[0].len()) as f32;
    println!("Griffin-Lim round trip: mean |log-mel| error {err:.3}");

    let mix = remix(&vocal, &accomp);
    for (name, wav) in [("vocal.wav", &vocal), ("rebuilt.wav", &rebuilt), ("mix.wav", &mix)] {
        write_wav(out.join(name), wav)?;
        println!("wrote {}", out.join(name).display());
    }
    Ok(())
}
