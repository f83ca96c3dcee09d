//! Smoke-preset run from an empty directory to a mixed song.
//!
//! cargo run --example end_to_end -- [run-dir]

use std::path::PathBuf;
use std::time::Instant;

use tunesmith::pipeline::{sing, train, RunConfig, RunDir, SingRequest, Stage, TrainOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let root: PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("tunesmith-e2e"));
    let _ = std::fs::remove_dir_all(&root);
    let run = RunDir::new(&root);
    let cfg = RunConfig::smoke();
    let t0 = Instant::now();
    let corpus = run.prepare(&cfg)?;
    println!("prepared {} clips in {:.1?}", corpus.clips.len(), t0.elapsed());
    for stage in Stage::ALL {
        let t = Instant::now();
        let r = train(&run, &cfg, stage, TrainOptions::default())?;
        println!(
            "{stage:>5}: {} steps, loss {:.4} -> {:.4} ({:.2}x) in {:.1?}",
            r.steps,
            r.initial_loss,
            r.final_loss,
            r.final_loss / r.initial_loss,
            t.elapsed()
        );
    }
    let t = Instant::now();
    let out = sing(
        &run,
        &cfg,
        &SingRequest {
            lyrics: "la li lu le lo".into(),
            reference: corpus.clips[0].id.clone(),
            melody_prompt: None,
            accomp_prompt: None,
            midi_override: None,
            seed: 7,
            out_dir: root.join("song"),
        },
    )?;
    println!("sang {:?} in {:.1?}; wrote {}", out.stages, t.elapsed(), out.mix.display());
    println!("total {:.1?}", t0.elapsed());
    Ok(())
}
