//! Write a small synthetic corpus to disk and look at what is in it.
//!
//! cargo run --example synth_corpus -- [out-dir]

use std::path::PathBuf;

use tunesmith::key::{estimate_key, note_profile};
use tunesmith::pipeline::{make_synth_corpus, Split, SynthCorpusSpec};
use tunesmith::prompt::ConditionDropout;

fn main() -> tunesmith::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("tunesmith-synth"));
    let _ = std::fs::remove_dir_all(&out);
    let corpus = make_synth_corpus(&SynthCorpusSpec { n_clips: 24, holdout: 4, ..Default::default() }, 11, &out)?;
    println!("{} clips in {} ({} train, {} holdout)", corpus.clips.len(), out.display(), corpus.split(Split::Train).len(), corpus.split(Split::Holdout).len());

    let mut key_hits = 0;
    for clip in &corpus.clips {
        let m = corpus.midi(clip)?;
        let est = estimate_key(&note_profile(&m))?.key;
        key_hits += (Some(est) == clip.key) as usize;
    }
    println!("estimated key matches the generating key on {key_hits}/{}", corpus.clips.len());

    for clip in corpus.clips.iter().take(3) {
        let m = corpus.midi(clip)?;
        println!("\n{} (singer {}, {:.0} bpm, {} segmentation variants)", clip.id, clip.singer, clip.tempo_bpm, clip.midi_variants.len());
        println!("  lyrics  {:?}", clip.lyrics);
        println!("  notes   {:?}", m.pairs());
        println!("  mels    vocal {} / accomp {} frames", corpus.vocal_mel(clip)?.len(), corpus.accomp_mel(clip)?.len());
        println!("  melody prompt {:?}", clip.melody_prompt);
        println!("  accomp prompt {:?}", clip.accomp_prompt);
    }
    println!("\nprompts are dropped independently 10% of the time and jointly 10%: {:.2} each", ConditionDropout::default().marginal());
    Ok(())
}
