//! Text to song in three stages, small enough to train on a laptop CPU.
//!
//! Lyrics (and an optional melody prompt) go through a note-level language
//! model ([`midi_stage`]) to a melody. The melody, expanded to one step per
//! frame, conditions an acoustic-token model ([`vocal_stage`]) that emits
//! residual-codebook tokens ([`rvq`]) plus a quantized F0 per frame. Those
//! vocal tokens then condition a latent diffusion model
//! ([`accomp_diffusion`]) that produces the accompaniment mel. Both token
//! models are the same global/local transformer ([`lm`]).
//!
//! [`pipeline`] ties the stages to a run directory with a synthetic corpus,
//! and [`eval_metrics`] scores melodies and F0 tracks. The `tunesmith`
//! binary is a thin CLI over [`pipeline`].

pub mod accomp_diffusion;
pub mod audio;
pub mod error;
pub mod eval_metrics;
pub mod key;
pub mod lm;
pub mod melody;
pub mod midi_stage;
pub mod nn;
pub mod pipeline;
pub mod prompt;
pub mod rvq;
pub mod text;
pub mod vocal_stage;

pub use error::{Error, Result};
