//! Run directories, synthetic data, stage training and the inference chain.
//!
//! A run directory holds everything one experiment produces:
//!
//! ```text
//! run/
//!   config.toml
//!   corpus/manifest.ndjson, corpus/clips/<id>/...
//!   rvq/codebooks.rvq, rvq/tokens/<id>.vtok
//!   checkpoints/{vae,midi,vocal,ldm}.safetensors
//!   logs/<stage>.jsonl
//! ```

mod config;
mod corpus;
mod evaluate;
mod infer;
mod train;

pub use config::{GenerateSection, LdmSection, MidiSection, RunConfig, RvqSection, TrainSection, VocalSection};
pub use corpus::{
    gt_f0, make_synth_corpus, random_melody, read_manifest, segmentation_variants, synth_clips, write_manifest, ClipManifest,
    Corpus, HarmonyRule, Split, SynthCorpusSpec, WalkParams, MANIFEST_FILE, SEGMENTATION_THRESHOLDS,
};
pub use evaluate::{ablation, evaluate, AblationOptions, EvaluateOptions};
pub use infer::{
    generate_accomp, generate_midi, generate_vocal, read_midi_file, remix_mels, resolve_reference, sing, SingOutput,
    SingRequest, SING_LOG,
};
pub use train::{
    accomp_prompt_content, check_prerequisites, clip_features, fit_rvq, load_tokens, melody_prompt_content,
    midi_stage_config, read_loss_log, train, train_ldm, train_midi, train_vae, train_vocal, train_vocal_mode, LossPoint,
    Stage, TrainOptions, TrainReport,
};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn codebooks(&self) -> PathBuf {
        self.root.join("rvq").join("codebooks.rvq")
    }

    pub fn tokens_dir(&self) -> PathBuf {
        self.root.join("rvq").join("tokens")
    }

    pub fn token_path(&self, clip_id: &str) -> PathBuf {
        self.tokens_dir().join(format!("{clip_id}.vtok"))
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.safetensors", stage.name()))
    }

    pub fn loss_log(&self, stage: Stage) -> PathBuf {
        self.root.join("logs").join(format!("{}.jsonl", stage.name()))
    }

    /// The saved run config; a config error when missing.
    pub fn load_config(&self) -> Result<RunConfig> {
        let path = self.config_path();
        if !path.exists() {
            return Err(Error::Config(format!("{} not found; run prepare-synth or pass --config", path.display())));
        }
        RunConfig::load(path)
    }

    /// Writes the config and the synthetic corpus.
    pub fn prepare(&self, cfg: &RunConfig) -> Result<Corpus> {
        cfg.validate()?;
        fs::create_dir_all(&self.root)?;
        fs::write(self.config_path(), cfg.to_toml()?)?;
        fs::create_dir_all(self.root.join("checkpoints"))?;
        make_synth_corpus(&cfg.corpus, cfg.seed, self.corpus_dir())
    }

    /// Exclusive ownership of the directory until the guard drops.
    pub fn lock(&self) -> Result<RunLock> {
        fs::create_dir_all(&self.root)?;
        let path = self.root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory {} is in use (remove {} if no other run is active)",
                self.root.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

/// Removes the lock file on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        let guard = run.lock().unwrap();
        assert!(matches!(run.lock(), Err(Error::Config(_))));
        drop(guard);
        run.lock().unwrap();
    }

    #[test]
    fn missing_prerequisites_are_dependency_errors() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        let cfg = RunConfig::smoke();
        for stage in Stage::ALL {
            let err = train(&run, &cfg, stage, TrainOptions::default()).unwrap_err();
            assert!(matches!(err.root(), Error::Dependency(_)), "{stage}: {err}");
        }
    }
}
