use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tunesmith::audio::{write_wav, MelSpec};
use tunesmith::error::{Error, Result};
use tunesmith::eval_metrics::ablation_table;
use tunesmith::melody::write_json;
use tunesmith::pipeline::{
    ablation, evaluate, generate_accomp, generate_midi, generate_vocal, read_midi_file, remix_mels, sing, train,
    AblationOptions, EvaluateOptions, RunConfig, RunDir, SingRequest, Stage, TrainOptions,
};
use tunesmith::vocal_stage::VocalTokenFile;

#[derive(Parser)]
#[command(name = "tunesmith", version, about = "Lyrics in, song out: melody LM, vocal LM, accompaniment diffusion")]
struct Cli {
    /// Run directory (config, corpus, checkpoints, logs).
    #[arg(long, global = true, default_value = "run")]
    run: PathBuf,
    /// Config file to use instead of <run>/config.toml.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct TrainArgs {
    /// Continue from the stage's checkpoint.
    #[arg(long)]
    resume: bool,
    /// Stop (and checkpoint) after this many steps in total.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write config.toml and a synthetic corpus into the run directory.
    PrepareSynth {
        #[arg(long, default_value = "smoke")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Fit the residual codebooks and tokenize every clip.
    FitRvq(TrainArgs),
    /// Train the mel autoencoder used by the accompaniment stage.
    TrainVae(TrainArgs),
    /// Train the lyrics-to-notes model.
    TrainMidiLm(TrainArgs),
    /// Train the notes-to-acoustic-tokens model.
    TrainVocalLm(TrainArgs),
    /// Train the accompaniment diffusion model.
    TrainLdm(TrainArgs),
    /// Lyrics to a melody (JSON note list).
    GenerateMidi {
        #[arg(long)]
        lyrics: String,
        #[arg(long)]
        melody_prompt: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "midi.json")]
        out: PathBuf,
    },
    /// Melody and reference to vocal tokens and a vocal mel.
    GenerateVocal {
        #[arg(long)]
        lyrics: String,
        /// Clip id from the run's corpus or a .vtok file.
        #[arg(long)]
        reference: String,
        /// Melody (.json, .mid or records); required by MIDI-conditioned modes.
        #[arg(long)]
        midi: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "vocal.tok")]
        out: PathBuf,
    },
    /// Vocal tokens to an accompaniment mel.
    GenerateAccomp {
        /// Vocal tokens from generate-vocal.
        #[arg(long)]
        vocal: PathBuf,
        #[arg(long)]
        melody_prompt: Option<String>,
        #[arg(long)]
        accomp_prompt: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "accomp.mel")]
        out: PathBuf,
    },
    /// Lyrics and a reference vocal to a mixed song.
    Sing {
        #[arg(long)]
        lyrics: String,
        #[arg(long)]
        reference: String,
        #[arg(long)]
        melody_prompt: Option<String>,
        #[arg(long)]
        accomp_prompt: Option<String>,
        /// Use this melody and skip the melody model.
        #[arg(long)]
        midi: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "song")]
        out: PathBuf,
    },
    /// Vocoded stems and a mix from two mels.
    Remix {
        #[arg(long)]
        vocal: PathBuf,
        #[arg(long)]
        accomp: PathBuf,
        #[arg(long, default_value = "mix")]
        out: PathBuf,
    },
    /// Score holdout melodies (and F0) against ground truth.
    Evaluate {
        /// Snap both melodies to the sixteenth grid first.
        #[arg(long)]
        rounded: bool,
        /// Score ground truth against itself.
        #[arg(long)]
        oracle: bool,
        /// Skip vocal generation and FFE.
        #[arg(long)]
        no_f0: bool,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train and compare every vocal configuration instead.
        #[arg(long)]
        ablation: bool,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn config(cli: &Cli, run: &RunDir) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(p),
        None => run.load_config(),
    }
}

fn train_stage(cli: &Cli, run: &RunDir, stage: Stage, args: &TrainArgs) -> Result<()> {
    let cfg = config(cli, run)?;
    let _lock = run.lock()?;
    let r = train(run, &cfg, stage, TrainOptions { resume: args.resume, stop_after: args.stop_after })?;
    println!(
        "{stage}: {} steps, loss {:.4} -> {:.4}, checkpoint {}",
        r.steps,
        r.initial_loss,
        r.final_loss,
        r.checkpoint.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let run = RunDir::new(&cli.run);
    match &cli.cmd {
        Cmd::PrepareSynth { preset, seed, clips } => {
            let mut cfg = match &cli.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::named(preset)?,
            };
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            if let Some(n) = clips {
                cfg.corpus.n_clips = *n;
            }
            let _lock = run.lock()?;
            let corpus = run.prepare(&cfg)?;
            println!("{} clips in {}", corpus.clips.len(), run.corpus_dir().display());
        }
        Cmd::FitRvq(a) => train_stage(cli, &run, Stage::Rvq, a)?,
        Cmd::TrainVae(a) => train_stage(cli, &run, Stage::Vae, a)?,
        Cmd::TrainMidiLm(a) => train_stage(cli, &run, Stage::Midi, a)?,
        Cmd::TrainVocalLm(a) => train_stage(cli, &run, Stage::Vocal, a)?,
        Cmd::TrainLdm(a) => train_stage(cli, &run, Stage::Ldm, a)?,
        Cmd::GenerateMidi { lyrics, melody_prompt, seed, out } => {
            let cfg = config(cli, &run)?;
            let m = generate_midi(&run, &cfg, lyrics, melody_prompt.as_deref(), *seed)?;
            write_json(&m, out)?;
            println!("{} notes, {} frames -> {}", m.len(), m.total_frames(), out.display());
        }
        Cmd::GenerateVocal { lyrics, reference, midi, seed, out } => {
            let cfg = config(cli, &run)?;
            let midi = midi.as_deref().map(read_midi_file).transpose()?;
            let (tokens, mel) = generate_vocal(&run, &cfg, lyrics, midi.as_ref(), reference, *seed)?;
            tokens.save(out)?;
            let mel_path = out.with_extension("mel");
            mel.save(&mel_path)?;
            println!("{} frames -> {}, {}", tokens.tokens.len(), out.display(), mel_path.display());
        }
        Cmd::GenerateAccomp { vocal, melody_prompt, accomp_prompt, seed, out } => {
            let cfg = config(cli, &run)?;
            let vocal = VocalTokenFile::load(vocal).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("{}: {io}", vocal.display())),
                e => e,
            })?;
            let mel = generate_accomp(&run, &cfg, &vocal, melody_prompt.as_deref(), accomp_prompt.as_deref(), *seed)?;
            mel.save(out)?;
            println!("{} mel frames -> {}", mel.len(), out.display());
        }
        Cmd::Sing { lyrics, reference, melody_prompt, accomp_prompt, midi, seed, out } => {
            let cfg = config(cli, &run)?;
            let req = SingRequest {
                lyrics: lyrics.clone(),
                reference: reference.clone(),
                melody_prompt: melody_prompt.clone(),
                accomp_prompt: accomp_prompt.clone(),
                midi_override: midi.clone(),
                seed: *seed,
                out_dir: out.clone(),
            };
            let o = sing(&run, &cfg, &req)?;
            println!("{} -> {}", o.stages.join(", "), o.mix.display());
        }
        Cmd::Remix { vocal, accomp, out } => {
            let cfg = config(cli, &run).unwrap_or_else(|_| RunConfig::smoke());
            let (v, a) = (MelSpec::load(vocal)?, MelSpec::load(accomp)?);
            std::fs::create_dir_all(out)?;
            let (vw, aw, mix) = remix_mels(&v, &a, cfg.generate.griffin_lim_iters);
            write_wav(out.join("vocal.wav"), &vw)?;
            write_wav(out.join("accomp.wav"), &aw)?;
            write_wav(out.join("mix.wav"), &mix)?;
            println!("{} samples -> {}", mix.len(), out.join("mix.wav").display());
        }
        Cmd::Evaluate { rounded, oracle, no_f0, limit, seed, ablation: abl, json } => {
            let cfg = config(cli, &run)?;
            if *abl {
                let _lock = run.lock()?;
                let rows = ablation(&run, &cfg, &AblationOptions { limit: *limit, seed: *seed, ..Default::default() })?;
                print!("{}", ablation_table(&rows));
                if let Some(p) = json {
                    std::fs::write(p, serde_json::to_string_pretty(&rows)?)?;
                }
            } else {
                let opts = EvaluateOptions { rounded: *rounded, oracle: *oracle, f0: !no_f0, limit: *limit, seed: *seed };
                let report = evaluate(&run, &cfg, &opts)?;
                print!("{}", report.table(if *oracle { "ground truth" } else { "generated" }));
                if let Some(p) = json {
                    std::fs::write(p, report.to_json()?)?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
