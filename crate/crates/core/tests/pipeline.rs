//! Run-directory behavior on a very small corpus: stage ordering, resumable
//! training, the oracle evaluation and CLI exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use tunesmith::pipeline::{evaluate, read_loss_log, train, EvaluateOptions, RunConfig, RunDir, Stage, TrainOptions};
use tunesmith::Error;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::smoke();
    cfg.corpus.n_clips = 10;
    cfg.corpus.holdout = 3;
    cfg.corpus.clip_seconds = (1.0, 1.2);
    cfg.rvq.book_size = 16;
    cfg.rvq.iters = 2;
    for t in [&mut cfg.vae, &mut cfg.midi.train, &mut cfg.vocal.train, &mut cfg.ldm.train] {
        t.steps = 6;
        t.batch = 2;
        t.warmup = 1;
        t.checkpoint_every = 2;
    }
    cfg
}

fn prepared(dir: &Path) -> (RunDir, RunConfig) {
    let run = RunDir::new(dir);
    let cfg = tiny_config();
    run.prepare(&cfg).unwrap();
    (run, cfg)
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let cfg = tiny_config();
    let e = train(&run, &cfg, Stage::Rvq, TrainOptions::default()).unwrap_err();
    assert!(matches!(e.root(), Error::Dependency(_)), "{e}");

    run.prepare(&cfg).unwrap();
    for stage in [Stage::Vocal, Stage::Ldm] {
        let e = train(&run, &cfg, stage, TrainOptions::default()).unwrap_err();
        assert!(matches!(e.root(), Error::Dependency(_)), "{stage}: {e}");
        assert_eq!(e.exit_code(), 3);
    }
    train(&run, &cfg, Stage::Rvq, TrainOptions::default()).unwrap();
    let e = train(&run, &cfg, Stage::Ldm, TrainOptions::default()).unwrap_err();
    assert!(e.to_string().contains("vae"), "{e}");
}

#[test]
fn interrupted_training_resumes_to_the_same_weights() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (run_a, cfg) = prepared(a.path());
    let (run_b, _) = prepared(b.path());
    for run in [&run_a, &run_b] {
        train(run, &cfg, Stage::Rvq, TrainOptions::default()).unwrap();
    }
    for stage in [Stage::Vae, Stage::Midi] {
        let full = train(&run_a, &cfg, stage, TrainOptions::default()).unwrap();
        let part = train(&run_b, &cfg, stage, TrainOptions { resume: false, stop_after: Some(4) }).unwrap();
        assert_eq!(part.steps, 4);
        let rest = train(&run_b, &cfg, stage, TrainOptions { resume: true, stop_after: None }).unwrap();
        assert_eq!(rest.steps, full.steps);
        assert_eq!(read_loss_log(&full.log).unwrap(), read_loss_log(&rest.log).unwrap(), "{stage} loss log");
        assert_eq!(fs::read(&full.checkpoint).unwrap(), fs::read(&rest.checkpoint).unwrap(), "{stage} checkpoint");
    }
}

#[test]
fn ground_truth_scores_perfectly_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let (run, cfg) = prepared(dir.path());
    let opts = EvaluateOptions { oracle: true, f0: false, ..Default::default() };
    let r = evaluate(&run, &cfg, &opts).unwrap();
    assert_eq!(r.count, 3);
    assert_eq!(r.mean.apd, 0.0);
    assert_eq!(r.mean.td, 0.0);
    assert_eq!(r.mean.md, 0.0);
    assert_eq!(r.mean.pd, 100.0);
    assert_eq!(r.mean.dd, 100.0);
    if let Some(ka) = r.mean.ka {
        assert!((ka - 1.0).abs() < 1e-9, "KA {ka}");
    }
}

fn cli(run: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tunesmith")).arg("--run").arg(run).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");

    let out = cli(&run, &["prepare-synth", "--preset", "nope"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // No config yet.
    let out = cli(&run, &["generate-midi", "--lyrics", "la la"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    fs::create_dir_all(&run).unwrap();
    let r = RunDir::new(&run);
    r.prepare(&tiny_config()).unwrap();
    let out = cli(&run, &["train-vocal-lm"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = cli(&run, &["fit-rvq"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("rvq"));
}
