//! Subcommands driven in-process through `cli::run`.

use std::fs;
use std::path::{Path, PathBuf};

use avdit::checkpoint::load_checkpoint;
use avdit::cli;
use avdit::config::RunConfig;
use avdit::model::Model;
use avdit::rng;

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("avdit").chain(args.iter().copied()))
}

/// A small world and model budget so each subcommand takes seconds.
fn setup(dir: &Path) -> (PathBuf, String) {
    let out = dir.join("out");
    let cfg = dir.join("run.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 2\noutput_dir = {:?}\n[dataset]\nn_identities = 10\npairs_per_identity = 4\n\
             [train]\nsteps = 10\n[guidance]\nsteps = 3\n",
            out.display().to_string()
        ),
    )
    .unwrap();
    assert_eq!(run(&["gen-data", "--config", cfg.to_str().unwrap()]), 0);
    (out, cfg.to_str().unwrap().to_string())
}

#[test]
fn zero_step_training_writes_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, cfg) = setup(tmp.path());
    assert_eq!(run(&["train", "--config", &cfg, "--steps", "0", "--seed", "4"]), 0);
    let ck = load_checkpoint(&out.join("checkpoint.bin")).unwrap();
    let resolved = RunConfig::load(&out.join("train.config.toml")).unwrap();
    assert_eq!(resolved.train.steps, 0);
    assert_eq!(ck.fingerprint, resolved.fingerprint());
    assert_eq!(ck.step, 0);
    let init = Model::init(resolved.model.clone(), &mut rng::stream(4, "model-init")).unwrap();
    assert_eq!(ck.bind(resolved.model).unwrap(), init);
}

#[test]
fn resumed_training_equals_one_long_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, cfg) = setup(tmp.path());
    assert_eq!(run(&["train", "--config", &cfg, "--steps", "6"]), 0);
    let long = load_checkpoint(&out.join("checkpoint.bin")).unwrap();
    assert_eq!(run(&["train", "--config", &cfg, "--steps", "3"]), 0);
    assert_eq!(run(&["train", "--config", &cfg, "--steps", "3", "--resume"]), 0);
    let resumed = load_checkpoint(&out.join("checkpoint.bin")).unwrap();
    assert_eq!(resumed.step, 6);
    assert_eq!(resumed.params, long.params);
    assert_eq!(resumed.optimizer, long.optimizer);
}

#[test]
fn sampling_is_byte_reproducible_and_scored() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, cfg) = setup(tmp.path());
    assert_eq!(run(&["train", "--config", &cfg]), 0);
    let args = [
        "sample",
        "--config",
        &cfg,
        "--id-guidance",
        "4.0",
        "--steps",
        "30",
        "--seed",
        "7",
        "--pairs",
        "2",
    ];
    assert_eq!(run(&args), 0);
    let first = fs::read(out.join("samples.jsonl")).unwrap();
    assert_eq!(run(&args), 0);
    assert_eq!(fs::read(out.join("samples.jsonl")).unwrap(), first);
    let resolved = RunConfig::load(&out.join("sample.config.toml")).unwrap();
    assert_eq!(
        (resolved.guidance.s_id, resolved.guidance.steps, resolved.guidance.seed),
        (4.0, 30, 7)
    );

    assert_eq!(run(&["eval", "--config", &cfg]), 0);
    let metrics = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert!(metrics.starts_with("# fingerprint "));
    let values: Vec<f64> = metrics
        .lines()
        .filter(|l| l.starts_with("pair="))
        .map(|l| l.rsplit('\t').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(values.len(), 2 * 4);
    assert!(values.iter().all(|v| v.is_finite()));
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, cfg) = setup(tmp.path());
    assert_ne!(run(&["frobnicate"]), 0);
    assert_eq!(run(&["sample", "--config", &cfg, "--id-guidance", "lots"]), 2);
    assert_eq!(run(&["sample", "--config", &cfg, "--steps", "0"]), 2);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seeed = 1\n").unwrap();
    assert_eq!(run(&["gen-data", "--config", bad.to_str().unwrap()]), 2);

    // Missing checkpoint is an I/O failure.
    assert_eq!(run(&["sample", "--config", &cfg]), 3);
    assert_eq!(run(&["train", "--config", &cfg, "--steps", "1"]), 0);
    let ckpt = out.join("checkpoint.bin");
    let good = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &good[..good.len() / 2]).unwrap();
    assert_eq!(run(&["sample", "--config", &cfg]), 4);
    let mut v = good.clone();
    v[8] = 7;
    fs::write(&ckpt, &v).unwrap();
    assert_eq!(run(&["sample", "--config", &cfg]), 5);

    // A checkpoint from a narrower model does not bind to the configured one.
    fs::write(&ckpt, &good).unwrap();
    let narrow = tmp.path().join("narrow.toml");
    let mut text = fs::read_to_string(&cfg).unwrap();
    text.push_str("[model]\nmlp_hidden = 64\n");
    fs::write(&narrow, text).unwrap();
    assert_eq!(run(&["sample", "--config", narrow.to_str().unwrap()]), 6);
}

#[test]
fn grad_check_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gc");
    assert_eq!(run(&["grad-check", "--out", out.to_str().unwrap(), "--coords", "1"]), 0);
    let report = fs::read_to_string(out.join("grad-check.tsv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("attention_block\t")));
    assert!(report.lines().any(|l| l.starts_with("loss/lora.audio.0.attn.q.up\t")));
}
