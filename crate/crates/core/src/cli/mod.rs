//! Command-line entry points.
//!
//! Every subcommand reads an optional TOML [`RunConfig`], applies its flags as
//! overrides, writes the resolved config as `<out>/<command>.config.toml` and
//! stamps each artifact with that config's fingerprint. Layout of `<out>`:
//! `data/` (dataset), `checkpoint.bin`, `losses.tsv`, `samples.jsonl`,
//! `metrics.tsv`, and `ablation-<preset>/` or `sweep/` for ablations.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::diffusion::{jitter_trainable, loss_grad_check, LossConfig, LossRecord, Trainer};
use crate::error::{Error, Result};
use crate::eval::{
    content_leakage, env_adherence, eval_noise_seed, identity_similarity, leakage_score, run_ablation, sample_input,
    AblationSettings, AblationTable, Metric, ModelCache, Variant,
};
use crate::guidance::{sample, GuidanceConfig};
use crate::model::Model;
use crate::numerics::{grad_check, Tensor, REGISTERED};
use crate::par::{self, ExecMode};
use crate::positional::PositionScheme;
use crate::rng;
use crate::synthworld::{export_dataset, import_dataset, Dataset, PairSample, SplitTag, World};

#[derive(Parser, Debug)]
#[command(
    name = "avdit",
    version,
    about = "Joint audio-video diffusion with in-context identity conditioning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset into `<out>/data`.
    GenData(GenDataArgs),
    /// Train adapters and conditioning on `<out>/data`.
    Train(TrainArgs),
    /// Sample held-out pairs from a checkpoint.
    Sample(SampleArgs),
    /// Score `<out>/samples.jsonl` with the ground-truth metrics.
    Eval(EvalArgs),
    /// Run a preset ablation across seeds.
    Ablate(AblateArgs),
    /// Identity-guidance scale sweep.
    Sweep(SweepArgs),
    /// Finite-difference gradient checks of every op and the training loss.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run on one thread instead of the rayon pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug, Clone, Default)]
struct GuidanceArgs {
    /// Text classifier-free guidance scale on the video stream.
    #[arg(long = "video-cfg")]
    video_cfg: Option<f64>,
    /// Text classifier-free guidance scale on the audio stream.
    #[arg(long = "audio-cfg")]
    audio_cfg: Option<f64>,
    /// Identity guidance scale (0 disables the reference-free pass).
    #[arg(long = "id-guidance")]
    id_guidance: Option<f64>,
    /// Cross-modal guidance scale.
    #[arg(long = "av-cfg")]
    av_cfg: Option<f64>,
    /// Spatio-temporal (block-skip) guidance scale.
    #[arg(long = "stg-scale")]
    stg_scale: Option<f64>,
    /// Video block skipped by the perturbed pass (default: the last).
    #[arg(long = "stg-block")]
    stg_block: Option<usize>,
    /// Denoising steps.
    #[arg(long)]
    steps: Option<usize>,
}

impl GuidanceArgs {
    fn apply(&self, g: &mut GuidanceConfig) {
        if let Some(v) = self.video_cfg {
            g.s_video_cfg = v;
        }
        if let Some(v) = self.audio_cfg {
            g.s_audio_cfg = v;
        }
        if let Some(v) = self.id_guidance {
            g.s_id = v;
        }
        if let Some(v) = self.av_cfg {
            g.s_av = v;
        }
        if let Some(v) = self.stg_scale {
            g.s_stg = v;
        }
        if self.stg_block.is_some() {
            g.stg_block = self.stg_block;
        }
        if let Some(v) = self.steps {
            g.steps = v;
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Root seed of the world and split.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeArg {
    Negative,
    Standard,
}

impl From<SchemeArg> for PositionScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Negative => PositionScheme::Negative,
            SchemeArg::Standard => PositionScheme::Standard,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Training seed (model init and batches).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Reference positional scheme used in training.
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    /// Continue from `<out>/checkpoint.bin`, optimizer state included.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Easy,
    Hard,
    All,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    guidance: GuidanceArgs,
    /// Sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to sample from (default `<out>/checkpoint.bin`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Held-out pairs to sample.
    #[arg(long, default_value_t = 4)]
    pairs: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full model, no identity guidance, standard positions.
    Table3,
    /// Table 3 plus the inference-only positional swap.
    Table3Swap,
    /// Identity-guidance scales from the config's sweep list.
    Sweep,
}

#[derive(Args, Debug, Clone)]
struct AblationArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    guidance: GuidanceArgs,
    /// Comma-separated training/sampling seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Training steps per model.
    #[arg(long = "train-steps")]
    train_steps: Option<usize>,
    /// Leading same-source test pairs to score.
    #[arg(long = "eval-easy")]
    eval_easy: Option<usize>,
    /// Leading cross-source test pairs to score.
    #[arg(long = "eval-hard")]
    eval_hard: Option<usize>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    ablation: AblationArgs,
    #[arg(long, value_enum, default_value_t = Preset::Table3)]
    preset: Preset,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    ablation: AblationArgs,
    /// Comma-separated identity-guidance scales.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Relative-error threshold for a pass.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Coordinates checked per trainable tensor in the training-loss check.
    #[arg(long, default_value_t = 2)]
    coords: usize,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => {
            let name = match a.preset {
                Preset::Table3 => "table3",
                Preset::Table3Swap => "table3-swap",
                Preset::Sweep => "sweep",
            };
            ablate(a.ablation, a.preset, None, &format!("ablation-{name}"), "ablate")
        }
        Command::Sweep(a) => ablate(a.ablation, Preset::Sweep, a.scales, "sweep", "sweep"),
        Command::GradCheck(a) => grad_check_cmd(a),
    }
}

/// Loads the config, applies the common overrides and lets the caller apply
/// its own before validation.
fn resolve(common: &Common, apply: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if common.sequential {
        cfg.exec = ExecMode::Sequential;
    }
    apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved(cfg: &RunConfig, command: &str) -> Result<()> {
    let path = cfg.output_dir.join(format!("{command}.config.toml"));
    cfg.save(&path)?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("data")
}

fn build_dataset(cfg: &RunConfig) -> Result<(World, Dataset)> {
    let world = World::new(cfg.world.clone(), cfg.world_seed())?;
    let ds = world.gen_split(
        cfg.dataset.n_identities,
        cfg.dataset.pairs_per_identity,
        cfg.dataset.mix,
        cfg.dataset_seed(),
        cfg.exec,
    )?;
    Ok((world, ds))
}

/// Reads `<out>/data`, refusing data generated by a different world.
fn load_dataset(cfg: &RunConfig) -> Result<(World, Dataset)> {
    let (world, ds, _) = import_dataset(&data_dir(cfg))?;
    if world.config != cfg.world || world.seed != cfg.world_seed() {
        return Err(Error::Config(
            "dataset in the output directory was generated from a different world config or seed".into(),
        ));
    }
    Ok((world, ds))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = resolve(&a.common, |c| {
        if let Some(s) = a.seed {
            c.seed = s;
        }
    })?;
    let (world, ds) = build_dataset(&cfg)?;
    export_dataset(&data_dir(&cfg), &world, &ds, &cfg.fingerprint())?;
    write_resolved(&cfg, "gen-data")?;
    eprintln!(
        "wrote {} train / {} test pairs to {} (fingerprint {})",
        ds.train.len(),
        ds.test.len(),
        data_dir(&cfg).display(),
        cfg.fingerprint()
    );
    Ok(())
}

fn loss_text(fingerprint: &str, records: &[LossRecord]) -> String {
    let mut s = format!("# fingerprint {fingerprint}\nstep\tloss\n");
    for r in records {
        let _ = writeln!(s, "{}\t{:.6}", r.step, r.loss);
    }
    s
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve(&a.common, |c| {
        if let Some(s) = a.steps {
            c.train.steps = s;
        }
        if let Some(s) = a.seed {
            c.train.seed = s;
        }
        if let Some(lr) = a.lr {
            c.train.optimizer.lr = lr;
        }
        if let Some(b) = a.batch_size {
            c.train.batch_size = b;
        }
        if let Some(s) = a.scheme {
            c.model.position_scheme = s.into();
        }
    })?;
    let (_, ds) = load_dataset(&cfg)?;
    let ckpt_path = cfg.output_dir.join("checkpoint.bin");
    let mut trainer = Trainer::new(cfg.train.clone())?;
    let mut model = if a.resume {
        let ck = load_checkpoint(&ckpt_path)?;
        trainer.optimizer = ck.optimizer(cfg.train.optimizer)?;
        trainer.step = ck.step as usize;
        ck.bind(cfg.model.clone())?
    } else {
        Model::init(cfg.model.clone(), &mut rng::stream(cfg.train.seed, "model-init"))?
    };
    let fp = cfg.fingerprint();
    let start = Instant::now();
    let every = (cfg.train.steps / 20).max(1);
    let records = trainer.run(&ds.train, &mut model, cfg.train.steps, cfg.exec, |r| {
        if r.step % every == 0 {
            eprintln!("step {:>6}  loss {:.4}", r.step, r.loss);
        }
    })?;
    save_checkpoint(
        &Checkpoint::from_model(&model, &fp, trainer.step as u64, Some(&trainer.optimizer)),
        &ckpt_path,
    )?;
    write_file(&cfg.output_dir.join("losses.tsv"), &loss_text(&fp, &records))?;
    write_resolved(&cfg, "train")?;
    eprintln!(
        "trained {} steps in {:.1}s → {}",
        records.len(),
        start.elapsed().as_secs_f64(),
        ckpt_path.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    fingerprint: String,
    checkpoint_fingerprint: String,
    guidance: GuidanceConfig,
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    /// Index into the dataset's test pairs.
    test_index: usize,
    split: SplitTag,
    seed: u64,
    video_shape: Vec<usize>,
    video: Vec<f32>,
    audio_shape: Vec<usize>,
    audio: Vec<f32>,
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let cfg = resolve(&a.common, |c| {
        a.guidance.apply(&mut c.guidance);
        if let Some(s) = a.seed {
            c.guidance.seed = s;
        }
    })?;
    let (_, ds) = load_dataset(&cfg)?;
    let ckpt_path = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("checkpoint.bin"));
    let ck = load_checkpoint(&ckpt_path)?;
    let model = ck.bind(cfg.model.clone())?;
    let chosen: Vec<(usize, &PairSample)> = ds
        .test
        .iter()
        .enumerate()
        .filter(|(_, p)| match a.split {
            SplitArg::Easy => p.tag() == SplitTag::Easy,
            SplitArg::Hard => p.tag() == SplitTag::Hard,
            SplitArg::All => true,
        })
        .take(a.pairs)
        .collect();
    if chosen.is_empty() {
        return Err(Error::InvalidArgument("no held-out pairs match --split/--pairs".into()));
    }
    let fp = cfg.fingerprint();
    let lines = par::map_range(cfg.exec, chosen.len(), |k| -> Result<String> {
        let (idx, p) = chosen[k];
        let seed = eval_noise_seed(cfg.guidance.seed, idx);
        let g = GuidanceConfig {
            seed,
            ..cfg.guidance.clone()
        };
        let out = sample(&model, &sample_input(p)?, &g, ExecMode::Sequential)?;
        serde_json::to_string(&SampleLine {
            test_index: idx,
            split: p.tag(),
            seed,
            video_shape: out.video.shape().to_vec(),
            video: out.video.into_data(),
            audio_shape: out.audio.shape().to_vec(),
            audio: out.audio.into_data(),
        })
        .map_err(|e| Error::InvalidArgument(e.to_string()))
    });
    let mut text = serde_json::to_string(&SampleHeader {
        fingerprint: fp.clone(),
        checkpoint_fingerprint: ck.fingerprint.clone(),
        guidance: cfg.guidance.clone(),
    })
    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    text.push('\n');
    for l in lines {
        text.push_str(&l?);
        text.push('\n');
    }
    let path = cfg.output_dir.join("samples.jsonl");
    write_file(&path, &text)?;
    write_resolved(&cfg, "sample")?;
    eprintln!("wrote {} samples to {}", chosen.len(), path.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = resolve(&a.common, |_| {})?;
    let (world, ds) = load_dataset(&cfg)?;
    let path = cfg.output_dir.join("samples.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let corrupt = |e: serde_json::Error| Error::CorruptHeader(format!("{}: {e}", path.display()));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: SampleHeader = serde_json::from_str(lines.next().unwrap_or_default()).map_err(corrupt)?;
    let fp = cfg.fingerprint();
    let mut out = format!(
        "# fingerprint {fp}\n# samples_fingerprint {}\nscope\tsplit\tmetric\tvalue\n",
        header.fingerprint
    );
    let mut per_split: Vec<(SplitTag, [f64; 4])> = Vec::new();
    for line in lines {
        let s: SampleLine = serde_json::from_str(line).map_err(corrupt)?;
        let p = ds
            .test
            .get(s.test_index)
            .ok_or_else(|| Error::InvalidArgument(format!("sample refers to missing test pair {}", s.test_index)))?;
        let audio = Tensor::new(s.audio_shape, s.audio)?;
        let values = [
            identity_similarity(&world, &audio, &p.target_identity)?,
            env_adherence(&world, &audio, p.env_code)?,
            leakage_score(&audio, &p.reference_nuisance),
            content_leakage(&world, &audio, &p.reference),
        ];
        for (m, v) in Metric::ALL.iter().zip(values) {
            let _ = writeln!(
                out,
                "pair={}\t{}\t{}\t{:.6}",
                s.test_index,
                split_label(s.split),
                m.name(),
                v
            );
        }
        per_split.push((s.split, values));
    }
    let mut summary = String::new();
    for split in [SplitTag::Easy, SplitTag::Hard] {
        let rows: Vec<_> = per_split.iter().filter(|(t, _)| *t == split).map(|(_, v)| v).collect();
        if rows.is_empty() {
            continue;
        }
        for (k, m) in Metric::ALL.iter().enumerate() {
            let mean = rows.iter().map(|v| v[k]).sum::<f64>() / rows.len() as f64;
            let _ = writeln!(out, "mean\t{}\t{}\t{:.6}", split_label(split), m.name(), mean);
            let _ = writeln!(
                summary,
                "{:<5} {:<20} {:>9.4}  (n = {})",
                split_label(split),
                m.name(),
                mean,
                rows.len()
            );
        }
    }
    write_file(&cfg.output_dir.join("metrics.tsv"), &out)?;
    write_resolved(&cfg, "eval")?;
    print!("{summary}");
    Ok(())
}

fn split_label(s: SplitTag) -> &'static str {
    match s {
        SplitTag::Easy => "easy",
        SplitTag::Hard => "hard",
    }
}

fn ablate(a: AblationArgs, preset: Preset, scales: Option<Vec<f64>>, dir: &str, command: &str) -> Result<()> {
    let cfg = resolve(&a.common, |c| {
        a.guidance.apply(&mut c.guidance);
        if let Some(s) = &a.seeds {
            c.eval.seeds = s.clone();
        }
        if let Some(s) = a.train_steps {
            c.train.steps = s;
        }
        if let Some(n) = a.eval_easy {
            c.eval.eval_easy = n;
        }
        if let Some(n) = a.eval_hard {
            c.eval.eval_hard = n;
        }
        if let Some(s) = &scales {
            c.eval.sweep = s.clone();
        }
    })?;
    let (world, ds) = match load_dataset(&cfg) {
        Ok(x) => x,
        Err(Error::Io { .. }) => build_dataset(&cfg)?,
        Err(e) => return Err(e),
    };
    let variants = match preset {
        Preset::Table3 => Variant::table3(&cfg.guidance),
        Preset::Table3Swap => {
            let mut v = Variant::table3(&cfg.guidance);
            v.push(Variant::inference_swap(&cfg.guidance));
            v
        }
        Preset::Sweep => Variant::sweep(&cfg.guidance, &cfg.eval.sweep),
    };
    let settings = AblationSettings {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        eval_easy: cfg.eval.eval_easy,
        eval_hard: cfg.eval.eval_hard,
    };
    let start = Instant::now();
    let cache = ModelCache::new();
    let table = run_ablation(&world, &ds, &variants, &cfg.eval.seeds, &settings, &cache, cfg.exec)?;
    let out_dir = cfg.output_dir.join(dir);
    let fp = cfg.fingerprint();
    write_file(
        &out_dir.join("records.tsv"),
        &format!("# fingerprint {fp}\n{}", table.records()),
    )?;
    let summary = ablation_summary(&table, preset, &cfg);
    write_file(&out_dir.join("summary.txt"), &format!("# fingerprint {fp}\n{summary}"))?;
    write_file(
        &out_dir.join("samples.json"),
        &serde_json::to_string(&table).map_err(|e| Error::InvalidArgument(e.to_string()))?,
    )?;
    let mut schemes: Vec<PositionScheme> = variants.iter().map(|v| v.train_scheme).collect();
    schemes.dedup();
    for scheme in schemes {
        for &seed in &cfg.eval.seeds {
            let trained = cache.get_or_train(scheme, seed, &settings, &ds, cfg.exec)?;
            let name = format!("losses-{}-{seed}.tsv", scheme_label(scheme));
            write_file(&out_dir.join(name), &loss_text(&fp, &trained.losses))?;
        }
    }
    write_resolved(&cfg, command)?;
    print!("{summary}");
    eprintln!(
        "ablation finished in {:.1}s → {}",
        start.elapsed().as_secs_f64(),
        out_dir.display()
    );
    Ok(())
}

fn scheme_label(s: PositionScheme) -> &'static str {
    match s {
        PositionScheme::Negative => "negative",
        PositionScheme::Standard => "standard",
    }
}

/// Human-readable table plus the paired comparisons for the preset.
fn ablation_summary(table: &AblationTable, preset: Preset, cfg: &RunConfig) -> String {
    let mut s = table.summary();
    let mut cmp = |label: &str, a: &str, b: &str, split: Option<SplitTag>, m: Metric| {
        let t = table.compare(a, b, split, m);
        let _ = writeln!(
            s,
            "{label}: {a} > {b} in {}/{} paired samples, sign-test p = {:.3e}",
            t.positive,
            t.positive + t.negative,
            t.p_value
        );
    };
    match preset {
        Preset::Table3 | Preset::Table3Swap => {
            cmp(
                "identity_similarity (all)",
                "full",
                "no-identity-guidance",
                None,
                Metric::IdentitySimilarity,
            );
            cmp(
                "leakage (hard)",
                "standard-positions",
                "full",
                Some(SplitTag::Hard),
                Metric::Leakage,
            );
            cmp(
                "content_leakage (hard)",
                "standard-positions",
                "full",
                Some(SplitTag::Hard),
                Metric::ContentLeakage,
            );
        }
        Preset::Sweep => {
            let names: Vec<String> = cfg.eval.sweep.iter().map(|x| format!("s_id={x}")).collect();
            let upto: Vec<&str> = names
                .iter()
                .zip(&cfg.eval.sweep)
                .filter(|(_, &x)| x <= GuidanceConfig::default().s_id)
                .map(|(n, _)| n.as_str())
                .collect();
            let mono = table.non_decreasing(&upto, None, Metric::IdentitySimilarity);
            let _ = writeln!(
                s,
                "identity_similarity non-decreasing over {:?} in {}/{} seeds",
                upto,
                mono.values().filter(|&&b| b).count(),
                mono.len()
            );
        }
    }
    s
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<()> {
    let cfg = resolve(&a.common, |_| {})?;
    let start = Instant::now();
    let mut r = rng::stream(cfg.seed, "grad-check");
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    let mut report = String::from("function\tmax_rel_error\tcoordinates\n");
    for id in REGISTERED {
        let x = Tensor::randn(&[4, 6], 1.0, &mut r);
        let rep = grad_check(id, &x, a.eps)?;
        let _ = writeln!(report, "{id}\t{:.3e}\t{}", rep.max_rel_error, rep.coordinates);
        worst = worst.max(rep.max_rel_error);
        if rep.max_rel_error >= a.tolerance {
            failed.push(id.to_string());
        }
    }
    let world = World::new(cfg.world.clone(), cfg.world_seed())?;
    let ds = world.gen_split(4, 2, 0.5, cfg.dataset_seed(), cfg.exec)?;
    let mut model = Model::init(cfg.model.clone(), &mut rng::stream(cfg.train.seed, "model-init"))?;
    jitter_trainable(&mut model, 0.05, &mut rng::stream(cfg.train.seed, "grad-check-jitter"));
    let loss_cfg = LossConfig::for_model(&model.config, cfg.train.dropout, cfg.train.reference_noise);
    let reps = loss_grad_check(&model, &ds.train[..2], &loss_cfg, cfg.train.seed, a.eps, a.coords)?;
    for rep in &reps {
        let _ = writeln!(
            report,
            "loss/{}\t{:.3e}\t{}",
            rep.function, rep.max_rel_error, rep.coordinates
        );
        worst = worst.max(rep.max_rel_error);
        if rep.max_rel_error >= a.tolerance {
            failed.push(format!("loss/{}", rep.function));
        }
    }
    let fp = cfg.fingerprint();
    write_file(
        &cfg.output_dir.join("grad-check.tsv"),
        &format!("# fingerprint {fp}\n{report}"),
    )?;
    write_resolved(&cfg, "grad-check")?;
    println!(
        "{} op checks + {} training-loss tensors, worst relative error {:.3e}, {:.1}s",
        REGISTERED.len(),
        reps.len(),
        worst,
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "above tolerance {} for {}",
            a.tolerance,
            failed.join(", ")
        )))
    }
}
