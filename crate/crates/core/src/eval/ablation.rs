//! Ablation runner: trains one model per (position scheme, seed), samples the
//! held-out pairs under each variant's guidance and aggregates the metrics.
//!
//! Every variant sees the same pairs with the same initial noise for a given
//! seed, so per-pair differences between variants are paired observations.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::metrics::{content_leakage, env_adherence, identity_similarity, leakage_score, sign_test, SignTest};
use crate::config::fingerprint;
use crate::diffusion::{LossRecord, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::guidance::{sample, GuidanceConfig, SampleInput};
use crate::model::{LatentSequence, Model, ModelConfig, TextCode};
use crate::par::{self, ExecMode};
use crate::positional::PositionScheme;
use crate::rng;
use crate::synthworld::{Dataset, PairSample, SplitTag, World};

/// One row of an ablation: how the model is trained and how it is sampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub train_scheme: PositionScheme,
    /// Samples a model trained with `train_scheme` under a different scheme
    /// (diagnostic only).
    pub inference_scheme: Option<PositionScheme>,
    pub guidance: GuidanceConfig,
}

impl Variant {
    pub fn new(name: &str, train_scheme: PositionScheme, guidance: GuidanceConfig) -> Self {
        Self {
            name: name.into(),
            train_scheme,
            inference_scheme: None,
            guidance,
        }
    }

    /// Full model, no identity guidance, standard positions.
    pub fn table3(base: &GuidanceConfig) -> Vec<Self> {
        vec![
            Self::new("full", PositionScheme::Negative, base.clone()),
            Self::new(
                "no-identity-guidance",
                PositionScheme::Negative,
                GuidanceConfig {
                    s_id: 0.0,
                    ..base.clone()
                },
            ),
            Self::new("standard-positions", PositionScheme::Standard, base.clone()),
        ]
    }

    /// Identity-guidance scales on the full model, named `s_id=<value>`.
    pub fn sweep(base: &GuidanceConfig, scales: &[f64]) -> Vec<Self> {
        scales
            .iter()
            .map(|&s| {
                Self::new(
                    &format!("s_id={s}"),
                    PositionScheme::Negative,
                    GuidanceConfig {
                        s_id: s,
                        ..base.clone()
                    },
                )
            })
            .collect()
    }

    /// The full model's checkpoint sampled with standard positions.
    pub fn inference_swap(base: &GuidanceConfig) -> Self {
        Self {
            inference_scheme: Some(PositionScheme::Standard),
            ..Self::new(
                "negative-trained-standard-sampled",
                PositionScheme::Negative,
                base.clone(),
            )
        }
    }
}

/// Everything besides the variant that determines an ablation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Leading same-source test pairs to score.
    pub eval_easy: usize,
    /// Leading cross-source test pairs to score.
    pub eval_hard: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    IdentitySimilarity,
    EnvAdherence,
    Leakage,
    ContentLeakage,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::IdentitySimilarity,
        Metric::EnvAdherence,
        Metric::Leakage,
        Metric::ContentLeakage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::IdentitySimilarity => "identity_similarity",
            Metric::EnvAdherence => "env_adherence",
            Metric::Leakage => "leakage",
            Metric::ContentLeakage => "content_leakage",
        }
    }
}

fn split_name(split: Option<SplitTag>) -> &'static str {
    match split {
        Some(SplitTag::Easy) => "easy",
        Some(SplitTag::Hard) => "hard",
        None => "all",
    }
}

/// Metrics of one generated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub variant: String,
    pub seed: u64,
    /// Position in the evaluated pair list (easy pairs first).
    pub pair: usize,
    pub split: SplitTag,
    pub identity_similarity: f64,
    pub env_adherence: f64,
    pub leakage: f64,
    pub content_leakage: f64,
}

impl SampleRecord {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::IdentitySimilarity => self.identity_similarity,
            Metric::EnvAdherence => self.env_adherence,
            Metric::Leakage => self.leakage,
            Metric::ContentLeakage => self.content_leakage,
        }
    }
}

/// Per-(variant, seed, split) means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub seed: u64,
    pub split: SplitTag,
    pub n: usize,
    pub identity_similarity: f64,
    pub env_adherence: f64,
    pub leakage: f64,
    pub content_leakage: f64,
    /// Fingerprint of (variant, settings, seed).
    pub fingerprint: String,
}

/// Trained models keyed by (training scheme, seed), shared across variants
/// and ablation calls.
#[derive(Default)]
pub struct ModelCache {
    models: Mutex<HashMap<(PositionScheme, u64), Arc<TrainedModel>>>,
}

pub struct TrainedModel {
    pub model: Model,
    pub losses: Vec<LossRecord>,
}

impl ModelCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an externally trained model.
    pub fn insert(&self, scheme: PositionScheme, seed: u64, trained: TrainedModel) {
        self.models
            .lock()
            .expect("cache lock")
            .insert((scheme, seed), Arc::new(trained));
    }

    /// Returns the cached model or trains it: init from `stream(seed,
    /// "model-init")`, training seed `seed`.
    pub fn get_or_train(
        &self,
        scheme: PositionScheme,
        seed: u64,
        settings: &AblationSettings,
        dataset: &Dataset,
        mode: ExecMode,
    ) -> Result<Arc<TrainedModel>> {
        if let Some(m) = self.models.lock().expect("cache lock").get(&(scheme, seed)) {
            return Ok(m.clone());
        }
        let trained = Arc::new(train_model(scheme, seed, settings, dataset, mode)?);
        self.models
            .lock()
            .expect("cache lock")
            .insert((scheme, seed), trained.clone());
        Ok(trained)
    }
}

pub fn train_model(
    scheme: PositionScheme,
    seed: u64,
    settings: &AblationSettings,
    dataset: &Dataset,
    mode: ExecMode,
) -> Result<TrainedModel> {
    let cfg = ModelConfig {
        position_scheme: scheme,
        ..settings.model.clone()
    };
    let mut model = Model::init(cfg, &mut rng::stream(seed, "model-init"))?;
    let tc = TrainConfig {
        seed,
        ..settings.train.clone()
    };
    let mut trainer = Trainer::new(tc.clone())?;
    let losses = trainer.run(&dataset.train, &mut model, tc.steps, mode, |_| {})?;
    Ok(TrainedModel { model, losses })
}

/// The evaluated pairs: the first `eval_easy` same-source then the first
/// `eval_hard` cross-source test pairs.
pub fn eval_pairs<'a>(dataset: &'a Dataset, settings: &AblationSettings) -> Vec<&'a PairSample> {
    let mut pairs: Vec<_> = dataset
        .test_split(SplitTag::Easy)
        .into_iter()
        .take(settings.eval_easy)
        .collect();
    pairs.extend(dataset.test_split(SplitTag::Hard).into_iter().take(settings.eval_hard));
    pairs
}

/// Sampling seed of evaluated pair `pair` under run seed `seed`; shared by
/// all variants.
pub fn eval_noise_seed(seed: u64, pair: usize) -> u64 {
    rng::derive_index(rng::derive_seed(seed, "eval-noise"), pair as u64)
}

pub fn sample_input(pair: &PairSample) -> Result<SampleInput> {
    Ok(SampleInput {
        reference: LatentSequence::audio_reference(pair.reference.clone())?,
        first_frame: Some(pair.first_frame.clone()),
        text: Some(TextCode {
            env: pair.env_code,
            style: pair.style_code,
            scene: pair.scene_code,
        }),
    })
}

/// Generates and scores every evaluated pair for one (variant, seed).
pub fn evaluate_variant(
    world: &World,
    model: &Model,
    variant: &Variant,
    seed: u64,
    pairs: &[&PairSample],
    mode: ExecMode,
) -> Result<Vec<SampleRecord>> {
    let swapped;
    let model = match variant.inference_scheme {
        Some(s) if s != model.config.position_scheme => {
            let mut m = model.clone();
            m.config.position_scheme = s;
            swapped = m;
            &swapped
        }
        _ => model,
    };
    par::map_range(mode, pairs.len(), |i| {
        let p = pairs[i];
        let g = GuidanceConfig {
            seed: eval_noise_seed(seed, i),
            ..variant.guidance.clone()
        };
        let out = sample(model, &sample_input(p)?, &g, ExecMode::Sequential)?;
        Ok(SampleRecord {
            variant: variant.name.clone(),
            seed,
            pair: i,
            split: p.tag(),
            identity_similarity: identity_similarity(world, &out.audio, &p.target_identity)?,
            env_adherence: env_adherence(world, &out.audio, p.env_code)?,
            leakage: leakage_score(&out.audio, &p.reference_nuisance),
            content_leakage: content_leakage(world, &out.audio, &p.reference),
        })
    })
    .into_iter()
    .collect()
}

/// Runs every (variant, seed) and aggregates.
pub fn run_ablation(
    world: &World,
    dataset: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    settings: &AblationSettings,
    cache: &ModelCache,
    mode: ExecMode,
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    let pairs = eval_pairs(dataset, settings);
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no held-out pairs to evaluate".into()));
    }
    let mut table = AblationTable::default();
    for &seed in seeds {
        for v in variants {
            let trained = cache.get_or_train(v.train_scheme, seed, settings, dataset, mode)?;
            let records = evaluate_variant(world, &trained.model, v, seed, &pairs, mode)?;
            let fp = fingerprint(&(v, settings, seed));
            table.add(records, &fp);
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub reports: Vec<MetricReport>,
    pub samples: Vec<SampleRecord>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Sample standard deviation; 0 for fewer than two values.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

impl AblationTable {
    fn add(&mut self, records: Vec<SampleRecord>, fp: &str) {
        for split in [SplitTag::Easy, SplitTag::Hard] {
            let rs: Vec<_> = records.iter().filter(|r| r.split == split).collect();
            if rs.is_empty() {
                continue;
            }
            let m = |k: Metric| mean(&rs.iter().map(|r| r.get(k)).collect::<Vec<_>>());
            self.reports.push(MetricReport {
                variant: rs[0].variant.clone(),
                seed: rs[0].seed,
                split,
                n: rs.len(),
                identity_similarity: m(Metric::IdentitySimilarity),
                env_adherence: m(Metric::EnvAdherence),
                leakage: m(Metric::Leakage),
                content_leakage: m(Metric::ContentLeakage),
                fingerprint: fp.to_string(),
            });
        }
        self.samples.extend(records);
    }

    pub fn variants(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.reports {
            if !out.contains(&r.variant) {
                out.push(r.variant.clone());
            }
        }
        out
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.reports.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    fn select<'a>(&'a self, variant: &'a str, split: Option<SplitTag>) -> impl Iterator<Item = &'a SampleRecord> + 'a {
        self.samples
            .iter()
            .filter(move |r| r.variant == variant && split.is_none_or(|s| r.split == s))
    }

    /// Per-seed sample means of `metric` for one variant and split.
    pub fn seed_means(&self, variant: &str, split: Option<SplitTag>, metric: Metric) -> BTreeMap<u64, f64> {
        let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in self.select(variant, split) {
            by_seed.entry(r.seed).or_default().push(r.get(metric));
        }
        by_seed.into_iter().map(|(s, v)| (s, mean(&v))).collect()
    }

    /// Mean over seeds of the per-seed means, and their standard deviation.
    pub fn mean_std(&self, variant: &str, split: Option<SplitTag>, metric: Metric) -> (f64, f64) {
        let v: Vec<f64> = self.seed_means(variant, split, metric).into_values().collect();
        (mean(&v), std_dev(&v))
    }

    /// Paired sign test of `a > b` over matching (seed, pair) samples.
    pub fn compare(&self, a: &str, b: &str, split: Option<SplitTag>, metric: Metric) -> SignTest {
        let base: HashMap<(u64, usize), f64> = self
            .select(b, split)
            .map(|r| ((r.seed, r.pair), r.get(metric)))
            .collect();
        let diffs: Vec<f64> = self
            .select(a, split)
            .filter_map(|r| base.get(&(r.seed, r.pair)).map(|&y| r.get(metric) - y))
            .collect();
        sign_test(&diffs)
    }

    /// Per seed: whether `metric` is non-decreasing along `variants`.
    pub fn non_decreasing(&self, variants: &[&str], split: Option<SplitTag>, metric: Metric) -> BTreeMap<u64, bool> {
        let curves: Vec<_> = variants.iter().map(|v| self.seed_means(v, split, metric)).collect();
        self.seeds()
            .into_iter()
            .map(|s| {
                let ys: Vec<f64> = curves.iter().filter_map(|c| c.get(&s).copied()).collect();
                (s, ys.len() == variants.len() && ys.windows(2).all(|w| w[1] >= w[0]))
            })
            .collect()
    }

    /// Line records `variant seed split metric value fingerprint`, one per
    /// report and metric, tab-separated.
    pub fn records(&self) -> String {
        let mut out = String::from("variant\tseed\tsplit\tmetric\tvalue\tfingerprint\n");
        for r in &self.reports {
            for (m, v) in [
                (Metric::IdentitySimilarity, r.identity_similarity),
                (Metric::EnvAdherence, r.env_adherence),
                (Metric::Leakage, r.leakage),
                (Metric::ContentLeakage, r.content_leakage),
            ] {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{:.6}\t{}",
                    r.variant,
                    r.seed,
                    split_name(Some(r.split)),
                    m.name(),
                    v,
                    r.fingerprint
                );
            }
        }
        out
    }

    /// Mean ± std over seeds per variant and split.
    pub fn summary(&self) -> String {
        let seeds = self.seeds();
        let mut out = format!("mean ± std over {} seed(s) {:?}\n", seeds.len(), seeds);
        let _ = writeln!(
            out,
            "{:<36} {:<5} {:>16} {:>16} {:>16} {:>16}",
            "variant", "split", "identity_sim", "env_adherence", "leakage", "content_leak"
        );
        for v in self.variants() {
            for split in [Some(SplitTag::Easy), Some(SplitTag::Hard), None] {
                if self.select(&v, split).next().is_none() {
                    continue;
                }
                let _ = write!(out, "{:<36} {:<5}", v, split_name(split));
                for m in Metric::ALL {
                    let (mu, sd) = self.mean_std(&v, split, m);
                    let _ = write!(out, " {:>8.4} ± {:<5.3}", mu, sd);
                }
                out.push('\n');
            }
        }
        out
    }
}
