//! Conditioning dropout, the ε-prediction loss and the adapter training loop.
//!
//! Noise is applied to target tokens only; the reference enters clean (plus an
//! optional small Gaussian perturbation) and carries no loss. Every random draw
//! for batch element `i` of step `s` comes from its own seeded stream, so a
//! parallel run reduces to exactly the same numbers as a sequential one.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{add_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{
    assemble_input_with, Conditioning, Denoiser, ForwardOptions, JointInput, LatentSequence, Model, ModelConfig,
    TextCode,
};
use crate::numerics::{AdamW, AdamWConfig, Scalar, Tape, Tensor, Var};
use crate::par::{self, ExecMode};
use crate::positional::PositionScheme;
use crate::rng;
use crate::synthworld::PairSample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutConfig {
    pub p_drop_text: f64,
    pub p_drop_reference: f64,
    /// Probability of *keeping* the first frame.
    pub p_first_frame: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            p_drop_text: 0.1,
            p_drop_reference: 0.1,
            p_first_frame: 0.9,
        }
    }
}

impl DropoutConfig {
    /// Keeps every conditioning signal.
    pub fn none() -> Self {
        Self {
            p_drop_text: 0.0,
            p_drop_reference: 0.0,
            p_first_frame: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_drop_text", self.p_drop_text),
            ("p_drop_reference", self.p_drop_reference),
            ("p_first_frame", self.p_first_frame),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Drops the text code, the reference and the first frame independently.
/// Exactly three uniforms are consumed regardless of the outcome.
pub fn cond_dropout<R: Rng + ?Sized>(
    cond: Conditioning,
    reference: LatentSequence,
    cfg: &DropoutConfig,
    rng: &mut R,
) -> Result<(Conditioning, LatentSequence)> {
    cfg.validate()?;
    let drop_text = rng.random::<f64>() < cfg.p_drop_text;
    let drop_ref = rng.random::<f64>() < cfg.p_drop_reference;
    let keep_ff = rng.random::<f64>() < cfg.p_first_frame;
    let mut cond = cond;
    let mut reference = reference;
    if drop_text {
        cond.text = None;
    }
    if drop_ref {
        reference = LatentSequence::empty_reference(reference.tokens.cols());
        cond.reference_present = false;
    }
    if !keep_ff {
        cond.first_frame = None;
    }
    Ok((cond, reference))
}

/// Everything the loss needs besides the network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub schedule: NoiseSchedule,
    pub dropout: DropoutConfig,
    /// Std of Gaussian noise added to reference latents (0 = clean).
    pub reference_noise: f32,
    pub position_scheme: PositionScheme,
    pub ref_gap: usize,
    pub video_grid: [usize; 3],
}

impl LossConfig {
    pub fn for_model(cfg: &ModelConfig, dropout: DropoutConfig, reference_noise: f32) -> Self {
        Self {
            schedule: cfg.schedule,
            dropout,
            reference_noise,
            position_scheme: cfg.position_scheme,
            ref_gap: cfg.ref_gap,
            video_grid: cfg.video_grid,
        }
    }
}

/// One noised training example and the ε it must recover.
#[derive(Clone, Debug)]
pub struct NoisedSample {
    pub joint: JointInput,
    pub cond: Conditioning,
    pub eps_video: Tensor,
    pub eps_audio: Tensor,
}

/// Draws `t`, the noise and the dropout pattern for one pair.
pub fn prepare_sample<R: Rng + ?Sized>(pair: &PairSample, cfg: &LossConfig, rng: &mut R) -> Result<NoisedSample> {
    let t: f64 = rng.random();
    let eps_video = Tensor::randn(pair.target_video.shape(), 1.0, rng);
    let eps_audio = Tensor::randn(pair.target_audio.shape(), 1.0, rng);
    let zv = add_noise(&pair.target_video, &eps_video, t, &cfg.schedule)?;
    let za = add_noise(&pair.target_audio, &eps_audio, t, &cfg.schedule)?;
    let cond = Conditioning {
        text: Some(TextCode {
            env: pair.env_code,
            style: pair.style_code,
            scene: pair.scene_code,
        }),
        timestep: t as f32,
        first_frame: Some(pair.first_frame.clone()),
        reference_present: pair.reference.rows() > 0,
    };
    let (cond, reference) = cond_dropout(
        cond,
        LatentSequence::audio_reference(pair.reference.clone())?,
        &cfg.dropout,
        rng,
    )?;
    let mut reference = reference;
    if cfg.reference_noise > 0.0 && !reference.is_empty() {
        let s = cfg.reference_noise;
        for v in reference.tokens.data_mut() {
            *v += s * rng.sample::<f32, _>(StandardNormal);
        }
    }
    let joint = assemble_input_with(
        &LatentSequence::video_target(zv)?,
        &reference,
        &LatentSequence::audio_target(za)?,
        cfg.video_grid,
        cfg.position_scheme,
        cfg.ref_gap,
    )?;
    Ok(NoisedSample {
        joint,
        cond,
        eps_video,
        eps_audio,
    })
}

pub(crate) fn sample_rng(seed: u64, i: usize) -> rand_chacha::ChaCha8Rng {
    rng::indexed(seed, "loss-sample", i as u64)
}

fn sq_err(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.same_shape(target, "training_loss")?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &e)| {
            let d = p as f64 - e as f64;
            d * d
        })
        .sum())
}

/// Mean squared ε error over target video and audio tokens, averaged over the
/// batch. Element `i` draws from `rng::indexed(seed, "loss-sample", i)`.
pub fn training_loss<D: Denoiser + ?Sized>(
    batch: &[PairSample],
    model: &D,
    cfg: &LossConfig,
    seed: u64,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (i, pair) in batch.iter().enumerate() {
        let s = prepare_sample(pair, cfg, &mut sample_rng(seed, i))?;
        let pred = model.denoise(&s.joint, &s.cond, &ForwardOptions::default())?;
        let n = s.eps_video.len() + s.eps_audio.len();
        total += (sq_err(&pred.video, &s.eps_video)? + sq_err(&pred.audio, &s.eps_audio)?) / n as f64;
    }
    let loss = (total / batch.len() as f64) as f32;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training_loss".into()));
    }
    Ok(loss)
}

/// Builds the per-sample loss on `tape` from already-bound parameters.
pub fn sample_loss_tape<F: Scalar>(
    model: &Model,
    tape: &mut Tape<F>,
    bound: &crate::model::Bound,
    sample: &NoisedSample,
) -> Result<Var> {
    let (ev, ea) = model.forward_tape(tape, bound, &sample.joint, &sample.cond, &ForwardOptions::default())?;
    let pred = tape.concat_rows(&[ev, ea])?;
    let target = tape.constant(Tensor::concat_rows(&[&sample.eps_video, &sample.eps_audio])?.cast());
    tape.mse(pred, target)
}

/// Loss and gradients of every trainable tensor for one batch. Per-sample
/// gradients are computed independently and summed in batch order.
pub fn loss_and_grads(
    model: &Model,
    batch: &[PairSample],
    cfg: &LossConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<(f32, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let names = model.trainable_names();
    let per_sample = par::map_range(mode, batch.len(), |i| -> Result<(f32, Vec<Option<Tensor>>)> {
        let s = prepare_sample(&batch[i], cfg, &mut sample_rng(seed, i))?;
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, true, &HashMap::new());
        let loss = sample_loss_tape(model, &mut tape, &bound, &s)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let g = names
            .iter()
            .map(|n| bound.var(n).map(|v| grads.take(v)))
            .collect::<Result<Vec<_>>>()?;
        Ok((value, g))
    });
    let inv = 1.0 / batch.len() as f32;
    let mut loss = 0.0f32;
    let mut acc: Vec<Option<Tensor>> = vec![None; names.len()];
    for r in per_sample {
        let (l, grads) = r?;
        loss += l;
        for (slot, g) in acc.iter_mut().zip(grads) {
            if let Some(g) = g {
                *slot = Some(match slot.take() {
                    None => g,
                    Some(a) => a.add(&g)?,
                });
            }
        }
    }
    let loss = loss * inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    let mut out = BTreeMap::new();
    for (name, g) in names.into_iter().zip(acc) {
        let shape = model.param(&name).expect("trainable resolves").shape().to_vec();
        let g = g.map(|g| g.scale(inv)).unwrap_or_else(|| Tensor::zeros(&shape));
        out.insert(name, g);
    }
    Ok((loss, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub dropout: DropoutConfig,
    pub reference_noise: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            dropout: DropoutConfig::default(),
            reference_noise: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.reference_noise >= 0.0 && self.reference_noise.is_finite()) {
            return Err(Error::Config(
                "reference_noise must be a finite non-negative std".into(),
            ));
        }
        self.optimizer.validate()?;
        self.dropout.validate()
    }
}

/// One point of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f32,
}

/// Resumable training state: optimizer moments and the global step.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: AdamW::new(config.optimizer)?,
            config,
            step: 0,
        })
    }

    /// Runs `steps` further steps, reporting each record to `on_step`.
    pub fn run(
        &mut self,
        dataset: &[PairSample],
        model: &mut Model,
        steps: usize,
        mode: ExecMode,
        mut on_step: impl FnMut(LossRecord),
    ) -> Result<Vec<LossRecord>> {
        if dataset.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let cfg = LossConfig::for_model(&model.config, self.config.dropout, self.config.reference_noise);
        let before = model.base_hash();
        let bs = self.config.batch_size.min(dataset.len());
        let mut curve = Vec::with_capacity(steps);
        for _ in 0..steps {
            let step = self.step;
            let picks = index::sample(
                &mut rng::indexed(self.config.seed, "batch", step as u64),
                dataset.len(),
                bs,
            );
            let batch: Vec<PairSample> = picks.iter().map(|i| dataset[i].clone()).collect();
            let loss_seed = rng::derive_index(rng::derive_seed(self.config.seed, "loss"), step as u64);
            let (loss, grads) = match loss_and_grads(model, &batch, &cfg, loss_seed, mode) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f32::NAN }),
                Err(e) => return Err(e),
            };
            for (name, g) in &grads {
                let p = model.param_mut(name).expect("trainable resolves");
                self.optimizer.step(name, p, g).map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { step, loss },
                    e => e,
                })?;
            }
            let rec = LossRecord { step, loss };
            on_step(rec);
            curve.push(rec);
            self.step += 1;
        }
        if model.base_hash() != before {
            return Err(Error::InvalidArgument("frozen backbone changed during training".into()));
        }
        Ok(curve)
    }
}

/// Trains `model` in place for `cfg.steps` steps and returns the loss curve.
pub fn train(dataset: &[PairSample], model: &mut Model, cfg: &TrainConfig, mode: ExecMode) -> Result<Vec<LossRecord>> {
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.run(dataset, model, cfg.steps, mode, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Prediction;
    use crate::synthworld::{World, WorldConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Recovers ε exactly from `z_t` and the known clean targets, plus `c`.
    struct Oracle {
        pair: PairSample,
        schedule: NoiseSchedule,
        c: f32,
        config: ModelConfig,
    }

    impl Denoiser for Oracle {
        fn config(&self) -> &ModelConfig {
            &self.config
        }

        fn denoise(&self, joint: &JointInput, cond: &Conditioning, _: &ForwardOptions) -> Result<Prediction> {
            let (a, b) = self.schedule.coefficients(cond.timestep as f64);
            let inv =
                |z: &Tensor, x: &Tensor| z.zip_map(x, "oracle", |z, x| ((z as f64 - a * x as f64) / b) as f32 + self.c);
            Ok(Prediction {
                video: inv(&joint.video, &self.pair.target_video)?,
                audio: inv(&joint.audio_target, &self.pair.target_audio)?,
            })
        }
    }

    fn pairs(n: usize) -> (World, Vec<PairSample>) {
        let w = World::new(WorldConfig::default(), 1).unwrap();
        let ds = w.gen_split(10, 2, 0.5, 3, ExecMode::Sequential).unwrap();
        (w, ds.train.into_iter().take(n).collect())
    }

    fn loss_cfg(dropout: DropoutConfig) -> LossConfig {
        LossConfig::for_model(&ModelConfig::default(), dropout, 0.0)
    }

    #[test]
    fn exact_and_offset_predictions() {
        let (_, batch) = pairs(1);
        let cfg = loss_cfg(DropoutConfig::default());
        let mut checked = 0;
        for (c, want) in [(0.0f32, 0.0f64), (0.5, 0.25)] {
            let oracle = Oracle {
                pair: batch[0].clone(),
                schedule: cfg.schedule,
                c,
                config: ModelConfig::default(),
            };
            for seed in 0..10 {
                // Inverting z_t is ill-conditioned as t → 0; only check where
                // the noise coefficient is not tiny.
                let s = prepare_sample(&batch[0], &cfg, &mut sample_rng(seed, 0)).unwrap();
                if cfg.schedule.coefficients(s.cond.timestep as f64).1 < 0.2 {
                    continue;
                }
                let l = training_loss(&batch, &oracle, &cfg, seed).unwrap() as f64;
                assert!((l - want).abs() < 1e-3, "c={c} loss={l}");
                checked += 1;
            }
        }
        assert!(checked >= 6, "{checked}");
    }

    #[test]
    fn dropped_reference_makes_loss_reference_independent() {
        let (_, batch) = pairs(2);
        let mut model = Model::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for a in model.adapters.adapters.values_mut() {
            a.up = Tensor::randn(a.up.shape(), 0.05, &mut ChaCha8Rng::seed_from_u64(1));
        }
        let cfg = loss_cfg(DropoutConfig {
            p_drop_reference: 1.0,
            ..DropoutConfig::default()
        });
        let mut other = batch.clone();
        for p in &mut other {
            p.reference = Tensor::randn(p.reference.shape(), 3.0, &mut ChaCha8Rng::seed_from_u64(9));
        }
        let a = training_loss(&batch, &model, &cfg, 4).unwrap();
        let b = training_loss(&other, &model, &cfg, 4).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());

        let keep = loss_cfg(DropoutConfig::none());
        assert_ne!(
            training_loss(&batch, &model, &keep, 4).unwrap(),
            training_loss(&other, &model, &keep, 4).unwrap()
        );
        assert!(matches!(training_loss(&[], &model, &cfg, 0), Err(Error::EmptyBatch)));
    }

    fn cond_and_ref() -> (Conditioning, LatentSequence) {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        (
            Conditioning {
                text: Some(TextCode {
                    env: 1,
                    style: 2,
                    scene: 3,
                }),
                timestep: 0.5,
                first_frame: Some(Tensor::randn(&[16, 64], 1.0, &mut r)),
                reference_present: true,
            },
            LatentSequence::audio_reference(Tensor::randn(&[8, 64], 1.0, &mut r)).unwrap(),
        )
    }

    #[test]
    fn dropout_extremes() {
        let (c, r) = cond_and_ref();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c2, r2) = cond_dropout(c.clone(), r.clone(), &DropoutConfig::none(), &mut rng).unwrap();
        assert_eq!((c2, r2), (c.clone(), r.clone()));
        let all = DropoutConfig {
            p_drop_reference: 1.0,
            ..DropoutConfig::none()
        };
        for _ in 0..1000 {
            let (c2, r2) = cond_dropout(c.clone(), r.clone(), &all, &mut rng).unwrap();
            assert!(r2.is_empty() && !c2.reference_present);
        }
        let bad = DropoutConfig {
            p_drop_text: 1.5,
            ..DropoutConfig::none()
        };
        assert!(cond_dropout(c, r, &bad, &mut rng).is_err());
    }

    #[test]
    fn text_dropout_rate_is_binomial() {
        let (c, r) = cond_and_ref();
        let cfg = DropoutConfig {
            p_drop_text: 0.5,
            ..DropoutConfig::none()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let drops = (0..10_000)
            .filter(|_| {
                cond_dropout(c.clone(), r.clone(), &cfg, &mut rng)
                    .unwrap()
                    .0
                    .text
                    .is_none()
            })
            .count();
        // σ = √(10000·0.25) = 50.
        assert!((drops as f64 - 5000.0).abs() <= 150.0, "{drops}");
    }

    fn small_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            blocks: 1,
            ..ModelConfig::default()
        };
        Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let (_, data) = pairs(8);
        let mut m = small_model(2);
        let before = m.clone();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(train(&data, &mut m, &cfg, ExecMode::Sequential).unwrap().is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn training_is_deterministic_and_freezes_base() {
        let (_, data) = pairs(8);
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut a = small_model(3);
        let base = a.base.clone();
        let hash = a.base_hash();
        let ca = train(&data, &mut a, &cfg, ExecMode::Parallel).unwrap();
        let mut b = small_model(3);
        let cb = train(&data, &mut b, &cfg, ExecMode::Sequential).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
        assert_eq!(a.base, base);
        assert_eq!(a.base_hash(), hash);
        assert_ne!(a.cond, small_model(3).cond);
        assert!(ca.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
    }

    #[test]
    fn resuming_matches_one_run() {
        let (_, data) = pairs(8);
        let cfg = TrainConfig {
            steps: 4,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut a = small_model(4);
        train(&data, &mut a, &cfg, ExecMode::Sequential).unwrap();
        let mut b = small_model(4);
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.run(&data, &mut b, 2, ExecMode::Sequential, |_| {}).unwrap();
        t.run(&data, &mut b, 2, ExecMode::Sequential, |_| {}).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let (_, data) = pairs(4);
        let mut m = small_model(5);
        m.cond.get_mut("cond.time.b2").unwrap().data_mut()[0] = f32::NAN;
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&data, &mut m, &cfg, ExecMode::Sequential),
            Err(Error::Diverged { step: 0, .. })
        ));
    }
}
