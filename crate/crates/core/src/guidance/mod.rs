//! Guided deterministic sampling.
//!
//! Five kinds of forward pass feed the composition: `(∅,∅)`, `(text,∅)`,
//! `(text,ref)`, `(text,ref)` with one video block's self-attention skipped,
//! and `(text,ref)` with cross-modal attention disabled. With `u`, `t`, `f`,
//! `p`, `x` for those predictions:
//!
//! ```text
//! audio = u + s_a·(t − u) + s_id·(f − pivot) + s_stg·(f − p) + s_av·(f − x)
//! video = u + s_v·(f − u)                    + s_stg·(f − p) + s_av·(f − x)
//! ```
//!
//! The identity pivot is `t` by default (or `u`). Both are evaluated as
//! coefficient sums over the passes; the coefficients always add up to one,
//! so shared offsets pass through unchanged. Integration is DDIM with η = 0 on
//! a uniform grid from `t = 1` to `t = 0`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Conditioning, Denoiser, ForwardOptions, JointInput, LatentSequence, Prediction, TextCode};
use crate::numerics::Tensor;
use crate::par::{self, ExecMode};
use crate::rng;

/// Which prediction the identity term is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityPivot {
    /// `ε(text, ∅)`.
    #[default]
    Text,
    /// `ε(∅, ∅)`.
    Unconditional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub s_video_cfg: f64,
    pub s_audio_cfg: f64,
    pub s_id: f64,
    pub s_av: f64,
    pub s_stg: f64,
    /// Video block skipped by the perturbed pass; `None` = last block.
    pub stg_block: Option<usize>,
    pub steps: usize,
    pub seed: u64,
    pub identity_pivot: IdentityPivot,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s_video_cfg: 3.0,
            s_audio_cfg: 7.0,
            s_id: 4.0,
            s_av: 3.0,
            s_stg: 1.0,
            stg_block: None,
            steps: 30,
            seed: 0,
            identity_pivot: IdentityPivot::Text,
        }
    }
}

impl GuidanceConfig {
    /// Every guidance term neutral: the fully-conditioned prediction alone.
    pub fn neutral() -> Self {
        Self {
            s_video_cfg: 1.0,
            s_audio_cfg: 1.0,
            s_id: 1.0,
            s_av: 0.0,
            s_stg: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("guidance needs at least one step".into()));
        }
        for (n, v) in [
            ("s_video_cfg", self.s_video_cfg),
            ("s_audio_cfg", self.s_audio_cfg),
            ("s_id", self.s_id),
            ("s_av", self.s_av),
            ("s_stg", self.s_stg),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{n} = {v} is not finite")));
            }
        }
        Ok(())
    }

    /// Per-pass weights `(video, audio)`; each column sums to one.
    pub fn coefficients(&self) -> Vec<(Pass, f64, f64)> {
        let (sv, sa, sid, sav, sstg) = (self.s_video_cfg, self.s_audio_cfg, self.s_id, self.s_av, self.s_stg);
        let (audio_u, audio_t) = match self.identity_pivot {
            IdentityPivot::Text => (1.0 - sa, sa - sid),
            IdentityPivot::Unconditional => (1.0 - sa - sid, sa),
        };
        vec![
            (Pass::Unconditional, 1.0 - sv, audio_u),
            (Pass::TextOnly, 0.0, audio_t),
            (Pass::Full, sv + sstg + sav, sid + sstg + sav),
            (Pass::Perturbed, -sstg, -sstg),
            (Pass::NoCross, -sav, -sav),
        ]
    }
}

/// One forward-pass configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    /// No text, no reference.
    Unconditional,
    /// Text, no reference.
    TextOnly,
    /// Text and reference.
    Full,
    /// Text and reference, one video block skipped.
    Perturbed,
    /// Text and reference, no cross-modal exchange.
    NoCross,
}

impl Pass {
    pub fn text(self) -> bool {
        self != Pass::Unconditional
    }

    pub fn reference(self) -> bool {
        !matches!(self, Pass::Unconditional | Pass::TextOnly)
    }

    pub fn perturbed(self) -> bool {
        self == Pass::Perturbed
    }

    pub fn cross_modal(self) -> bool {
        self != Pass::NoCross
    }
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Pass::Unconditional => "(∅,∅)",
            Pass::TextOnly => "(text,∅)",
            Pass::Full => "(text,ref)",
            Pass::Perturbed => "(text,ref,perturbed)",
            Pass::NoCross => "(text,ref,nocross)",
        };
        f.write_str(s)
    }
}

/// The passes with a nonzero weight in either modality; the fully
/// conditioned pass is always included.
pub fn required_passes(cfg: &GuidanceConfig) -> Vec<Pass> {
    cfg.coefficients()
        .into_iter()
        .filter(|&(p, v, a)| p == Pass::Full || v != 0.0 || a != 0.0)
        .map(|(p, _, _)| p)
        .collect()
}

/// Predictions keyed by pass.
pub type PassSet = BTreeMap<Pass, Prediction>;

fn combine(terms: &[(f64, &Tensor)]) -> Result<Tensor> {
    let first = terms
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to compose".into()))?
        .1;
    let mut acc = vec![0.0f64; first.len()];
    for &(w, t) in terms {
        first.same_shape(t, "compose_guidance")?;
        for (a, &v) in acc.iter_mut().zip(t.data()) {
            *a += w * v as f64;
        }
    }
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|v| v as f32).collect())
}

/// Guided `(ε̂_video, ε̂_audio)`.
pub fn compose_guidance(preds: &PassSet, cfg: &GuidanceConfig) -> Result<Prediction> {
    cfg.validate()?;
    let mut video = Vec::new();
    let mut audio = Vec::new();
    for (pass, wv, wa) in cfg.coefficients() {
        if wv == 0.0 && wa == 0.0 {
            continue;
        }
        let p = preds.get(&pass).ok_or_else(|| Error::MissingPass(pass.to_string()))?;
        if wv != 0.0 {
            video.push((wv, &p.video));
        }
        if wa != 0.0 {
            audio.push((wa, &p.audio));
        }
    }
    // Each column sums to one, so neither list is empty.
    Ok(Prediction {
        video: combine(&video)?,
        audio: combine(&audio)?,
    })
}

/// What to generate for.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInput {
    /// The identity reference; an empty sequence samples without one.
    pub reference: LatentSequence,
    pub first_frame: Option<Tensor>,
    pub text: Option<TextCode>,
}

/// Final clean-latent estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub video: Tensor,
    pub audio: Tensor,
}

fn run_pass<D: Denoiser + ?Sized>(
    model: &D,
    pass: Pass,
    with_ref: &JointInput,
    without_ref: &JointInput,
    input: &SampleInput,
    t: f64,
    stg_block: usize,
) -> Result<Prediction> {
    let has_ref = pass.reference() && !input.reference.is_empty();
    let cond = Conditioning {
        text: if pass.text() { input.text } else { None },
        timestep: t as f32,
        first_frame: input.first_frame.clone(),
        reference_present: has_ref,
    };
    let opts = ForwardOptions {
        skip_block: pass.perturbed().then_some(stg_block),
        cross_modal: pass.cross_modal(),
    };
    model.denoise(if has_ref { with_ref } else { without_ref }, &cond, &opts)
}

/// One deterministic DDIM update `z_t → z_s` from a composed ε̂:
/// `x̂₀ = (z − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, `z_s = √ᾱ_s·x̂₀ + √(1−ᾱ_s)·ε̂`.
pub fn ddim_step(z: &Tensor, eps: &Tensor, ab_t: f64, ab_s: f64) -> Result<Tensor> {
    let (a, b) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (a2, b2) = (ab_s.sqrt(), (1.0 - ab_s).sqrt());
    z.zip_map(eps, "ddim_step", |z, e| {
        let x0 = (z as f64 - b * e as f64) / a;
        (a2 * x0 + b2 * e as f64) as f32
    })
}

/// Runs the guided sampler. Returns the `t = 0` latents.
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    input: &SampleInput,
    cfg: &GuidanceConfig,
    mode: ExecMode,
) -> Result<Sampled> {
    cfg.validate()?;
    let mc = model.config();
    let d = mc.d_model;
    let stg_block = cfg.stg_block.unwrap_or(mc.blocks.saturating_sub(1));
    if stg_block >= mc.blocks {
        return Err(Error::UnknownBlock {
            block: stg_block,
            available: mc.blocks,
        });
    }
    let passes = required_passes(cfg);
    let mut noise = rng::stream(cfg.seed, "sample-noise");
    let mut zv = Tensor::randn(&[mc.video_len(), d], 1.0, &mut noise);
    let mut za = Tensor::randn(&[mc.audio_len, d], 1.0, &mut noise);

    for k in 0..cfg.steps {
        let t = 1.0 - k as f64 / cfg.steps as f64;
        let s = 1.0 - (k + 1) as f64 / cfg.steps as f64;
        let joint = crate::model::assemble_input_with(
            &LatentSequence::video_target(zv.clone())?,
            &input.reference,
            &LatentSequence::audio_target(za.clone())?,
            mc.video_grid,
            mc.position_scheme,
            mc.ref_gap,
        )?;
        let bare = joint.without_reference(mc.position_scheme, mc.ref_gap)?;
        let preds = par::map(mode, &passes, |&p| {
            run_pass(model, p, &joint, &bare, input, t, stg_block)
        });
        let mut set = PassSet::new();
        for (p, r) in passes.iter().zip(preds) {
            set.insert(*p, r?);
        }
        let eps = compose_guidance(&set, cfg)?;
        let (ab_t, ab_s) = (
            mc.schedule.alpha_bar(t),
            if s <= 0.0 { 1.0 } else { mc.schedule.alpha_bar(s) },
        );
        zv = ddim_step(&zv, &eps.video, ab_t, ab_s)?;
        za = ddim_step(&za, &eps.audio, ab_t, ab_s)?;
        zv.check_finite("sampler (video)")?;
        za.check_finite("sampler (audio)")?;
    }
    Ok(Sampled { video: zv, audio: za })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn scalar_pred(v: f32) -> Prediction {
        Prediction {
            video: Tensor::full(&[1, 1], v),
            audio: Tensor::full(&[1, 1], v),
        }
    }

    fn only(s_id: f64) -> GuidanceConfig {
        GuidanceConfig {
            s_id,
            s_video_cfg: 1.0,
            s_audio_cfg: 1.0,
            s_av: 0.0,
            s_stg: 0.0,
            ..GuidanceConfig::default()
        }
    }

    fn set(u: f32, t: f32, f: f32) -> PassSet {
        [(Pass::Unconditional, u), (Pass::TextOnly, t), (Pass::Full, f)]
            .into_iter()
            .map(|(p, v)| (p, scalar_pred(v)))
            .collect()
    }

    #[test]
    fn identity_guidance_degenerate_cases() {
        let preds = set(0.2, 0.3, 0.5);
        let a0 = compose_guidance(&preds, &only(0.0)).unwrap().audio.data()[0];
        assert_eq!(a0, 0.3);
        let a1 = compose_guidance(&preds, &only(1.0)).unwrap().audio.data()[0];
        assert_eq!(a1, 0.5);
        let a4 = compose_guidance(&set(0.2, 0.2, 0.5), &only(4.0)).unwrap().audio.data()[0];
        assert!((a4 - 1.4).abs() < 1e-6, "{a4}");
    }

    #[test]
    fn neutral_scales_collapse_to_full_prediction() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut preds = PassSet::new();
        for p in [
            Pass::Unconditional,
            Pass::TextOnly,
            Pass::Full,
            Pass::Perturbed,
            Pass::NoCross,
        ] {
            preds.insert(
                p,
                Prediction {
                    video: Tensor::randn(&[3, 4], 1.0, &mut r),
                    audio: Tensor::randn(&[2, 4], 1.0, &mut r),
                },
            );
        }
        let out = compose_guidance(&preds, &GuidanceConfig::neutral()).unwrap();
        assert_eq!(out, preds[&Pass::Full]);
        assert_eq!(required_passes(&GuidanceConfig::neutral()), vec![Pass::Full]);
    }

    #[test]
    fn shared_offsets_pass_through() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let cfg = GuidanceConfig::default();
        let mut preds = PassSet::new();
        let mut shifted = PassSet::new();
        let c = Tensor::randn(&[2, 4], 1.0, &mut r);
        for p in required_passes(&cfg) {
            let pr = Prediction {
                video: Tensor::randn(&[2, 4], 1.0, &mut r),
                audio: Tensor::randn(&[2, 4], 1.0, &mut r),
            };
            shifted.insert(
                p,
                Prediction {
                    video: pr.video.add(&c).unwrap(),
                    audio: pr.audio.add(&c).unwrap(),
                },
            );
            preds.insert(p, pr);
        }
        let a = compose_guidance(&preds, &cfg).unwrap();
        let b = compose_guidance(&shifted, &cfg).unwrap();
        assert!(b.audio.sub(&a.audio).unwrap().max_abs_diff(&c) < 1e-5);
        assert!(b.video.sub(&a.video).unwrap().max_abs_diff(&c) < 1e-5);
        let (sv, sa) = cfg
            .coefficients()
            .iter()
            .fold((0.0, 0.0), |(x, y), &(_, v, a)| (x + v, y + a));
        assert!((sv - 1.0).abs() < 1e-12 && (sa - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pass_selection() {
        let d = GuidanceConfig::default();
        assert_eq!(
            required_passes(&d),
            vec![
                Pass::Unconditional,
                Pass::TextOnly,
                Pass::Full,
                Pass::Perturbed,
                Pass::NoCross
            ]
        );
        let no_stg = GuidanceConfig {
            s_stg: 0.0,
            ..d.clone()
        };
        assert_eq!(
            required_passes(&no_stg),
            vec![Pass::Unconditional, Pass::TextOnly, Pass::Full, Pass::NoCross]
        );
        let pivot_u = GuidanceConfig {
            identity_pivot: IdentityPivot::Unconditional,
            ..only(4.0)
        };
        assert_eq!(
            required_passes(&pivot_u),
            vec![Pass::Unconditional, Pass::TextOnly, Pass::Full]
        );
        assert_eq!(required_passes(&only(4.0)), vec![Pass::TextOnly, Pass::Full]);
    }

    #[test]
    fn missing_pass_is_reported() {
        let preds = set(0.1, 0.2, 0.3);
        let err = compose_guidance(&preds, &GuidanceConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingPass(_)));
        let bad = GuidanceConfig {
            s_id: f64::NAN,
            ..GuidanceConfig::default()
        };
        assert!(compose_guidance(&preds, &bad).is_err());
    }

    /// Counts forwards; predicts a fixed linear function of its input.
    struct Counting {
        config: ModelConfig,
        calls: AtomicUsize,
    }

    impl Denoiser for Counting {
        fn config(&self) -> &ModelConfig {
            &self.config
        }

        fn denoise(&self, joint: &JointInput, cond: &Conditioning, opts: &ForwardOptions) -> Result<Prediction> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let bias = cond.text.map_or(0.0, |_| 0.1) + if cond.reference_present { 0.2 } else { 0.0 }
                - if opts.skip_block.is_some() { 0.05 } else { 0.0 }
                - if opts.cross_modal { 0.0 } else { 0.03 };
            Ok(Prediction {
                video: joint.video.map(|v| 0.5 * v + bias),
                audio: joint.audio_target.map(|v| 0.5 * v + bias),
            })
        }
    }

    fn input(reference_rows: usize) -> SampleInput {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        SampleInput {
            reference: LatentSequence::audio_reference(Tensor::randn(&[reference_rows, 64], 1.0, &mut r)).unwrap(),
            first_frame: Some(Tensor::randn(&[16, 64], 1.0, &mut r)),
            text: Some(TextCode {
                env: 1,
                style: 0,
                scene: 2,
            }),
        }
    }

    #[test]
    fn forwards_per_step_match_pass_count() {
        for cfg in [GuidanceConfig::default(), GuidanceConfig::neutral(), only(4.0)] {
            let m = Counting {
                config: ModelConfig::default(),
                calls: AtomicUsize::new(0),
            };
            let cfg = GuidanceConfig { steps: 4, ..cfg };
            sample(&m, &input(8), &cfg, ExecMode::Parallel).unwrap();
            assert_eq!(m.calls.load(Ordering::SeqCst), 4 * required_passes(&cfg).len());
        }
    }

    #[test]
    fn one_step_is_the_closed_form_x0_estimate() {
        let m = Counting {
            config: ModelConfig::default(),
            calls: AtomicUsize::new(0),
        };
        let cfg = GuidanceConfig {
            steps: 1,
            seed: 9,
            ..GuidanceConfig::default()
        };
        let inp = input(8);
        let out = sample(&m, &inp, &cfg, ExecMode::Sequential).unwrap();

        // Independent evaluation: same noise, each pass's bias by hand.
        let mut noise = rng::stream(9, "sample-noise");
        let zv: Tensor = Tensor::randn(&[32, 64], 1.0, &mut noise);
        let za: Tensor = Tensor::randn(&[16, 64], 1.0, &mut noise);
        let ab = ModelConfig::default().schedule.alpha_bar(1.0);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        // Biases: u = 0, t = 0.1, f = 0.3, p = 0.25, x = 0.27; weights from defaults.
        let audio_bias = -6.0 * 0.0 + 3.0 * 0.1 + 8.0 * 0.3 - 1.0 * 0.25 - 3.0 * 0.27;
        let video_bias = -2.0 * 0.0 + 7.0 * 0.3 - 0.25 - 3.0 * 0.27;
        let check = |z: &Tensor, got: &Tensor, bias: f64| {
            for (&z, &g) in z.data().iter().zip(got.data()) {
                let e = (0.5 * z + bias as f32) as f64;
                let want = (z as f64 - b * e) / a;
                assert!((g as f64 - want).abs() < 1e-2 * want.abs().max(1.0), "{g} vs {want}");
            }
        };
        check(&za, &out.audio, audio_bias);
        check(&zv, &out.video, video_bias);
    }

    #[test]
    fn sampling_is_deterministic_and_mode_independent() {
        let cfg = ModelConfig {
            blocks: 1,
            ..ModelConfig::default()
        };
        let mut model = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for a in model.adapters.adapters.values_mut() {
            a.up = Tensor::randn(a.up.shape(), 0.1, &mut r);
        }
        let g = GuidanceConfig {
            steps: 3,
            ..GuidanceConfig::default()
        };
        let x = sample(&model, &input(8), &g, ExecMode::Parallel).unwrap();
        let y = sample(&model, &input(8), &g, ExecMode::Sequential).unwrap();
        assert_eq!(x, y);
        let no_id = GuidanceConfig { s_id: 0.0, ..g.clone() };
        let z = sample(&model, &input(8), &no_id, ExecMode::Parallel).unwrap();
        assert!(z.audio.max_abs_diff(&x.audio) > 0.0);
        let bad = GuidanceConfig {
            stg_block: Some(1),
            ..g
        };
        assert!(matches!(
            sample(&model, &input(8), &bad, ExecMode::Sequential),
            Err(Error::UnknownBlock { .. })
        ));
        // Sampling without any reference still works.
        sample(
            &model,
            &input(0),
            &GuidanceConfig {
                steps: 2,
                ..GuidanceConfig::default()
            },
            ExecMode::Sequential,
        )
        .unwrap();
    }
}
