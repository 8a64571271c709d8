//! A procedurally generated identity world with exactly known factors.
//!
//! Audio latents are linear mixtures of orthonormal factor subspaces:
//!
//! ```text
//! target token j    = A·(a_s·voice) + B·(a_e·onehot(env)) + C·(a_y·onehot(style))
//!                   + N·(a_n·nuisance) + K·content_j + σ·noise
//! reference token j = A·(a_s·voice') + N·(a_n·nuisance') + K·content'_j + σ·noise
//! ```
//!
//! `A, B, C, N, K` are disjoint row blocks of one random orthogonal basis, so
//! each factor is recovered exactly by projection. The reference carries no
//! environment or style component. Voices drift per clip around the speaker's
//! canonical signature; a same-source pair shares the clip (voice and
//! nuisance), a cross-source pair draws an independent clip.
//!
//! Video tokens at `(t, h, w)` mix appearance, scene, the clip's nuisance
//! coefficients, a fixed spatial layout code and a per-clip motion direction
//! scaled by `t`. The first frame is the `t = 0` slice of the target video.

mod io;

pub use io::{export_dataset, import_dataset, BLOB_MAGIC, DATASET_VERSION};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{random_orthogonal, Tensor};
use crate::par::{self, ExecMode};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    #[default]
    SameSource,
    CrossSource,
}

/// Held-out split tag: same-source pairs are easy, cross-source pairs hard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Easy,
    Hard,
}

impl PairMode {
    pub fn tag(self) -> SplitTag {
        match self {
            PairMode::SameSource => SplitTag::Easy,
            PairMode::CrossSource => SplitTag::Hard,
        }
    }
}

/// Maps clean reference latents into the model's latent space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceEncoder {
    /// Latents are already in model space.
    #[default]
    Identity,
    /// A fixed random rotation (derived from the world seed).
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub d_latent: usize,
    pub d_id: usize,
    pub n_env: usize,
    pub n_style: usize,
    pub n_scene: usize,
    pub nuisance_dim: usize,
    pub content_dim: usize,
    pub layout_dim: usize,
    pub motion_dim: usize,
    pub ref_len: usize,
    pub audio_len: usize,
    pub video_grid: [usize; 3],
    pub noise_sigma: f32,
    /// Per-clip voice perturbation, relative to the unit signature.
    pub voice_drift: f32,
    pub amp_speaker: f32,
    pub amp_env: f32,
    pub amp_style: f32,
    pub amp_nuisance: f32,
    pub amp_content: f32,
    pub amp_appearance: f32,
    pub amp_scene: f32,
    pub amp_layout: f32,
    pub amp_motion: f32,
    pub reference_encoder: ReferenceEncoder,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d_latent: 64,
            d_id: 8,
            n_env: 8,
            n_style: 4,
            n_scene: 4,
            nuisance_dim: 16,
            content_dim: 8,
            layout_dim: 8,
            motion_dim: 8,
            ref_len: 8,
            audio_len: 16,
            video_grid: [2, 4, 4],
            noise_sigma: 0.02,
            voice_drift: 0.5,
            amp_speaker: 3.0,
            amp_env: 3.0,
            amp_style: 2.0,
            amp_nuisance: 2.0,
            amp_content: 2.0,
            amp_appearance: 3.0,
            amp_scene: 3.0,
            amp_layout: 2.0,
            amp_motion: 1.0,
            reference_encoder: ReferenceEncoder::Identity,
        }
    }
}

/// A contiguous block of basis rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Subspace {
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AudioFactor {
    Speaker,
    Env,
    Style,
    Nuisance,
    Content,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VideoFactor {
    Appearance,
    Scene,
    Nuisance,
    Layout,
    Motion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: u64,
    pub speaker_signature: Vec<f32>,
    pub appearance_signature: Vec<f32>,
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

/// Identity `seed` with signatures drawn uniformly from the unit sphere.
pub fn gen_identity(seed: u64, d_id: usize) -> IdentitySpec {
    let mut r = rng::indexed(seed, "identity", 0);
    IdentitySpec {
        id: seed,
        speaker_signature: unit_vector(d_id, &mut r),
        appearance_signature: unit_vector(d_id, &mut r),
    }
}

impl IdentitySpec {
    /// The voice as heard in one clip: the canonical signature perturbed by
    /// `drift·g/√d` (g Gaussian) and renormalized.
    pub fn expressed<R: Rng + ?Sized>(&self, drift: f32, rng: &mut R) -> IdentitySpec {
        let d = self.speaker_signature.len();
        let scale = drift as f64 / (d as f64).sqrt();
        let v: Vec<f64> = self
            .speaker_signature
            .iter()
            .map(|&s| s as f64 + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        IdentitySpec {
            id: self.id,
            speaker_signature: v.iter().map(|x| (x / n) as f32).collect(),
            appearance_signature: self.appearance_signature.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    /// Canonical identity.
    pub identity: IdentitySpec,
    /// Identity as expressed in the target clip.
    pub target_identity: IdentitySpec,
    /// Identity as expressed in the reference clip.
    pub reference_identity: IdentitySpec,
    pub env_code: usize,
    pub style_code: usize,
    pub scene_code: usize,
    pub mode: PairMode,
    /// `ref_len × d`, clean (no environment/style).
    pub reference: Tensor,
    pub target_audio: Tensor,
    pub target_video: Tensor,
    /// `t = 0` slice of the target video.
    pub first_frame: Tensor,
    /// Latent-space nuisance vectors of the reference and target clips.
    pub reference_nuisance: Vec<f32>,
    pub target_nuisance: Vec<f32>,
}

impl PairSample {
    pub fn tag(&self) -> SplitTag {
        self.mode.tag()
    }
}

/// One clip: its voice, nuisance coefficients and motion direction.
struct Clip {
    voice: IdentitySpec,
    nuisance: Vec<f32>,
    motion: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    /// Rows are orthonormal basis directions.
    audio_basis: Tensor,
    video_basis: Tensor,
    /// `(h·w) × layout_dim` spatial codes.
    layout: Vec<Vec<f32>>,
    encoder: Option<Tensor>,
}

impl World {
    pub fn new(config: WorldConfig, seed: u64) -> Result<Self> {
        let c = &config;
        let audio_used = c.d_id + c.n_env + c.n_style + c.nuisance_dim + c.content_dim;
        let video_used = c.d_id + c.n_scene + c.nuisance_dim + c.layout_dim + c.motion_dim;
        if audio_used > c.d_latent || video_used > c.d_latent {
            return Err(Error::Config(format!(
                "factor subspaces need {audio_used} audio / {video_used} video dimensions, latent has {}",
                c.d_latent
            )));
        }
        if c.d_id == 0 || c.n_env == 0 || c.n_style == 0 || c.n_scene == 0 || c.audio_len == 0 || c.ref_len == 0 {
            return Err(Error::Config(
                "world dimensions and vocabularies must be positive".into(),
            ));
        }
        if !(c.noise_sigma >= 0.0 && c.voice_drift >= 0.0) {
            return Err(Error::Config("noise_sigma and voice_drift must be non-negative".into()));
        }
        let mut r = rng::stream(seed, "world-basis");
        let audio_basis = random_orthogonal(c.d_latent, &mut r);
        let video_basis = random_orthogonal(c.d_latent, &mut r);
        let cells = c.video_grid[1] * c.video_grid[2];
        let layout = (0..cells).map(|_| unit_vector(c.layout_dim, &mut r)).collect();
        let encoder = match c.reference_encoder {
            ReferenceEncoder::Identity => None,
            ReferenceEncoder::Linear => Some(random_orthogonal(c.d_latent, &mut rng::stream(seed, "world-encoder"))),
        };
        Ok(Self {
            config,
            seed,
            audio_basis,
            video_basis,
            layout,
            encoder,
        })
    }

    pub fn audio_subspace(&self, f: AudioFactor) -> Subspace {
        let c = &self.config;
        let sizes = [c.d_id, c.n_env, c.n_style, c.nuisance_dim, c.content_dim];
        let idx = match f {
            AudioFactor::Speaker => 0,
            AudioFactor::Env => 1,
            AudioFactor::Style => 2,
            AudioFactor::Nuisance => 3,
            AudioFactor::Content => 4,
        };
        Subspace {
            start: sizes[..idx].iter().sum(),
            len: sizes[idx],
        }
    }

    pub fn video_subspace(&self, f: VideoFactor) -> Subspace {
        let c = &self.config;
        let sizes = [c.d_id, c.n_scene, c.nuisance_dim, c.layout_dim, c.motion_dim];
        let idx = match f {
            VideoFactor::Appearance => 0,
            VideoFactor::Scene => 1,
            VideoFactor::Nuisance => 2,
            VideoFactor::Layout => 3,
            VideoFactor::Motion => 4,
        };
        Subspace {
            start: sizes[..idx].iter().sum(),
            len: sizes[idx],
        }
    }

    fn embed_into(basis: &Tensor, sub: Subspace, coords: &[f32], out: &mut [f32]) {
        debug_assert_eq!(coords.len(), sub.len);
        for (i, &c) in coords.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, &b) in out.iter_mut().zip(basis.row(sub.start + i)) {
                *o += c * b;
            }
        }
    }

    fn project(basis: &Tensor, sub: Subspace, x: &[f32]) -> Vec<f32> {
        (0..sub.len)
            .map(|i| {
                basis
                    .row(sub.start + i)
                    .iter()
                    .zip(x)
                    .map(|(&b, &v)| b as f64 * v as f64)
                    .sum::<f64>() as f32
            })
            .collect()
    }

    /// Latent vector `Σ coords_i · basis_row_i` for an audio factor.
    pub fn audio_embed(&self, f: AudioFactor, coords: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.config.d_latent];
        Self::embed_into(&self.audio_basis, self.audio_subspace(f), coords, &mut out);
        out
    }

    /// Coordinates of `x` in an audio factor subspace (the pseudo-inverse of
    /// the orthonormal mixing map).
    pub fn audio_project(&self, f: AudioFactor, x: &[f32]) -> Vec<f32> {
        Self::project(&self.audio_basis, self.audio_subspace(f), x)
    }

    pub fn video_project(&self, f: VideoFactor, x: &[f32]) -> Vec<f32> {
        Self::project(&self.video_basis, self.video_subspace(f), x)
    }

    pub fn env_embed(&self, code: usize) -> Result<Vec<f32>> {
        one_hot("env", code, self.config.n_env)
    }

    pub fn style_embed(&self, code: usize) -> Result<Vec<f32>> {
        one_hot("style", code, self.config.n_style)
    }

    pub fn scene_embed(&self, code: usize) -> Result<Vec<f32>> {
        one_hot("scene", code, self.config.n_scene)
    }

    fn clip<R: Rng + ?Sized>(&self, identity: &IdentitySpec, rng: &mut R) -> Clip {
        let c = &self.config;
        let voice = identity.expressed(c.voice_drift, rng);
        let nuisance = unit_vector(c.nuisance_dim, rng)
            .iter()
            .map(|v| v * c.amp_nuisance)
            .collect();
        let motion = unit_vector(c.motion_dim, rng);
        Clip {
            voice,
            nuisance,
            motion,
        }
    }

    /// Smooth per-token trajectory in the content subspace:
    /// `coord_k(j) = a·sin(ω_k·j + φ_k)`, with `a` set so the expected squared
    /// norm per token is `amp_content²`.
    fn content<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<Vec<f32>> {
        let k = self.config.content_dim;
        if k == 0 {
            return vec![Vec::new(); len];
        }
        let a = self.config.amp_content as f64 * (2.0 / k as f64).sqrt();
        let params: Vec<(f64, f64)> = (0..k)
            .map(|_| (rng.random_range(0.3..0.9), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        (0..len)
            .map(|j| {
                params
                    .iter()
                    .map(|&(w, p)| (a * (w * j as f64 + p).sin()) as f32)
                    .collect()
            })
            .collect()
    }

    fn noise<R: Rng + ?Sized>(&self, row: &mut [f32], rng: &mut R) {
        let s = self.config.noise_sigma;
        if s > 0.0 {
            for v in row.iter_mut() {
                *v += s * rng.sample::<f32, _>(StandardNormal);
            }
        }
    }

    fn audio_tokens<R: Rng + ?Sized>(
        &self,
        clip: &Clip,
        env: Option<usize>,
        style: Option<usize>,
        len: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        let c = &self.config;
        let d = c.d_latent;
        let mut shared = vec![0.0; d];
        let speaker: Vec<f32> = clip.voice.speaker_signature.iter().map(|v| v * c.amp_speaker).collect();
        Self::embed_into(
            &self.audio_basis,
            self.audio_subspace(AudioFactor::Speaker),
            &speaker,
            &mut shared,
        );
        if let Some(e) = env {
            let coords: Vec<f32> = self.env_embed(e)?.iter().map(|v| v * c.amp_env).collect();
            Self::embed_into(
                &self.audio_basis,
                self.audio_subspace(AudioFactor::Env),
                &coords,
                &mut shared,
            );
        }
        if let Some(s) = style {
            let coords: Vec<f32> = self.style_embed(s)?.iter().map(|v| v * c.amp_style).collect();
            Self::embed_into(
                &self.audio_basis,
                self.audio_subspace(AudioFactor::Style),
                &coords,
                &mut shared,
            );
        }
        Self::embed_into(
            &self.audio_basis,
            self.audio_subspace(AudioFactor::Nuisance),
            &clip.nuisance,
            &mut shared,
        );
        let content = self.content(len, rng);
        let mut data = Vec::with_capacity(len * d);
        for cj in &content {
            let mut row = shared.clone();
            Self::embed_into(
                &self.audio_basis,
                self.audio_subspace(AudioFactor::Content),
                cj,
                &mut row,
            );
            self.noise(&mut row, rng);
            data.extend_from_slice(&row);
        }
        Tensor::new(vec![len, d], data)
    }

    fn video_tokens<R: Rng + ?Sized>(
        &self,
        identity: &IdentitySpec,
        clip: &Clip,
        scene: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        let c = &self.config;
        let d = c.d_latent;
        let [t_len, h_len, w_len] = c.video_grid;
        let mut shared = vec![0.0; d];
        let app: Vec<f32> = identity
            .appearance_signature
            .iter()
            .map(|v| v * c.amp_appearance)
            .collect();
        Self::embed_into(
            &self.video_basis,
            self.video_subspace(VideoFactor::Appearance),
            &app,
            &mut shared,
        );
        let sc: Vec<f32> = self.scene_embed(scene)?.iter().map(|v| v * c.amp_scene).collect();
        Self::embed_into(
            &self.video_basis,
            self.video_subspace(VideoFactor::Scene),
            &sc,
            &mut shared,
        );
        Self::embed_into(
            &self.video_basis,
            self.video_subspace(VideoFactor::Nuisance),
            &clip.nuisance,
            &mut shared,
        );
        let mut data = Vec::with_capacity(t_len * h_len * w_len * d);
        for t in 0..t_len {
            for h in 0..h_len {
                for w in 0..w_len {
                    let mut row = shared.clone();
                    let lay: Vec<f32> = self.layout[h * w_len + w].iter().map(|v| v * c.amp_layout).collect();
                    Self::embed_into(
                        &self.video_basis,
                        self.video_subspace(VideoFactor::Layout),
                        &lay,
                        &mut row,
                    );
                    let mot: Vec<f32> = clip.motion.iter().map(|v| v * c.amp_motion * t as f32).collect();
                    Self::embed_into(
                        &self.video_basis,
                        self.video_subspace(VideoFactor::Motion),
                        &mot,
                        &mut row,
                    );
                    self.noise(&mut row, rng);
                    data.extend_from_slice(&row);
                }
            }
        }
        Tensor::new(vec![t_len * h_len * w_len, d], data)
    }

    /// Applies the configured reference encoder.
    pub fn encode_reference(&self, latents: &Tensor) -> Result<Tensor> {
        match &self.encoder {
            None => Ok(latents.clone()),
            Some(q) => latents.matmul(q),
        }
    }

    pub fn gen_pair<R: Rng + ?Sized>(
        &self,
        identity: &IdentitySpec,
        env_code: usize,
        style_code: usize,
        scene_code: usize,
        mode: PairMode,
        rng: &mut R,
    ) -> Result<PairSample> {
        let c = &self.config;
        check_code("env", env_code, c.n_env)?;
        check_code("style", style_code, c.n_style)?;
        check_code("scene", scene_code, c.n_scene)?;
        if identity.speaker_signature.len() != c.d_id || identity.appearance_signature.len() != c.d_id {
            return Err(Error::InvalidArgument(format!(
                "identity signatures must have dimension {}",
                c.d_id
            )));
        }
        let target_clip = self.clip(identity, rng);
        let other;
        let ref_clip = match mode {
            PairMode::SameSource => &target_clip,
            PairMode::CrossSource => {
                other = self.clip(identity, rng);
                &other
            }
        };
        let reference = self.audio_tokens(ref_clip, None, None, c.ref_len, rng)?;
        let reference = self.encode_reference(&reference)?;
        let target_audio = self.audio_tokens(&target_clip, Some(env_code), Some(style_code), c.audio_len, rng)?;
        let target_video = self.video_tokens(identity, &target_clip, scene_code, rng)?;
        let first_frame = target_video.slice_rows(0, c.video_grid[1] * c.video_grid[2])?;
        Ok(PairSample {
            identity: identity.clone(),
            target_identity: target_clip.voice.clone(),
            reference_identity: ref_clip.voice.clone(),
            env_code,
            style_code,
            scene_code,
            mode,
            reference,
            target_audio,
            target_video,
            first_frame,
            reference_nuisance: self.audio_embed(AudioFactor::Nuisance, &ref_clip.nuisance),
            target_nuisance: self.audio_embed(AudioFactor::Nuisance, &target_clip.nuisance),
        })
    }

    /// Identities split 80/20 into disjoint train/test sets; every identity
    /// gets `pairs_per_identity` pairs, each same-source with probability `mix`.
    pub fn gen_split(
        &self,
        n_identities: usize,
        pairs_per_identity: usize,
        mix: f64,
        seed: u64,
        mode: ExecMode,
    ) -> Result<Dataset> {
        if n_identities < 2 {
            return Err(Error::InvalidArgument("gen_split needs at least 2 identities".into()));
        }
        if !(0.0..=1.0).contains(&mix) {
            return Err(Error::InvalidArgument(format!("mix {mix} outside [0, 1]")));
        }
        let id_base = rng::derive_seed(seed, "identities");
        let identities: Vec<IdentitySpec> = (0..n_identities as u64)
            .map(|k| gen_identity(id_base.wrapping_add(k), self.config.d_id))
            .collect();
        let mut order: Vec<usize> = (0..n_identities).collect();
        order.shuffle(&mut rng::stream(seed, "identity-split"));
        let n_test = ((n_identities as f64 * 0.2).round() as usize).clamp(1, n_identities - 1);
        let mut test_idx: Vec<usize> = order[..n_test].to_vec();
        let mut train_idx: Vec<usize> = order[n_test..].to_vec();
        test_idx.sort_unstable();
        train_idx.sort_unstable();

        let pair_seed = rng::derive_seed(seed, "pairs");
        let make = |ids: &[usize]| -> Result<Vec<PairSample>> {
            let jobs: Vec<(usize, usize)> = ids
                .iter()
                .flat_map(|&i| (0..pairs_per_identity).map(move |p| (i, p)))
                .collect();
            par::map(mode, &jobs, |&(i, p)| {
                let mut r =
                    ChaCha8Rng::seed_from_u64(rng::derive_index(pair_seed, (i * pairs_per_identity + p) as u64));
                let same = r.random_bool(mix);
                let env = r.random_range(0..self.config.n_env);
                let style = r.random_range(0..self.config.n_style);
                let scene = r.random_range(0..self.config.n_scene);
                let m = if same {
                    PairMode::SameSource
                } else {
                    PairMode::CrossSource
                };
                self.gen_pair(&identities[i], env, style, scene, m, &mut r)
            })
            .into_iter()
            .collect()
        };
        Ok(Dataset {
            train: make(&train_idx)?,
            test: make(&test_idx)?,
            train_identities: train_idx.iter().map(|&i| identities[i].id).collect(),
            test_identities: test_idx.iter().map(|&i| identities[i].id).collect(),
        })
    }
}

fn check_code(vocab: &'static str, code: usize, size: usize) -> Result<()> {
    if code >= size {
        return Err(Error::UnknownCode { vocab, code, size });
    }
    Ok(())
}

fn one_hot(vocab: &'static str, code: usize, size: usize) -> Result<Vec<f32>> {
    check_code(vocab, code, size)?;
    let mut v = vec![0.0; size];
    v[code] = 1.0;
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<PairSample>,
    pub test: Vec<PairSample>,
    pub train_identities: Vec<u64>,
    pub test_identities: Vec<u64>,
}

impl Dataset {
    /// Held-out pairs with the given tag, in dataset order.
    pub fn test_split(&self, tag: SplitTag) -> Vec<&PairSample> {
        self.test.iter().filter(|p| p.tag() == tag).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(sigma: f32) -> World {
        World::new(
            WorldConfig {
                noise_sigma: sigma,
                ..WorldConfig::default()
            },
            11,
        )
        .unwrap()
    }

    fn norm(v: &[f32]) -> f64 {
        v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
    }

    fn cos(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() / (norm(a) * norm(b))
    }

    #[test]
    fn identities_are_seeded_unit_vectors() {
        assert_eq!(gen_identity(5, 8), gen_identity(5, 8));
        assert_ne!(gen_identity(5, 8).id, gen_identity(6, 8).id);
        let mut total = 0.0;
        for s in 0..1000 {
            let a = gen_identity(2 * s, 8);
            let b = gen_identity(2 * s + 1, 8);
            assert!((norm(&a.speaker_signature) - 1.0).abs() < 1e-6);
            assert!((norm(&a.appearance_signature) - 1.0).abs() < 1e-6);
            total += cos(&a.speaker_signature, &b.speaker_signature).abs();
        }
        // E|cos| for independent directions in 8 dims is Γ(4)/(√π·Γ(4.5)) ≈ 0.291;
        // the signed mean is what vanishes.
        let mean_abs = total / 1000.0;
        assert!((mean_abs - 0.291).abs() < 0.03, "{mean_abs}");
        let signed: f64 = (0..1000)
            .map(|s| {
                cos(
                    &gen_identity(2 * s, 8).speaker_signature,
                    &gen_identity(2 * s + 1, 8).speaker_signature,
                )
            })
            .sum::<f64>()
            / 1000.0;
        assert!(signed.abs() < 0.1, "{signed}");
    }

    #[test]
    fn noiseless_reference_decodes_the_voice_exactly() {
        let w = world(0.0);
        let id = gen_identity(3, 8);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let p = w.gen_pair(&id, 2, 1, 0, PairMode::SameSource, &mut r).unwrap();
        let mean = p.reference.mean_rows();
        let coords = w.audio_project(AudioFactor::Speaker, &mean);
        for (c, s) in coords.iter().zip(&p.reference_identity.speaker_signature) {
            assert!((c / w.config.amp_speaker - s).abs() < 1e-5);
        }
        // Every factor is recoverable from the target as well.
        let t = p.target_audio.mean_rows();
        let env = w.audio_project(AudioFactor::Env, &t);
        assert!((cos(&env, &w.env_embed(2).unwrap()) - 1.0).abs() < 1e-6);
        let style = w.audio_project(AudioFactor::Style, &t);
        assert!((cos(&style, &w.style_embed(1).unwrap()) - 1.0).abs() < 1e-6);
        let v = p.target_video.mean_rows();
        let app = w.video_project(VideoFactor::Appearance, &v);
        assert!((cos(&app, &id.appearance_signature) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reference_has_no_environment_component() {
        let w = world(0.02);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for k in 0..100 {
            let id = gen_identity(k, 8);
            let p = w
                .gen_pair(&id, (k % 8) as usize, 0, 0, PairMode::CrossSource, &mut r)
                .unwrap();
            let env = w.audio_project(AudioFactor::Env, &p.reference.mean_rows());
            let style = w.audio_project(AudioFactor::Style, &p.reference.mean_rows());
            assert!(norm(&env) < 0.05, "{}", norm(&env));
            assert!(norm(&style) < 0.05);
        }
    }

    #[test]
    fn nuisance_sharing_follows_the_mode() {
        let w = world(0.02);
        let id = gen_identity(9, 8);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let same = w.gen_pair(&id, 0, 0, 0, PairMode::SameSource, &mut r).unwrap();
        assert_eq!(same.reference_nuisance, same.target_nuisance);
        assert_eq!(same.reference_identity, same.target_identity);
        let cross = w.gen_pair(&id, 0, 0, 0, PairMode::CrossSource, &mut r).unwrap();
        assert_ne!(cross.reference_nuisance, cross.target_nuisance);
        assert!(cos(&cross.reference_nuisance, &cross.target_nuisance).abs() < 0.999);
        assert_eq!(cross.first_frame, cross.target_video.slice_rows(0, 16).unwrap());
    }

    #[test]
    fn unknown_codes_are_rejected() {
        let w = world(0.02);
        let id = gen_identity(1, 8);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            w.gen_pair(&id, 8, 0, 0, PairMode::SameSource, &mut r),
            Err(Error::UnknownCode { vocab: "env", .. })
        ));
        assert!(w.gen_pair(&id, 0, 4, 0, PairMode::SameSource, &mut r).is_err());
        assert!(w.gen_pair(&id, 0, 0, 4, PairMode::SameSource, &mut r).is_err());
    }

    #[test]
    fn splits_are_disjoint_balanced_and_reproducible() {
        let w = world(0.02);
        let ds = w.gen_split(64, 16, 0.5, 21, ExecMode::Parallel).unwrap();
        assert_eq!(ds.train.len() + ds.test.len(), 1024);
        assert_eq!(ds.test_identities.len(), 13);
        for id in &ds.test_identities {
            assert!(!ds.train_identities.contains(id));
        }
        let same = ds
            .train
            .iter()
            .chain(&ds.test)
            .filter(|p| p.mode == PairMode::SameSource)
            .count();
        // Binomial(1024, 0.5): σ = 16.
        assert!((same as f64 - 512.0).abs() < 48.0, "{same}");
        let again = w.gen_split(64, 16, 0.5, 21, ExecMode::Sequential).unwrap();
        assert_eq!(ds, again);
        assert!(!ds.test_split(SplitTag::Easy).is_empty());
        assert!(!ds.test_split(SplitTag::Hard).is_empty());
        assert!(w.gen_split(1, 4, 0.5, 0, ExecMode::Sequential).is_err());
    }

    #[test]
    fn linear_encoder_is_an_isometry() {
        let w = World::new(
            WorldConfig {
                reference_encoder: ReferenceEncoder::Linear,
                ..WorldConfig::default()
            },
            5,
        )
        .unwrap();
        let x = Tensor::randn(&[8, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let y = w.encode_reference(&x).unwrap();
        assert!((x.norm() - y.norm()).abs() < 1e-4);
        assert_ne!(x, y);
    }
}
