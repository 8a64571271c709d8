//! Ground-truth metrics read off generated latents through the world's known
//! factor bases.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthworld::{AudioFactor, IdentitySpec, World};

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn cosine(a: &[f32], b: &[f32], what: &'static str) -> Result<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm(what));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine between the speaker-subspace coordinates of the mean token and the
/// identity's speaker signature.
pub fn identity_similarity(world: &World, audio: &Tensor, identity: &IdentitySpec) -> Result<f64> {
    let coords = world.audio_project(AudioFactor::Speaker, &audio.mean_rows());
    cosine(&coords, &identity.speaker_signature, "identity_similarity")
}

/// Below this norm an environment projection is treated as absent (factor
/// amplitudes are O(1), so this is far under any real signal).
const ABSENT: f64 = 1e-3;

/// Cosine between the environment-subspace coordinates of the mean token and
/// the code's embedding; 0 when the latents carry no environment component.
pub fn env_adherence(world: &World, audio: &Tensor, env_code: usize) -> Result<f64> {
    let target = world.env_embed(env_code)?;
    let coords = world.audio_project(AudioFactor::Env, &audio.mean_rows());
    if dot(&coords, &coords).sqrt() < ABSENT {
        return Ok(0.0);
    }
    cosine(&coords, &target, "env_adherence")
}

/// `|⟨mean token, n̂⟩|`: how much of the reference's nuisance direction shows
/// up in the generated targets. Zero when the nuisance vector is zero.
pub fn leakage_score(audio: &Tensor, reference_nuisance: &[f32]) -> f64 {
    let n = dot(reference_nuisance, reference_nuisance).sqrt();
    if n == 0.0 {
        return 0.0;
    }
    (dot(&audio.mean_rows(), reference_nuisance) / n).abs()
}

/// Mean cosine, over aligned positions `j`, between the content-subspace
/// coordinates of generated token `j` and reference token `j`. A diagnostic
/// for position-aligned copying; tokens without content are skipped.
pub fn content_leakage(world: &World, audio: &Tensor, reference: &Tensor) -> f64 {
    let n = audio.rows().min(reference.rows());
    let (mut acc, mut used) = (0.0, 0usize);
    for j in 0..n {
        let a = world.audio_project(AudioFactor::Content, audio.row(j));
        let b = world.audio_project(AudioFactor::Content, reference.row(j));
        if let Ok(c) = cosine(&a, &b, "content_leakage") {
            acc += c;
            used += 1;
        }
    }
    if used == 0 {
        0.0
    } else {
        acc / used as f64
    }
}

/// One-sided sign test of "differences are positive".
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    /// `P(X ≥ positive)` for `X ~ Binomial(positive + negative, ½)`; ties dropped.
    pub p_value: f64,
}

pub fn sign_test(diffs: &[f64]) -> SignTest {
    let positive = diffs.iter().filter(|&&d| d > 0.0).count();
    let negative = diffs.iter().filter(|&&d| d < 0.0).count();
    let n = positive + negative;
    // Upper tail accumulated in log space from the pmf recurrence.
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_pmf = ln_half_n;
    let mut tail = if positive == 0 { ln_pmf.exp() } else { 0.0 };
    for i in 0..n {
        ln_pmf += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        if i + 1 >= positive {
            tail += ln_pmf.exp();
        }
    }
    SignTest {
        positive,
        negative,
        p_value: tail.min(1.0),
    }
}
