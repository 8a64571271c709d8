use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::positional::PositionScheme;

/// Rotary base for sequences of a few dozen tokens: with the usual 10⁴ most
/// frequency pairs barely turn across the whole context, leaving attention
/// nearly position-blind.
pub const SHORT_CONTEXT_ROPE_BASE: f64 = 100.0;

/// Which attention edges exist between reference and target audio tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefAttention {
    /// Reference and target tokens attend to each other freely.
    #[default]
    Bidirectional,
    /// Targets read the reference; reference tokens only see each other.
    TargetToRef,
}

/// How a pass without a reference is realized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullReference {
    /// The reference segment is simply absent.
    #[default]
    EmptySequence,
    /// A single learned token takes the reference slot.
    NullToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Blocks per stream; block `l` of each stream is followed by one
    /// bidirectional cross-modal exchange.
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    /// `(t, h, w)` extent of the target video.
    pub video_grid: [usize; 3],
    pub audio_len: usize,
    pub ref_len: usize,
    pub n_env: usize,
    pub n_style: usize,
    pub n_scene: usize,
    pub rope_base: f64,
    /// Rotated channels per head for video (split over three axes, so a
    /// multiple of 6); remaining head channels are position-free.
    pub video_rotary_dim: usize,
    pub position_scheme: PositionScheme,
    pub ref_gap: usize,
    pub ref_attention: RefAttention,
    pub null_reference: NullReference,
    pub time_embed_dim: usize,
    pub schedule: NoiseSchedule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            blocks: 4,
            mlp_hidden: 128,
            lora_rank: 4,
            lora_alpha: 8.0,
            video_grid: [2, 4, 4],
            audio_len: 16,
            ref_len: 8,
            n_env: 8,
            n_style: 4,
            n_scene: 4,
            rope_base: SHORT_CONTEXT_ROPE_BASE,
            video_rotary_dim: 12,
            position_scheme: PositionScheme::Negative,
            ref_gap: 0,
            ref_attention: RefAttention::Bidirectional,
            null_reference: NullReference::EmptySequence,
            time_embed_dim: 32,
            schedule: NoiseSchedule::default(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn video_len(&self) -> usize {
        self.video_grid.iter().product()
    }

    /// Tokens in one video frame (the first-frame row).
    pub fn frame_len(&self) -> usize {
        self.video_grid[1] * self.video_grid[2]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        let dh = self.head_dim();
        if !dh.is_multiple_of(2) {
            return bad(format!("head dimension {dh} must be even for rotary encoding"));
        }
        if !self.video_rotary_dim.is_multiple_of(6) || self.video_rotary_dim > dh {
            return bad(format!(
                "video_rotary_dim {} must be a multiple of 6 and at most the head dimension {dh}",
                self.video_rotary_dim
            ));
        }
        if self.blocks == 0 || self.mlp_hidden == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return bad("blocks, mlp_hidden must be positive and time_embed_dim even".into());
        }
        if self.lora_rank == 0 || !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return bad("lora_rank and lora_alpha must be positive".into());
        }
        if self.video_len() == 0 || self.audio_len == 0 {
            return bad("video grid and audio length must be non-empty".into());
        }
        if self.n_env == 0 || self.n_style == 0 || self.n_scene == 0 {
            return bad("code vocabularies must be non-empty".into());
        }
        if self.rope_base.is_nan() || self.rope_base <= 1.0 {
            return bad(format!("rope_base {} must exceed 1", self.rope_base));
        }
        self.schedule.validate()
    }
}
