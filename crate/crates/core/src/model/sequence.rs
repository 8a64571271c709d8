//! Token sequences, conditioning, and assembly of the joint
//! `[video target; audio reference; audio target]` input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::positional::{audio_positions, video_grid, PositionScheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Audio,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Reference,
    Target,
    FirstFrame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub modality: Modality,
    pub role: Role,
    /// `count × d_model`.
    pub tokens: Tensor,
}

impl LatentSequence {
    /// Only a reference may be empty, and only audio carries a reference.
    pub fn new(modality: Modality, role: Role, tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "latent sequence must be a matrix, got shape {:?}",
                tokens.shape()
            )));
        }
        if role == Role::Reference && modality != Modality::Audio {
            return Err(Error::RoleMismatch(
                "only audio sequences can act as a reference".into(),
            ));
        }
        if role == Role::FirstFrame && modality != Modality::Video {
            return Err(Error::RoleMismatch("first-frame tokens must be video".into()));
        }
        if tokens.rows() == 0 && role != Role::Reference {
            return Err(Error::InvalidArgument(format!("{role:?} sequence has no tokens")));
        }
        Ok(Self { modality, role, tokens })
    }

    pub fn video_target(tokens: Tensor) -> Result<Self> {
        Self::new(Modality::Video, Role::Target, tokens)
    }

    pub fn audio_target(tokens: Tensor) -> Result<Self> {
        Self::new(Modality::Audio, Role::Target, tokens)
    }

    pub fn audio_reference(tokens: Tensor) -> Result<Self> {
        Self::new(Modality::Audio, Role::Reference, tokens)
    }

    pub fn empty_reference(d_model: usize) -> Self {
        Self {
            modality: Modality::Audio,
            role: Role::Reference,
            tokens: Tensor::zeros(&[0, d_model]),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Environment, speaking style and visual scene codes of the text prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextCode {
    pub env: usize,
    pub style: usize,
    pub scene: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// `None` is the explicit null prompt.
    pub text: Option<TextCode>,
    pub timestep: f32,
    /// One video frame of clean latents, or `None`.
    pub first_frame: Option<Tensor>,
    pub reference_present: bool,
}

/// Joint model input in sequence order `[z_v; z_a^ref; z_a^target]`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointInput {
    pub video: Tensor,
    pub audio_ref: Tensor,
    pub audio_target: Tensor,
    pub video_positions: Vec<(usize, usize, usize)>,
    /// Reference positions followed by target positions.
    pub audio_positions: Vec<i64>,
}

impl JointInput {
    pub fn len(&self) -> usize {
        self.video.rows() + self.audio_ref.rows() + self.audio_target.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ref_len(&self) -> usize {
        self.audio_ref.rows()
    }

    /// All tokens stacked in sequence order.
    pub fn tokens(&self) -> Result<Tensor> {
        Tensor::concat_rows(&[&self.video, &self.audio_ref, &self.audio_target])
    }

    /// Same input with the reference removed.
    pub fn without_reference(&self, scheme: PositionScheme, gap: usize) -> Result<Self> {
        Ok(Self {
            video: self.video.clone(),
            audio_ref: Tensor::zeros(&[0, self.audio_ref.cols()]),
            audio_target: self.audio_target.clone(),
            video_positions: self.video_positions.clone(),
            audio_positions: audio_positions(0, self.audio_target.rows(), scheme, gap)?,
        })
    }
}

/// Concatenates the three sequences with negative reference positions.
pub fn assemble_input(
    video_target: &LatentSequence,
    audio_ref: &LatentSequence,
    audio_target: &LatentSequence,
    video_shape: [usize; 3],
) -> Result<JointInput> {
    assemble_input_with(
        video_target,
        audio_ref,
        audio_target,
        video_shape,
        PositionScheme::Negative,
        0,
    )
}

pub fn assemble_input_with(
    video_target: &LatentSequence,
    audio_ref: &LatentSequence,
    audio_target: &LatentSequence,
    video_shape: [usize; 3],
    scheme: PositionScheme,
    gap: usize,
) -> Result<JointInput> {
    let expect = |s: &LatentSequence, m: Modality, r: Role, what: &str| {
        if s.modality != m || s.role != r {
            Err(Error::RoleMismatch(format!(
                "{what} slot expects {m:?}/{r:?}, got {:?}/{:?}",
                s.modality, s.role
            )))
        } else {
            Ok(())
        }
    };
    expect(video_target, Modality::Video, Role::Target, "video")?;
    expect(audio_ref, Modality::Audio, Role::Reference, "reference")?;
    expect(audio_target, Modality::Audio, Role::Target, "audio target")?;

    let d = video_target.tokens.cols();
    for s in [audio_ref, audio_target] {
        if s.tokens.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "assemble_input",
                left: video_target.tokens.shape().to_vec(),
                right: s.tokens.shape().to_vec(),
            });
        }
    }
    let grid = video_grid(video_shape[0], video_shape[1], video_shape[2]);
    if grid.len() != video_target.len() {
        return Err(Error::InvalidArgument(format!(
            "video grid {video_shape:?} has {} cells but the video has {} tokens",
            grid.len(),
            video_target.len()
        )));
    }
    Ok(JointInput {
        video: video_target.tokens.clone(),
        audio_ref: audio_ref.tokens.clone(),
        audio_target: audio_target.tokens.clone(),
        video_positions: grid,
        audio_positions: audio_positions(audio_ref.len(), audio_target.len(), scheme, gap)?,
    })
}
