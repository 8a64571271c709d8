//! Run configuration and content fingerprints.
//!
//! A [`RunConfig`] is a TOML tree; unknown keys are rejected. Its fingerprint
//! is the SHA-256 of the canonical JSON serialization (declaration-ordered
//! fields, shortest round-trip float formatting) with the output directory
//! blanked, so the same logical run hashes identically on every machine.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::model::ModelConfig;
use crate::par::ExecMode;
use crate::rng;
use crate::synthworld::WorldConfig;

/// Lower-case hex SHA-256 of the canonical JSON form of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config types serialize");
    to_hex(&Sha256::digest(&json))
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses a 64-digit hex fingerprint.
pub fn from_hex(hex: &str) -> Result<[u8; 32]> {
    let bad = || Error::InvalidArgument(format!("fingerprint `{hex}` is not 64 hex digits"));
    if hex.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(hex.get(2 * i..2 * i + 2).ok_or_else(bad)?, 16).map_err(|_| bad())?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_identities: usize,
    pub pairs_per_identity: usize,
    /// Fraction of same-source pairs.
    pub mix: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_identities: 64,
            pairs_per_identity: 16,
            mix: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Training/sampling seeds of the ablation.
    pub seeds: Vec<u64>,
    /// Held-out same-source pairs scored per run.
    pub eval_easy: usize,
    /// Held-out cross-source pairs scored per run.
    pub eval_hard: usize,
    /// Identity-guidance scales of the sweep.
    pub sweep: Vec<f64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            eval_easy: 12,
            eval_hard: 24,
            sweep: vec![0.0, 1.0, 2.0, 4.0, 8.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed for the world and the dataset split.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub exec: ExecMode,
    pub world: WorldConfig,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            exec: ExecMode::Parallel,
            world: WorldConfig::default(),
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            eval: EvalSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.guidance.validate().map_err(|e| Error::Config(e.to_string()))?;
        let w = &self.world;
        let m = &self.model;
        if w.d_latent != m.d_model
            || w.audio_len != m.audio_len
            || w.ref_len != m.ref_len
            || w.video_grid != m.video_grid
            || w.n_env != m.n_env
            || w.n_style != m.n_style
            || w.n_scene != m.n_scene
        {
            return Err(Error::Config(
                "world and model disagree on latent width, sequence lengths, grid or vocabularies".into(),
            ));
        }
        if self.dataset.n_identities < 2 || self.dataset.pairs_per_identity == 0 {
            return Err(Error::Config("dataset needs ≥ 2 identities and ≥ 1 pair each".into()));
        }
        if !(0.0..=1.0).contains(&self.dataset.mix) {
            return Err(Error::Config(format!(
                "dataset.mix = {} is not a fraction",
                self.dataset.mix
            )));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Content hash of everything except the output location.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        fingerprint(&c)
    }

    pub fn world_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "world")
    }

    pub fn dataset_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "dataset")
    }
}
