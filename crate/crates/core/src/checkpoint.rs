//! Checkpoint files.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, 32-byte config
//! fingerprint, `u64` training step, `u32` parameter count, then per
//! parameter a length-prefixed name, `u32` rank, `u64` dims and the f32 data.
//! An optional optimizer section follows (flag byte, then per tensor the name,
//! step, first and second moments), and a SHA-256 of everything before it
//! closes the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{from_hex, to_hex};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{AdamW, AdamWConfig, OptimState, Tensor};
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AVDCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Hex fingerprint of the config that produced the checkpoint.
    pub fingerprint: String,
    pub step: u64,
    /// Every model parameter (frozen base, adapters, conditioning pathway).
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Option<BTreeMap<String, OptimState>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, fingerprint: &str, step: u64, optimizer: Option<&AdamW>) -> Self {
        Self {
            fingerprint: fingerprint.to_string(),
            step,
            params: model
                .named_parameters()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            optimizer: optimizer.map(|o| o.states.clone()),
        }
    }

    /// Builds a model of `config` holding exactly the stored parameters;
    /// shape or name disagreements are reported, never silently bound.
    pub fn bind(&self, config: ModelConfig) -> Result<Model> {
        let mut model = Model::init(config, &mut rng::stream(0, "checkpoint-bind"))?;
        model.load_parameters(&self.params)?;
        Ok(model)
    }

    /// Optimizer with the stored moments, or fresh if none were saved.
    pub fn optimizer(&self, config: AdamWConfig) -> Result<AdamW> {
        let mut opt = AdamW::new(config)?;
        if let Some(states) = &self.optimizer {
            opt.states = states.clone();
        }
        Ok(opt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&from_hex(&self.fingerprint)?);
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_name(&mut b, name);
            put_tensor(&mut b, t);
        }
        match &self.optimizer {
            None => b.push(0),
            Some(states) => {
                b.push(1);
                b.extend_from_slice(&(states.len() as u32).to_le_bytes());
                for (name, s) in states {
                    put_name(&mut b, name);
                    b.extend_from_slice(&s.step.to_le_bytes());
                    put_tensor(&mut b, &s.m);
                    put_tensor(&mut b, &s.v);
                }
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::CorruptHeader("checkpoint magic missing".into()));
        }
        let mut r = Reader { bytes, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 8 + 4 + 32 {
            return Err(Error::CorruptHeader("checkpoint truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::CorruptHeader(
                "checkpoint checksum mismatch (truncated or damaged)".into(),
            ));
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let fingerprint = to_hex(r.take(32)?);
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..n {
            let name = r.name()?;
            params.insert(name, r.tensor()?);
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let n = r.u32()? as usize;
                let mut states = BTreeMap::new();
                for _ in 0..n {
                    let name = r.name()?;
                    let step = r.u64()?;
                    let m = r.tensor()?;
                    let v = r.tensor()?;
                    states.insert(name, OptimState { m, v, step });
                }
                Some(states)
            }
            f => return Err(Error::CorruptHeader(format!("unknown optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(Error::CorruptHeader("trailing bytes after checkpoint body".into()));
        }
        Ok(Self {
            fingerprint,
            step,
            params,
            optimizer,
        })
    }
}

fn put_name(b: &mut Vec<u8>, name: &str) {
    b.extend_from_slice(&(name.len() as u32).to_le_bytes());
    b.extend_from_slice(name.as_bytes());
}

fn put_tensor(b: &mut Vec<u8>, t: &Tensor) {
    b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        b.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptHeader(format!("checkpoint ends inside a record at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CorruptHeader("parameter name is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::CorruptHeader(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::CorruptHeader("tensor size overflows".into()))?;
        let data = self
            .take(count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FP: &str = "ffeeddccbbaa99887766554433221100ffeeddccbbaa99887766554433221100";

    fn model() -> Model {
        let mut m = Model::init(ModelConfig::default(), &mut rng::stream(5, "model-init")).unwrap();
        crate::diffusion::jitter_trainable(&mut m, 0.1, &mut rng::stream(5, "j"));
        m
    }

    fn bits(m: &Model) -> Vec<(String, Vec<u32>)> {
        m.named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn roundtrip_is_bit_exact_with_and_without_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        let name = m.trainable_names()[0].clone();
        let mut p = m.param(&name).unwrap().clone();
        let g = p.map(|v| v * 0.5 + 0.1);
        opt.step(&name, &mut p, &g).unwrap();
        for o in [None, Some(&opt)] {
            let ck = Checkpoint::from_model(&m, FP, 17, o);
            let path = dir.path().join("m.ckpt");
            save_checkpoint(&ck, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.step, 17);
            assert_eq!(back.fingerprint, FP);
            let bound = back.bind(ModelConfig::default()).unwrap();
            assert_eq!(bits(&bound), bits(&m));
            assert_eq!(bound, m);
            let restored = back.optimizer(AdamWConfig::default()).unwrap();
            assert_eq!(restored.states.len(), o.map_or(0, |o| o.states.len()));
        }
    }

    #[test]
    fn damaged_files_are_rejected_with_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let good = Checkpoint::from_model(&model(), FP, 1, None).to_bytes().unwrap();

        for cut in [good.len() - 1, good.len() / 2, 40, 10, 3] {
            fs::write(&path, &good[..cut]).unwrap();
            assert!(
                matches!(load_checkpoint(&path), Err(Error::CorruptHeader(_))),
                "cut {cut}"
            );
        }
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CorruptHeader(_))));
        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::VersionMismatch { found: 9, expected: 1 })
        ));
        let mut bad = good.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CorruptHeader(_))));
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
        let codes: Vec<i32> = [
            Error::CorruptHeader(String::new()),
            Error::VersionMismatch { found: 0, expected: 1 },
            Error::CheckpointShape(String::new()),
        ]
        .iter()
        .map(Error::exit_code)
        .collect();
        assert_eq!(codes, [4, 5, 6]);
    }

    #[test]
    fn binding_to_a_different_width_is_a_shape_error() {
        let small = ModelConfig {
            d_model: 32,
            video_rotary_dim: 6,
            ..ModelConfig::default()
        };
        let m = Model::init(small, &mut rng::stream(0, "model-init")).unwrap();
        let ck = Checkpoint::from_model(&m, FP, 0, None);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let err = back.bind(ModelConfig::default()).unwrap_err();
        assert!(
            matches!(err, Error::CheckpointShape(ref s) if s.contains("shape")),
            "{err}"
        );
    }
}
