//! On-disk dataset: a JSON-lines manifest plus one little-endian f32 blob.
//!
//! Blob layout: 8-byte magic, `u32` version, 32-byte config fingerprint,
//! `u64` float count, then the floats. Manifest line 1 is a header; every
//! further line describes one pair and points into the blob by float offset.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, IdentitySpec, PairMode, PairSample, World, WorldConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BLOB_MAGIC: &[u8; 8] = b"AVDLATNT";
pub const DATASET_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.jsonl";
const BLOB: &str = "latents.bin";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    fingerprint: String,
    world: WorldConfig,
    world_seed: u64,
    blob: String,
    train_identities: Vec<u64>,
    test_identities: Vec<u64>,
}

/// `[offset, rows, cols]` into the blob, in floats.
type Span = [u64; 3];

#[derive(Serialize, Deserialize)]
struct Record {
    split: String,
    identity: IdentitySpec,
    target_identity: IdentitySpec,
    reference_identity: IdentitySpec,
    env: usize,
    style: usize,
    scene: usize,
    mode: PairMode,
    reference: Span,
    target_audio: Span,
    target_video: Span,
    first_frame: Span,
    reference_nuisance: Span,
    target_nuisance: Span,
}

fn fingerprint_bytes(hex: &str) -> Result<[u8; 32]> {
    crate::config::from_hex(hex)
}

pub fn export_dataset(dir: &Path, world: &World, dataset: &Dataset, fingerprint: &str) -> Result<()> {
    let fp = fingerprint_bytes(fingerprint)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut floats: Vec<f32> = Vec::new();
    let mut push = |data: &[f32], rows: usize, cols: usize| -> Span {
        let off = floats.len() as u64;
        floats.extend_from_slice(data);
        [off, rows as u64, cols as u64]
    };
    let mut lines = Vec::with_capacity(dataset.train.len() + dataset.test.len() + 1);
    lines.push(
        serde_json::to_string(&Header {
            format: "avdit-dataset".into(),
            version: DATASET_VERSION,
            fingerprint: fingerprint.to_string(),
            world: world.config.clone(),
            world_seed: world.seed,
            blob: BLOB.into(),
            train_identities: dataset.train_identities.clone(),
            test_identities: dataset.test_identities.clone(),
        })
        .map_err(|e| Error::InvalidArgument(e.to_string()))?,
    );
    for (split, pairs) in [("train", &dataset.train), ("test", &dataset.test)] {
        for p in pairs {
            let mut t = |x: &Tensor| push(x.data(), x.rows(), x.cols());
            let reference = t(&p.reference);
            let target_audio = t(&p.target_audio);
            let target_video = t(&p.target_video);
            let first_frame = t(&p.first_frame);
            let rec = Record {
                split: split.into(),
                identity: p.identity.clone(),
                target_identity: p.target_identity.clone(),
                reference_identity: p.reference_identity.clone(),
                env: p.env_code,
                style: p.style_code,
                scene: p.scene_code,
                mode: p.mode,
                reference,
                target_audio,
                target_video,
                first_frame,
                reference_nuisance: push(&p.reference_nuisance, 1, p.reference_nuisance.len()),
                target_nuisance: push(&p.target_nuisance, 1, p.target_nuisance.len()),
            };
            lines.push(serde_json::to_string(&rec).map_err(|e| Error::InvalidArgument(e.to_string()))?);
        }
    }

    let blob_path = dir.join(BLOB);
    let mut w = BufWriter::new(fs::File::create(&blob_path).map_err(|e| Error::io(&blob_path, e))?);
    let io = |e| Error::io(&blob_path, e);
    w.write_all(BLOB_MAGIC).map_err(io)?;
    w.write_all(&DATASET_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&fp).map_err(io)?;
    w.write_all(&(floats.len() as u64).to_le_bytes()).map_err(io)?;
    for v in &floats {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let man_path = dir.join(MANIFEST);
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(&man_path, text).map_err(|e| Error::io(&man_path, e))
}

fn read_blob(path: &Path, fingerprint: &[u8; 32]) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = |why: &str| Error::CorruptHeader(format!("{}: {why}", path.display()));
    if bytes.len() < 52 || &bytes[..8] != BLOB_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    if &bytes[12..44] != fingerprint {
        return Err(corrupt("fingerprint does not match the manifest"));
    }
    let count = u64::from_le_bytes(bytes[44..52].try_into().expect("8 bytes")) as usize;
    let body = &bytes[52..];
    if body.len() != count * 4 {
        return Err(corrupt("payload length disagrees with the header"));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// Reads a dataset written by [`export_dataset`], returning the rebuilt world,
/// the pairs and the recorded config fingerprint.
pub fn import_dataset(dir: &Path) -> Result<(World, Dataset, String)> {
    let man_path = dir.join(MANIFEST);
    let file = fs::File::open(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let mut lines = BufReader::new(file).lines();
    let corrupt = |why: String| Error::CorruptHeader(format!("{}: {why}", man_path.display()));
    let first = lines
        .next()
        .ok_or_else(|| corrupt("empty manifest".into()))?
        .map_err(|e| Error::io(&man_path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| corrupt(e.to_string()))?;
    if header.format != "avdit-dataset" {
        return Err(corrupt(format!("unknown format `{}`", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: DATASET_VERSION,
        });
    }
    let fp = fingerprint_bytes(&header.fingerprint).map_err(|e| corrupt(e.to_string()))?;
    let floats = read_blob(&dir.join(&header.blob), &fp)?;
    let tensor = |s: Span| -> Result<Tensor> {
        let [off, rows, cols] = s.map(|v| v as usize);
        let end = off
            .checked_add(rows * cols)
            .filter(|&e| e <= floats.len())
            .ok_or_else(|| corrupt(format!("span {s:?} outside the blob")))?;
        Tensor::new(vec![rows, cols], floats[off..end].to_vec())
    };
    let mut ds = Dataset {
        train: Vec::new(),
        test: Vec::new(),
        train_identities: header.train_identities,
        test_identities: header.test_identities,
    };
    for line in lines {
        let line = line.map_err(|e| Error::io(&man_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        let pair = PairSample {
            identity: r.identity,
            target_identity: r.target_identity,
            reference_identity: r.reference_identity,
            env_code: r.env,
            style_code: r.style,
            scene_code: r.scene,
            mode: r.mode,
            reference: tensor(r.reference)?,
            target_audio: tensor(r.target_audio)?,
            target_video: tensor(r.target_video)?,
            first_frame: tensor(r.first_frame)?,
            reference_nuisance: tensor(r.reference_nuisance)?.into_data(),
            target_nuisance: tensor(r.target_nuisance)?.into_data(),
        };
        match r.split.as_str() {
            "train" => ds.train.push(pair),
            "test" => ds.test.push(pair),
            other => return Err(corrupt(format!("unknown split `{other}`"))),
        }
    }
    let world = World::new(header.world, header.world_seed)?;
    Ok((world, ds, header.fingerprint))
}
