//! Checkpoints: a JSON manifest next to a flat little-endian f64 binary blob
//! holding parameters followed by optimizer state. The manifest pins names,
//! shapes and a sha256 of the blob, so loads validate layout compatibility
//! and runs can be compared for bit-identical results by hash alone.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Optimizer, ParamStore};
use crate::rng::RngState;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub iteration: u64,
    pub params: Vec<ParamEntry>,
    /// Flattened optimizer state length ([t, m..., v...] for Adam); zero when
    /// no optimizer was saved.
    pub opt_state_len: usize,
    pub rng_states: BTreeMap<String, RngState>,
    /// Free-form stage metadata (configs, round indices, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub bin_sha256: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let mut json = stem.as_os_str().to_owned();
    json.push(".json");
    let mut bin = stem.as_os_str().to_owned();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn from_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Load("checkpoint blob length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Writes `<stem>.json` and `<stem>.bin`. Returns the manifest (including
/// the blob hash).
pub fn save_checkpoint(
    stem: &Path,
    ps: &ParamStore,
    optimizer: Option<&Optimizer>,
    iteration: u64,
    rng_states: BTreeMap<String, RngState>,
    extra: serde_json::Value,
) -> Result<CheckpointMeta> {
    let (json_path, bin_path) = paths(stem);
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }

    let mut flat = ps.flatten();
    let opt_state = optimizer.map(|o| o.state_flat()).unwrap_or_default();
    flat.extend_from_slice(&opt_state);
    let bytes = to_bytes(&flat);
    let hash = sha256_hex(&bytes);

    let meta = CheckpointMeta {
        format_version: 1,
        iteration,
        params: ps
            .iter()
            .map(|(name, arr)| ParamEntry {
                name: name.to_string(),
                shape: arr.shape().to_vec(),
            })
            .collect(),
        opt_state_len: opt_state.len(),
        rng_states,
        extra,
        bin_sha256: hash,
    };

    let mut f = fs::File::create(&bin_path)?;
    f.write_all(&bytes)?;
    fs::write(&json_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Loads manifest plus the two flat sections of the blob (parameters, then
/// optimizer state). Verifies the recorded hash.
pub fn load_checkpoint(stem: &Path) -> Result<(CheckpointMeta, Vec<f64>, Vec<f64>)> {
    // Accept either half of the pair in place of the stem.
    let stem = match stem.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => stem.with_extension(""),
        _ => stem.to_path_buf(),
    };
    let (json_path, bin_path) = paths(&stem);
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&json_path).map_err(
        |e| Error::Load(format!("cannot read {}: {e}", json_path.display())),
    )?)?;
    if meta.format_version != 1 {
        return Err(Error::Load(format!(
            "unsupported checkpoint format_version {}",
            meta.format_version
        )));
    }
    let mut bytes = Vec::new();
    fs::File::open(&bin_path)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", bin_path.display())))?
        .read_to_end(&mut bytes)?;
    if sha256_hex(&bytes) != meta.bin_sha256 {
        return Err(Error::Load(format!(
            "checkpoint blob {} does not match manifest hash",
            bin_path.display()
        )));
    }
    let flat = from_bytes(&bytes)?;
    let n_params: usize = meta.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if flat.len() != n_params + meta.opt_state_len {
        return Err(Error::Load(format!(
            "checkpoint blob holds {} values, manifest implies {}",
            flat.len(),
            n_params + meta.opt_state_len
        )));
    }
    let opt_state = flat[n_params..].to_vec();
    let params = flat[..n_params].to_vec();
    Ok((meta, params, opt_state))
}

/// Copies loaded parameter values into a freshly built store, insisting the
/// layouts agree exactly.
pub fn restore_params(ps: &mut ParamStore, meta: &CheckpointMeta, flat: &[f64]) -> Result<()> {
    let have: Vec<(String, Vec<usize>)> = ps
        .iter()
        .map(|(n, a)| (n.to_string(), a.shape().to_vec()))
        .collect();
    if have.len() != meta.params.len() {
        return Err(Error::Load(format!(
            "model has {} parameter tensors, checkpoint has {}",
            have.len(),
            meta.params.len()
        )));
    }
    for ((name, shape), entry) in have.iter().zip(&meta.params) {
        if name != &entry.name || shape != &entry.shape {
            return Err(Error::Load(format!(
                "parameter mismatch: model has {name} {shape:?}, checkpoint has {} {:?}",
                entry.name, entry.shape
            )));
        }
    }
    ps.unflatten(flat);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::det::{DetectorConfig, DetectorModel};
    use crate::nn::OptimKind;
    use crate::rng::{stream, StreamId};

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck/step_000010");

        let cfg = DetectorConfig::tiny(2);
        let mut ps = ParamStore::new();
        let mut rng = stream(11, StreamId::ModelInit);
        let _model = DetectorModel::build(&cfg, &mut ps, &mut rng).unwrap();
        let mut opt = Optimizer::new(OptimKind::default(), &ps);
        // advance optimizer state so it is nontrivial
        let grads = crate::nn::GradStore::zeros_like(&ps);
        opt.step(&mut ps, &grads, 1e-3);

        let mut rngs = BTreeMap::new();
        rngs.insert("train".to_string(), RngState::capture(&rng));
        let extra = serde_json::json!({"stage": "test"});
        let meta =
            save_checkpoint(&stem, &ps, Some(&opt), 10, rngs.clone(), extra).unwrap();

        let (meta2, params, opt_state) = load_checkpoint(&stem).unwrap();
        assert_eq!(meta.bin_sha256, meta2.bin_sha256);
        assert_eq!(meta2.iteration, 10);
        assert_eq!(meta2.rng_states, rngs);
        assert_eq!(params, ps.flatten());
        assert_eq!(opt_state, opt.state_flat());

        // restore into a freshly built (differently seeded) model
        let mut ps2 = ParamStore::new();
        let mut rng2 = stream(999, StreamId::ModelInit);
        let _ = DetectorModel::build(&cfg, &mut ps2, &mut rng2).unwrap();
        assert_ne!(ps2.flatten(), ps.flatten());
        restore_params(&mut ps2, &meta2, &params).unwrap();
        assert_eq!(ps2.flatten(), ps.flatten());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        let cfg = DetectorConfig::tiny(2);
        let mut ps = ParamStore::new();
        let mut rng = stream(1, StreamId::ModelInit);
        let _ = DetectorModel::build(&cfg, &mut ps, &mut rng).unwrap();
        save_checkpoint(&stem, &ps, None, 0, BTreeMap::new(), serde_json::Value::Null)
            .unwrap();

        let (meta, params, _) = load_checkpoint(&stem).unwrap();
        let cfg3 = DetectorConfig::tiny(3);
        let mut ps3 = ParamStore::new();
        let mut rng3 = stream(1, StreamId::ModelInit);
        let _ = DetectorModel::build(&cfg3, &mut ps3, &mut rng3).unwrap();
        assert!(restore_params(&mut ps3, &meta, &params).is_err());
    }

    #[test]
    fn tampered_blob_fails_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        let cfg = DetectorConfig::tiny(2);
        let mut ps = ParamStore::new();
        let mut rng = stream(1, StreamId::ModelInit);
        let _ = DetectorModel::build(&cfg, &mut ps, &mut rng).unwrap();
        save_checkpoint(&stem, &ps, None, 0, BTreeMap::new(), serde_json::Value::Null)
            .unwrap();
        let bin = stem.with_extension("bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&bin, &bytes).unwrap();
        assert!(load_checkpoint(&stem).is_err());
    }
}
