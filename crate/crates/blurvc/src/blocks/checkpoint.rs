//! Versioned model checkpoints.
//!
//! Layout: 4-byte magic `BVCK`, 1-byte format version, then a bincode body
//! holding the architecture config, every parameter tensor (name, shape,
//! values, sorted by name), the observed latent ranges, and the iteration
//! counter. The body bytes also define the model identity: `model_id` is the
//! first 8 bytes of their SHA-256, so any weight change yields a new id and
//! bitstreams can be checked against the model that must decode them.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BlockConfig, Model, ObservedRanges, ParamStore};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"BVCK";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Body {
    config: BlockConfig,
    params: Vec<(String, Vec<usize>, Vec<f64>)>,
    observed: Vec<(String, Vec<i64>, Vec<i64>)>,
    iteration: u64,
}

fn body_of(model: &Model) -> Body {
    let params = model
        .store
        .iter()
        .map(|(name, v)| {
            (name.clone(), v.shape().to_vec(), v.iter().copied().collect::<Vec<f64>>())
        })
        .collect();
    let observed = model
        .observed
        .iter()
        .map(|(k, (lo, hi))| (k.clone(), lo.clone(), hi.clone()))
        .collect();
    Body { config: model.config.clone(), params, observed, iteration: model.iteration }
}

fn body_bytes(model: &Model) -> Vec<u8> {
    bincode::serialize(&body_of(model)).expect("checkpoint body serialization cannot fail")
}

/// 64-bit identity of the model's current weights: the first 8 bytes of the
/// SHA-256 of the serialized body, little-endian.
pub fn model_id(model: &Model) -> u64 {
    let digest = Sha256::digest(body_bytes(model));
    u64::from_le_bytes(digest[0..8].try_into().unwrap())
}

/// Write a checkpoint atomically (temp file in the target directory, then
/// rename), so a crash never leaves a half-written file at `path`.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let io = |e: std::io::Error| Error::io(path, e);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(MAGIC).map_err(io)?;
    tmp.write_all(&[VERSION]).map_err(io)?;
    tmp.write_all(&body_bytes(model)).map_err(io)?;
    tmp.flush().map_err(io)?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Read a checkpoint back. Rejects wrong magic or version as a format error
/// and name/shape inconsistencies as a model mismatch.
pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 5 || &bytes[0..4] != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (expected {VERSION})",
            bytes[4]
        )));
    }
    let body: Body = bincode::deserialize(&bytes[5..])
        .map_err(|e| Error::Format(format!("corrupt checkpoint body: {e}")))?;

    // A freshly built model defines the authoritative parameter set for this
    // config; the stored tensors must match it exactly.
    let reference = Model::new(body.config.clone(), 0);
    let mut store = ParamStore::default();
    for (name, shape, values) in body.params {
        let expect = reference
            .store
            .map
            .get(&name)
            .ok_or_else(|| Error::ModelMismatch(format!("unexpected parameter {name}")))?;
        if expect.shape() != shape.as_slice() {
            return Err(Error::ModelMismatch(format!(
                "parameter {name} has shape {shape:?}, expected {:?}",
                expect.shape()
            )));
        }
        let arr = ndarray::ArrayD::from_shape_vec(shape, values)
            .map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
        store.insert(&name, arr);
    }
    if store.len() != reference.store.len() {
        let missing: Vec<&String> =
            reference.store.names().filter(|n| !store.map.contains_key(*n)).collect();
        return Err(Error::ModelMismatch(format!("missing parameters: {missing:?}")));
    }

    let mut observed = ObservedRanges::new();
    for (k, lo, hi) in body.observed {
        observed.insert(k, (lo, hi));
    }
    Ok(Model { config: body.config, store, observed, iteration: body.iteration })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::LatentKind;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = Model::new(BlockConfig::tiny(), 17);
        model.iteration = 4242;
        let vals = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[3, 2, 2]), 5.0);
        model.update_observed(LatentKind::Intra, &vals);

        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();

        assert_eq!(loaded.iteration, 4242);
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.observed, model.observed);
        for (name, v) in model.store.iter() {
            let lv = loaded.store.get(name);
            assert_eq!(v, lv, "{name} not bit-exact after round trip");
        }
        assert_eq!(model_id(&model), model_id(&loaded));
    }

    #[test]
    fn id_changes_with_weights_and_iteration_does_too() {
        let a = Model::new(BlockConfig::tiny(), 17);
        let mut b = a.clone();
        b.store.get_mut("venet.entry.w")[[0, 0, 0, 0]] += 1e-9;
        assert_ne!(model_id(&a), model_id(&b), "weight change must change the id");
        let mut c = a.clone();
        c.iteration = 1;
        assert_ne!(model_id(&a), model_id(&c));
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::new(BlockConfig::tiny(), 17);
        save(&model, &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[4] = 99;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));

        fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));

        fs::write(&path, b"BV").unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_parameter_set_mismatch() {
        // A checkpoint saved under one config cannot be loaded as another
        // (different widths -> different shapes).
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::new(BlockConfig::tiny(), 17);
        save(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let mut body: Body = bincode::deserialize(&bytes[5..]).unwrap();
        body.params.retain(|(name, _, _)| name != "mcnet.head.w");
        let mut rewritten = bytes[..5].to_vec();
        rewritten.extend(bincode::serialize(&body).unwrap());
        fs::write(&path, rewritten).unwrap();
        assert!(matches!(load(&path), Err(Error::ModelMismatch(_))));
    }
}
