//! Checkpoints: a manifest document plus one raw little-endian blob per
//! tensor. Save → load → re-save is byte-identical; loads validate shapes
//! and sizes against the live manifest and refuse config-hash drift unless
//! explicitly overridden.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorMeta {
    pub path: String,
    pub shape: Vec<usize>,
    pub module: String,
    pub kind: String,
    pub trainable: bool,
    pub file: String,
    pub byte_len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub stage: usize,
    pub step: usize,
    pub config_hash: String,
    pub dtype: String,
    pub tensors: Vec<TensorMeta>,
}

pub fn save<T: Real>(
    dir: &Path,
    store: &ParamStore<T>,
    stage: usize,
    step: usize,
    config_hash: u64,
) -> Result<()> {
    let tensor_dir = dir.join("tensors");
    std::fs::create_dir_all(&tensor_dir)?;
    let mut tensors = Vec::with_capacity(store.len());
    for e in store.entries() {
        let file = format!("tensors/{}.bin", e.decl.path);
        let mut bytes = Vec::with_capacity(e.data.len() * T::byte_len());
        for v in &e.data {
            bytes.extend_from_slice(&v.to_le_bytes_vec());
        }
        std::fs::write(dir.join(&file), &bytes)?;
        tensors.push(TensorMeta {
            path: e.decl.path.clone(),
            shape: e.decl.shape.clone(),
            module: e.decl.module.as_str().to_string(),
            kind: e.decl.kind.as_str().to_string(),
            trainable: e.trainable,
            file,
            byte_len: bytes.len() as u64,
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        stage,
        step,
        config_hash: format!("{config_hash:016x}"),
        dtype: T::dtype_name().to_string(),
        tensors,
    };
    let mut f = std::fs::File::create(dir.join("manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load tensor data into an existing store. Returns the manifest; a
/// config-hash mismatch is an error unless `allow_config_mismatch`, in
/// which case the caller is expected to surface the warning.
pub fn load<T: Real>(
    dir: &Path,
    store: &mut ParamStore<T>,
    config_hash: u64,
    allow_config_mismatch: bool,
) -> Result<CheckpointManifest> {
    let manifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointLoad {
            path: "manifest.json".into(),
            detail: format!("format version {}", manifest.format_version),
        });
    }
    if manifest.dtype != T::dtype_name() {
        return Err(Error::CheckpointLoad {
            path: "manifest.json".into(),
            detail: format!("dtype {} vs runtime {}", manifest.dtype, T::dtype_name()),
        });
    }
    let expected = format!("{config_hash:016x}");
    if manifest.config_hash != expected && !allow_config_mismatch {
        return Err(Error::CheckpointLoad {
            path: "manifest.json".into(),
            detail: format!(
                "config hash {} does not match effective config {expected}; pass the override to load anyway",
                manifest.config_hash
            ),
        });
    }
    if manifest.tensors.len() != store.len() {
        return Err(Error::CheckpointLoad {
            path: "manifest.json".into(),
            detail: format!(
                "checkpoint has {} tensors, model has {}",
                manifest.tensors.len(),
                store.len()
            ),
        });
    }
    for meta in &manifest.tensors {
        let id = store
            .find(&meta.path)
            .ok_or_else(|| Error::CheckpointLoad {
                path: meta.path.clone(),
                detail: "tensor not in model manifest".into(),
            })?;
        if store.entry(id).decl.shape != meta.shape {
            return Err(Error::CheckpointLoad {
                path: meta.path.clone(),
                detail: format!(
                    "shape {:?} vs model {:?}",
                    meta.shape,
                    store.entry(id).decl.shape
                ),
            });
        }
        let bytes = std::fs::read(dir.join(&meta.file))?;
        let expect_len = store.data(id).len() * T::byte_len();
        if bytes.len() != expect_len {
            return Err(Error::CheckpointLoad {
                path: meta.path.clone(),
                detail: format!("blob is {} bytes, expected {expect_len}", bytes.len()),
            });
        }
        let data = store.data_mut(id);
        for (i, chunk) in bytes.chunks_exact(T::byte_len()).enumerate() {
            data[i] = T::from_le_slice(chunk);
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::model::Model;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("mqe_align_ckpt_{name}"));
        std::fs::remove_dir_all(&dir).ok();
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut paths = Vec::new();
        fn walk(d: &Path, out: &mut Vec<std::path::PathBuf>) {
            for e in std::fs::read_dir(d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    walk(&p, out);
                } else {
                    out.push(p);
                }
            }
        }
        walk(dir, &mut paths);
        paths.sort();
        paths
            .into_iter()
            .map(|p| {
                (
                    p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn save_load_resave_is_byte_identical() {
        let cfg = Config::desk();
        let mut model = Model::<f32>::new(&cfg).unwrap();
        let d1 = tmp("roundtrip_a");
        let d2 = tmp("roundtrip_b");
        save(&d1, &model.store, 2, 300, cfg.raw.hash()).unwrap();
        let manifest = load(&d1, &mut model.store, cfg.raw.hash(), false).unwrap();
        assert_eq!(manifest.stage, 2);
        assert_eq!(manifest.step, 300);
        save(&d2, &model.store, 2, 300, cfg.raw.hash()).unwrap();
        assert_eq!(read_tree(&d1), read_tree(&d2));
        std::fs::remove_dir_all(&d1).ok();
        std::fs::remove_dir_all(&d2).ok();
    }

    #[test]
    fn truncated_blob_names_tensor() {
        let cfg = Config::desk();
        let mut model = Model::<f32>::new(&cfg).unwrap();
        let dir = tmp("truncated");
        save(&dir, &model.store, 1, 1, cfg.raw.hash()).unwrap();
        let victim = dir.join("tensors/mproj.layer1.w.bin");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        match load(&dir, &mut model.store, cfg.raw.hash(), false) {
            Err(Error::CheckpointLoad { path, .. }) => assert_eq!(path, "mproj.layer1.w"),
            other => panic!("expected load error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn config_hash_mismatch_requires_override() {
        let cfg = Config::desk();
        let mut model = Model::<f32>::new(&cfg).unwrap();
        let dir = tmp("hash");
        save(&dir, &model.store, 1, 1, 0xDEAD).unwrap();
        assert!(load(&dir, &mut model.store, 0xBEEF, false).is_err());
        assert!(load(&dir, &mut model.store, 0xBEEF, true).is_ok());
        std::fs::remove_dir_all(&dir).ok();
    }
}
