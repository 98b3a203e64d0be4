//! Directory checkpoints: `meta.json`, `manifest.json` (name → shape) and one
//! little-endian f32 file per parameter.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::nn::{Params, Tensor};

pub const SCHEMA_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub module: String,
    pub config_hash: String,
    /// Upstream module name → the `params_digest` it was built against.
    pub upstream: BTreeMap<String, String>,
    pub schema_version: u32,
    pub params_digest: String,
    /// Module-specific settings needed to rebuild the model.
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(module: &str, config_hash: String, extra: serde_json::Value) -> Self {
        Self {
            module: module.to_string(),
            config_hash,
            upstream: BTreeMap::new(),
            schema_version: SCHEMA_VERSION,
            params_digest: String::new(),
            extra,
        }
    }

    pub fn with_upstream(mut self, module: &str, digest: &str) -> Self {
        self.upstream.insert(module.to_string(), digest.to_string());
        self
    }
}

fn param_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &Params<f32>,
    meta: &CheckpointMeta,
) -> Result<CheckpointMeta> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).at(dir)?;
    let mut manifest = BTreeMap::new();
    for (name, t) in params.iter() {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let p = param_file(dir, name);
        std::fs::write(&p, bytes).at(&p)?;
        manifest.insert(name.clone(), t.shape().to_vec());
    }
    let mp = dir.join(MANIFEST_FILE);
    std::fs::write(&mp, serde_json::to_string_pretty(&manifest)?).at(&mp)?;
    let mut meta = meta.clone();
    meta.schema_version = SCHEMA_VERSION;
    meta.params_digest = params.digest();
    let metap = dir.join(META_FILE);
    std::fs::write(&metap, serde_json::to_string_pretty(&meta)?).at(&metap)?;
    Ok(meta)
}

pub fn read_meta(dir: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let dir = dir.as_ref();
    let metap = dir.join(META_FILE);
    let text = std::fs::read_to_string(&metap).at(&metap)?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: metap.clone(),
        reason: format!("corrupt meta: {e}"),
    })?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            path: metap,
            found: meta.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(meta)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Params<f32>, CheckpointMeta)> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let mp = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mp).at(&mp)?;
    let manifest: BTreeMap<String, Vec<usize>> =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
            path: mp.clone(),
            reason: format!("corrupt manifest: {e}"),
        })?;
    let mut params = Params::new();
    for (name, shape) in manifest {
        let p = param_file(dir, &name);
        let bytes = std::fs::read(&p).at(&p)?;
        let want = shape.iter().product::<usize>() * 4;
        if bytes.len() != want {
            return Err(Error::Checkpoint {
                path: p,
                reason: format!(
                    "parameter `{name}` has {} bytes, shape {shape:?} needs {want}",
                    bytes.len()
                ),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::new(shape, data));
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Params<f32> {
        let mut p = Params::new();
        p.insert(
            "a.w",
            Tensor::new(
                vec![2, 3],
                vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25],
            ),
        );
        p.insert("b", Tensor::new(vec![1], vec![0.1]));
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = sample();
        let meta = save_checkpoint(
            dir.path(),
            &p,
            &CheckpointMeta::new("x", "h".into(), serde_json::json!({"k": 1})),
        )
        .unwrap();
        let (q, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m, meta);
        for ((n1, t1), (n2, t2)) in p.iter().zip(q.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
        assert_eq!(m.params_digest, q.digest());
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(
            dir.path(),
            &sample(),
            &CheckpointMeta::new("x", "h".into(), serde_json::Value::Null),
        )
        .unwrap();
        let f = dir.path().join("a.w.bin");
        let bytes = std::fs::read(&f).unwrap();
        std::fs::write(&f, &bytes[..10]).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("a.w"), "{err}");
        std::fs::write(&f, bytes).unwrap();
        let metap = dir.path().join(META_FILE);
        let text = std::fs::read_to_string(&metap)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 99");
        std::fs::write(&metap, text).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::SchemaVersion { found: 99, .. })
        ));
        std::fs::write(dir.path().join(MANIFEST_FILE), "{ nope").unwrap();
        std::fs::write(
            &metap,
            serde_json::to_string(&CheckpointMeta::new(
                "x",
                "h".into(),
                serde_json::Value::Null,
            ))
            .unwrap(),
        )
        .unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Checkpoint { .. })
        ));
    }
}
