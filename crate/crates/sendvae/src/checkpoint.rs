//! Checkpoint directories: one SVTF file per parameter tensor plus a JSON
//! manifest carrying names, config payloads and integrity checksums.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::svtf;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Parameter names in store order; entry `i` lives in `p{i:04}.svtf`.
    pub param_names: Vec<String>,
    pub checksum: String,
    pub step: u64,
    pub seed: u64,
    pub has_optimizer_state: bool,
    /// Module-specific configuration blob.
    pub meta: serde_json::Value,
}

pub fn save(
    dir: impl AsRef<Path>,
    store: &ParamStore<f32>,
    opt_state: Option<(&[ndarray::ArrayD<f32>], &[ndarray::ArrayD<f32>], u64)>,
    step: u64,
    seed: u64,
    meta: serde_json::Value,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for (i, (name, value)) in store.iter().enumerate() {
        names.push(name.to_string());
        svtf::write(
            dir.join(format!("p{i:04}.svtf")),
            &svtf::Tensor::F32(value.clone()),
        )?;
    }
    if let Some((m, v, opt_step)) = opt_state {
        for (i, t) in m.iter().enumerate() {
            svtf::write(dir.join(format!("m{i:04}.svtf")), &svtf::Tensor::F32(t.clone()))?;
        }
        for (i, t) in v.iter().enumerate() {
            svtf::write(dir.join(format!("v{i:04}.svtf")), &svtf::Tensor::F32(t.clone()))?;
        }
        std::fs::write(dir.join("opt_step"), opt_step.to_string())?;
    }
    let manifest = CheckpointManifest {
        param_names: names,
        checksum: store.checksum(),
        step,
        seed,
        has_optimizer_state: opt_state.is_some(),
        meta,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let text = std::fs::read_to_string(dir.as_ref().join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load(dir: impl AsRef<Path>) -> Result<(ParamStore<f32>, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let mut store = ParamStore::new();
    for (i, name) in manifest.param_names.iter().enumerate() {
        let t = svtf::read(dir.join(format!("p{i:04}.svtf")))?;
        store.insert(name.clone(), t.as_f32()?.clone());
    }
    let actual = store.checksum();
    if actual != manifest.checksum {
        return Err(Error::Data(format!(
            "checkpoint checksum mismatch in {}: manifest {} vs tensors {}",
            dir.display(),
            manifest.checksum,
            actual
        )));
    }
    Ok((store, manifest))
}

/// Loads AdamW moment tensors saved alongside the parameters.
pub fn load_opt_state(
    dir: impl AsRef<Path>,
    n: usize,
) -> Result<(Vec<ndarray::ArrayD<f32>>, Vec<ndarray::ArrayD<f32>>, u64)> {
    let dir = dir.as_ref();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        m.push(svtf::read(dir.join(format!("m{i:04}.svtf")))?.as_f32()?.clone());
        v.push(svtf::read(dir.join(format!("v{i:04}.svtf")))?.as_f32()?.clone());
    }
    let step: u64 = std::fs::read_to_string(dir.join("opt_step"))?
        .trim()
        .parse()
        .map_err(|e| Error::Data(format!("bad opt_step: {e}")))?;
    Ok((m, v, step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_init;

    #[test]
    fn roundtrip_preserves_params_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.insert("a.w", normal_init(1, "a.w", &[3, 2], 1.0));
        store.insert("b.w", normal_init(1, "b.w", &[4], 1.0));
        save(dir.path(), &store, None, 7, 42, serde_json::json!({"kind": "test"})).unwrap();

        let (back, manifest) = load(dir.path()).unwrap();
        assert_eq!(manifest.step, 7);
        assert_eq!(back.checksum(), store.checksum());

        // corrupt one tensor; checksum verification must fail
        let mut tampered = store.get("a.w").clone();
        tampered[[0, 0]] += 1.0;
        svtf::write(
            dir.path().join("p0000.svtf"),
            &svtf::Tensor::F32(tampered),
        )
        .unwrap();
        assert!(load(dir.path()).is_err());
    }
}
