//! Checkpoint serialization: every parameter tensor plus the resolved
//! architecture, vocabulary, context table, step counter, and a hash of the
//! architecture for config-drift detection. JSON float round-trips are
//! exact, so a reloaded model reproduces forward outputs bit-for-bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::Vocab;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::model::{MdseModel, ModelArch};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: usize,
    pub arch: ModelArch,
    /// The full run configuration, so inference reuses the exact
    /// preprocessing settings the model was trained under.
    pub run: RunConfig,
    pub vocab: Vec<String>,
    pub contexts: Vec<String>,
    pub params: Vec<SavedParam>,
}

pub fn config_hash(arch: &ModelArch) -> Result<String> {
    let body = serde_json::to_vec(arch)?;
    let mut hasher = Sha256::new();
    hasher.update(&body);
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn snapshot(model: &MdseModel, run: &RunConfig, step: usize) -> Result<Checkpoint> {
    Ok(Checkpoint {
        config_hash: config_hash(&model.arch)?,
        step,
        arch: model.arch.clone(),
        run: run.clone(),
        vocab: model.vocab.tokens().to_vec(),
        contexts: model.contexts.clone(),
        params: model
            .store
            .iter()
            .map(|(_, p)| SavedParam {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable,
                data: p.tensor.to_f64_vec(),
            })
            .collect(),
    })
}

pub fn save(model: &MdseModel, run: &RunConfig, step: usize, path: &Path) -> Result<()> {
    let ck = snapshot(model, run, step)?;
    std::fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let body = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&body)?)
}

/// Rebuild the model skeleton from the stored architecture, then overwrite
/// every tensor by name. The stored and rebuilt parameter sets must agree
/// exactly.
pub fn restore(ck: &Checkpoint) -> Result<(MdseModel, usize)> {
    let expect_hash = config_hash(&ck.arch)?;
    if expect_hash != ck.config_hash {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: stored {}, recomputed {expect_hash}",
            ck.config_hash
        )));
    }
    let vocab = Vocab::from_tokens(ck.vocab.clone());
    let mut model = MdseModel::build(ck.arch.clone(), vocab, ck.contexts.clone())?;
    if ck.params.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, architecture builds {}",
            ck.params.len(),
            model.store.len()
        )));
    }
    for saved in &ck.params {
        let id = model.store.id(&saved.name).ok_or_else(|| {
            Error::Checkpoint(format!("unknown parameter {} in checkpoint", saved.name))
        })?;
        let p = model.store.get_mut(id);
        if p.tensor.shape() != saved.shape.as_slice() || p.trainable != saved.trainable {
            return Err(Error::Checkpoint(format!(
                "parameter {} mismatch: shape {:?} vs {:?}",
                saved.name,
                p.tensor.shape(),
                saved.shape
            )));
        }
        p.tensor = Tensor::from_f64(saved.shape.clone(), &saved.data)?;
    }
    Ok((model, ck.step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Vocab;
    use crate::harness::config::RunConfig;

    fn small_model(seed: u64) -> MdseModel {
        let vocab = Vocab::build(["a red circle in a tunnel"].into_iter());
        let mut cfg = RunConfig::default();
        cfg.train.seed = seed;
        let arch = cfg.resolved_arch(vocab.len());
        MdseModel::build(arch, vocab, vec!["tunnel".into()]).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(11);
        let path = dir.path().join("ck.json");
        save(&model, &RunConfig::default(), 37, &path).unwrap();
        let ck = load(&path).unwrap();
        let (restored, step) = restore(&ck).unwrap();
        assert_eq!(step, 37);
        assert_eq!(restored.store.len(), model.store.len());
        for ((_, a), (_, b)) in model.store.iter().zip(restored.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data(), "{} drifted", a.name);
        }
        assert_eq!(restored.contexts, model.contexts);
        assert_eq!(restored.vocab.tokens(), model.vocab.tokens());
    }

    #[test]
    fn tampered_hash_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(3);
        let path = dir.path().join("ck.json");
        save(&model, &RunConfig::default(), 0, &path).unwrap();
        let mut ck = load(&path).unwrap();
        ck.config_hash = "deadbeef".into();
        assert!(restore(&ck).is_err());
    }
}
