//! Run configuration: desk-scale defaults, a flat key=value config-file
//! format, and resolution into a concrete model architecture.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoder::{PoolMode, VitConfig};
use crate::enhance::EnhanceConfig;
use crate::error::{Error, Result};
use crate::lora::{LoraPlan, TargetSetting};
use crate::model::{AblationFlags, ModelArch, RegionConfig};
use crate::objectives::LossWeights;
use crate::qformer::QFormerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            batch_size: 16,
            steps: 200,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// The complete run configuration. The text-vocabulary sizes inside the
/// nested architecture configs are placeholders until `resolved_arch` fills
/// them from the actual corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub vit: VitConfig,
    pub qformer: QFormerConfig,
    pub decoder: DecoderConfig,
    pub enhance: EnhanceConfig,
    pub regions: RegionConfig,
    pub loss: LossWeights,
    pub lora: LoraPlan,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            vit: VitConfig::default(),
            qformer: QFormerConfig::default(),
            decoder: DecoderConfig::desk_default(3),
            enhance: EnhanceConfig::default(),
            regions: RegionConfig::default(),
            loss: LossWeights::default(),
            lora: LoraPlan::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Concrete architecture once the vocabulary size is known.
    pub fn resolved_arch(&self, vocab_size: usize) -> ModelArch {
        let mut qf = self.qformer.clone();
        qf.text_vocab = vocab_size;
        qf.visual_dim = self.vit.dim;
        let mut dec = self.decoder.clone();
        dec.vocab_size = vocab_size;
        ModelArch {
            vit: self.vit.clone(),
            qformer: qf,
            decoder: dec,
            lora: self.lora.clone(),
            init_seed: self.train.seed,
        }
    }

    /// Merge a flat key=value config file over the defaults.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let body = std::fs::read_to_string(path)?;
        for (lineno, line) in body.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    lineno + 1
                )));
            };
            self.apply_kv(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("cannot parse '{v}' for {key}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!("cannot parse '{v}' as flag for {key}"))),
            }
        }
        fn rank_alpha(key: &str, v: &str) -> Result<TargetSetting> {
            let Some((r, a)) = v.split_once('/') else {
                return Err(Error::Config(format!(
                    "{key} expects rank/alpha, e.g. 8/16, got '{v}'"
                )));
            };
            Ok(TargetSetting {
                rank: num(key, r.trim())?,
                alpha: num(key, a.trim())?,
            })
        }

        match key {
            "vit.image_size" => self.vit.image_size = num(key, value)?,
            "vit.patch_size" => self.vit.patch_size = num(key, value)?,
            "vit.depth" => self.vit.depth = num(key, value)?,
            "vit.dim" => self.vit.dim = num(key, value)?,
            "vit.heads" => self.vit.heads = num(key, value)?,
            "vit.mlp_ratio" => self.vit.mlp_ratio = num(key, value)?,

            "qformer.num_queries" => self.qformer.num_queries = num(key, value)?,
            "qformer.dim" => self.qformer.dim = num(key, value)?,
            "qformer.depth" => self.qformer.depth = num(key, value)?,
            "qformer.heads" => self.qformer.heads = num(key, value)?,
            "qformer.cross_attn_every" => self.qformer.cross_attn_every = num(key, value)?,
            "qformer.context_vocab" => self.qformer.context_vocab = num(key, value)?,
            "qformer.context_dim" => self.qformer.context_dim = num(key, value)?,
            "qformer.mlp_ratio" => self.qformer.mlp_ratio = num(key, value)?,
            "qformer.max_text_len" => self.qformer.max_text_len = num(key, value)?,

            "decoder.dim" => self.decoder.dim = num(key, value)?,
            "decoder.depth" => self.decoder.depth = num(key, value)?,
            "decoder.heads" => self.decoder.heads = num(key, value)?,
            "decoder.max_len" => self.decoder.max_len = num(key, value)?,
            "decoder.mlp_ratio" => self.decoder.mlp_ratio = num(key, value)?,

            "enhance.exposure_gammas" => {
                self.enhance.exposure_gammas = value
                    .split(',')
                    .map(|g| num("enhance.exposure_gammas", g.trim()))
                    .collect::<Result<_>>()?;
            }
            "enhance.wellexposedness_sigma" => {
                self.enhance.wellexposedness_sigma = num(key, value)?
            }
            "enhance.surround_radius" => {
                self.enhance.surround_radius = if value == "auto" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "enhance.contrast_gain" => self.enhance.contrast_gain = num(key, value)?,
            "enhance.wb_grayworld_power" => self.enhance.wb_grayworld_power = num(key, value)?,
            "enhance.wb_whitepoint_power" => self.enhance.wb_whitepoint_power = num(key, value)?,
            "enhance.saturation_gain" => self.enhance.saturation_gain = num(key, value)?,

            "regions.fallback_k" => self.regions.fallback_k = num(key, value)?,
            "regions.pool" => {
                self.regions.pool = match value {
                    "mean" => PoolMode::Mean,
                    "max" => PoolMode::Max,
                    _ => return Err(Error::Config(format!("regions.pool must be mean|max, got '{value}'"))),
                }
            }

            "loss.lambda_itc" => self.loss.lambda_itc = num(key, value)?,
            "loss.lambda_itm" => self.loss.lambda_itm = num(key, value)?,
            "loss.lambda_itg" => self.loss.lambda_itg = num(key, value)?,
            "loss.tau" => self.loss.tau = num(key, value)?,
            "loss.symmetric_itc" => self.loss.symmetric_itc = flag(key, value)?,

            "lora.qformer_attn" => self.lora.qformer_attn = rank_alpha(key, value)?,
            "lora.qformer_mlp" => self.lora.qformer_mlp = rank_alpha(key, value)?,
            "lora.decoder_projector" => self.lora.decoder_projector = rank_alpha(key, value)?,
            "lora.decoder_head" => {
                self.lora.decoder_head = if value == "none" {
                    None
                } else {
                    Some(rank_alpha(key, value)?)
                }
            }
            "lora.dropout" => self.lora.dropout_p = num(key, value)?,

            "train.seed" => self.train.seed = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.steps" => self.train.steps = num(key, value)?,
            "train.learning_rate" => self.train.learning_rate = num(key, value)?,
            "train.optimizer" => {
                self.train.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => {
                        return Err(Error::Config(format!(
                            "train.optimizer must be sgd|adam, got '{value}'"
                        )))
                    }
                }
            }
            "train.no_fe" => self.train.ablation.no_fe = flag(key, value)?,
            "train.no_sam" => self.train.ablation.no_sam = flag(key, value)?,
            "train.no_dual" => self.train.ablation.no_dual = flag(key, value)?,
            "train.no_context_gate" => self.train.ablation.no_context_gate = flag(key, value)?,

            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.vit.image_size, 32);
        assert_eq!(cfg.qformer.num_queries, 8);
        assert_eq!(cfg.decoder.dim, 64);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.loss.lambda_itc, 1.0);
        assert_eq!(cfg.loss.lambda_itm, 0.5);
        assert_eq!(cfg.loss.lambda_itg, 0.10);
    }

    #[test]
    fn config_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\n\
             train.steps = 50\n\
             loss.tau = 0.2\n\
             lora.qformer_attn = 8/16\n\
             lora.decoder_head = 4/8\n\
             enhance.exposure_gammas = 0.4, 1.0, 2.5\n\
             regions.pool = max\n\
             train.no_fe = true\n",
        )
        .unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.train.steps, 50);
        assert_eq!(cfg.loss.tau, 0.2);
        assert_eq!(cfg.lora.qformer_attn.rank, 8);
        assert_eq!(cfg.lora.qformer_attn.alpha, 16.0);
        assert_eq!(cfg.lora.decoder_head.unwrap().rank, 4);
        assert_eq!(cfg.enhance.exposure_gammas, vec![0.4, 1.0, 2.5]);
        assert_eq!(cfg.regions.pool, PoolMode::Max);
        assert!(cfg.train.ablation.no_fe);
    }

    #[test]
    fn unknown_key_names_itself() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "nope.nothing = 3\n").unwrap();
        let err = RunConfig::from_file(&path).unwrap_err().to_string();
        assert!(err.contains("nope.nothing"), "{err}");
    }

    #[test]
    fn resolved_arch_fills_vocab() {
        let cfg = RunConfig::default();
        let arch = cfg.resolved_arch(41);
        assert_eq!(arch.qformer.text_vocab, 41);
        assert_eq!(arch.decoder.vocab_size, 41);
        arch.validate().unwrap();
    }
}
