//! Whole-model assembly: shared parameter store, the four network modules,
//! the vocabulary and context-category table, plus the visual preprocessing
//! front end (enhance, mask, dual-encode) shared by training and inference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderModule, Vocab};
use crate::encoder::{fuse, FusionModule, PoolMode, VitConfig, VitModule};
use crate::enhance::{enhance, EnhanceConfig};
use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::lora::{LoraAdapter, LoraLinear, LoraPlan};
use crate::params::{Binding, ParamStore};
use crate::qformer::{ContextSignal, GatingMode, QFormerConfig, QFormerModule};
use crate::regions::{self, MaskSource, RegionMaskSet};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Region-supply settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionConfig {
    /// How many fallback proposals to keep when no masks are on disk.
    pub fallback_k: usize,
    pub pool: PoolMode,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig {
            fallback_k: 2,
            pool: PoolMode::Mean,
        }
    }
}

/// Single-removal ablation switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Skip the enhancement front end.
    pub no_fe: bool,
    /// Zero region pathway: no masks at all, fusion kept.
    pub no_sam: bool,
    /// Drop the fusion entirely; the query transformer sees the global
    /// pathway only.
    pub no_dual: bool,
    /// Plain cross-attention instead of the context gate.
    pub no_context_gate: bool,
}

impl AblationFlags {
    pub fn gating_mode(&self) -> GatingMode {
        if self.no_context_gate {
            GatingMode::Disabled
        } else {
            GatingMode::Gated
        }
    }
}

/// Fully-resolved architecture; everything needed to rebuild the parameter
/// skeleton deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArch {
    pub vit: VitConfig,
    pub qformer: QFormerConfig,
    pub decoder: DecoderConfig,
    pub lora: LoraPlan,
    pub init_seed: u64,
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.qformer.validate()?;
        self.decoder.validate()?;
        if self.qformer.text_vocab != self.decoder.vocab_size {
            return Err(Error::Config(format!(
                "query-transformer text vocab {} != decoder vocab {}",
                self.qformer.text_vocab, self.decoder.vocab_size
            )));
        }
        if self.qformer.visual_dim != self.vit.dim {
            return Err(Error::Config(format!(
                "fused width {} must match encoder dim {}",
                self.qformer.visual_dim, self.vit.dim
            )));
        }
        Ok(())
    }
}

pub struct MdseModel {
    pub store: ParamStore<f64>,
    pub vit: VitModule,
    pub fusion: FusionModule,
    pub qformer: QFormerModule,
    pub decoder: DecoderModule,
    pub vocab: Vocab,
    /// Sorted category names; index is the context id.
    pub contexts: Vec<String>,
    pub arch: ModelArch,
}

impl MdseModel {
    /// Deterministic construction from the architecture and seed.
    pub fn build(arch: ModelArch, vocab: Vocab, contexts: Vec<String>) -> Result<MdseModel> {
        arch.validate()?;
        if vocab.len() != arch.decoder.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, architecture expects {}",
                vocab.len(),
                arch.decoder.vocab_size
            )));
        }
        if contexts.len() > arch.qformer.context_vocab {
            return Err(Error::Config(format!(
                "{} context categories exceed context_vocab {}",
                contexts.len(),
                arch.qformer.context_vocab
            )));
        }
        let mut rng = Rng::seed_from_u64(arch.init_seed);
        let mut store = ParamStore::new();
        let vit = VitModule::new(&mut store, arch.vit.clone(), false, &mut rng)?;
        let fusion =
            FusionModule::new(&mut store, arch.vit.dim, arch.qformer.visual_dim, &mut rng)?;
        let qformer = QFormerModule::new(
            &mut store,
            arch.qformer.clone(),
            arch.lora.spec(arch.lora.qformer_attn),
            arch.lora.spec(arch.lora.qformer_mlp),
            &mut rng,
        )?;
        let projector = {
            let base = LoraLinear::frozen_base(
                &mut store,
                "decoder.proj.w",
                arch.qformer.dim,
                arch.decoder.dim,
                &mut rng,
            )?;
            let spec = arch.lora.spec(arch.lora.decoder_projector);
            let adapter = LoraAdapter::init(
                &mut store,
                "decoder.proj",
                arch.qformer.dim,
                arch.decoder.dim,
                spec.rank,
                spec.alpha,
                spec.dropout_p,
                &mut rng,
            )?;
            LoraLinear::new(base, Some(adapter))
        };
        let head_adapter = arch.lora.decoder_head.map(|s| arch.lora.spec(s));
        let decoder = DecoderModule::new(
            &mut store,
            arch.decoder.clone(),
            arch.qformer.dim,
            projector,
            head_adapter,
            &mut rng,
        )?;
        Ok(MdseModel {
            store,
            vit,
            fusion,
            qformer,
            decoder,
            vocab,
            contexts,
            arch,
        })
    }

    pub fn context_signal(&self, category: &str) -> Result<ContextSignal> {
        match self.contexts.iter().position(|c| c == category) {
            Some(id) => Ok(ContextSignal { category_id: id }),
            None => Err(Error::Contract(format!(
                "unknown context category '{category}'; known: {:?}",
                self.contexts
            ))),
        }
    }

    /// Trainable parameter count, grouped by component.
    pub fn trainable_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (_, p) in self.store.iter() {
            if !p.trainable {
                continue;
            }
            let group = if p.name.contains(".lora_") {
                "lora_adapters"
            } else if p.name.starts_with("qformer.queries") {
                "queries"
            } else if p.name.starts_with("qformer.gate") {
                "context_gates"
            } else if p.name.starts_with("qformer.ctx_") {
                "context_projector"
            } else if p.name.starts_with("fusion.") {
                "fusion"
            } else if p.name.starts_with("qformer.itm") {
                "itm_head"
            } else if p.name.starts_with("decoder.head") {
                "decoder_head"
            } else {
                "other"
            };
            match groups.iter_mut().find(|(g, _)| g == group) {
                Some((_, n)) => *n += p.tensor.numel(),
                None => groups.push((group.to_string(), p.tensor.numel())),
            }
        }
        groups
    }
}

/// Cached visual front end for one image: the two encoder pathway outputs
/// plus where the masks came from. Valid as a cache because the encoder is
/// frozen.
#[derive(Debug, Clone)]
pub struct PreparedVisual {
    pub e_g: Tensor<f64>,
    pub e_s: Tensor<f64>,
    pub mask_source: Option<MaskSource>,
}

/// Run enhancement, mask supply, and the frozen dual-pathway encoder for one
/// image. `mask_dir` is consulted first; a missing or empty directory falls
/// back to the built-in proposer (unless the region pathway is ablated).
pub fn prepare_visual(
    model: &MdseModel,
    image: &RgbImage<f64>,
    image_id: &str,
    mask_dir: Option<&Path>,
    enhance_cfg: &EnhanceConfig,
    region_cfg: &RegionConfig,
    ablation: &AblationFlags,
) -> Result<PreparedVisual> {
    let enhanced = if ablation.no_fe {
        image.clone()
    } else {
        enhance(image, enhance_cfg)?
    };

    let (mask_set, mask_source) = if ablation.no_sam || ablation.no_dual {
        (RegionMaskSet::empty(MaskSource::Fallback), None)
    } else {
        let ingested = match mask_dir {
            Some(dir) if dir.is_dir() => {
                let set = regions::load_masks(dir, image_id, image.width(), image.height())?;
                if set.is_empty() {
                    None
                } else {
                    Some(set)
                }
            }
            _ => None,
        };
        match ingested {
            Some(set) => (set, Some(MaskSource::Ingested)),
            None => {
                let set = regions::propose_fallback(&enhanced, region_cfg.fallback_k)?;
                (set, Some(MaskSource::Fallback))
            }
        }
    };
    let masked = regions::apply_masks(&enhanced, &mask_set)?;

    let mut tape = Tape::new();
    let mut binding = Binding::frozen(&model.store);
    let (e_g, e_s) = model.vit.dual_encode(
        &mut tape,
        &mut binding,
        &model.store,
        &enhanced,
        &masked,
        region_cfg.pool,
    )?;
    Ok(PreparedVisual {
        e_g: tape.value(e_g).clone(),
        e_s: tape.value(e_s).clone(),
        mask_source,
    })
}

/// Put the fused visual tokens for one prepared image on a tape.
pub fn fused_tokens(
    model: &MdseModel,
    tape: &mut Tape<f64>,
    binding: &mut Binding,
    visual: &PreparedVisual,
    ablation: &AblationFlags,
) -> Result<Var> {
    let e_g = tape.input(&visual.e_g);
    if ablation.no_dual {
        return Ok(e_g);
    }
    let e_s = tape.input(&visual.e_s);
    let w_f = binding.var(tape, &model.store, model.fusion.w_f);
    fuse(tape, e_g, e_s, w_f)
}

/// Query features for one prepared image (inference path, no gradients).
pub fn image_query_features(
    model: &MdseModel,
    visual: &PreparedVisual,
    ctx: &ContextSignal,
    ablation: &AblationFlags,
) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let mut binding = Binding::frozen(&model.store);
    let e_f = fused_tokens(model, &mut tape, &mut binding, visual, ablation)?;
    let z = model.qformer.encode_image(
        &mut tape,
        &mut binding,
        &model.store,
        e_f,
        ctx,
        ablation.gating_mode(),
        None,
    )?;
    Ok(tape.value(z).clone())
}

/// Text feature for a token sequence (inference path).
pub fn text_features(model: &MdseModel, token_ids: &[usize]) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let mut binding = Binding::frozen(&model.store);
    let f_t = model
        .qformer
        .encode_text(&mut tape, &mut binding, &model.store, token_ids, None)?;
    Ok(tape.value(f_t).clone())
}

/// Retrieval similarity: best cosine over the query tokens against the text
/// feature.
pub fn max_query_cosine(z: &Tensor<f64>, f_t: &Tensor<f64>) -> f64 {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let mut best = f64::NEG_INFINITY;
    let tnorm = f_t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    for q in 0..n {
        let row = &z.data()[q * d..(q + 1) * d];
        let rnorm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = row.iter().zip(f_t.data()).map(|(a, b)| a * b).sum();
        if rnorm > 0.0 && tnorm > 0.0 {
            best = best.max(dot / (rnorm * tnorm));
        }
    }
    best
}

/// Full inference: prepared image -> greedy caption string.
pub fn caption_visual(
    model: &MdseModel,
    visual: &PreparedVisual,
    ctx: &ContextSignal,
    ablation: &AblationFlags,
) -> Result<String> {
    let mut tape = Tape::new();
    let mut binding = Binding::frozen(&model.store);
    let e_f = fused_tokens(model, &mut tape, &mut binding, visual, ablation)?;
    let z = model.qformer.encode_image(
        &mut tape,
        &mut binding,
        &model.store,
        e_f,
        ctx,
        ablation.gating_mode(),
        None,
    )?;
    let prefix = model
        .decoder
        .project_prefix(&mut tape, &mut binding, &model.store, z, None)?;
    let prefix_value = tape.value(prefix).clone();
    let ids = model
        .decoder
        .generate(&model.store, &prefix_value, model.decoder.cfg.max_len - 1)?;
    Ok(model.vocab.decode(&ids))
}
