//! Evaluation protocols: retrieval ranking, caption scoring, zero-shot
//! category ranking, the single-removal ablation table, and the adapter
//! hyperparameter sweep.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::harness::manifest::DatasetManifest;
use crate::harness::train::{self, PreparedRecord, TrainOutcome};
use crate::metrics::{self, CaptionSet, RankedRetrieval};
use crate::model::{
    caption_visual, image_query_features, max_query_cosine, text_features, AblationFlags,
    MdseModel,
};
use crate::tensor::Tensor;

/// Greedy caption for one prepared record.
pub fn caption_record(
    model: &MdseModel,
    rec: &PreparedRecord,
    ablation: &AblationFlags,
) -> Result<String> {
    caption_visual(model, &rec.visual, &rec.context, ablation)
}

/// Rank the correct caption for every image against the caption pool (first
/// caption of each record). Ties resolve toward the lower caption index,
/// which makes the ranking deterministic.
pub fn retrieve(
    model: &MdseModel,
    prepared: &[PreparedRecord],
    ablation: &AblationFlags,
) -> Result<RankedRetrieval> {
    let image_feats: Vec<Tensor<f64>> = prepared
        .iter()
        .map(|r| image_query_features(model, &r.visual, &r.context, ablation))
        .collect::<Result<_>>()?;
    let text_feats: Vec<Tensor<f64>> = prepared
        .iter()
        .map(|r| text_features(model, &r.caption_ids[0]))
        .collect::<Result<_>>()?;

    let mut ranks = Vec::with_capacity(prepared.len());
    for (i, zi) in image_feats.iter().enumerate() {
        let scores: Vec<f64> = text_feats
            .iter()
            .map(|ft| max_query_cosine(zi, ft))
            .collect();
        let mine = scores[i];
        // rank = 1 + number of captions strictly better, plus earlier-index ties
        let mut rank = 1;
        for (j, &s) in scores.iter().enumerate() {
            if s > mine || (s == mine && j < i) {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    RankedRetrieval::new(ranks)
}

/// The metrics report emitted by `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cider: f64,
    pub cider_x10: f64,
    pub r_at: BTreeMap<String, f64>,
    pub map: f64,
}

/// Caption every record, score against references, rank retrieval, and rank
/// images against each context category (the zero-shot classification
/// stand-in for mean average precision).
pub fn evaluate(
    model: &MdseModel,
    prepared: &[PreparedRecord],
    ablation: &AblationFlags,
) -> Result<EvalReport> {
    let corpus: Vec<CaptionSet> = prepared
        .iter()
        .map(|rec| {
            Ok(CaptionSet {
                candidate: caption_record(model, rec, ablation)?,
                references: rec.captions.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let cider = metrics::cider(&corpus)?;

    let retrieval = retrieve(model, prepared, ablation)?;
    let mut r_at = BTreeMap::new();
    for k in [1usize, 5, 10] {
        r_at.insert(k.to_string(), metrics::recall_at_k(&retrieval, k));
    }

    // zero-shot category ranking: score every image against the category
    // name as a one-word caption; relevance = record carries that category
    let mut categories: Vec<String> = prepared.iter().map(|r| r.context_name.clone()).collect();
    categories.sort();
    categories.dedup();
    let image_feats: Vec<Tensor<f64>> = prepared
        .iter()
        .map(|r| image_query_features(model, &r.visual, &r.context, ablation))
        .collect::<Result<_>>()?;
    let mut per_class = Vec::with_capacity(categories.len());
    for cat in &categories {
        let ids = model.vocab.encode(cat);
        let ft = text_features(model, &ids)?;
        let mut scored: Vec<(f64, usize)> = image_feats
            .iter()
            .enumerate()
            .map(|(i, z)| (max_query_cosine(z, &ft), i))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        per_class.push(
            scored
                .iter()
                .map(|&(_, i)| prepared[i].context_name == *cat)
                .collect::<Vec<bool>>(),
        );
    }
    let map = metrics::mean_average_precision(&per_class);

    Ok(EvalReport {
        cider: cider.mean,
        cider_x10: 10.0 * cider.mean,
        r_at,
        map,
    })
}

// ── Ablation table ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub r_at_1: f64,
    pub cider: f64,
    pub final_loss: f64,
    pub exact_captions: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateReport {
    /// Keyed by variant name, insertion order: full first, then the
    /// single-removal variants.
    pub variants: BTreeMap<String, VariantResult>,
}

pub const ABLATION_VARIANTS: [&str; 5] = ["full", "no_dual", "no_sam", "no_context_gate", "no_fe"];

fn variant_flags(name: &str) -> AblationFlags {
    AblationFlags {
        no_fe: name == "no_fe",
        no_sam: name == "no_sam",
        no_dual: name == "no_dual",
        no_context_gate: name == "no_context_gate",
    }
}

fn train_and_score(
    manifest: &DatasetManifest,
    base: &Path,
    cfg: &RunConfig,
) -> Result<VariantResult> {
    let TrainOutcome {
        model,
        trace,
        prepared,
    } = train::train(manifest, base, cfg)?;
    let ablation = cfg.train.ablation;
    let retrieval = retrieve(&model, &prepared, &ablation)?;
    let corpus: Vec<CaptionSet> = prepared
        .iter()
        .map(|rec| {
            Ok(CaptionSet {
                candidate: caption_record(&model, rec, &ablation)?,
                references: rec.captions.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let exact = corpus
        .iter()
        .filter(|c| {
            c.references
                .iter()
                .any(|r| crate::text::tokenize(r) == crate::text::tokenize(&c.candidate))
        })
        .count();
    Ok(VariantResult {
        r_at_1: metrics::recall_at_k(&retrieval, 1),
        cider: metrics::cider(&corpus)?.mean,
        final_loss: trace.last().map(|r| r.total).unwrap_or(f64::NAN),
        exact_captions: exact,
    })
}

/// Train the full model and each single-removal variant with identical
/// seeds and steps; report per-variant train-set metrics.
pub fn ablate(manifest: &DatasetManifest, base: &Path, cfg: &RunConfig) -> Result<AblateReport> {
    let mut variants = BTreeMap::new();
    for name in ABLATION_VARIANTS {
        let mut vcfg = cfg.clone();
        vcfg.train.ablation = variant_flags(name);
        variants.insert(name.to_string(), train_and_score(manifest, base, &vcfg)?);
    }
    Ok(AblateReport { variants })
}

/// Adapter hyperparameter sweep over the fixed (rank, scale) grid, applied
/// to the query-transformer projections and the language-model input
/// projector together.
pub const LORA_SWEEP: [(usize, f64); 6] = [
    (4, 4.0),
    (4, 8.0),
    (8, 8.0),
    (8, 16.0),
    (16, 16.0),
    (16, 32.0),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    /// Keyed "r{rank}_a{alpha}".
    pub settings: BTreeMap<String, VariantResult>,
}

pub fn lora_sweep(
    manifest: &DatasetManifest,
    base: &Path,
    cfg: &RunConfig,
) -> Result<SweepReport> {
    let mut settings = BTreeMap::new();
    for (rank, alpha) in LORA_SWEEP {
        let mut vcfg = cfg.clone();
        vcfg.lora = crate::lora::LoraPlan::with_uniform(rank, alpha);
        vcfg.lora.decoder_head = cfg.lora.decoder_head;
        vcfg.lora.dropout_p = cfg.lora.dropout_p;
        let key = format!("r{rank}_a{alpha:.0}");
        settings.insert(key, train_and_score(manifest, base, &vcfg)?);
    }
    Ok(SweepReport { settings })
}
