//! Whole-model gradient verification over the full training objective.
//!
//! Builds the configured model, runs a fixed two-record batch through the
//! combined loss once for analytic gradients, then sweeps every trainable
//! tensor with central differences of the same loss. Nothing upstream of the
//! trainable set changes between evaluations, so the frozen encoder outputs
//! are prepared once. Dropout stays off so the loss is a deterministic
//! function of the parameters.

use std::collections::HashMap;

use crate::decoder::Vocab;
use crate::error::Result;
use crate::gradcheck::{check_with, GradCheckReport, DEFAULT_FD_STEP};
use crate::harness::config::RunConfig;
use crate::harness::train::{batch_forward, PreparedRecord};
use crate::imageio::RgbImage;
use crate::model::{prepare_visual, MdseModel};
use crate::params::Binding;
use crate::rng::Rng;
use crate::tape::Tape;

const PROBE_CAPTIONS: [&str; 2] = ["red circle tunnel", "blue square shaft"];
const PROBE_CONTEXTS: [&str; 2] = ["tunnel", "shaft"];

/// Tensors at or below this size are always swept exhaustively.
pub const DEFAULT_FULL_BELOW: usize = 128;
/// Default per-tensor coordinate budget for larger tensors; keeps the desk
/// sweep under its one-minute budget on one core.
pub const DEFAULT_SAMPLES_CAP: usize = 48;

fn probe_image(size: usize, seed: u64) -> RgbImage<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let n = size * size;
    let mut planes: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for plane in &mut planes {
        *plane = (0..n).map(|_| rng.next_f64()).collect();
    }
    RgbImage::new(size, size, planes).expect("probe image")
}

struct GradCheckCtx {
    model: MdseModel,
    prepared: Vec<PreparedRecord>,
    cfg: RunConfig,
}

impl GradCheckCtx {
    fn loss(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let mut binding = Binding::frozen(&self.model.store);
        let items: Vec<(&PreparedRecord, usize)> =
            self.prepared.iter().map(|r| (r, 0usize)).collect();
        let losses = batch_forward(&self.model, &mut tape, &mut binding, &items, &self.cfg, None)?;
        Ok(tape.scalar_value(losses.total))
    }
}

/// Run the sweep. `samples_cap = None` checks every coordinate of every
/// trainable tensor (slow); otherwise tensors above `full_below` elements
/// are probed at `samples_cap` seeded coordinates each.
pub fn model_gradcheck(
    cfg: &RunConfig,
    full_below: usize,
    samples_cap: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut cfg = cfg.clone();
    cfg.lora.dropout_p = 0.0;
    // keep the gradient path independent of mask files on disk
    cfg.train.ablation = Default::default();

    let vocab = Vocab::build(PROBE_CAPTIONS.into_iter());
    let mut contexts: Vec<String> = PROBE_CONTEXTS.iter().map(|s| s.to_string()).collect();
    contexts.sort();
    let arch = cfg.resolved_arch(vocab.len());
    let model = MdseModel::build(arch, vocab, contexts)?;

    let mut prepared = Vec::new();
    for (i, caption) in PROBE_CAPTIONS.iter().enumerate() {
        let img = probe_image(cfg.vit.image_size, seed ^ (0xAB00 + i as u64));
        let visual = prepare_visual(
            &model,
            &img,
            &format!("probe{i}"),
            None,
            &cfg.enhance,
            &cfg.regions,
            &cfg.train.ablation,
        )?;
        prepared.push(PreparedRecord {
            image_id: format!("probe{i}"),
            visual,
            caption_ids: vec![model.vocab.encode(caption)],
            captions: vec![caption.to_string()],
            context: model.context_signal(PROBE_CONTEXTS[i])?,
            context_name: PROBE_CONTEXTS[i].to_string(),
        });
    }

    // analytic gradients of the total loss
    let mut ctx = GradCheckCtx {
        model,
        prepared,
        cfg,
    };
    let analytic: HashMap<String, Vec<f64>> = {
        let mut tape = Tape::new();
        let mut binding = Binding::train(&ctx.model.store);
        let items: Vec<(&PreparedRecord, usize)> =
            ctx.prepared.iter().map(|r| (r, 0usize)).collect();
        let losses = batch_forward(&ctx.model, &mut tape, &mut binding, &items, &ctx.cfg, None)?;
        tape.backward(losses.total)?;
        ctx.model.store.collect_grads(&tape, &binding);
        let grads = ctx
            .model
            .store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    p.tensor
                        .grad
                        .clone()
                        .unwrap_or_else(|| vec![0.0; p.tensor.numel()]),
                )
            })
            .collect();
        ctx.model.store.clear_grads();
        grads
    };

    let tensors: Vec<(String, usize)> = ctx
        .model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| (p.name.clone(), p.tensor.numel()))
        .collect();

    check_with(
        &mut ctx,
        &tensors,
        &analytic,
        &mut |c, name, j| {
            let id = c.model.store.id(name).expect("known parameter");
            c.model.store.get(id).tensor.data()[j]
        },
        &mut |c, name, j, value| {
            let id = c.model.store.id(name).expect("known parameter");
            c.model.store.get_mut(id).tensor.data_mut()[j] = value;
        },
        &mut |c| c.loss(),
        DEFAULT_FD_STEP,
        full_below,
        samples_cap,
        seed,
    )
}
