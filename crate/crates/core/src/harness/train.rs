//! Training loop: batch assembly, the joint objective, parameter updates
//! restricted to the trainable set, and the loss trace.

use std::path::Path;

use crate::decoder::Vocab;
use crate::error::{Error, Result};
use crate::harness::config::{OptimizerKind, RunConfig};
use crate::harness::manifest::{resolve, DatasetManifest};
use crate::imageio::load_png;
use crate::model::{fused_tokens, prepare_visual, MdseModel, PreparedVisual};
use crate::objectives::{self, MatchLabel};
use crate::params::{Binding, ParamId, ParamStore};
use crate::qformer::ContextSignal;
use crate::rng::Rng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub itc: f64,
    pub itm: f64,
    pub itg: f64,
    pub total: f64,
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut body = String::from("step,itc,itm,itg,total\n");
    for r in rows {
        body.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.itc, r.itm, r.itg, r.total
        ));
    }
    std::fs::write(path, body)?;
    Ok(())
}

// ── Optimizers ──────────────────────────────────────────────────────

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    adam: Option<AdamState>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore<f64>) -> Self {
        let adam = match kind {
            OptimizerKind::Adam => Some(AdamState {
                m: store
                    .iter()
                    .map(|(_, p)| vec![0.0; p.tensor.numel()])
                    .collect(),
                v: store
                    .iter()
                    .map(|(_, p)| vec![0.0; p.tensor.numel()])
                    .collect(),
                t: 0,
            }),
            OptimizerKind::Sgd => None,
        };
        Optimizer { kind, lr, adam }
    }

    /// Apply one update from the `grad` fields of trainable parameters.
    pub fn step(&mut self, store: &mut ParamStore<f64>, trainable: &[ParamId]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for &id in trainable {
                    let p = store.get_mut(id);
                    let Some(grad) = p.tensor.grad.take() else {
                        continue;
                    };
                    for (w, g) in p.tensor.data_mut().iter_mut().zip(&grad) {
                        *w -= self.lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let state = self.adam.as_mut().expect("adam state");
                state.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
                for &id in trainable {
                    let p = store.get_mut(id);
                    let Some(grad) = p.tensor.grad.take() else {
                        continue;
                    };
                    let m = &mut state.m[id.0];
                    let v = &mut state.v[id.0];
                    for ((w, &g), (mi, vi)) in p
                        .tensor
                        .data_mut()
                        .iter_mut()
                        .zip(&grad)
                        .zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

// ── Prepared dataset ────────────────────────────────────────────────

/// One record after the frozen visual front end.
pub struct PreparedRecord {
    pub image_id: String,
    pub visual: PreparedVisual,
    pub caption_ids: Vec<Vec<usize>>,
    pub captions: Vec<String>,
    pub context: ContextSignal,
    pub context_name: String,
}

/// Run enhancement, masks, and the frozen encoder over the whole manifest.
pub fn prepare_records(
    model: &MdseModel,
    manifest: &DatasetManifest,
    base: &Path,
    cfg: &RunConfig,
) -> Result<Vec<PreparedRecord>> {
    let ablation = &cfg.train.ablation;
    let mut prepared = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let img = load_png(&resolve(base, &rec.image_path), Some(cfg.vit.image_size))?;
        let mask_dir = rec.mask_dir.as_ref().map(|d| resolve(base, d));
        let visual = prepare_visual(
            model,
            &img,
            &rec.image_id,
            mask_dir.as_deref(),
            &cfg.enhance,
            &cfg.regions,
            ablation,
        )?;
        let caption_ids = rec.captions.iter().map(|c| model.vocab.encode(c)).collect();
        prepared.push(PreparedRecord {
            image_id: rec.image_id.clone(),
            visual,
            caption_ids,
            captions: rec.captions.clone(),
            context: model.context_signal(&rec.context_category)?,
            context_name: rec.context_category.clone(),
        });
    }
    Ok(prepared)
}

// ── Batch forward ───────────────────────────────────────────────────

pub struct BatchLosses {
    pub total: Var,
    pub itc: f64,
    pub itm: f64,
    pub itg: f64,
}

/// Forward one batch through fusion, the query transformer, and the decoder,
/// returning the combined objective on the tape.
pub fn batch_forward(
    model: &MdseModel,
    tape: &mut Tape<f64>,
    binding: &mut Binding,
    items: &[(&PreparedRecord, usize)],
    cfg: &RunConfig,
    mut dropout: Option<&mut Rng>,
) -> Result<BatchLosses> {
    let n = items.len();
    let ablation = &cfg.train.ablation;
    let mode = ablation.gating_mode();
    let nq = model.qformer.cfg.num_queries;
    let d = model.qformer.cfg.dim;

    // per-item query stream and text stream
    let mut fused = Vec::with_capacity(n);
    let mut z_outs = Vec::with_capacity(n);
    let mut query_rows: Vec<Vec<Var>> = Vec::with_capacity(n);
    let mut text_feats = Vec::with_capacity(n);
    for (rec, cap_idx) in items {
        let e_f = fused_tokens(model, tape, binding, &rec.visual, ablation)?;
        fused.push(e_f);
        let z = model.qformer.encode_image(
            tape,
            binding,
            &model.store,
            e_f,
            &rec.context,
            mode,
            dropout.as_deref_mut(),
        )?;
        z_outs.push(z);
        let mut rows = Vec::with_capacity(nq);
        for q in 0..nq {
            let r = tape.slice_rows(z, q, 1)?;
            rows.push(tape.reshape(r, vec![d])?);
        }
        query_rows.push(rows);
        let ids = &rec.caption_ids[*cap_idx];
        let f_t = model.qformer.encode_text(
            tape,
            binding,
            &model.store,
            ids,
            dropout.as_deref_mut(),
        )?;
        text_feats.push(f_t);
    }

    // contrastive: sim[i][j] = best query cosine against caption j
    let itc = if n >= 2 {
        let mut sim_rows = Vec::with_capacity(n);
        for rows in &query_rows {
            let mut entries = Vec::with_capacity(n);
            for &ft in &text_feats {
                let mut per_query = Vec::with_capacity(nq);
                for &qr in rows {
                    per_query.push(tape.cosine(qr, ft)?);
                }
                let stacked = tape.concat(0, &per_query)?;
                entries.push(tape.max_vec(stacked)?);
            }
            let row = tape.concat(0, &entries)?;
            sim_rows.push(tape.reshape(row, vec![1, n])?);
        }
        let sim = tape.concat(0, &sim_rows)?;
        objectives::itc_from_sim(tape, sim, cfg.loss.tau, cfg.loss.symmetric_itc)?
    } else {
        tape.constant_scalar(0.0)
    };

    // matching: even positions keep their pair, odd positions swap text
    let mut itm_logit_rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, (rec, cap_idx)) in items.iter().enumerate() {
        let (text_ids, label) = if i % 2 == 0 || n == 1 {
            (&items[i].0.caption_ids[*cap_idx], MatchLabel::Match)
        } else {
            let (other, other_idx) = items[(i + 1) % n];
            (&other.caption_ids[other_idx], MatchLabel::NoMatch)
        };
        let logits = model.qformer.match_logits(
            tape,
            binding,
            &model.store,
            fused[i],
            &rec.context,
            mode,
            text_ids,
            dropout.as_deref_mut(),
        )?;
        itm_logit_rows.push(tape.reshape(logits, vec![1, 2])?);
        labels.push(label);
    }
    let itm_logits = tape.concat(0, &itm_logit_rows)?;
    let itm = objectives::itm_loss(tape, itm_logits, &labels)?;

    // captioning: teacher-forced sum per record, averaged over the batch
    let mut itg_terms = Vec::with_capacity(n);
    for (i, (rec, cap_idx)) in items.iter().enumerate() {
        let ids = &rec.caption_ids[*cap_idx];
        let prefix = model.decoder.project_prefix(
            tape,
            binding,
            &model.store,
            z_outs[i],
            dropout.as_deref_mut(),
        )?;
        let inputs = &ids[..ids.len() - 1];
        let targets = &ids[1..];
        let logits = model
            .decoder
            .logits(tape, binding, &model.store, prefix, inputs)?;
        let weights = vec![1.0; targets.len()];
        itg_terms.push(objectives::itg_loss(tape, logits, targets, &weights)?);
    }
    let itg = tape.mean_of_scalars(&itg_terms)?;

    let total = objectives::total_loss(tape, itc, itm, itg, &cfg.loss)?;
    Ok(BatchLosses {
        total,
        itc: tape.scalar_value(itc),
        itm: tape.scalar_value(itm),
        itg: tape.scalar_value(itg),
    })
}

// ── The training loop ───────────────────────────────────────────────

pub struct TrainOutcome {
    pub model: MdseModel,
    pub trace: Vec<TraceRow>,
    pub prepared: Vec<PreparedRecord>,
}

/// Epoch-style batch sampler: shuffles a pool of record indices and deals
/// them out `batch_size` at a time; a full-dataset batch keeps manifest
/// order so runs at batch_size >= n are exactly reproducible row-for-row.
struct BatchSampler {
    n: usize,
    batch_size: usize,
    pool: Vec<usize>,
    rng: Rng,
}

impl BatchSampler {
    fn new(n: usize, batch_size: usize, rng: Rng) -> Self {
        BatchSampler {
            n,
            batch_size: batch_size.min(n),
            pool: Vec::new(),
            rng,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.batch_size == self.n {
            return (0..self.n).collect();
        }
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            if self.pool.is_empty() {
                self.pool = (0..self.n).collect();
                self.rng.shuffle(&mut self.pool);
            }
            batch.push(self.pool.pop().expect("refilled pool"));
        }
        batch
    }
}

/// Build the model from the manifest corpus and train it for the configured
/// number of steps. Only adapters, queries, gates, the context projector,
/// the fusion map, and the heads move; everything else is frozen.
pub fn train(
    manifest: &DatasetManifest,
    base: &Path,
    cfg: &RunConfig,
) -> Result<TrainOutcome> {
    cfg.train.validate()?;
    cfg.loss.validate()?;

    let vocab = Vocab::build(manifest.all_captions());
    let contexts = manifest.context_categories();
    let arch = cfg.resolved_arch(vocab.len());
    let model = MdseModel::build(arch, vocab, contexts)?;
    let prepared = prepare_records(&model, manifest, base, cfg)?;
    train_prepared(model, prepared, cfg)
}

/// Training core over already-prepared records (model ownership moves in).
pub fn train_prepared(
    mut model: MdseModel,
    prepared: Vec<PreparedRecord>,
    cfg: &RunConfig,
) -> Result<TrainOutcome> {
    let trainable = model.store.trainable_ids();
    let mut optimizer = Optimizer::new(cfg.train.optimizer, cfg.train.learning_rate, &model.store);

    let mut seed_rng = Rng::seed_from_u64(cfg.train.seed);
    let batch_rng = seed_rng.split();
    let mut caption_rng = seed_rng.split();
    let mut dropout_rng = seed_rng.split();

    let mut sampler = BatchSampler::new(prepared.len(), cfg.train.batch_size, batch_rng);
    let mut trace = Vec::with_capacity(cfg.train.steps);

    for step in 0..cfg.train.steps {
        let indices = sampler.next_batch();
        let items: Vec<(&PreparedRecord, usize)> = indices
            .iter()
            .map(|&i| {
                let rec = &prepared[i];
                let cap = if rec.caption_ids.len() == 1 {
                    0
                } else {
                    caption_rng.below(rec.caption_ids.len())
                };
                (rec, cap)
            })
            .collect();

        let mut tape = Tape::new();
        let mut binding = Binding::train(&model.store);
        let losses = batch_forward(
            &model,
            &mut tape,
            &mut binding,
            &items,
            cfg,
            Some(&mut dropout_rng),
        )?;
        let total = tape.scalar_value(losses.total);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                itc: losses.itc,
                itm: losses.itm,
                itg: losses.itg,
            });
        }
        tape.backward(losses.total)?;
        model.store.collect_grads(&tape, &binding);
        drop(tape);
        optimizer.step(&mut model.store, &trainable);

        trace.push(TraceRow {
            step,
            itc: losses.itc,
            itm: losses.itm,
            itg: losses.itg,
            total,
        });
    }

    Ok(TrainOutcome {
        model,
        trace,
        prepared,
    })
}
