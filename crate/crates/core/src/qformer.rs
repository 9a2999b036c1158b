//! Query transformer with gated, context-aware cross-attention.
//!
//! A fixed set of learnable queries self-attends (optionally sharing the
//! stream with text tokens) and, at regular block intervals, cross-attends
//! into the fused visual tokens. Before cross-attention the visual tokens
//! are projected to the query width and corrected by a sigmoid gate driven
//! by an external context signal:
//!
//!   K' = X + sigmoid(W_g [X; C'])    (independently for keys and values)
//!
//! where C' is the projected context embedding. Gates close (sigmoid -> 0)
//! when the pre-activations go very negative, recovering plain
//! cross-attention; an explicit ablation switch does the same exactly.
//!
//! The matching head is a linear map over the arithmetic mean of the output
//! query tokens. Base attention/MLP weights are frozen; adaptation happens
//! through the low-rank factors, the queries, the gates, the context
//! projector, and the heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{AdapterSpec, LoraLinear};
use crate::nn::{self, LN_EPS};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFormerConfig {
    pub num_queries: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub cross_attn_every: usize,
    pub context_vocab: usize,
    pub context_dim: usize,
    pub mlp_ratio: f64,
    /// Width of the fused visual tokens entering the input projector.
    pub visual_dim: usize,
    pub text_vocab: usize,
    pub max_text_len: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        QFormerConfig {
            num_queries: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            cross_attn_every: 2,
            context_vocab: 8,
            context_dim: 16,
            mlp_ratio: 2.0,
            visual_dim: 64,
            text_vocab: 64,
            max_text_len: 16,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must divide into {} heads",
                self.dim, self.heads
            )));
        }
        if self.cross_attn_every == 0 {
            return Err(Error::Config("cross_attn_every must be >= 1".into()));
        }
        if self.num_queries == 0 || self.depth == 0 {
            return Err(Error::Config("num_queries and depth must be positive".into()));
        }
        if self.context_vocab == 0 || self.context_dim == 0 {
            return Err(Error::Config("context vocab/dim must be positive".into()));
        }
        if self.text_vocab == 0 || self.max_text_len < 2 {
            return Err(Error::Config("text vocab and max_text_len >= 2 required".into()));
        }
        Ok(())
    }

    fn mlp_hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round() as usize
    }
}

/// External context: a category id mapped through a learnable embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextSignal {
    pub category_id: usize,
}

/// Ablation switch for the context gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatingMode {
    Gated,
    Disabled,
}

#[derive(Debug, Clone)]
struct CrossLayer {
    ln_g: ParamId,
    ln_b: ParamId,
    wq: LoraLinear,
    wk: LoraLinear,
    wv: LoraLinear,
    wo: LoraLinear,
}

#[derive(Debug, Clone)]
struct QBlock {
    ln1_g: ParamId,
    ln1_b: ParamId,
    self_q: LoraLinear,
    self_k: LoraLinear,
    self_v: LoraLinear,
    self_o: LoraLinear,
    cross: Option<CrossLayer>,
    ln2_g: ParamId,
    ln2_b: ParamId,
    mlp1: LoraLinear,
    mlp2: LoraLinear,
}

#[derive(Debug, Clone)]
pub struct QFormerModule {
    pub cfg: QFormerConfig,
    pub queries: ParamId,
    vis_proj_w: ParamId,
    vis_proj_b: ParamId,
    pub gate_k: ParamId,
    pub gate_v: ParamId,
    ctx_embed: ParamId,
    ctx_proj: ParamId,
    text_embed: ParamId,
    text_pos: ParamId,
    blocks: Vec<QBlock>,
    itm_w: ParamId,
    itm_b: ParamId,
}

impl QFormerModule {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: QFormerConfig,
        attn_spec: AdapterSpec,
        mlp_spec: AdapterSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let hid = cfg.mlp_hidden();

        let queries = store.register(
            "qformer.queries",
            Tensor::randn(vec![cfg.num_queries, d], 0.5, rng),
            true,
        )?;
        let vis_proj_w = store.register(
            "qformer.vis_proj.w",
            Tensor::randn(vec![cfg.visual_dim, d], 1.0 / (cfg.visual_dim as f64).sqrt(), rng),
            false,
        )?;
        let vis_proj_b = store.register("qformer.vis_proj.b", Tensor::zeros(vec![d]), false)?;
        let gate_k = store.register(
            "qformer.gate_k",
            Tensor::randn(vec![2 * d, d], 0.05, rng),
            true,
        )?;
        let gate_v = store.register(
            "qformer.gate_v",
            Tensor::randn(vec![2 * d, d], 0.05, rng),
            true,
        )?;
        let ctx_embed = store.register(
            "qformer.ctx_embed",
            Tensor::randn(vec![cfg.context_vocab, cfg.context_dim], 0.5, rng),
            true,
        )?;
        let ctx_proj = store.register(
            "qformer.ctx_proj",
            Tensor::randn(vec![cfg.context_dim, d], 1.0 / (cfg.context_dim as f64).sqrt(), rng),
            true,
        )?;
        let text_embed = store.register(
            "qformer.text_embed",
            Tensor::randn(vec![cfg.text_vocab, d], 0.5, rng),
            false,
        )?;
        let text_pos = store.register(
            "qformer.text_pos",
            Tensor::randn(vec![cfg.max_text_len, d], 0.02, rng),
            false,
        )?;

        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("qformer.block{i}");
            let cross = if i % cfg.cross_attn_every == 0 {
                Some(CrossLayer {
                    ln_g: store.register(
                        &format!("{p}.cross.ln.g"),
                        Tensor::full(vec![d], F::one()),
                        false,
                    )?,
                    ln_b: store.register(
                        &format!("{p}.cross.ln.b"),
                        Tensor::zeros(vec![d]),
                        false,
                    )?,
                    wq: attn_spec.build(store, &format!("{p}.cross.wq"), d, d, rng)?,
                    wk: attn_spec.build(store, &format!("{p}.cross.wk"), d, d, rng)?,
                    wv: attn_spec.build(store, &format!("{p}.cross.wv"), d, d, rng)?,
                    wo: attn_spec.build(store, &format!("{p}.cross.wo"), d, d, rng)?,
                })
            } else {
                None
            };
            blocks.push(QBlock {
                ln1_g: store.register(&format!("{p}.ln1.g"), Tensor::full(vec![d], F::one()), false)?,
                ln1_b: store.register(&format!("{p}.ln1.b"), Tensor::zeros(vec![d]), false)?,
                self_q: attn_spec.build(store, &format!("{p}.self.wq"), d, d, rng)?,
                self_k: attn_spec.build(store, &format!("{p}.self.wk"), d, d, rng)?,
                self_v: attn_spec.build(store, &format!("{p}.self.wv"), d, d, rng)?,
                self_o: attn_spec.build(store, &format!("{p}.self.wo"), d, d, rng)?,
                cross,
                ln2_g: store.register(&format!("{p}.ln2.g"), Tensor::full(vec![d], F::one()), false)?,
                ln2_b: store.register(&format!("{p}.ln2.b"), Tensor::zeros(vec![d]), false)?,
                mlp1: mlp_spec.build(store, &format!("{p}.mlp.w1"), d, hid, rng)?,
                mlp2: mlp_spec.build(store, &format!("{p}.mlp.w2"), hid, d, rng)?,
            });
        }

        let itm_w = store.register(
            "qformer.itm.w",
            Tensor::randn(vec![d, 2], 1.0 / (d as f64).sqrt(), rng),
            true,
        )?;
        let itm_b = store.register("qformer.itm.b", Tensor::zeros(vec![2]), true)?;

        Ok(QFormerModule {
            cfg,
            queries,
            vis_proj_w,
            vis_proj_b,
            gate_k,
            gate_v,
            ctx_embed,
            ctx_proj,
            text_embed,
            text_pos,
            blocks,
            itm_w,
            itm_b,
        })
    }

    /// C' = f_ctx(C): embedding lookup then bias-free linear map to width d.
    pub fn project_context<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        store: &ParamStore<F>,
        ctx: &ContextSignal,
    ) -> Result<Var> {
        if ctx.category_id >= self.cfg.context_vocab {
            return Err(Error::Contract(format!(
                "context id {} out of vocab {}",
                ctx.category_id, self.cfg.context_vocab
            )));
        }
        let table = binding.var(tape, store, self.ctx_embed);
        let e = tape.embedding(table, &[ctx.category_id])?;
        let w = binding.var(tape, store, self.ctx_proj);
        let c = tape.matmul(e, w)?;
        tape.reshape(c, vec![self.cfg.dim])
    }

    /// Project fused visual tokens to the query width, then derive the
    /// gate-fused keys and values (or pass the projection straight through
    /// when gating is disabled).
    pub fn keys_values<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        store: &ParamStore<F>,
        e_f: Var,
        ctx: &ContextSignal,
        mode: GatingMode,
    ) -> Result<(Var, Var)> {
        let w = binding.var(tape, store, self.vis_proj_w);
        let b = binding.var(tape, store, self.vis_proj_b);
        let x = nn::linear(tape, e_f, w, Some(b))?;
        match mode {
            GatingMode::Disabled => Ok((x, x)),
            GatingMode::Gated => {
                let c = self.project_context(tape, binding, store, ctx)?;
                let gk = binding.var(tape, store, self.gate_k);
                let gv = binding.var(tape, store, self.gate_v);
                let k = gate_fuse(tape, x, c, gk)?;
                let v = gate_fuse(tape, x, c, gv)?;
                Ok((k, v))
            }
        }
    }

    fn run_blocks<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        store: &ParamStore<F>,
        mut x: Var,
        query_rows: usize,
        kv: Option<(Var, Var)>,
        mask: Option<Var>,
        dropout: &mut Option<&mut Rng>,
    ) -> Result<Var> {
        let eps = F::of(LN_EPS);
        let heads = self.cfg.heads;
        for blk in &self.blocks {
            let g1 = binding.var(tape, store, blk.ln1_g);
            let b1 = binding.var(tape, store, blk.ln1_b);
            let normed = tape.layer_norm(x, g1, b1, eps)?;
            let q = blk.self_q.forward(tape, binding, store, normed, dropout.as_deref_mut())?;
            let k = blk.self_k.forward(tape, binding, store, normed, dropout.as_deref_mut())?;
            let v = blk.self_v.forward(tape, binding, store, normed, dropout.as_deref_mut())?;
            let attn = nn::multi_head_attention(tape, q, k, v, heads, mask)?;
            let attn = blk.self_o.forward(tape, binding, store, attn, dropout.as_deref_mut())?;
            x = tape.add(x, attn)?;

            if let (Some(ca), Some((kp, vp))) = (&blk.cross, kv) {
                let total = tape.value(x).rows();
                let qpart = if query_rows == total {
                    x
                } else {
                    tape.slice_rows(x, 0, query_rows)?
                };
                let g = binding.var(tape, store, ca.ln_g);
                let b = binding.var(tape, store, ca.ln_b);
                let normed = tape.layer_norm(qpart, g, b, eps)?;
                let qq = ca.wq.forward(tape, binding, store, normed, dropout.as_deref_mut())?;
                let kk = ca.wk.forward(tape, binding, store, kp, dropout.as_deref_mut())?;
                let vv = ca.wv.forward(tape, binding, store, vp, dropout.as_deref_mut())?;
                let att = nn::multi_head_attention(tape, qq, kk, vv, heads, None)?;
                let att = ca.wo.forward(tape, binding, store, att, dropout.as_deref_mut())?;
                let updated = tape.add(qpart, att)?;
                x = if query_rows == total {
                    updated
                } else {
                    let rest = tape.slice_rows(x, query_rows, total - query_rows)?;
                    tape.concat(0, &[updated, rest])?
                };
            }

            let g2 = binding.var(tape, store, blk.ln2_g);
            let b2 = binding.var(tape, store, blk.ln2_b);
            let normed = tape.layer_norm(x, g2, b2, eps)?;
            let h = blk.mlp1.forward(tape, binding, store, normed, dropout.as_deref_mut())?;
            let h = tape.gelu(h)?;
            let m = blk.mlp2.forward(tape, binding, store, h, dropout.as_deref_mut())?;
            x = tape.add(x, m)?;
        }
        Ok(x)
    }

    /// Query-only stream: Z_out used for retrieval features and as the
    /// decoder prefix.
    pub fn encode_image<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        store: &ParamStore<F>,
        e_f: Var,
        ctx: &ContextSignal,
        mode: GatingMode,
        mut dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let kv = self.keys_values(tape, binding, store, e_f, ctx, mode)?;
        let z = binding.var(tape, store, self.queries);
        self.run_blocks(
            tape,
            binding,
            store,
            z,
            self.cfg.num_queries,
            Some(kv),
            None,
            &mut dropout,
        )
    }

    /// Text-only stream with causal masking; the feature is the output at
    /// the final position (the only one that has seen the whole sentence).
    pub fn encode_text<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        store: &ParamStore<F>,
        token_ids: &[usize],
        mut dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let x = self.embed_text(tape, binding, store, token_ids)?;
        let t = token_ids.len();
        let mask = nn::causal_mask(tape, t);
        let out = self.run_blocks(tape, binding, store, x, 0, None, Some(mask), &mut dropout)?;
        let last = tape.slice_rows(out, t - 1, 1)?;
        tape.reshape(last, vec![self.cfg.dim])
    }

    fn embed_text<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        store: &ParamStore<F>,
        token_ids: &[usize],
    ) -> Result<Var> {
        if token_ids.is_empty() || token_ids.len() > self.cfg.max_text_len {
            return Err(Error::Contract(format!(
                "text length {} outside 1..={}",
                token_ids.len(),
                self.cfg.max_text_len
            )));
        }
        let table = binding.var(tape, store, self.text_embed);
        let emb = tape.embedding(table, token_ids)?;
        let pos = binding.var(tape, store, self.text_pos);
        let pos_slice = tape.slice_rows(pos, 0, token_ids.len())?;
        tape.add(emb, pos_slice)
    }

    /// Joint query+text stream for image-text matching; logits come from a
    /// linear head over the mean of the output query tokens.
    pub fn match_logits<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        store: &ParamStore<F>,
        e_f: Var,
        ctx: &ContextSignal,
        mode: GatingMode,
        token_ids: &[usize],
        mut dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let kv = self.keys_values(tape, binding, store, e_f, ctx, mode)?;
        let z = binding.var(tape, store, self.queries);
        let text = self.embed_text(tape, binding, store, token_ids)?;
        let x = tape.concat(0, &[z, text])?;
        let nq = self.cfg.num_queries;
        let mask = nn::joint_mask(tape, nq, token_ids.len());
        let out = self.run_blocks(tape, binding, store, x, nq, Some(kv), Some(mask), &mut dropout)?;
        let zq = tape.slice_rows(out, 0, nq)?;
        self.itm_head(tape, binding, store, zq)
    }

    fn itm_head<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        store: &ParamStore<F>,
        z_out: Var,
    ) -> Result<Var> {
        let pooled = tape.mean_rows(z_out)?;
        let row = tape.reshape(pooled, vec![1, self.cfg.dim])?;
        let w = binding.var(tape, store, self.itm_w);
        let b = binding.var(tape, store, self.itm_b);
        let logits = nn::linear(tape, row, w, Some(b))?;
        tape.reshape(logits, vec![2])
    }

    /// Combined forward: query stream always; the matching logits come from
    /// the joint stream when text is provided, otherwise from the query
    /// stream itself.
    #[allow(clippy::too_many_arguments)]
    pub fn qformer_forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        store: &ParamStore<F>,
        e_f: Var,
        ctx: &ContextSignal,
        text: Option<&[usize]>,
        mode: GatingMode,
        mut dropout: Option<&mut Rng>,
    ) -> Result<(Var, Var)> {
        let z_out = self.encode_image(tape, binding, store, e_f, ctx, mode, dropout.as_deref_mut())?;
        let itm = match text {
            Some(ids) => self.match_logits(tape, binding, store, e_f, ctx, mode, ids, dropout)?,
            None => self.itm_head(tape, binding, store, z_out)?,
        };
        Ok((z_out, itm))
    }
}

/// Gated context fusion of one token sequence:
/// out_t = e_t + sigmoid(W_g [e_t; C']).
pub fn gate_fuse<F: Scalar>(tape: &mut Tape<F>, e: Var, cprime: Var, w_g: Var) -> Result<Var> {
    let (rows, cols) = {
        let s = tape.value(e).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gate_fuse",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        (s[0], s[1])
    };
    if tape.value(cprime).shape() != [cols] {
        return Err(Error::ShapeMismatch {
            op: "gate_fuse",
            lhs: vec![rows, cols],
            rhs: tape.value(cprime).shape().to_vec(),
        });
    }
    if tape.value(w_g).shape() != [2 * cols, cols] {
        return Err(Error::ShapeMismatch {
            op: "gate_fuse",
            lhs: vec![2 * cols, cols],
            rhs: tape.value(w_g).shape().to_vec(),
        });
    }
    let rep = tape.repeat_rows(cprime, rows)?;
    let cat = tape.concat(1, &[e, rep])?;
    let pre = tape.matmul(cat, w_g)?;
    let sig = tape.sigmoid(pre)?;
    tape.add(e, sig)
}

/// Multi-head scaled dot-product attention over gate-fused keys and values,
/// followed by the output projection.
pub fn cross_attention<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k_fused: Var,
    v_fused: Var,
    heads: usize,
    w_o: Var,
) -> Result<Var> {
    let att = nn::multi_head_attention(tape, q, k_fused, v_fused, heads, None)?;
    tape.matmul(att, w_o)
}
