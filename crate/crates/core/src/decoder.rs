//! Small causal language model that stands in for a frozen LLM.
//!
//! Projected query-transformer outputs enter as prefix tokens; text tokens
//! follow under a causal mask (so the prefix is visible to every text
//! position). The transformer base and token embeddings are frozen random
//! weights; trainable pieces are the output head and the low-rank adapter on
//! the prefix projector. Decoding is greedy with ties broken toward the
//! lowest token id.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{AdapterSpec, LoraAdapter, LoraLinear};
use crate::nn::{self, LN_EPS};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Whitespace-token vocabulary with dense ids; specials come first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from a caption corpus: specials, then sorted unique tokens.
    pub fn build<'a>(captions: impl Iterator<Item = &'a str>) -> Vocab {
        let mut words: Vec<String> = captions.flat_map(|c| text::tokenize(c)).collect();
        words.sort();
        words.dedup();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// bos + known tokens + eos; unknown tokens are skipped.
    pub fn encode(&self, caption: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        for tok in text::tokenize(caption) {
            if let Some(id) = self.lookup(&tok) {
                ids.push(id);
            }
        }
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id > EOS && id < self.tokens.len())
            .map(|&id| self.tokens[id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let body = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        if tokens.len() < SPECIALS.len() || tokens[..3] != SPECIALS.map(String::from) {
            return Err(Error::Contract(format!(
                "vocabulary file {} must start with the special tokens",
                path.display()
            )));
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_len: usize,
    pub mlp_ratio: f64,
}

impl DecoderConfig {
    pub fn desk_default(vocab_size: usize) -> Self {
        DecoderConfig {
            vocab_size,
            dim: 64,
            depth: 2,
            heads: 4,
            max_len: 12,
            mlp_ratio: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder dim {} must divide into {} heads",
                self.dim, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("decoder max_len must be >= 2".into()));
        }
        if self.vocab_size <= EOS {
            return Err(Error::Config("vocab must include the specials".into()));
        }
        if self.depth == 0 || self.mlp_ratio <= 0.0 {
            return Err(Error::Config("depth and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    fn mlp_hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round() as usize
    }
}

#[derive(Debug, Clone)]
struct DecBlock {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    w2: ParamId,
}

#[derive(Debug, Clone)]
pub struct DecoderModule {
    pub cfg: DecoderConfig,
    /// Width of the incoming query tokens (projector input).
    pub prefix_in_dim: usize,
    tok_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<DecBlock>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    /// Output head; trainable directly, or frozen base + adapter when the
    /// plan carries a head entry.
    pub head: LoraLinear,
    head_b: ParamId,
    pub projector: LoraLinear,
}

impl DecoderModule {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: DecoderConfig,
        prefix_in_dim: usize,
        projector: LoraLinear,
        head_adapter: Option<AdapterSpec>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let hid = cfg.mlp_hidden();
        let proj_std = 1.0 / (d as f64).sqrt();

        let tok_embed = store.register(
            "decoder.tok_embed",
            Tensor::randn(vec![cfg.vocab_size, d], 0.5, rng),
            false,
        )?;
        let pos_embed = store.register(
            "decoder.pos_embed",
            Tensor::randn(vec![cfg.max_len, d], 0.1, rng),
            false,
        )?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("decoder.block{i}");
            blocks.push(DecBlock {
                ln1_g: store.register(&format!("{p}.ln1.g"), Tensor::full(vec![d], F::one()), false)?,
                ln1_b: store.register(&format!("{p}.ln1.b"), Tensor::zeros(vec![d]), false)?,
                wq: store.register(&format!("{p}.wq"), Tensor::randn(vec![d, d], proj_std, rng), false)?,
                wk: store.register(&format!("{p}.wk"), Tensor::randn(vec![d, d], proj_std, rng), false)?,
                wv: store.register(&format!("{p}.wv"), Tensor::randn(vec![d, d], proj_std, rng), false)?,
                wo: store.register(&format!("{p}.wo"), Tensor::randn(vec![d, d], proj_std, rng), false)?,
                ln2_g: store.register(&format!("{p}.ln2.g"), Tensor::full(vec![d], F::one()), false)?,
                ln2_b: store.register(&format!("{p}.ln2.b"), Tensor::zeros(vec![d]), false)?,
                w1: store.register(&format!("{p}.mlp.w1"), Tensor::randn(vec![d, hid], proj_std, rng), false)?,
                w2: store.register(
                    &format!("{p}.mlp.w2"),
                    Tensor::randn(vec![hid, d], 1.0 / (hid as f64).sqrt(), rng),
                    false,
                )?,
            });
        }
        let lnf_g = store.register("decoder.lnf.g", Tensor::full(vec![d], F::one()), false)?;
        let lnf_b = store.register("decoder.lnf.b", Tensor::zeros(vec![d]), false)?;
        let head_trainable = head_adapter.is_none();
        let head_w = store.register(
            "decoder.head.w",
            Tensor::randn(vec![d, cfg.vocab_size], proj_std, rng),
            head_trainable,
        )?;
        let head = match head_adapter {
            Some(spec) => {
                let adapter = LoraAdapter::init(
                    store,
                    "decoder.head",
                    d,
                    cfg.vocab_size,
                    spec.rank,
                    spec.alpha,
                    spec.dropout_p,
                    rng,
                )?;
                LoraLinear::new(head_w, Some(adapter))
            }
            None => LoraLinear::new(head_w, None),
        };
        let head_b = store.register(
            "decoder.head.b",
            Tensor::zeros(vec![cfg.vocab_size]),
            head_trainable,
        )?;

        Ok(DecoderModule {
            cfg,
            prefix_in_dim,
            tok_embed,
            pos_embed,
            blocks,
            lnf_g,
            lnf_b,
            head,
            head_b,
            projector,
        })
    }

    /// Map query outputs [N, d_q] into decoder width [N, d_L] through the
    /// adapter-equipped projector.
    pub fn project_prefix<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        store: &ParamStore<F>,
        z_out: Var,
        dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        self.projector.forward(tape, binding, store, z_out, dropout)
    }

    /// Next-token logits for every text position given the prefix.
    /// `input_ids` are the teacher-forcing inputs; output is [len, vocab].
    pub fn logits<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        store: &ParamStore<F>,
        prefix: Var,
        input_ids: &[usize],
    ) -> Result<Var> {
        if input_ids.is_empty() {
            return Err(Error::Contract("decoder needs at least one input token".into()));
        }
        if input_ids.len() > self.cfg.max_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_len {}",
                input_ids.len(),
                self.cfg.max_len
            )));
        }
        let np = tape.value(prefix).rows();
        let t = input_ids.len();
        let table = binding.var(tape, store, self.tok_embed);
        let emb = tape.embedding(table, input_ids)?;
        let pos = binding.var(tape, store, self.pos_embed);
        let pos_slice = tape.slice_rows(pos, 0, t)?;
        let emb = tape.add(emb, pos_slice)?;
        let mut x = tape.concat(0, &[prefix, emb])?;

        let eps = F::of(LN_EPS);
        let mask = nn::causal_mask(tape, np + t);
        for blk in &self.blocks {
            let g1 = binding.var(tape, store, blk.ln1_g);
            let b1 = binding.var(tape, store, blk.ln1_b);
            let normed = tape.layer_norm(x, g1, b1, eps)?;
            let wq = binding.var(tape, store, blk.wq);
            let wk = binding.var(tape, store, blk.wk);
            let wv = binding.var(tape, store, blk.wv);
            let wo = binding.var(tape, store, blk.wo);
            let q = tape.matmul(normed, wq)?;
            let k = tape.matmul(normed, wk)?;
            let v = tape.matmul(normed, wv)?;
            let attn = nn::multi_head_attention(tape, q, k, v, self.cfg.heads, Some(mask))?;
            let attn = tape.matmul(attn, wo)?;
            x = tape.add(x, attn)?;

            let g2 = binding.var(tape, store, blk.ln2_g);
            let b2 = binding.var(tape, store, blk.ln2_b);
            let normed = tape.layer_norm(x, g2, b2, eps)?;
            let w1 = binding.var(tape, store, blk.w1);
            let w2 = binding.var(tape, store, blk.w2);
            let m = nn::mlp(tape, normed, w1, w2)?;
            x = tape.add(x, m)?;
        }
        let gf = binding.var(tape, store, self.lnf_g);
        let bf = binding.var(tape, store, self.lnf_b);
        let x = tape.layer_norm(x, gf, bf, eps)?;
        let text_rows = tape.slice_rows(x, np, t)?;
        let logits = self.head.forward(tape, binding, store, text_rows, None)?;
        let hb = binding.var(tape, store, self.head_b);
        tape.add_bias_row(logits, hb)
    }

    /// Logits for the next token after `tokens_so_far`.
    pub fn decode_step<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        store: &ParamStore<F>,
        prefix: Var,
        tokens_so_far: &[usize],
    ) -> Result<Var> {
        let logits = self.logits(tape, binding, store, prefix, tokens_so_far)?;
        let t = tokens_so_far.len();
        let last = tape.slice_rows(logits, t - 1, 1)?;
        tape.reshape(last, vec![self.cfg.vocab_size])
    }

    /// Greedy decoding from a fixed prefix value; stops at eos or max_len
    /// generated tokens. Returns generated ids (eos included when emitted).
    pub fn generate<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        prefix_value: &Tensor<F>,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut tokens = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..max_len.min(self.cfg.max_len - 1) {
            let mut tape = Tape::new();
            let mut binding = Binding::frozen(store);
            let prefix = tape.input(prefix_value);
            let logits = self.decode_step(&mut tape, &mut binding, store, prefix, &tokens)?;
            let next = argmax_lowest(tape.value(logits).data());
            out.push(next);
            if next == EOS {
                break;
            }
            tokens.push(next);
        }
        Ok(out)
    }
}

/// Argmax with ties resolved to the lowest index.
pub fn argmax_lowest<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
