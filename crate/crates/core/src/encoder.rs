//! Dual-pathway visual encoding.
//!
//! A small pre-norm vision transformer encodes the whole enhanced image
//! (global pathway) and each mask-isolated region (region pathway) with the
//! same weights; region encodings are pooled into one token sequence and the
//! two pathways fuse through a learnable projection over the tokenwise
//! feature concatenation.
//!
//! Encoder weights are frozen after initialization by default, standing in
//! for a pretrained backbone; tests can unfreeze to exercise gradients
//! through the full stack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::nn::{self, LN_EPS};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 8,
            depth: 2,
            dim: 64,
            heads: 4,
            mlp_ratio: 2.0,
        }
    }
}

impl VitConfig {
    /// Reference-scale constants (224/14 -> 257 tokens of width 1024); used
    /// only for shape bookkeeping, never trained at this scale.
    pub fn paper_scale() -> Self {
        VitConfig {
            image_size: 224,
            patch_size: 14,
            depth: 24,
            dim: 1024,
            heads: 16,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must divide into {} heads",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio <= 0.0 {
            return Err(Error::Config("depth and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Patch grid plus the class token.
    pub fn token_count(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    fn mlp_hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round() as usize
    }
}

/// How per-region encodings aggregate into one region-pathway sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolMode {
    Mean,
    Max,
}

#[derive(Debug, Clone)]
struct VitBlock {
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
pub struct VitModule {
    pub cfg: VitConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<VitBlock>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

impl VitModule {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: VitConfig,
        trainable: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let pd = cfg.patch_dim();
        let t = cfg.token_count();
        let hid = cfg.mlp_hidden();
        let reg = |store: &mut ParamStore<F>, name: String, tensor: Tensor<F>| {
            store.register(&name, tensor, trainable)
        };

        let patch_w = reg(
            store,
            "vit.patch.w".into(),
            Tensor::randn(vec![pd, d], 1.0 / (pd as f64).sqrt(), rng),
        )?;
        let patch_b = reg(store, "vit.patch.b".into(), Tensor::zeros(vec![d]))?;
        let cls = reg(store, "vit.cls".into(), Tensor::randn(vec![1, d], 0.02, rng))?;
        let pos = reg(store, "vit.pos".into(), Tensor::randn(vec![t, d], 0.02, rng))?;

        let mut blocks = Vec::with_capacity(cfg.depth);
        let proj_std = 1.0 / (d as f64).sqrt();
        for i in 0..cfg.depth {
            let p = format!("vit.block{i}");
            blocks.push(VitBlock {
                ln1_g: reg(store, format!("{p}.ln1.g"), Tensor::full(vec![d], F::one()))?,
                ln1_b: reg(store, format!("{p}.ln1.b"), Tensor::zeros(vec![d]))?,
                wq: reg(store, format!("{p}.wq"), Tensor::randn(vec![d, d], proj_std, rng))?,
                wk: reg(store, format!("{p}.wk"), Tensor::randn(vec![d, d], proj_std, rng))?,
                wv: reg(store, format!("{p}.wv"), Tensor::randn(vec![d, d], proj_std, rng))?,
                wo: reg(store, format!("{p}.wo"), Tensor::randn(vec![d, d], proj_std, rng))?,
                ln2_g: reg(store, format!("{p}.ln2.g"), Tensor::full(vec![d], F::one()))?,
                ln2_b: reg(store, format!("{p}.ln2.b"), Tensor::zeros(vec![d]))?,
                w1: reg(store, format!("{p}.mlp.w1"), Tensor::randn(vec![d, hid], proj_std, rng))?,
                w2: reg(
                    store,
                    format!("{p}.mlp.w2"),
                    Tensor::randn(vec![hid, d], 1.0 / (hid as f64).sqrt(), rng),
                )?,
            });
        }
        let lnf_g = reg(store, "vit.lnf.g".into(), Tensor::full(vec![d], F::one()))?;
        let lnf_b = reg(store, "vit.lnf.b".into(), Tensor::zeros(vec![d]))?;

        Ok(VitModule {
            cfg,
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            lnf_g,
            lnf_b,
        })
    }

    /// Row-major patch extraction: one row per patch, pixel channels
    /// interleaved last.
    fn patchify<F: Scalar>(&self, img: &RgbImage<F>) -> Result<Tensor<F>> {
        let s = self.cfg.image_size;
        if img.width() != s || img.height() != s {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: vec![img.width(), img.height()],
                rhs: vec![s, s],
            });
        }
        let p = self.cfg.patch_size;
        let side = s / p;
        let mut data = Vec::with_capacity(side * side * self.cfg.patch_dim());
        for py in 0..side {
            for px in 0..side {
                for dy in 0..p {
                    for dx in 0..p {
                        let pix = img.pixel(px * p + dx, py * p + dy);
                        data.extend_from_slice(&pix);
                    }
                }
            }
        }
        Tensor::new(vec![side * side, self.cfg.patch_dim()], data)
    }

    /// Encode one image into all tokens (class token first): patch embed,
    /// positional add, pre-norm attention/MLP blocks, final layer norm.
    pub fn encode<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        store: &ParamStore<F>,
        img: &RgbImage<F>,
    ) -> Result<Var> {
        let patches = self.patchify(img)?;
        let pv = tape.input(&patches);
        let pw = binding.var(tape, store, self.patch_w);
        let pb = binding.var(tape, store, self.patch_b);
        let embedded = nn::linear(tape, pv, pw, Some(pb))?;
        let cls = binding.var(tape, store, self.cls);
        let mut x = tape.concat(0, &[cls, embedded])?;
        let pos = binding.var(tape, store, self.pos);
        x = tape.add(x, pos)?;

        let eps = F::of(LN_EPS);
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
            let attn = nn::multi_head_attention(tape, q, k, v, self.cfg.heads, None)?;
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
        tape.layer_norm(x, gf, bf, eps)
    }

    /// Global and region pathways through the shared encoder. Region
    /// encodings pool tokenwise (mean or max); an empty mask set yields a
    /// zero region sequence.
    pub fn dual_encode<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        store: &ParamStore<F>,
        enhanced: &RgbImage<F>,
        masked_regions: &[RgbImage<F>],
        pool: PoolMode,
    ) -> Result<(Var, Var)> {
        let e_g = self.encode(tape, binding, store, enhanced)?;
        let t = self.cfg.token_count();
        let d = self.cfg.dim;
        let e_s = if masked_regions.is_empty() {
            tape.input(&Tensor::zeros(vec![t, d]))
        } else {
            let encs: Vec<Var> = masked_regions
                .iter()
                .map(|r| self.encode(tape, binding, store, r))
                .collect::<Result<_>>()?;
            match pool {
                PoolMode::Mean => {
                    let sum = tape.add_n(&encs)?;
                    tape.scale(sum, F::one() / F::of(encs.len() as f64))?
                }
                PoolMode::Max => {
                    let mut acc = encs[0];
                    for &e in &encs[1..] {
                        acc = tape.max_elem(acc, e)?;
                    }
                    acc
                }
            }
        };
        Ok((e_g, e_s))
    }
}

/// Tokenwise feature-axis fusion: concat [E_G; E_S] to width 2*dim, then
/// project with the learnable W_f.
pub fn fuse<F: Scalar>(tape: &mut Tape<F>, e_g: Var, e_s: Var, w_f: Var) -> Result<Var> {
    let cat = tape.concat(1, &[e_g, e_s])?;
    tape.matmul(cat, w_f)
}

/// The learnable fusion projection W_f: [2*dim, d_f].
#[derive(Debug, Clone)]
pub struct FusionModule {
    pub w_f: ParamId,
    pub dim: usize,
    pub d_f: usize,
}

impl FusionModule {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        dim: usize,
        d_f: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w_f = store.register(
            "fusion.w_f",
            Tensor::randn(vec![2 * dim, d_f], 1.0 / (2.0 * dim as f64).sqrt(), rng),
            true,
        )?;
        Ok(FusionModule { w_f, dim, d_f })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use std::collections::HashMap;

    type Img = RgbImage<f64>;

    fn desk_vit(trainable: bool) -> (ParamStore<f64>, VitModule, Rng) {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(4242);
        let vit = VitModule::new(&mut store, VitConfig::default(), trainable, &mut rng).unwrap();
        (store, vit, rng)
    }

    fn random_img(size: usize, rng: &mut Rng) -> Img {
        let n = size * size;
        let planes: [Vec<f64>; 3] = [
            (0..n).map(|_| rng.next_f64()).collect(),
            (0..n).map(|_| rng.next_f64()).collect(),
            (0..n).map(|_| rng.next_f64()).collect(),
        ];
        Img::new(size, size, planes).unwrap()
    }

    fn encode_once(store: &ParamStore<f64>, vit: &VitModule, img: &Img) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut binding = Binding::frozen(store);
        let out = vit.encode(&mut tape, &mut binding, store, img).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn desk_config_shape_is_17x64() {
        let (store, vit, mut rng) = desk_vit(false);
        let img = random_img(32, &mut rng);
        let mut tape = Tape::new();
        let mut binding = Binding::frozen(&store);
        let out = vit.encode(&mut tape, &mut binding, &store, &img).unwrap();
        assert_eq!(tape.value(out).shape(), &[17, 64]);
    }

    #[test]
    fn paper_scale_token_arithmetic() {
        let cfg = VitConfig::paper_scale();
        assert_eq!(cfg.token_count(), 257);
        assert_eq!(cfg.dim, 1024);
    }

    #[test]
    fn zero_weights_zero_image_is_finite() {
        let (mut store, vit, _) = desk_vit(false);
        for i in 0..store.len() {
            let p = store.get_mut(crate::params::ParamId(i));
            if p.name.starts_with("vit.") && !p.name.contains("ln") && !p.name.contains("lnf") {
                let n = p.tensor.numel();
                let shape = p.tensor.shape().to_vec();
                p.tensor = Tensor::new(shape, vec![0.0; n]).unwrap();
            }
        }
        let img = Img::filled(32, 32, [0.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let mut binding = Binding::frozen(&store);
        let out = vit.encode(&mut tape, &mut binding, &store, &img).unwrap();
        assert_eq!(tape.value(out).shape(), &[17, 64]);
        assert!(tape.value(out).is_finite());
    }

    #[test]
    fn wrong_image_size_errors() {
        let (store, vit, mut rng) = desk_vit(false);
        let img = random_img(16, &mut rng);
        let mut tape = Tape::new();
        let mut binding = Binding::frozen(&store);
        assert!(vit.encode(&mut tape, &mut binding, &store, &img).is_err());
    }

    #[test]
    fn all_ones_mask_makes_pathways_identical() {
        let (store, vit, mut rng) = desk_vit(false);
        let img = random_img(32, &mut rng);
        let mut tape = Tape::new();
        let mut binding = Binding::frozen(&store);
        let (e_g, e_s) = vit
            .dual_encode(
                &mut tape,
                &mut binding,
                &store,
                &img,
                &[img.clone()],
                PoolMode::Mean,
            )
            .unwrap();
        assert_eq!(tape.value(e_g).data(), tape.value(e_s).data());
    }

    #[test]
    fn empty_masks_zero_region_pathway() {
        let (store, vit, mut rng) = desk_vit(false);
        let img = random_img(32, &mut rng);
        let mut tape = Tape::new();
        let mut binding = Binding::frozen(&store);
        let (_, e_s) = vit
            .dual_encode(&mut tape, &mut binding, &store, &img, &[], PoolMode::Mean)
            .unwrap();
        assert!(tape.value(e_s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_masks_mean_matches_external_pooling() {
        let (store, vit, mut rng) = desk_vit(false);
        let img = random_img(32, &mut rng);
        let r1 = random_img(32, &mut rng);
        let r2 = random_img(32, &mut rng);

        let mut tape = Tape::new();
        let mut binding = Binding::frozen(&store);
        let (_, e_s) = vit
            .dual_encode(
                &mut tape,
                &mut binding,
                &store,
                &img,
                &[r1.clone(), r2.clone()],
                PoolMode::Mean,
            )
            .unwrap();

        let a = encode_once(&store, &vit, &r1);
        let b = encode_once(&store, &vit, &r2);
        for (i, &v) in tape.value(e_s).data().iter().enumerate() {
            assert!((v - 0.5 * (a[i] + b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_order_does_not_change_mean_pool() {
        let (store, vit, mut rng) = desk_vit(false);
        let img = random_img(32, &mut rng);
        let r1 = random_img(32, &mut rng);
        let r2 = random_img(32, &mut rng);
        let r3 = random_img(32, &mut rng);

        let run = |regions: &[Img]| {
            let mut tape = Tape::new();
            let mut binding = Binding::frozen(&store);
            let (_, e_s) = vit
                .dual_encode(&mut tape, &mut binding, &store, &img, regions, PoolMode::Mean)
                .unwrap();
            tape.value(e_s).data().to_vec()
        };
        let fwd = run(&[r1.clone(), r2.clone(), r3.clone()]);
        let rev = run(&[r3, r1, r2]);
        for (a, b) in fwd.iter().zip(&rev) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_projection_selects_pathways() {
        let (store, vit, mut rng) = desk_vit(false);
        let img = random_img(32, &mut rng);
        let other = random_img(32, &mut rng);
        let d = 64;

        let mut tape = Tape::new();
        let mut binding = Binding::frozen(&store);
        let (e_g, e_s) = vit
            .dual_encode(
                &mut tape,
                &mut binding,
                &store,
                &img,
                &[other],
                PoolMode::Mean,
            )
            .unwrap();

        // W_f = [I; 0] selects the global pathway
        let mut wf = Tensor::zeros(vec![2 * d, d]);
        for i in 0..d {
            wf.data_mut()[i * d + i] = 1.0;
        }
        let wf_sel = tape.input(&wf);
        let fused = fuse(&mut tape, e_g, e_s, wf_sel).unwrap();
        let eg_data = tape.value(e_g).data().to_vec();
        assert_eq!(tape.value(fused).data(), &eg_data[..]);

        // W_f = 0 kills everything
        let wf_zero = tape.input(&Tensor::zeros(vec![2 * d, d]));
        let fused0 = fuse(&mut tape, e_g, e_s, wf_zero).unwrap();
        assert!(tape.value(fused0).data().iter().all(|&v| v == 0.0));

        // random W_f equals manual concat-then-matmul
        let wf_rand = Tensor::randn(vec![2 * d, d], 0.2, &mut rng);
        let wfr = tape.input(&wf_rand);
        let fused_r = fuse(&mut tape, e_g, e_s, wfr).unwrap();
        let cat = tape.concat(1, &[e_g, e_s]).unwrap();
        let manual = tape.matmul(cat, wfr).unwrap();
        assert_eq!(tape.value(fused_r).data(), tape.value(manual).data());
    }

    #[test]
    fn identical_pathways_with_half_identity_fusion_reproduce_global() {
        let (store, vit, mut rng) = desk_vit(false);
        let img = random_img(32, &mut rng);
        let d = 64;
        let mut tape = Tape::new();
        let mut binding = Binding::frozen(&store);
        let (e_g, e_s) = vit
            .dual_encode(
                &mut tape,
                &mut binding,
                &store,
                &img,
                &[img.clone()],
                PoolMode::Mean,
            )
            .unwrap();
        let mut wf = Tensor::zeros(vec![2 * d, d]);
        for i in 0..d {
            wf.data_mut()[i * d + i] = 0.5;
            wf.data_mut()[(d + i) * d + i] = 0.5;
        }
        let wfv = tape.input(&wf);
        let fused = fuse(&mut tape, e_g, e_s, wfv).unwrap();
        for (f, g) in tape
            .value(fused)
            .data()
            .iter()
            .zip(tape.value(e_g).data())
        {
            assert!((f - g).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_through_encode_matches_finite_differences() {
        // tiny unfrozen encoder so the sweep is exhaustive
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(99);
        let cfg = VitConfig {
            image_size: 8,
            patch_size: 4,
            depth: 1,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
        };
        let vit = VitModule::new(&mut store, cfg, true, &mut rng).unwrap();
        let img = random_img(8, &mut rng);

        // analytic gradients of a weighted readout
        let readout: Vec<f64> = (0..5 * 8).map(|i| ((i * 37 % 17) as f64) / 8.5 - 1.0).collect();
        let loss_of = |store: &ParamStore<f64>| -> crate::error::Result<f64> {
            let mut tape = Tape::new();
            let mut binding = Binding::frozen(store);
            let out = vit.encode(&mut tape, &mut binding, store, &img)?;
            let n = tape.value(out).numel();
            let flat = tape.reshape(out, vec![n])?;
            let w = tape.input_from(vec![n], readout.iter().cycle().take(n).cloned().collect())?;
            let prod = tape.mul(flat, w)?;
            let s = tape.sum_vec(prod)?;
            Ok(tape.scalar_value(s))
        };

        let mut tape = Tape::new();
        let mut binding = Binding::train(&store);
        let out = vit.encode(&mut tape, &mut binding, &store, &img).unwrap();
        let n = tape.value(out).numel();
        let flat = tape.reshape(out, vec![n]).unwrap();
        let w = tape
            .input_from(vec![n], readout.iter().cycle().take(n).cloned().collect())
            .unwrap();
        let prod = tape.mul(flat, w).unwrap();
        let loss = tape.sum_vec(prod).unwrap();
        tape.backward(loss).unwrap();
        store.collect_grads(&tape, &binding);

        let analytic: HashMap<String, Vec<f64>> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    p.tensor.grad.clone().unwrap_or_else(|| vec![0.0; p.tensor.numel()]),
                )
            })
            .collect();

        let report = gradcheck::check_store(
            &mut store,
            &analytic,
            &mut |s| loss_of(s),
            1e-5,
            64,
            Some(24),
            7,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "encode gradcheck max err {}",
            report.max_rel_err
        );
    }
}
