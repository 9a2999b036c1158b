//! Low-rank adapters over frozen linear maps.
//!
//! An adapted map computes `x -> x W + (alpha/r) * (x B^T) A^T` with the base
//! `W` frozen and only the factors `A` (small Gaussian) and `B` (zeros at
//! init, so the adapted map starts exactly equal to the base) receiving
//! gradients. Adapter dropout is applied to the low-rank path input during
//! training only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gaussian std for the A factor at init.
const LORA_A_STD: f64 = 0.02;

/// Rank/scale/dropout settings for one adapter site.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl AdapterSpec {
    /// Register a frozen base plus its adapter under `name`.
    pub fn build<F: Scalar>(
        &self,
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<LoraLinear> {
        let base = LoraLinear::frozen_base(store, name, d_in, d_out, rng)?;
        let adapter = LoraAdapter::init(
            store,
            name,
            d_in,
            d_out,
            self.rank,
            self.alpha,
            self.dropout_p,
            rng,
        )?;
        Ok(LoraLinear::new(base, Some(adapter)))
    }
}

/// Rank/scale for one plan target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSetting {
    pub rank: usize,
    pub alpha: f64,
}

/// Which maps carry adapters and at what settings. The language-model head
/// entry is optional: when present the head base freezes and only its
/// adapter trains; when absent the head trains directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPlan {
    pub qformer_attn: TargetSetting,
    pub qformer_mlp: TargetSetting,
    pub decoder_projector: TargetSetting,
    pub decoder_head: Option<TargetSetting>,
    pub dropout_p: f64,
}

impl Default for LoraPlan {
    fn default() -> Self {
        LoraPlan {
            qformer_attn: TargetSetting { rank: 4, alpha: 8.0 },
            qformer_mlp: TargetSetting { rank: 4, alpha: 8.0 },
            decoder_projector: TargetSetting { rank: 4, alpha: 8.0 },
            decoder_head: None,
            dropout_p: 0.05,
        }
    }
}

impl LoraPlan {
    pub fn spec(&self, setting: TargetSetting) -> AdapterSpec {
        AdapterSpec {
            rank: setting.rank,
            alpha: setting.alpha,
            dropout_p: self.dropout_p,
        }
    }

    /// Apply one (rank, alpha) pair to every target, the sweep protocol.
    pub fn with_uniform(rank: usize, alpha: f64) -> Self {
        let s = TargetSetting { rank, alpha };
        LoraPlan {
            qformer_attn: s,
            qformer_mlp: s,
            decoder_projector: s,
            decoder_head: None,
            dropout_p: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// [d_out, r]
    pub a: ParamId,
    /// [r, d_in]
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl LoraAdapter {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        dropout_p: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) / 2 {
            return Err(Error::Config(format!(
                "lora rank {rank} must satisfy 1 <= r <= min({d_in},{d_out})/2"
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::Config("lora alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Config("lora dropout must lie in [0,1)".into()));
        }
        let a = store.register(
            &format!("{name}.lora_a"),
            Tensor::randn(vec![d_out, rank], LORA_A_STD, rng),
            true,
        )?;
        let b = store.register(
            &format!("{name}.lora_b"),
            Tensor::zeros(vec![rank, d_in]),
            true,
        )?;
        Ok(LoraAdapter {
            a,
            b,
            rank,
            alpha,
            dropout_p,
        })
    }
}

/// A (possibly adapted) linear map with a frozen base weight.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    /// [d_in, d_out], frozen
    pub base: ParamId,
    pub adapter: Option<LoraAdapter>,
}

impl LoraLinear {
    /// Register a frozen Gaussian base weight.
    pub fn frozen_base<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let std = 1.0 / (d_in as f64).sqrt();
        store.register(name, Tensor::randn(vec![d_in, d_out], std, rng), false)
    }

    pub fn new(base: ParamId, adapter: Option<LoraAdapter>) -> Self {
        LoraLinear { base, adapter }
    }

    /// Forward through base plus scaled low-rank path. `dropout_rng` enables
    /// adapter dropout (training only).
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        store: &ParamStore<F>,
        x: Var,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let w = binding.var(tape, store, self.base);
        let y = tape.matmul(x, w)?;
        let Some(ad) = &self.adapter else {
            return Ok(y);
        };
        let mut xin = x;
        if let Some(rng) = dropout_rng {
            if ad.dropout_p > 0.0 {
                let n = tape.value(x).numel();
                let shape = tape.value(x).shape().to_vec();
                let keep = 1.0 - ad.dropout_p;
                let mask: Vec<F> = (0..n)
                    .map(|_| {
                        if rng.next_f64() < keep {
                            F::of(1.0 / keep)
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                let mask = tape.input_from(shape, mask)?;
                xin = tape.mul(xin, mask)?;
            }
        }
        let a = binding.var(tape, store, ad.a);
        let b = binding.var(tape, store, ad.b);
        let bt = tape.transpose(b)?;
        let h = tape.matmul(xin, bt)?; // [T, r]
        let at = tape.transpose(a)?;
        let u = tape.matmul(h, at)?; // [T, d_out]
        let scaled = tape.scale(u, F::of(ad.alpha / ad.rank as f64))?;
        tape.add(y, scaled)
    }
}

// ── Trainable-parameter accounting ──────────────────────────────────

#[derive(Debug, Clone)]
pub struct AdapterDims {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
}

impl AdapterDims {
    pub fn params(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }
}

/// A counting plan: adapters plus whatever extra trainable groups the plan
/// declares (queries, heads, ...).
#[derive(Debug, Clone, Default)]
pub struct CountPlan {
    pub adapters: Vec<AdapterDims>,
    pub extras: Vec<(String, usize)>,
}

impl CountPlan {
    pub fn total(&self) -> usize {
        self.adapters.iter().map(AdapterDims::params).sum::<usize>()
            + self.extras.iter().map(|(_, n)| n).sum::<usize>()
    }
}

pub fn count_trainable(plan: &CountPlan) -> usize {
    plan.total()
}

/// Reference-scale counting plan: a 768-wide query transformer of 12 blocks,
/// rank-8 adapters on the eight 768x768 attention projections and the
/// 768<->3072 MLP pair of every block, a rank-4 adapter on the 768->2560
/// language-model input projector, plus the learnable queries and the
/// matching head.
pub fn paper_scale_plan() -> CountPlan {
    let mut adapters = Vec::new();
    for _ in 0..12 {
        for _ in 0..8 {
            adapters.push(AdapterDims {
                d_in: 768,
                d_out: 768,
                rank: 8,
            });
        }
        adapters.push(AdapterDims {
            d_in: 768,
            d_out: 3072,
            rank: 8,
        });
        adapters.push(AdapterDims {
            d_in: 3072,
            d_out: 768,
            rank: 8,
        });
    }
    adapters.push(AdapterDims {
        d_in: 768,
        d_out: 2560,
        rank: 4,
    });
    CountPlan {
        adapters,
        extras: vec![
            ("queries".into(), 32 * 768),
            ("itm_head".into(), 768 * 2 + 2),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
    ) -> (ParamStore<f64>, LoraLinear, Rng) {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(77);
        let base = LoraLinear::frozen_base(&mut store, "proj.w", d_in, d_out, &mut rng).unwrap();
        let adapter =
            LoraAdapter::init(&mut store, "proj", d_in, d_out, rank, alpha, 0.0, &mut rng)
                .unwrap();
        (store, LoraLinear::new(base, Some(adapter)), rng)
    }

    fn run(store: &ParamStore<f64>, lin: &LoraLinear, x: &Tensor<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut binding = Binding::frozen(store);
        let xv = tape.input(x);
        let y = lin.forward(&mut tape, &mut binding, store, xv, None).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn zero_b_is_bit_identical_to_base() {
        let (store, lin, mut rng) = setup(8, 6, 2, 4.0);
        let base_only = LoraLinear::new(lin.base, None);
        for _ in 0..100 {
            let x = Tensor::randn(vec![3, 8], 1.0, &mut rng);
            assert_eq!(run(&store, &lin, &x), run(&store, &base_only, &x));
        }
    }

    #[test]
    fn rank_limited_identity() {
        // W = 0, A and B hold identity blocks, alpha = r: output passes the
        // first r dims through and zeroes the rest.
        let mut store = ParamStore::<f64>::new();
        let d = 6;
        let r = 2;
        let base = store
            .register("w", Tensor::zeros(vec![d, d]), false)
            .unwrap();
        let mut a = Tensor::zeros(vec![d, r]);
        let mut b = Tensor::zeros(vec![r, d]);
        for i in 0..r {
            a.data_mut()[i * r + i] = 1.0;
            b.data_mut()[i * d + i] = 1.0;
        }
        let a = store.register("a", a, true).unwrap();
        let b = store.register("b", b, true).unwrap();
        let lin = LoraLinear::new(
            base,
            Some(LoraAdapter {
                a,
                b,
                rank: r,
                alpha: r as f64,
                dropout_p: 0.0,
            }),
        );
        let x = Tensor::from_f64(vec![1, d], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = run(&store, &lin, &x);
        assert_eq!(y, vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn grads_reach_factors_not_base() {
        let (mut store, lin, mut rng) = setup(6, 6, 2, 8.0);
        // move B off zero so A receives gradient too
        let b_id = lin.adapter.as_ref().unwrap().b;
        let bt = Tensor::randn(vec![2, 6], 0.3, &mut rng);
        store.get_mut(b_id).tensor = bt;

        let mut tape = Tape::new();
        let mut binding = Binding::train(&store);
        let x = Tensor::randn(vec![2, 6], 1.0, &mut rng);
        let xv = tape.input(&x);
        let y = lin
            .forward(&mut tape, &mut binding, &store, xv, None)
            .unwrap();
        let n = tape.value(y).numel();
        let flat = tape.reshape(y, vec![n]).unwrap();
        let loss = tape.sum_vec(flat).unwrap();
        tape.backward(loss).unwrap();
        store.collect_grads(&tape, &binding);

        let ad = lin.adapter.as_ref().unwrap();
        let ga = store.get(ad.a).tensor.grad.as_ref().unwrap();
        let gb = store.get(ad.b).tensor.grad.as_ref().unwrap();
        assert!(ga.iter().any(|&g| g != 0.0), "A must receive gradient");
        assert!(gb.iter().any(|&g| g != 0.0), "B must receive gradient");
        assert!(
            store.get(lin.base).tensor.grad.is_none(),
            "frozen base must not accumulate gradient"
        );
    }

    #[test]
    fn adapted_map_is_linear() {
        let (mut store, lin, mut rng) = setup(5, 7, 2, 6.0);
        let b_id = lin.adapter.as_ref().unwrap().b;
        store.get_mut(b_id).tensor = Tensor::randn(vec![2, 5], 0.5, &mut rng);

        let x1 = Tensor::randn(vec![1, 5], 1.0, &mut rng);
        let x2 = Tensor::randn(vec![1, 5], 1.0, &mut rng);
        let (a_c, b_c) = (1.7, -0.4);
        let combo = Tensor::from_f64(
            vec![1, 5],
            &x1.data()
                .iter()
                .zip(x2.data())
                .map(|(&u, &v)| a_c * u + b_c * v)
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let y1 = run(&store, &lin, &x1);
        let y2 = run(&store, &lin, &x2);
        let yc = run(&store, &lin, &combo);
        for i in 0..yc.len() {
            assert!((yc[i] - (a_c * y1[i] + b_c * y2[i])).abs() < 1e-12);
        }
    }

    /// Row-reduction rank estimate, independent of any tensor machinery.
    fn matrix_rank(mut m: Vec<Vec<f64>>) -> usize {
        let rows = m.len();
        let cols = m[0].len();
        let mut rank = 0;
        for col in 0..cols {
            let pivot = (rank..rows).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()));
            let Some(p) = pivot else { break };
            if m[p][col].abs() < 1e-9 {
                continue;
            }
            m.swap(rank, p);
            let d = m[rank][col];
            for r in 0..rows {
                if r != rank {
                    let f = m[r][col] / d;
                    for c in 0..cols {
                        m[r][c] -= f * m[rank][c];
                    }
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn update_rank_bounded_by_r() {
        let mut rng = Rng::seed_from_u64(5);
        let (d_in, d_out, r) = (10, 8, 3);
        let a = Tensor::<f64>::randn(vec![d_out, r], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![r, d_in], 1.0, &mut rng);
        // update = A B, shape [d_out, d_in]
        let mut update = vec![vec![0.0; d_in]; d_out];
        for i in 0..d_out {
            for j in 0..d_in {
                for k in 0..r {
                    update[i][j] += a.data()[i * r + k] * b.data()[k * d_in + j];
                }
            }
        }
        assert!(matrix_rank(update) <= r);
    }

    #[test]
    fn rank_guard_enforced() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seed_from_u64(1);
        assert!(
            LoraAdapter::init(&mut store, "x", 8, 8, 5, 8.0, 0.0, &mut rng).is_err(),
            "r must stay at or below min/2"
        );
    }

    #[test]
    fn counting_matches_closed_form() {
        let single = CountPlan {
            adapters: vec![AdapterDims {
                d_in: 768,
                d_out: 768,
                rank: 8,
            }],
            extras: vec![],
        };
        assert_eq!(count_trainable(&single), 12_288);
        assert_eq!(count_trainable(&CountPlan::default()), 0);
    }

    #[test]
    fn paper_scale_total_near_two_million() {
        let total = count_trainable(&paper_scale_plan());
        assert!(
            (1_800_000..=2_200_000).contains(&total),
            "paper-scale trainable count {total}"
        );
    }
}
