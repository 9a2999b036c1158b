//! Shared transformer building blocks: linear maps, multi-head attention,
//! attention masks, and the two-layer GELU MLP.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

/// Additive mask value for disallowed attention edges. Large enough to zero
/// the softmax weight, small enough never to overflow the max-subtraction.
const MASK_OFF: f64 = -1e9;

pub fn linear<F: Scalar>(tape: &mut Tape<F>, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match bias {
        Some(b) => tape.add_bias_row(y, b),
        None => Ok(y),
    }
}

/// Multi-head scaled dot-product attention on already-projected inputs.
///
/// `q`: [Tq, d], `k`/`v`: [Tk, d]; `d` splits into `heads` slices of
/// d_k = d/heads. Per head: softmax(q k^T / sqrt(d_k)) v, heads concatenated
/// back to [Tq, d]. The optional additive mask is [Tq, Tk]. Output
/// projection is the caller's business.
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let d = tape.value(q).cols();
    debug_assert_eq!(d % heads, 0, "width must divide heads");
    let dk = d / heads;
    let scale = F::of(1.0 / (dk as f64).sqrt());

    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores, scale)?;
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let probs = tape.softmax(scores)?;
        outs.push(tape.matmul(probs, vh)?);
    }
    tape.concat(1, &outs)
}

/// Two-layer MLP with GELU, bias-free.
pub fn mlp<F: Scalar>(tape: &mut Tape<F>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let h = tape.matmul(x, w1)?;
    let h = tape.gelu(h)?;
    tape.matmul(h, w2)
}

fn mask_tensor<F: Scalar>(rows: usize, cols: usize, allowed: impl Fn(usize, usize) -> bool) -> Tensor<F> {
    let mut data = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            if !allowed(i, j) {
                data[i * cols + j] = F::of(MASK_OFF);
            }
        }
    }
    Tensor::new(vec![rows, cols], data).expect("mask shape")
}

/// Plain causal mask over `t` positions.
pub fn causal_mask<F: Scalar>(tape: &mut Tape<F>, t: usize) -> Var {
    tape.input(&mask_tensor(t, t, |i, j| j <= i))
}

/// Joint stream mask for `nq` query positions followed by `nt` text
/// positions: queries attend everywhere, text attends all queries plus
/// causally within the text.
pub fn joint_mask<F: Scalar>(tape: &mut Tape<F>, nq: usize, nt: usize) -> Var {
    let n = nq + nt;
    tape.input(&mask_tensor(n, n, |i, j| {
        if i < nq {
            true
        } else {
            j < nq || j <= i
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_attention_returns_value() {
        let mut tape = Tape::<f64>::new();
        let q = tape
            .input(&Tensor::from_f64(vec![2, 4], &[0.3, -1.0, 0.5, 2.0, 0.0, 0.1, -0.2, 0.7]).unwrap());
        let k = tape.input(&Tensor::from_f64(vec![1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let v = tape.input(&Tensor::from_f64(vec![1, 4], &[9.0, 8.0, 7.0, 6.0]).unwrap());
        let out = multi_head_attention(&mut tape, q, k, v, 2, None).unwrap();
        // one key: softmax weight is exactly 1, every query row equals v
        for row in 0..2 {
            for col in 0..4 {
                assert!((tape.value(out).at(row, col) - tape.value(v).at(0, col)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let mut tape = Tape::<f64>::new();
        let q = tape.input(&Tensor::from_f64(vec![1, 2], &[0.4, -0.9]).unwrap());
        let k = tape.input(&Tensor::from_f64(vec![3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap());
        let v = tape.input(&Tensor::from_f64(vec![3, 2], &[3.0, 0.0, 0.0, 3.0, 3.0, 3.0]).unwrap());
        let out = multi_head_attention(&mut tape, q, k, v, 1, None).unwrap();
        assert!((tape.value(out).at(0, 0) - 2.0).abs() < 1e-12);
        assert!((tape.value(out).at(0, 1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut tape = Tape::<f64>::new();
        let m = causal_mask::<f64>(&mut tape, 3);
        let t = tape.value(m);
        assert_eq!(t.at(0, 0), 0.0);
        assert!(t.at(0, 1) < -1e8);
        assert_eq!(t.at(2, 1), 0.0);
    }

    #[test]
    fn joint_mask_rules() {
        let mut tape = Tape::<f64>::new();
        let m = joint_mask::<f64>(&mut tape, 2, 3);
        let t = tape.value(m);
        // query sees future text
        assert_eq!(t.at(0, 4), 0.0);
        // text sees queries
        assert_eq!(t.at(2, 0), 0.0);
        // text does not see future text
        assert!(t.at(2, 3) < -1e8);
        assert_eq!(t.at(3, 2), 0.0);
    }
}
