//! Central finite-difference verification of analytic gradients.
//!
//! Two entry points: [`fd_check_op`] probes a single tape program exhaustively
//! (used by the per-operation unit tests), and [`check_store`] sweeps the
//! trainable parameters of a whole model against a scalar loss closure
//! (used by the `gradcheck` CLI subcommand and the acceptance suite).
//!
//! The finite-difference side only ever evaluates the forward value, so it is
//! independent of the backward rules it is checking.

use std::collections::HashMap;
use std::time::Instant;

use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step used throughout.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Relative error with a floor so near-zero gradient pairs compare sanely:
/// |a - b| / max(|a|, |b|, floor).
pub fn rel_err_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(floor)
}

/// Per-op check floor: tight graphs with small loss values.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floored(a, b, 1e-6)
}

/// Whole-model check floor. The central difference of a loss of magnitude L
/// carries ~eps*L/step of roundoff; near-zero gradient coordinates would
/// otherwise report that noise as relative error.
pub const MODEL_REL_FLOOR: f64 = 1e-5;

/// Reduce an arbitrary tape output to a scalar through a fixed pseudo-random
/// weighting, so every output element contributes gradient signal.
fn weighted_scalar<F: Scalar>(tape: &mut Tape<F>, out: Var) -> Result<Var> {
    let n = tape.value(out).numel();
    let mut rng = Rng::seed_from_u64(0xC0FFEE);
    let w: Vec<F> = (0..n).map(|_| F::of(rng.uniform(0.5, 1.5))).collect();
    let flat = tape.reshape(out, vec![n])?;
    let wv = tape.input_from(vec![n], w)?;
    let prod = tape.mul(flat, wv)?;
    tape.sum_vec(prod)
}

/// Exhaustive finite-difference check of one tape program.
///
/// `build` assembles the program from pre-registered vars; the check compares
/// the backward-pass gradient of a weighted-sum readout against central
/// differences for every element of every input. Returns the max relative
/// error over all inputs.
pub fn fd_check_op<F: Scalar>(
    inputs: &[Tensor<F>],
    step: f64,
    build: &mut dyn FnMut(&mut Tape<F>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars)?;
    let loss = weighted_scalar(&mut tape, out)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.iter().map(|x| x.to_f64_lossy()).collect())
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();

    let mut eval = |mutated: &[Tensor<F>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = mutated.iter().map(|t| tape.input(t)).collect();
        let out = build(&mut tape, &vars)?;
        let loss = weighted_scalar(&mut tape, out)?;
        Ok(tape.scalar_value(loss).to_f64_lossy())
    };

    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    let mut max_err = 0.0f64;
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + F::of(step);
            let up = eval(&work)?;
            work[ti].data_mut()[j] = orig - F::of(step);
            let down = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * step);
            max_err = max_err.max(rel_err(analytic[ti][j], fd));
        }
    }
    Ok(max_err)
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub elapsed_secs: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Sweep trainable tensors of an arbitrary context against a loss closure.
///
/// Tensors with at most `full_below` elements are checked exhaustively;
/// larger tensors at `samples_cap` seeded-random coordinates each (or
/// exhaustively when `samples_cap` is `None`). `analytic` maps tensor names
/// to the gradient of the same loss computed by a backward pass; `get`/`set`
/// access one coordinate so the original value restores exactly.
#[allow(clippy::too_many_arguments)]
pub fn check_with<C>(
    ctx: &mut C,
    tensors: &[(String, usize)],
    analytic: &HashMap<String, Vec<f64>>,
    get: &mut dyn FnMut(&C, &str, usize) -> f64,
    set: &mut dyn FnMut(&mut C, &str, usize, f64),
    loss: &mut dyn FnMut(&C) -> Result<f64>,
    step: f64,
    full_below: usize,
    samples_cap: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut rng = Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let mut coords_total = 0usize;

    for (name, numel) in tensors {
        let numel = *numel;
        let grad = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no analytic gradient for {name}"));
        assert_eq!(grad.len(), numel, "gradient length mismatch for {name}");

        let coords: Vec<usize> = match samples_cap {
            Some(cap) if numel > full_below && numel > cap => {
                let mut idx: Vec<usize> = (0..numel).collect();
                // partial Fisher-Yates: first `cap` entries become the sample
                for i in 0..cap {
                    let j = i + rng.below(numel - i);
                    idx.swap(i, j);
                }
                idx.truncate(cap);
                idx
            }
            _ => (0..numel).collect(),
        };

        let mut max_err = 0.0f64;
        for &j in &coords {
            let orig = get(ctx, name, j);
            set(ctx, name, j, orig + step);
            let up = loss(ctx)?;
            set(ctx, name, j, orig - step);
            let down = loss(ctx)?;
            set(ctx, name, j, orig);
            let fd = (up - down) / (2.0 * step);
            max_err = max_err.max(rel_err_floored(grad[j], fd, MODEL_REL_FLOOR));
        }
        coords_total += coords.len();
        checks.push(ParamCheck {
            name: name.clone(),
            numel,
            checked: coords.len(),
            max_rel_err: max_err,
        });
    }

    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        checks,
        max_rel_err,
        coords_checked: coords_total,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// [`check_with`] specialized to a bare parameter store.
pub fn check_store<F: Scalar>(
    store: &mut ParamStore<F>,
    analytic: &HashMap<String, Vec<f64>>,
    loss: &mut dyn FnMut(&ParamStore<F>) -> Result<f64>,
    step: f64,
    full_below: usize,
    samples_cap: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let tensors: Vec<(String, usize)> = store
        .trainable_ids()
        .into_iter()
        .map(|id| {
            let p = store.get(id);
            (p.name.clone(), p.tensor.numel())
        })
        .collect();
    check_with(
        store,
        &tensors,
        analytic,
        &mut |s, name, j| {
            let id = s.id(name).expect("known parameter");
            s.get(id).tensor.data()[j].to_f64_lossy()
        },
        &mut |s, name, j, value| {
            let id = s.id(name).expect("known parameter");
            s.get_mut(id).tensor.data_mut()[j] = F::of(value);
        },
        loss,
        step,
        full_below,
        samples_cap,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    type T = Tensor<f64>;

    fn randt(shape: Vec<usize>, rng: &mut Rng) -> T {
        T::randn(shape, 0.6, rng)
    }

    // Per-operation finite-difference checks: every differentiable op on
    // random ~10-element inputs must match central differences to 1e-5.

    #[test]
    fn fd_matmul() {
        let mut rng = Rng::seed_from_u64(11);
        let a = randt(vec![4, 5], &mut rng);
        let b = randt(vec![5, 3], &mut rng);
        let err = fd_check_op(&[a, b], DEFAULT_FD_STEP, &mut |t, v| t.matmul(v[0], v[1]))
            .unwrap();
        assert!(err < 1e-6, "matmul fd err {err}");
    }

    #[test]
    fn fd_softmax_vector() {
        let mut rng = Rng::seed_from_u64(12);
        let x = randt(vec![8], &mut rng);
        let err =
            fd_check_op(&[x], DEFAULT_FD_STEP, &mut |t, v| t.softmax(v[0])).unwrap();
        assert!(err < 1e-5, "softmax fd err {err}");
    }

    #[test]
    fn fd_sigmoid() {
        let mut rng = Rng::seed_from_u64(13);
        let x = randt(vec![10], &mut rng);
        let err =
            fd_check_op(&[x], DEFAULT_FD_STEP, &mut |t, v| t.sigmoid(v[0])).unwrap();
        assert!(err < 1e-6, "sigmoid fd err {err}");
    }

    #[test]
    fn fd_gelu() {
        let mut rng = Rng::seed_from_u64(14);
        let x = randt(vec![10], &mut rng);
        let err = fd_check_op(&[x], DEFAULT_FD_STEP, &mut |t, v| t.gelu(v[0])).unwrap();
        assert!(err < 1e-5, "gelu fd err {err}");
    }

    #[test]
    fn fd_layer_norm() {
        let mut rng = Rng::seed_from_u64(15);
        let x = randt(vec![3, 4], &mut rng);
        let gamma = T::from_f64(vec![4], &[1.1, 0.9, 1.3, 0.7]).unwrap();
        let beta = T::from_f64(vec![4], &[0.1, -0.2, 0.0, 0.3]).unwrap();
        let err = fd_check_op(&[x, gamma, beta], DEFAULT_FD_STEP, &mut |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-6)
        })
        .unwrap();
        assert!(err < 1e-5, "layer_norm fd err {err}");
    }

    #[test]
    fn fd_cross_entropy() {
        let mut rng = Rng::seed_from_u64(16);
        let logits = randt(vec![3, 5], &mut rng);
        let err = fd_check_op(&[logits], DEFAULT_FD_STEP, &mut |t, v| {
            t.cross_entropy_rows(v[0], &[1, 4, 0], &[1.0, 0.0, 1.0])
        })
        .unwrap();
        assert!(err < 1e-5, "cross_entropy fd err {err}");
    }

    #[test]
    fn fd_cosine() {
        let mut rng = Rng::seed_from_u64(17);
        let a = randt(vec![6], &mut rng);
        let b = randt(vec![6], &mut rng);
        let err =
            fd_check_op(&[a, b], DEFAULT_FD_STEP, &mut |t, v| t.cosine(v[0], v[1])).unwrap();
        assert!(err < 1e-5, "cosine fd err {err}");
    }

    #[test]
    fn fd_pooling_reductions() {
        let mut rng = Rng::seed_from_u64(18);
        let x = randt(vec![4, 3], &mut rng);
        let err = fd_check_op(&[x], DEFAULT_FD_STEP, &mut |t, v| t.mean_rows(v[0])).unwrap();
        assert!(err < 1e-6, "mean_rows fd err {err}");

        let mut rng = Rng::seed_from_u64(19);
        let x = randt(vec![9], &mut rng);
        let err = fd_check_op(&[x], DEFAULT_FD_STEP, &mut |t, v| t.max_vec(v[0])).unwrap();
        assert!(err < 1e-6, "max_vec fd err {err}");
    }

    #[test]
    fn fd_composite_gate_shape() {
        // sigmoid(concat) + add, the exact composite the gating layer uses
        let mut rng = Rng::seed_from_u64(20);
        let e = randt(vec![3, 4], &mut rng);
        let c = randt(vec![4], &mut rng);
        let w = randt(vec![8, 4], &mut rng);
        let err = fd_check_op(&[e, c, w], DEFAULT_FD_STEP, &mut |t, v| {
            let rep = t.repeat_rows(v[1], 3)?;
            let cat = t.concat(1, &[v[0], rep])?;
            let pre = t.matmul(cat, v[2])?;
            let sig = t.sigmoid(pre)?;
            t.add(v[0], sig)
        })
        .unwrap();
        assert!(err < 1e-5, "gate composite fd err {err}");
    }

    #[test]
    fn fd_transpose_slice_concat() {
        let mut rng = Rng::seed_from_u64(21);
        let x = randt(vec![3, 4], &mut rng);
        let err = fd_check_op(&[x], DEFAULT_FD_STEP, &mut |t, v| {
            let tr = t.transpose(v[0])?;
            let top = t.slice_rows(tr, 0, 2)?;
            let bottom = t.slice_rows(tr, 2, 2)?;
            let back = t.concat(0, &[bottom, top])?;
            let cols = t.slice_cols(back, 1, 2)?;
            t.scale(cols, 1.7)
        })
        .unwrap();
        assert!(err < 1e-6, "transpose/slice/concat fd err {err}");
    }

    #[test]
    fn fd_embedding_and_bias() {
        let mut rng = Rng::seed_from_u64(22);
        let table = randt(vec![5, 3], &mut rng);
        let bias = randt(vec![3], &mut rng);
        let err = fd_check_op(&[table, bias], DEFAULT_FD_STEP, &mut |t, v| {
            let e = t.embedding(v[0], &[4, 0, 4, 2])?;
            t.add_bias_row(e, v[1])
        })
        .unwrap();
        assert!(err < 1e-5, "embedding fd err {err}");
    }

    #[test]
    fn fd_max_elem() {
        let mut rng = Rng::seed_from_u64(23);
        let a = randt(vec![7], &mut rng);
        let b = randt(vec![7], &mut rng);
        let err =
            fd_check_op(&[a, b], DEFAULT_FD_STEP, &mut |t, v| t.max_elem(v[0], v[1])).unwrap();
        assert!(err < 1e-6, "max_elem fd err {err}");
    }
}
