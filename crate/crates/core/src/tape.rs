//! Reverse-mode differentiation over a recorded operation list.
//!
//! A `Tape` owns every intermediate value of one forward computation as a
//! [`Tensor`] in an arena, plus an ordered record of the operations that
//! produced them. `backward` replays the record in reverse exactly once,
//! accumulating gradients additively into every value that was registered
//! with `param`. The tape is built and consumed within a single training
//! step and is never shared across threads.
//!
//! Broadcasting is deliberately restricted to scalar-with-tensor and
//! bias-row addition; every other shape disagreement is an error, which
//! keeps the gradient rules below auditable one by one.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<F> {
    MatMul {
        a: usize,
        b: usize,
        out: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
        out: usize,
    },
    AddBiasRow {
        a: usize,
        bias: usize,
        out: usize,
        rows: usize,
        cols: usize,
    },
    Mul {
        a: usize,
        b: usize,
        out: usize,
    },
    Scale {
        a: usize,
        c: F,
        out: usize,
    },
    Transpose {
        a: usize,
        out: usize,
        rows: usize,
        cols: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
        out: usize,
        row_counts: Vec<usize>,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
        out: usize,
        col_counts: Vec<usize>,
        rows: usize,
    },
    ConcatVec {
        parts: Vec<usize>,
        out: usize,
        lens: Vec<usize>,
    },
    SliceRows {
        a: usize,
        out: usize,
        start: usize,
        len: usize,
        cols: usize,
        total_rows: usize,
    },
    SliceCols {
        a: usize,
        out: usize,
        start: usize,
        len: usize,
        rows: usize,
        total_cols: usize,
    },
    Reshape {
        a: usize,
        out: usize,
    },
    RepeatRows {
        row: usize,
        out: usize,
        times: usize,
        cols: usize,
    },
    SoftmaxRows {
        a: usize,
        out: usize,
        rows: usize,
        cols: usize,
    },
    Sigmoid {
        a: usize,
        out: usize,
    },
    Gelu {
        a: usize,
        out: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        out: usize,
        rows: usize,
        cols: usize,
        eps: F,
    },
    Embedding {
        table: usize,
        out: usize,
        ids: Vec<usize>,
        vocab: usize,
        dim: usize,
    },
    CrossEntropyRows {
        logits: usize,
        out: usize,
        targets: Vec<usize>,
        weights: Vec<F>,
        rows: usize,
        cols: usize,
    },
    Cosine {
        a: usize,
        b: usize,
        out: usize,
    },
    MeanRows {
        a: usize,
        out: usize,
        rows: usize,
        cols: usize,
    },
    SumVec {
        a: usize,
        out: usize,
    },
    MaxVec {
        a: usize,
        out: usize,
        argmax: usize,
    },
    MaxElem {
        a: usize,
        b: usize,
        out: usize,
    },
}

pub struct Tape<F: Scalar> {
    vals: Vec<Tensor<F>>,
    needs: Vec<bool>,
    grads: Vec<Option<Vec<F>>>,
    ops: Vec<Op<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, t: Tensor<F>, needs: bool) -> Var {
        self.vals.push(t);
        self.needs.push(needs);
        self.grads.push(None);
        Var(self.vals.len() - 1)
    }

    /// Register a value that does not receive gradient.
    pub fn input(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.clone(), false)
    }

    /// Register a trainable leaf; `grad` will hold its gradient after
    /// `backward`.
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.clone(), true)
    }

    pub fn input_from(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        Ok(self.push(Tensor::new(shape, data)?, false))
    }

    pub fn constant_scalar(&mut self, v: F) -> Var {
        self.push(Tensor::scalar(v), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.vals[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> F {
        let t = &self.vals[v.0];
        debug_assert_eq!(t.numel(), 1, "scalar_value on non-scalar");
        t.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.vals.len()
    }

    fn shape2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.vals[v.0].shape();
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    // ── Operations ──────────────────────────────────────────────────

    /// Matrix product of 2-D tensors [m,k] x [k,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a, "matmul")?;
        let (k2, n) = self.shape2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.vals[a.0].shape().to_vec(),
                rhs: self.vals[b.0].shape().to_vec(),
            });
        }
        let out = matmul_nn(self.vals[a.0].data(), self.vals[b.0].data(), m, k, n);
        let needs = self.needs[a.0] || self.needs[b.0];
        let v = self.push(Tensor::new(vec![m, n], out)?, needs);
        self.ops.push(Op::MatMul {
            a: a.0,
            b: b.0,
            out: v.0,
            m,
            k,
            n,
        });
        Ok(v)
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.vals[a.0].shape().to_vec(),
                rhs: self.vals[b.0].shape().to_vec(),
            });
        }
        let data: Vec<F> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.vals[a.0].shape().to_vec();
        let needs = self.needs[a.0] || self.needs[b.0];
        let v = self.push(Tensor::new(shape, data)?, needs);
        self.ops.push(Op::Add {
            a: a.0,
            b: b.0,
            out: v.0,
        });
        Ok(v)
    }

    /// Row-broadcast add: [r,c] + [c].
    pub fn add_bias_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.shape2(a, "add_bias_row")?;
        if self.vals[bias.0].shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_row",
                lhs: self.vals[a.0].shape().to_vec(),
                rhs: self.vals[bias.0].shape().to_vec(),
            });
        }
        let bd = self.vals[bias.0].data().to_vec();
        let data: Vec<F> = self.vals[a.0]
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % cols])
            .collect();
        let needs = self.needs[a.0] || self.needs[bias.0];
        let v = self.push(Tensor::new(vec![rows, cols], data)?, needs);
        self.ops.push(Op::AddBiasRow {
            a: a.0,
            bias: bias.0,
            out: v.0,
            rows,
            cols,
        });
        Ok(v)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.vals[a.0].shape().to_vec(),
                rhs: self.vals[b.0].shape().to_vec(),
            });
        }
        let data: Vec<F> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.vals[a.0].shape().to_vec();
        let needs = self.needs[a.0] || self.needs[b.0];
        let v = self.push(Tensor::new(shape, data)?, needs);
        self.ops.push(Op::Mul {
            a: a.0,
            b: b.0,
            out: v.0,
        });
        Ok(v)
    }

    /// Multiply by a constant scalar.
    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let data: Vec<F> = self.vals[a.0].data().iter().map(|&x| x * c).collect();
        let shape = self.vals[a.0].shape().to_vec();
        let needs = self.needs[a.0];
        let v = self.push(Tensor::new(shape, data)?, needs);
        self.ops.push(Op::Scale {
            a: a.0,
            c,
            out: v.0,
        });
        Ok(v)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.shape2(a, "transpose")?;
        let out = transpose_raw(self.vals[a.0].data(), rows, cols);
        let needs = self.needs[a.0];
        let v = self.push(Tensor::new(vec![cols, rows], out)?, needs);
        self.ops.push(Op::Transpose {
            a: a.0,
            out: v.0,
            rows,
            cols,
        });
        Ok(v)
    }

    /// Concatenate along `axis` (0 = rows, 1 = cols for 2-D; 0 only for 1-D).
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first_dims = self.vals[parts[0].0].shape().len();
        if first_dims == 1 {
            if axis != 0 {
                return Err(Error::Contract("1-D concat only along axis 0".into()));
            }
            return self.concat_vec(parts);
        }
        match axis {
            0 => self.concat_rows(parts),
            1 => self.concat_cols(parts),
            _ => Err(Error::Contract(format!("concat axis {axis} out of range"))),
        }
    }

    fn concat_vec(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        let mut lens = Vec::new();
        for &p in parts {
            let t = &self.vals[p.0];
            if t.shape().len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: t.shape().to_vec(),
                    rhs: vec![data.len()],
                });
            }
            lens.push(t.numel());
            data.extend_from_slice(t.data());
        }
        let needs = parts.iter().any(|p| self.needs[p.0]);
        let n = data.len();
        let v = self.push(Tensor::new(vec![n], data)?, needs);
        self.ops.push(Op::ConcatVec {
            parts: parts.iter().map(|p| p.0).collect(),
            out: v.0,
            lens,
        });
        Ok(v)
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, cols) = self.shape2(parts[0], "concat")?;
        let mut data = Vec::new();
        let mut row_counts = Vec::new();
        for &p in parts {
            let (r, c) = self.shape2(p, "concat")?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.vals[parts[0].0].shape().to_vec(),
                    rhs: self.vals[p.0].shape().to_vec(),
                });
            }
            row_counts.push(r);
            data.extend_from_slice(self.vals[p.0].data());
        }
        let rows: usize = row_counts.iter().sum();
        let needs = parts.iter().any(|p| self.needs[p.0]);
        let v = self.push(Tensor::new(vec![rows, cols], data)?, needs);
        self.ops.push(Op::ConcatRows {
            parts: parts.iter().map(|p| p.0).collect(),
            out: v.0,
            row_counts,
            cols,
        });
        Ok(v)
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (rows, _) = self.shape2(parts[0], "concat")?;
        let mut col_counts = Vec::new();
        for &p in parts {
            let (r, c) = self.shape2(p, "concat")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.vals[parts[0].0].shape().to_vec(),
                    rhs: self.vals[p.0].shape().to_vec(),
                });
            }
            col_counts.push(c);
        }
        let cols: usize = col_counts.iter().sum();
        let mut data = vec![F::zero(); rows * cols];
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let c = col_counts[pi];
            let src = self.vals[p.0].data();
            for i in 0..rows {
                data[i * cols + off..i * cols + off + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let needs = parts.iter().any(|p| self.needs[p.0]);
        let v = self.push(Tensor::new(vec![rows, cols], data)?, needs);
        self.ops.push(Op::ConcatCols {
            parts: parts.iter().map(|p| p.0).collect(),
            out: v.0,
            col_counts,
            rows,
        });
        Ok(v)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape2(a, "slice_rows")?;
        if start + len > rows || len == 0 {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of {rows} rows",
                start + len
            )));
        }
        let data = self.vals[a.0].data()[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs[a.0];
        let v = self.push(Tensor::new(vec![len, cols], data)?, needs);
        self.ops.push(Op::SliceRows {
            a: a.0,
            out: v.0,
            start,
            len,
            cols,
            total_rows: rows,
        });
        Ok(v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape2(a, "slice_cols")?;
        if start + len > cols || len == 0 {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} out of {cols} cols",
                start + len
            )));
        }
        let src = self.vals[a.0].data();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        let needs = self.needs[a.0];
        let v = self.push(Tensor::new(vec![rows, len], data)?, needs);
        self.ops.push(Op::SliceCols {
            a: a.0,
            out: v.0,
            start,
            len,
            rows,
            total_cols: cols,
        });
        Ok(v)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.vals[a.0].numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.vals[a.0].shape().to_vec(),
                rhs: shape,
            });
        }
        let data = self.vals[a.0].data().to_vec();
        let needs = self.needs[a.0];
        let v = self.push(Tensor::new(shape, data)?, needs);
        self.ops.push(Op::Reshape { a: a.0, out: v.0 });
        Ok(v)
    }

    /// Tile a vector [c] into [times, c].
    pub fn repeat_rows(&mut self, row: Var, times: usize) -> Result<Var> {
        let s = self.vals[row.0].shape();
        if s.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "repeat_rows",
                lhs: s.to_vec(),
                rhs: vec![times],
            });
        }
        let cols = s[0];
        let src = self.vals[row.0].data().to_vec();
        let mut data = Vec::with_capacity(times * cols);
        for _ in 0..times {
            data.extend_from_slice(&src);
        }
        let needs = self.needs[row.0];
        let v = self.push(Tensor::new(vec![times, cols], data)?, needs);
        self.ops.push(Op::RepeatRows {
            row: row.0,
            out: v.0,
            times,
            cols,
        });
        Ok(v)
    }

    /// Softmax along the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.vals[a.0].shape().to_vec();
        let cols = *shape.last().expect("non-empty shape");
        let rows = self.vals[a.0].numel() / cols;
        let src = self.vals[a.0].data();
        let mut data = vec![F::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (o, &x) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                let e = (x - m).exp();
                *o = e;
                sum += e;
            }
            for o in &mut data[r * cols..(r + 1) * cols] {
                *o = *o / sum;
            }
        }
        let needs = self.needs[a.0];
        let v = self.push(Tensor::new(shape, data)?, needs);
        self.ops.push(Op::SoftmaxRows {
            a: a.0,
            out: v.0,
            rows,
            cols,
        });
        Ok(v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data: Vec<F> = self.vals[a.0]
            .data()
            .iter()
            .map(|&x| F::one() / (F::one() + (-x).exp()))
            .collect();
        let shape = self.vals[a.0].shape().to_vec();
        let needs = self.needs[a.0];
        let v = self.push(Tensor::new(shape, data)?, needs);
        self.ops.push(Op::Sigmoid { a: a.0, out: v.0 });
        Ok(v)
    }

    /// GELU (tanh form). Smooth, so finite-difference checks stay clean.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<F> = self.vals[a.0].data().iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.vals[a.0].shape().to_vec();
        let needs = self.needs[a.0];
        let v = self.push(Tensor::new(shape, data)?, needs);
        self.ops.push(Op::Gelu { a: a.0, out: v.0 });
        Ok(v)
    }

    /// Per-row layer normalization with learnable gain/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (rows, cols) = self.shape2(x, "layer_norm")?;
        if self.vals[gamma.0].shape() != [cols] || self.vals[beta.0].shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.vals[x.0].shape().to_vec(),
                rhs: self.vals[gamma.0].shape().to_vec(),
            });
        }
        let src = self.vals[x.0].data();
        let g = self.vals[gamma.0].data().to_vec();
        let b = self.vals[beta.0].data().to_vec();
        let mut data = vec![F::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let (mean, rstd) = row_moments(row, eps);
            for j in 0..cols {
                data[r * cols + j] = g[j] * ((row[j] - mean) * rstd) + b[j];
            }
        }
        let needs = self.needs[x.0] || self.needs[gamma.0] || self.needs[beta.0];
        let v = self.push(Tensor::new(vec![rows, cols], data)?, needs);
        self.ops.push(Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            out: v.0,
            rows,
            cols,
            eps,
        });
        Ok(v)
    }

    /// Row lookup: [vocab, dim] table gathered by ids into [len, dim].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.shape2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup of zero ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!(
                "embedding id {bad} out of vocab {vocab}"
            )));
        }
        let src = self.vals[table.0].data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let needs = self.needs[table.0];
        let v = self.push(Tensor::new(vec![ids.len(), dim], data)?, needs);
        self.ops.push(Op::Embedding {
            table: table.0,
            out: v.0,
            ids: ids.to_vec(),
            vocab,
            dim,
        });
        Ok(v)
    }

    /// Weighted negative log-likelihood summed over rows:
    /// sum_t weights[t] * (-log softmax(logits[t])[targets[t]]).
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[F],
    ) -> Result<Var> {
        let (rows, cols) = self.shape2(logits, "cross_entropy")?;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Contract(format!(
                "cross_entropy expects {rows} targets/weights, got {}/{}",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Contract(format!(
                "cross_entropy target {bad} out of {cols} classes"
            )));
        }
        let src = self.vals[logits.0].data();
        let mut total = F::zero();
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for &x in row {
                sum += (x - m).exp();
            }
            let lse = m + sum.ln();
            total += weights[r] * (lse - row[targets[r]]);
        }
        let needs = self.needs[logits.0];
        let v = self.push(Tensor::scalar(total), needs);
        self.ops.push(Op::CrossEntropyRows {
            logits: logits.0,
            out: v.0,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            rows,
            cols,
        });
        Ok(v)
    }

    /// Cosine similarity of two vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.vals[a.0].shape();
        let sb = self.vals[b.0].shape();
        if sa.len() != 1 || sa != sb {
            return Err(Error::ShapeMismatch {
                op: "cosine",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (na, nb, dot) = cosine_parts(self.vals[a.0].data(), self.vals[b.0].data());
        if na == F::zero() || nb == F::zero() {
            return Err(Error::Numeric(
                "zero-norm vector in cosine similarity".into(),
            ));
        }
        let c = dot / (na * nb);
        let needs = self.needs[a.0] || self.needs[b.0];
        let v = self.push(Tensor::scalar(c), needs);
        self.ops.push(Op::Cosine {
            a: a.0,
            b: b.0,
            out: v.0,
        });
        Ok(v)
    }

    /// Mean over rows: [r,c] -> [c].
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.shape2(a, "mean_rows")?;
        let src = self.vals[a.0].data();
        let inv = F::one() / F::of(rows as f64);
        let mut data = vec![F::zero(); cols];
        for r in 0..rows {
            for j in 0..cols {
                data[j] += src[r * cols + j];
            }
        }
        for d in &mut data {
            *d = *d * inv;
        }
        let needs = self.needs[a.0];
        let v = self.push(Tensor::new(vec![cols], data)?, needs);
        self.ops.push(Op::MeanRows {
            a: a.0,
            out: v.0,
            rows,
            cols,
        });
        Ok(v)
    }

    /// Sum of a vector into a scalar.
    pub fn sum_vec(&mut self, a: Var) -> Result<Var> {
        if self.vals[a.0].shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "sum_vec",
                lhs: self.vals[a.0].shape().to_vec(),
                rhs: vec![],
            });
        }
        let total = self.vals[a.0]
            .data()
            .iter()
            .fold(F::zero(), |acc, &x| acc + x);
        let needs = self.needs[a.0];
        let v = self.push(Tensor::scalar(total), needs);
        self.ops.push(Op::SumVec { a: a.0, out: v.0 });
        Ok(v)
    }

    /// Max of a vector; ties resolve to the lowest index.
    pub fn max_vec(&mut self, a: Var) -> Result<Var> {
        if self.vals[a.0].shape().len() != 1 || self.vals[a.0].numel() == 0 {
            return Err(Error::ShapeMismatch {
                op: "max_vec",
                lhs: self.vals[a.0].shape().to_vec(),
                rhs: vec![],
            });
        }
        let src = self.vals[a.0].data();
        let mut argmax = 0;
        for (i, &x) in src.iter().enumerate() {
            if x > src[argmax] {
                argmax = i;
            }
        }
        let needs = self.needs[a.0];
        let v = self.push(Tensor::scalar(src[argmax]), needs);
        self.ops.push(Op::MaxVec {
            a: a.0,
            out: v.0,
            argmax,
        });
        Ok(v)
    }

    /// Elementwise max of same-shape tensors; ties route gradient to `a`.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::ShapeMismatch {
                op: "max_elem",
                lhs: self.vals[a.0].shape().to_vec(),
                rhs: self.vals[b.0].shape().to_vec(),
            });
        }
        let data: Vec<F> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let shape = self.vals[a.0].shape().to_vec();
        let needs = self.needs[a.0] || self.needs[b.0];
        let v = self.push(Tensor::new(shape, data)?, needs);
        self.ops.push(Op::MaxElem {
            a: a.0,
            b: b.0,
            out: v.0,
        });
        Ok(v)
    }

    // ── Composite helpers ───────────────────────────────────────────

    /// Fold a list of same-shape vars with `add`.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = *parts
            .first()
            .ok_or_else(|| Error::Contract("add_n of zero tensors".into()))?;
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Mean of scalar vars.
    pub fn mean_of_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let total = self.add_n(parts)?;
        self.scale(total, F::one() / F::of(parts.len() as f64))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populate gradients of every `param` value reachable from `loss`.
    /// Gradients accumulate additively across multiple uses of a value.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        let Tape {
            vals,
            needs,
            grads,
            ops,
        } = self;
        for op in ops.iter().rev() {
            backward_op(op, vals, needs, grads);
        }
        Ok(())
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────

fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// out[i,p] = sum_j a[i,j] * b[p,j]   (a: [m,n], b: [k,n] -> [m,k])
fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// out[p,j] = sum_i a[i,p] * g[i,j]   (a: [m,k], g: [m,n] -> [k,n])
fn matmul_tn<F: Scalar>(a: &[F], g: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn transpose_raw<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn row_moments<F: Scalar>(row: &[F], eps: F) -> (F, F) {
    let n = F::of(row.len() as f64);
    let mut mean = F::zero();
    for &x in row {
        mean += x;
    }
    mean = mean / n;
    let mut var = F::zero();
    for &x in row {
        let d = x - mean;
        var += d * d;
    }
    var = var / n;
    (mean, F::one() / (var + eps).sqrt())
}

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let c = F::of(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = F::of(0.044_715);
    let half = F::of(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let c = F::of(0.797_884_560_802_865_4);
    let a = F::of(0.044_715);
    let half = F::of(0.5);
    let three = F::of(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

fn cosine_parts<F: Scalar>(a: &[F], b: &[F]) -> (F, F, F) {
    let mut na = F::zero();
    let mut nb = F::zero();
    let mut dot = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        na += x * x;
        nb += y * y;
        dot += x * y;
    }
    (na.sqrt(), nb.sqrt(), dot)
}

// ── Gradient accumulation ───────────────────────────────────────────

fn accum<F: Scalar>(grads: &mut [Option<Vec<F>>], needs: &[bool], var: usize, g: &[F]) {
    if !needs[var] {
        return;
    }
    match &mut grads[var] {
        Some(acc) => {
            for (a, &gi) in acc.iter_mut().zip(g) {
                *a += gi;
            }
        }
        None => grads[var] = Some(g.to_vec()),
    }
}

fn accum_vec<F: Scalar>(grads: &mut [Option<Vec<F>>], needs: &[bool], var: usize, g: Vec<F>) {
    if !needs[var] {
        return;
    }
    match &mut grads[var] {
        Some(acc) => {
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += gi;
            }
        }
        None => grads[var] = Some(g),
    }
}

fn backward_op<F: Scalar>(
    op: &Op<F>,
    vals: &[Tensor<F>],
    needs: &[bool],
    grads: &mut [Option<Vec<F>>],
) {
    macro_rules! out_grad {
        ($out:expr) => {
            match &grads[*$out] {
                Some(g) => g.clone(),
                None => return,
            }
        };
    }

    match op {
        Op::MatMul { a, b, out, m, k, n } => {
            let g = out_grad!(out);
            if needs[*a] {
                let da = matmul_nt(&g, vals[*b].data(), *m, *n, *k);
                accum_vec(grads, needs, *a, da);
            }
            if needs[*b] {
                let db = matmul_tn(vals[*a].data(), &g, *m, *k, *n);
                accum_vec(grads, needs, *b, db);
            }
        }
        Op::Add { a, b, out } => {
            let g = out_grad!(out);
            accum(grads, needs, *a, &g);
            accum(grads, needs, *b, &g);
        }
        Op::AddBiasRow {
            a,
            bias,
            out,
            rows,
            cols,
        } => {
            let g = out_grad!(out);
            accum(grads, needs, *a, &g);
            if needs[*bias] {
                let mut db = vec![F::zero(); *cols];
                for r in 0..*rows {
                    for j in 0..*cols {
                        db[j] += g[r * cols + j];
                    }
                }
                accum_vec(grads, needs, *bias, db);
            }
        }
        Op::Mul { a, b, out } => {
            let g = out_grad!(out);
            if needs[*a] {
                let da: Vec<F> = g
                    .iter()
                    .zip(vals[*b].data())
                    .map(|(&gi, &bi)| gi * bi)
                    .collect();
                accum_vec(grads, needs, *a, da);
            }
            if needs[*b] {
                let db: Vec<F> = g
                    .iter()
                    .zip(vals[*a].data())
                    .map(|(&gi, &ai)| gi * ai)
                    .collect();
                accum_vec(grads, needs, *b, db);
            }
        }
        Op::Scale { a, c, out } => {
            let g = out_grad!(out);
            if needs[*a] {
                let da: Vec<F> = g.iter().map(|&gi| gi * *c).collect();
                accum_vec(grads, needs, *a, da);
            }
        }
        Op::Transpose { a, out, rows, cols } => {
            let g = out_grad!(out);
            if needs[*a] {
                // g has shape [cols, rows]; transpose back
                accum_vec(grads, needs, *a, transpose_raw(&g, *cols, *rows));
            }
        }
        Op::ConcatRows {
            parts,
            out,
            row_counts,
            cols,
        } => {
            let g = out_grad!(out);
            let mut off = 0;
            for (p, &r) in parts.iter().zip(row_counts) {
                accum(grads, needs, *p, &g[off * cols..(off + r) * cols]);
                off += r;
            }
        }
        Op::ConcatCols {
            parts,
            out,
            col_counts,
            rows,
        } => {
            let g = out_grad!(out);
            let total: usize = col_counts.iter().sum();
            let mut off = 0;
            for (p, &c) in parts.iter().zip(col_counts) {
                if needs[*p] {
                    let mut dp = vec![F::zero(); rows * c];
                    for i in 0..*rows {
                        dp[i * c..(i + 1) * c]
                            .copy_from_slice(&g[i * total + off..i * total + off + c]);
                    }
                    accum_vec(grads, needs, *p, dp);
                }
                off += c;
            }
        }
        Op::ConcatVec { parts, out, lens } => {
            let g = out_grad!(out);
            let mut off = 0;
            for (p, &l) in parts.iter().zip(lens) {
                accum(grads, needs, *p, &g[off..off + l]);
                off += l;
            }
        }
        Op::SliceRows {
            a,
            out,
            start,
            len,
            cols,
            total_rows,
        } => {
            let g = out_grad!(out);
            if needs[*a] {
                let mut da = vec![F::zero(); total_rows * cols];
                da[start * cols..(start + len) * cols].copy_from_slice(&g);
                accum_vec(grads, needs, *a, da);
            }
        }
        Op::SliceCols {
            a,
            out,
            start,
            len,
            rows,
            total_cols,
        } => {
            let g = out_grad!(out);
            if needs[*a] {
                let mut da = vec![F::zero(); rows * total_cols];
                for i in 0..*rows {
                    da[i * total_cols + start..i * total_cols + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accum_vec(grads, needs, *a, da);
            }
        }
        Op::Reshape { a, out } => {
            let g = out_grad!(out);
            accum(grads, needs, *a, &g);
        }
        Op::RepeatRows {
            row,
            out,
            times,
            cols,
        } => {
            let g = out_grad!(out);
            if needs[*row] {
                let mut dr = vec![F::zero(); *cols];
                for t in 0..*times {
                    for j in 0..*cols {
                        dr[j] += g[t * cols + j];
                    }
                }
                accum_vec(grads, needs, *row, dr);
            }
        }
        Op::SoftmaxRows { a, out, rows, cols } => {
            let g = out_grad!(out);
            if needs[*a] {
                let y = vals[*out].data();
                let mut da = vec![F::zero(); rows * cols];
                for r in 0..*rows {
                    let base = r * cols;
                    let mut dot = F::zero();
                    for j in 0..*cols {
                        dot += g[base + j] * y[base + j];
                    }
                    for j in 0..*cols {
                        da[base + j] = y[base + j] * (g[base + j] - dot);
                    }
                }
                accum_vec(grads, needs, *a, da);
            }
        }
        Op::Sigmoid { a, out } => {
            let g = out_grad!(out);
            if needs[*a] {
                let y = vals[*out].data();
                let da: Vec<F> = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi * yi * (F::one() - yi))
                    .collect();
                accum_vec(grads, needs, *a, da);
            }
        }
        Op::Gelu { a, out } => {
            let g = out_grad!(out);
            if needs[*a] {
                let x = vals[*a].data();
                let da: Vec<F> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| gi * gelu_bwd(xi))
                    .collect();
                accum_vec(grads, needs, *a, da);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            out,
            rows,
            cols,
            eps,
        } => {
            let g = out_grad!(out);
            let xd = vals[*x].data();
            let gd = vals[*gamma].data();
            let inv_n = F::one() / F::of(*cols as f64);
            let mut dx = vec![F::zero(); rows * cols];
            let mut dgamma = vec![F::zero(); *cols];
            let mut dbeta = vec![F::zero(); *cols];
            for r in 0..*rows {
                let base = r * cols;
                let row = &xd[base..base + cols];
                let (mean, rstd) = row_moments(row, *eps);
                let mut sum_gy = F::zero();
                let mut sum_gy_xhat = F::zero();
                for j in 0..*cols {
                    let xhat = (row[j] - mean) * rstd;
                    let gy = g[base + j] * gd[j];
                    sum_gy += gy;
                    sum_gy_xhat += gy * xhat;
                    dgamma[j] += g[base + j] * xhat;
                    dbeta[j] += g[base + j];
                }
                let m1 = sum_gy * inv_n;
                let m2 = sum_gy_xhat * inv_n;
                for j in 0..*cols {
                    let xhat = (row[j] - mean) * rstd;
                    let gy = g[base + j] * gd[j];
                    dx[base + j] = rstd * (gy - m1 - xhat * m2);
                }
            }
            accum_vec(grads, needs, *x, dx);
            accum_vec(grads, needs, *gamma, dgamma);
            accum_vec(grads, needs, *beta, dbeta);
        }
        Op::Embedding {
            table,
            out,
            ids,
            vocab,
            dim,
        } => {
            let g = out_grad!(out);
            if needs[*table] {
                let mut dt = vec![F::zero(); vocab * dim];
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..*dim {
                        dt[id * dim + j] += g[t * dim + j];
                    }
                }
                accum_vec(grads, needs, *table, dt);
            }
        }
        Op::CrossEntropyRows {
            logits,
            out,
            targets,
            weights,
            rows,
            cols,
        } => {
            let g = out_grad!(out);
            if needs[*logits] {
                let gs = g[0];
                let src = vals[*logits].data();
                let mut dl = vec![F::zero(); rows * cols];
                for r in 0..*rows {
                    let base = r * cols;
                    let row = &src[base..base + cols];
                    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let mut sum = F::zero();
                    for (o, &xv) in dl[base..base + cols].iter_mut().zip(row) {
                        let e = (xv - m).exp();
                        *o = e;
                        sum += e;
                    }
                    let w = weights[r] * gs;
                    for o in &mut dl[base..base + cols] {
                        *o = *o / sum * w;
                    }
                    dl[base + targets[r]] -= w;
                }
                accum_vec(grads, needs, *logits, dl);
            }
        }
        Op::Cosine { a, b, out } => {
            let g = out_grad!(out);
            let gs = g[0];
            let ad = vals[*a].data();
            let bd = vals[*b].data();
            let (na, nb, dot) = cosine_parts(ad, bd);
            let c = dot / (na * nb);
            if needs[*a] {
                let da: Vec<F> = ad
                    .iter()
                    .zip(bd)
                    .map(|(&ai, &bi)| gs * (bi / (na * nb) - c * ai / (na * na)))
                    .collect();
                accum_vec(grads, needs, *a, da);
            }
            if needs[*b] {
                let db: Vec<F> = ad
                    .iter()
                    .zip(bd)
                    .map(|(&ai, &bi)| gs * (ai / (na * nb) - c * bi / (nb * nb)))
                    .collect();
                accum_vec(grads, needs, *b, db);
            }
        }
        Op::MeanRows { a, out, rows, cols } => {
            let g = out_grad!(out);
            if needs[*a] {
                let inv = F::one() / F::of(*rows as f64);
                let mut da = vec![F::zero(); rows * cols];
                for r in 0..*rows {
                    for j in 0..*cols {
                        da[r * cols + j] = g[j] * inv;
                    }
                }
                accum_vec(grads, needs, *a, da);
            }
        }
        Op::SumVec { a, out } => {
            let g = out_grad!(out);
            if needs[*a] {
                let da = vec![g[0]; vals[*a].numel()];
                accum_vec(grads, needs, *a, da);
            }
        }
        Op::MaxVec { a, out, argmax } => {
            let g = out_grad!(out);
            if needs[*a] {
                let mut da = vec![F::zero(); vals[*a].numel()];
                da[*argmax] = g[0];
                accum_vec(grads, needs, *a, da);
            }
        }
        Op::MaxElem { a, b, out } => {
            let g = out_grad!(out);
            let ad = vals[*a].data();
            let bd = vals[*b].data();
            if needs[*a] {
                let da: Vec<F> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(&gi, (&ai, &bi))| if ai >= bi { gi } else { F::zero() })
                    .collect();
                accum_vec(grads, needs, *a, da);
            }
            if needs[*b] {
                let db: Vec<F> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(&gi, (&ai, &bi))| if ai >= bi { F::zero() } else { gi })
                    .collect();
                accum_vec(grads, needs, *b, db);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> T {
        T::from_f64(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::<f64>::new();
        let i = tape.input(&T::eye(3));
        let b = tape.input(&t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let out = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(b).data());
    }

    #[test]
    fn matmul_zeros_annihilate() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&t2(2, 3, &[1.0, -2.0, 3.0, 0.5, 4.0, -1.0]));
        let z = tape.input(&T::zeros(vec![3, 4]));
        let out = tape.matmul(a, z).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&T::zeros(vec![2, 3]));
        let b = tape.input(&T::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&T::from_f64(vec![3], &[0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_extreme_logits_stable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&T::from_f64(vec![3], &[1000.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!(d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
        assert!(tape.value(y).is_finite());
    }

    #[test]
    fn sigmoid_midpoint_and_symmetry() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&T::from_f64(vec![3], &[0.0, 1.7, -1.7]).unwrap());
        let y = tape.sigmoid(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.5);
        assert!((d[1] + d[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&T::zeros(vec![2, 2]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&T::from_f64(vec![4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = tape.sum_vec(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_on_reuse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&T::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let s = tape.sum_vec(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn branch_order_does_not_change_grads() {
        // loss = f(x) + g(x) built in both orders
        let build = |swap: bool| {
            let mut tape = Tape::<f64>::new();
            let x = tape.param(&T::from_f64(vec![3], &[0.3, -0.7, 1.1]).unwrap());
            let f = {
                let s = tape.sigmoid(x).unwrap();
                tape.sum_vec(s).unwrap()
            };
            let g = {
                let s = tape.scale(x, 1.5).unwrap();
                tape.sum_vec(s).unwrap()
            };
            let loss = if swap {
                tape.add(g, f).unwrap()
            } else {
                tape.add(f, g).unwrap()
            };
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let a = build(false);
        let b = build(true);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_inputs_get_no_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&T::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let w = tape.param(&T::from_f64(vec![2], &[3.0, 4.0]).unwrap());
        let y = tape.mul(x, w).unwrap();
        let s = tape.sum_vec(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&T::zeros(vec![3]));
        let b = tape.input(&T::from_f64(vec![3], &[1.0, 0.0, 0.0]).unwrap());
        assert!(matches!(
            tape.cosine(a, b),
            Err(crate::error::Error::Numeric(_))
        ));
    }

    #[test]
    fn max_vec_tie_takes_lowest_index() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(&T::from_f64(vec![4], &[2.0, 5.0, 5.0, 1.0]).unwrap());
        let m = tape.max_vec(a).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut tape = Tape::<f64>::new();
        let table = tape.param(&t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let e = tape.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let flat = tape.reshape(e, vec![6]).unwrap();
        let s = tape.sum_vec(flat).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_cols_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(&t2(2, 1, &[9.0, 8.0]));
        let c = tape.concat(1, &[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let back = tape.slice_cols(c, 0, 2).unwrap();
        assert_eq!(tape.value(back).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_classes() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.input(&T::zeros(vec![1, 5]));
        let l = tape.cross_entropy_rows(logits, &[3], &[1.0]).unwrap();
        assert!((tape.scalar_value(l) - (5.0f64).ln()).abs() < 1e-12);
    }
}
