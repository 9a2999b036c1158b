//! The three training objectives and their weighted combination:
//! contrastive alignment (ITC), match classification (ITM), and
//! autoregressive caption generation (ITG).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_itc: f64,
    pub lambda_itm: f64,
    pub lambda_itg: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Average the image-to-text and text-to-image directions; switching
    /// this off restores the literal one-directional form.
    pub symmetric_itc: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_itc: 1.0,
            lambda_itm: 0.5,
            lambda_itg: 0.10,
            tau: 0.07,
            symmetric_itc: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_itc < 0.0 || self.lambda_itm < 0.0 || self.lambda_itg < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.lambda_itc == 0.0 && self.lambda_itm == 0.0 && self.lambda_itg == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Match labels for the ITM head; logits order is [match, no-match].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchLabel {
    Match,
    NoMatch,
}

impl MatchLabel {
    pub fn index(self) -> usize {
        match self {
            MatchLabel::Match => 0,
            MatchLabel::NoMatch => 1,
        }
    }
}

/// In-batch contrastive loss over a precomputed similarity matrix
/// [N, N] whose diagonal holds the matching pairs.
pub fn itc_from_sim<F: Scalar>(
    tape: &mut Tape<F>,
    sim: Var,
    tau: f64,
    symmetric: bool,
) -> Result<Var> {
    let shape = tape.value(sim).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::ShapeMismatch {
            op: "itc",
            lhs: shape,
            rhs: vec![],
        });
    }
    let n = shape[0];
    let targets: Vec<usize> = (0..n).collect();
    let weights = vec![F::one() / F::of(n as f64); n];
    let scaled = tape.scale(sim, F::of(1.0 / tau))?;
    let i2t = tape.cross_entropy_rows(scaled, &targets, &weights)?;
    if !symmetric {
        return Ok(i2t);
    }
    let scaled_t = tape.transpose(scaled)?;
    let t2i = tape.cross_entropy_rows(scaled_t, &targets, &weights)?;
    let sum = tape.add(i2t, t2i)?;
    tape.scale(sum, F::of(0.5))
}

/// Contrastive loss over row features: sim is pairwise cosine similarity.
pub fn itc_loss<F: Scalar>(
    tape: &mut Tape<F>,
    f_i: Var,
    f_t: Var,
    tau: f64,
    symmetric: bool,
) -> Result<Var> {
    let si = tape.value(f_i).shape().to_vec();
    let st = tape.value(f_t).shape().to_vec();
    if si.len() != 2 || si != st {
        return Err(Error::ShapeMismatch {
            op: "itc",
            lhs: si,
            rhs: st,
        });
    }
    let (n, d) = (si[0], si[1]);
    let mut rows = Vec::with_capacity(n);
    let img_rows: Vec<Var> = (0..n)
        .map(|i| {
            let r = tape.slice_rows(f_i, i, 1)?;
            tape.reshape(r, vec![d])
        })
        .collect::<Result<_>>()?;
    let txt_rows: Vec<Var> = (0..n)
        .map(|j| {
            let r = tape.slice_rows(f_t, j, 1)?;
            tape.reshape(r, vec![d])
        })
        .collect::<Result<_>>()?;
    for &iv in &img_rows {
        let mut entries = Vec::with_capacity(n);
        for &tv in &txt_rows {
            let c = tape.cosine(iv, tv)?;
            entries.push(c);
        }
        let row = tape.concat(0, &entries)?;
        rows.push(tape.reshape(row, vec![1, n])?);
    }
    let sim = tape.concat(0, &rows)?;
    itc_from_sim(tape, sim, tau, symmetric)
}

/// Mean cross-entropy of the match head over the batch.
pub fn itm_loss<F: Scalar>(tape: &mut Tape<F>, logits: Var, labels: &[MatchLabel]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "itm",
            lhs: shape,
            rhs: vec![labels.len(), 2],
        });
    }
    let targets: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let weights = vec![F::one() / F::of(labels.len() as f64); labels.len()];
    tape.cross_entropy_rows(logits, &targets, &weights)
}

/// Caption loss for one sequence: negative log-likelihood summed over
/// non-padding positions (`position_weights` carries 1 for real tokens and 0
/// for padding).
pub fn itg_loss<F: Scalar>(
    tape: &mut Tape<F>,
    decoder_logits: Var,
    targets: &[usize],
    position_weights: &[F],
) -> Result<Var> {
    tape.cross_entropy_rows(decoder_logits, targets, position_weights)
}

/// Weighted sum of the three objectives.
pub fn total_loss<F: Scalar>(
    tape: &mut Tape<F>,
    itc: Var,
    itm: Var,
    itg: Var,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let a = tape.scale(itc, F::of(weights.lambda_itc))?;
    let b = tape.scale(itm, F::of(weights.lambda_itm))?;
    let c = tape.scale(itg, F::of(weights.lambda_itg))?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}
