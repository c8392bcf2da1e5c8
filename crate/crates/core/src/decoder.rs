//! Scoring functions over condition pairs `(e, r)` against every entity.
//!
//! * TransE: `φ = −‖v_h + v_r − v_t‖₁` (negated so that higher is better).
//! * DistMult: `φ = Σ v_h ⊙ v_r ⊙ v_t`.
//! * ConvE: `φ = relu(W_c · vec(relu(conv([v_h ; v_r] reshaped))) + b) · v_t`.
//!
//! No batch normalisation is used in ConvE.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::he_normal;
use crate::model::{Bound, ParamStore};
use crate::tensor::{bce_value, logistic, Tape, Tensor, Var};
use crate::{Error, Result, Rng};

/// Clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvEConfig {
    pub channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// `rows × cols` must equal the embedding dimension.
    pub rows: usize,
    pub cols: usize,
}

impl ConvEConfig {
    /// 32 kernels of 3×3 and the most square reshape with `rows ≤ cols`
    /// (10×20 for `d = 200`).
    pub fn default_for(dim: usize) -> Self {
        let mut rows = 1;
        let mut r = 1;
        while r * r <= dim {
            if dim % r == 0 {
                rows = r;
            }
            r += 1;
        }
        ConvEConfig {
            channels: 32,
            kernel_h: 3,
            kernel_w: 3,
            rows,
            cols: dim / rows.max(1),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.rows * self.cols != dim {
            return Err(Error::Shape {
                op: "conve reshape",
                lhs: vec![self.rows, self.cols],
                rhs: vec![dim],
            });
        }
        if self.channels == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
            || self.kernel_h > 2 * self.rows
            || self.kernel_w > self.cols
        {
            return Err(Error::Shape {
                op: "conve kernel",
                lhs: vec![self.channels, self.kernel_h, self.kernel_w],
                rhs: vec![2 * self.rows, self.cols],
            });
        }
        Ok(())
    }

    pub fn feature_map(&self) -> [usize; 3] {
        [
            self.channels,
            2 * self.rows - self.kernel_h + 1,
            self.cols - self.kernel_w + 1,
        ]
    }

    pub fn feature_len(&self) -> usize {
        self.feature_map().iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    TransE,
    DistMult,
    ConvE(ConvEConfig),
}

impl DecoderKind {
    pub fn name(&self) -> &'static str {
        match self {
            DecoderKind::TransE => "transe",
            DecoderKind::DistMult => "distmult",
            DecoderKind::ConvE(_) => "conve",
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            DecoderKind::ConvE(c) => c.validate(dim),
            _ => Ok(()),
        }
    }
}

/// Scores for one condition pair against every candidate entity.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub query: (usize, usize),
    pub scores: Vec<f64>,
}

pub fn init_params(store: &mut ParamStore, kind: &DecoderKind, dim: usize, rng: &mut Rng) -> Result<()> {
    kind.validate(dim)?;
    if let DecoderKind::ConvE(c) = kind {
        let fan = c.kernel_h * c.kernel_w;
        store.insert("conve.kernels", he_normal(&[c.channels, 1, c.kernel_h, c.kernel_w], fan, rng))?;
        store.insert("conve.kernel_bias", Tensor::zeros(&[c.channels]))?;
        store.insert("conve.fc", he_normal(&[dim, c.feature_len()], c.feature_len(), rng))?;
        store.insert("conve.fc_bias", Tensor::zeros(&[dim]))?;
    }
    Ok(())
}

/// `B×N` score matrix for `heads`, `rels` (`B×d`) against `candidates` (`N×d`).
pub fn score(
    tape: &mut Tape,
    kind: &DecoderKind,
    bound: &Bound<'_>,
    heads: Var,
    rels: Var,
    candidates: Var,
) -> Result<Var> {
    let hs = tape.shape(heads).to_vec();
    if hs.len() != 2 || tape.shape(rels) != hs.as_slice() || tape.shape(candidates).get(1) != hs.get(1) {
        return Err(Error::Shape {
            op: "score",
            lhs: hs,
            rhs: tape.shape(candidates).to_vec(),
        });
    }
    match kind {
        DecoderKind::TransE => {
            let q = tape.add(heads, rels)?;
            let dist = tape.pairwise_l1(q, candidates)?;
            Ok(tape.neg(dist))
        }
        DecoderKind::DistMult => {
            let q = tape.mul(heads, rels)?;
            let ct = tape.transpose(candidates)?;
            tape.matmul(q, ct)
        }
        DecoderKind::ConvE(c) => {
            let d = hs[1];
            c.validate(d)?;
            let b = hs[0];
            // [h ; r] row-major is exactly the stacked (2·rows)×cols image.
            let stacked = tape.concat_cols(&[heads, rels])?;
            let img = tape.reshape(stacked, &[b, 1, 2 * c.rows, c.cols])?;
            let conv = tape.conv2d_valid(img, bound.get("conve.kernels")?, bound.get("conve.kernel_bias")?)?;
            let conv = tape.relu(conv);
            let flat = tape.reshape(conv, &[b, c.feature_len()])?;
            let fc_t = tape.transpose(bound.get("conve.fc")?)?;
            let hidden = tape.matmul(flat, fc_t)?;
            let hidden = tape.add_row_broadcast(hidden, bound.get("conve.fc_bias")?)?;
            let hidden = tape.relu(hidden);
            let ct = tape.transpose(candidates)?;
            tape.matmul(hidden, ct)
        }
    }
}

/// Scores without recording gradients. `params` must hold the decoder's
/// parameters when `kind` is ConvE.
pub fn score_rows(
    kind: &DecoderKind,
    params: &ParamStore,
    heads: &Tensor,
    rels: &Tensor,
    candidates: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let h = tape.constant(heads.clone());
    let r = tape.constant(rels.clone());
    let c = tape.constant(candidates.clone());
    let s = score(&mut tape, kind, &bound, h, r, c)?;
    Ok(tape.value(s).clone())
}

/// `σ(φ)` per candidate.
pub fn probabilities(row: &[f64]) -> Vec<f64> {
    row.iter().map(|v| logistic(*v)).collect()
}

/// Mean binary cross-entropy over all elements, probabilities clamped by [`PROB_EPS`].
pub fn bce_loss(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::Shape {
            op: "bce_loss",
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    Ok(bce_value(p.data(), q.data(), PROB_EPS))
}

/// Applies label smoothing `q ← (1 − s)·q + s/N` in place, `N` = row length.
pub fn smooth_labels(labels: &mut Tensor, smoothing: f64) -> Result<()> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    if smoothing == 0.0 {
        return Ok(());
    }
    let n = labels.row_len().max(1) as f64;
    labels
        .data_mut()
        .iter_mut()
        .for_each(|q| *q = (1.0 - smoothing) * *q + smoothing / n);
    Ok(())
}
