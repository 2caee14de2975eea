//! Attention-map differential pooling.
//!
//! Per text token j, the cosine between column j of the foreground and
//! background attention maps is min-max normalized into a token mask,
//! which then weights the foreground text-query token outputs.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Spread below which the mask falls back to all ones.
pub const DEGENERATE_SPREAD: f64 = 1e-8;
const WEIGHT_FLOOR: f64 = 1e-8;

/// Column-wise cosine similarity of two N x M attention maps, as 1 x M.
pub fn attention_similarity(g: &mut Graph, w_fg: Var, w_bg: Var) -> Result<Var> {
    if g.value(w_fg).shape() != g.value(w_bg).shape() {
        return Err(Error::Data(format!(
            "attention maps differ in shape: {:?} vs {:?}",
            g.value(w_fg).shape(),
            g.value(w_bg).shape()
        )));
    }
    let a = g.transpose(w_fg)?;
    let b = g.transpose(w_bg)?;
    let s = g.cosine_rows(a, b).map_err(|e| match e {
        crate::autodiff::AutodiffError::ZeroNorm { row, .. } => Error::Data(format!("attention column {row} has zero norm")),
        e => e.into(),
    })?;
    Ok(g.transpose(s)?)
}

/// `m_j = (s_j - min s) / (max s - min s)`, or all ones when the spread is
/// below [`DEGENERATE_SPREAD`].
pub fn minmax_mask(g: &mut Graph, s: Var) -> Result<Var> {
    let (r, c) = (g.value(s).rows(), g.value(s).cols());
    if g.value(s).is_empty() {
        return Err(Error::Data("empty similarity vector".into()));
    }
    let lo = g.min(s)?;
    let hi = g.max(s)?;
    if g.value(hi).item() - g.value(lo).item() < DEGENERATE_SPREAD {
        return Ok(g.constant(Tensor::filled(&[r, c], 1.0))?);
    }
    let lo_b = g.broadcast(lo, r, c)?;
    let shifted = g.sub(s, lo_b)?;
    let spread = g.sub(hi, lo)?;
    Ok(g.div_scalar(shifted, spread)?)
}

/// Weighted mean of the M token rows with weights `m` (or `1 - m` when
/// `inverted`): `sum_j w_j token_j / max(sum_j w_j, 1e-8)`.
pub fn pooled_feature(g: &mut Graph, mask: Var, tokens: Var, inverted: bool) -> Result<Var> {
    let m = g.value(mask).len();
    if g.value(mask).rows() != 1 || g.value(tokens).rows() != m {
        return Err(Error::Data(format!(
            "mask length {} does not match {} tokens",
            m,
            g.value(tokens).rows()
        )));
    }
    let w = if inverted {
        let neg = g.scale(mask, -1.0)?;
        g.offset(neg, 1.0)?
    } else {
        mask
    };
    let num = g.matmul(w, tokens)?;
    let total = g.sum(w)?;
    let denom = if g.value(total).item() < WEIGHT_FLOOR {
        g.constant(Tensor::scalar(WEIGHT_FLOOR))?
    } else {
        total
    };
    Ok(g.div_scalar(num, denom)?)
}

/// Similarity, mask and pooled feature in one go.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub similarity: Var,
    pub mask: Var,
    pub feature: Var,
}

pub fn differential_pool(g: &mut Graph, w_fg: Var, w_bg: Var, tokens: Var, inverted: bool) -> Result<Pooled> {
    let similarity = attention_similarity(g, w_fg, w_bg)?;
    let mask = minmax_mask(g, similarity)?;
    let feature = pooled_feature(g, mask, tokens, inverted)?;
    Ok(Pooled { similarity, mask, feature })
}
