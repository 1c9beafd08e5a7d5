//! Partition-score predictor.
//!
//! Per token: `LN → Linear → GELU` embedding, then the channels are split in
//! half. The first half is pooled to a 2×2 context and resized back; the
//! second half is kept per token and placed first:
//!
//! ```text
//! x_s   = GELU(Linear(LN(x)))
//! x_agg = concat(x_s[.., C/2..], bilinear(pool₂ₓ₂(x_s[.., ..C/2])))
//! s     = softmax(GELU(Linear_{C→2}(x_agg)))
//! q     = pool₂ₓ₂(s[.., 0])
//! ```
//!
//! Channel 0 of `s` is the subdivision score; channel 1 is its complement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::ops::LN_EPS;
use crate::params::{Bound, LayerNorm, Linear, ParamStore};
use crate::scalar::Scalar;

/// `GELU(Linear(LN(x)))` over the channel axis.
pub fn score_embed<'t, T: Scalar>(
    x: Var<'t, T>,
    ln_gamma: Var<'t, T>,
    ln_beta: Var<'t, T>,
    w: Var<'t, T>,
    b: Var<'t, T>,
) -> Result<Var<'t, T>> {
    Ok(x.layer_norm(ln_gamma, ln_beta, LN_EPS)?.linear(w, Some(b))?.gelu())
}

/// Splits `x_s[H, W, C]` into halves and returns
/// `concat(second half, bilinear(pool₂ₓ₂(first half)))`.
pub fn aggregate_context<'t, T: Scalar>(x_s: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x_s.shape();
    if s.len() != 3 {
        return Err(invalid(format!("aggregate_context expects [H, W, C], got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if c % 2 != 0 {
        return Err(invalid(format!("aggregate_context needs an even channel count, got {c}")));
    }
    let local = x_s.narrow_last(0, c / 2)?;
    let global = x_s.narrow_last(c / 2, c / 2)?;
    let context = local.adaptive_avg_pool2d(2, 2)?.interpolate_bilinear(h, w)?;
    Var::concat_last(&[global, context])
}

/// `softmax(GELU(Linear(x_agg)))` over a 2-wide last axis.
pub fn predict_scores<'t, T: Scalar>(x_agg: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    if w.shape().get(1) != Some(&2) {
        return Err(invalid(format!("score head must produce 2 channels, weight is {:?}", w.shape())));
    }
    let axis = x_agg.shape().len() - 1;
    x_agg.linear(w, Some(b))?.gelu().softmax(axis)
}

/// Channel-0 score averaged over each coarse quadrant, as `[4]` in
/// row-major quadrant order.
pub fn quadrant_scores<'t, T: Scalar>(s: Var<'t, T>) -> Result<Var<'t, T>> {
    let sh = s.shape();
    if sh.len() != 3 || sh[2] != 2 || !sh[0].is_multiple_of(2) || !sh[1].is_multiple_of(2) || sh[0] == 0 || sh[1] == 0 {
        return Err(invalid(format!("quadrant_scores expects [even H, even W, 2], got {sh:?}")));
    }
    s.narrow_last(0, 1)?.adaptive_avg_pool2d(2, 2)?.reshape(&[4])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionPredictor {
    pub norm: LayerNorm,
    pub embed: Linear,
    pub head: Linear,
}

/// Per-token scores `[H, W, 2]` and per-quadrant scores `[4]`.
#[derive(Debug, Clone, Copy)]
pub struct PredictorOutput<'t, T: Scalar> {
    pub scores: Var<'t, T>,
    pub quadrants: Var<'t, T>,
}

impl PartitionPredictor {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(invalid(format!("predictor width must be even, got {dim}")));
        }
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            embed: Linear::new(store, &format!("{name}.embed"), dim, dim, true, rng),
            head: Linear::new(store, &format!("{name}.head"), dim, 2, true, rng),
        })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<PredictorOutput<'t, T>> {
        let x_s = score_embed(
            x,
            p[self.norm.gamma],
            p[self.norm.beta],
            p[self.embed.w],
            p[self.embed.b.expect("embed bias")],
        )?;
        let x_agg = aggregate_context(x_s)?;
        let scores = predict_scores(x_agg, p[self.head.w], p[self.head.b.expect("head bias")])?;
        let quadrants = quadrant_scores(scores)?;
        Ok(PredictorOutput { scores, quadrants })
    }

    /// Multiply-accumulates of the two linear layers and the resize.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let rows = h * w;
        let half = self.embed.fan_out / 2;
        self.embed.macs(rows) + self.head.macs(rows) + (rows * half * 4) as u64 + (rows * half) as u64
    }
}
