//! Pre-LayerNorm transformer layers shared by the chunk encoder and the
//! aggregator.

use std::sync::Arc;

use crate::error::Result;
use crate::numerics::{Mask, Tape, Var};
use crate::weights::BlockParams;

pub(crate) enum Attention {
    /// Every token attends to every token.
    Full,
    /// Logits rotated by position differences, restricted by `mask`.
    Rotary {
        positions: Arc<Vec<i64>>,
        base: f64,
        mask: Arc<Mask>,
    },
}

pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Multi-head `softmax(QKᵀ/√d_h)·V` with heads concatenated, no output
/// projection.
fn multi_head(
    tape: &mut Tape,
    x: Var,
    p: &BlockParams<Var>,
    heads: usize,
    attn: &Attention,
) -> Result<Var> {
    let q = linear(tape, x, p.wq, p.bq)?;
    let k = linear(tape, x, p.wk, p.bk)?;
    let v = linear(tape, x, p.wv, p.bv)?;
    let width = tape.shape(q)[1];
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let (logits, mask) = match attn {
            Attention::Full => (tape.matmul_nt(qh, kh)?, None),
            Attention::Rotary {
                positions,
                base,
                mask,
            } => (
                tape.rotary_logits(
                    qh,
                    kh,
                    positions.clone(),
                    positions.clone(),
                    *base,
                    Some(mask.clone()),
                )?,
                Some(mask.clone()),
            ),
        };
        let logits = tape.scale(logits, scale)?;
        let weights = tape.softmax_rows(logits, mask)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(outs)
    }
}

/// `h = x + Wo·attn(LN₁(x))`, then `h + MLP(LN₂(h))` with a GELU MLP.
pub(crate) fn block(
    tape: &mut Tape,
    x: Var,
    p: &BlockParams<Var>,
    heads: usize,
    attn: &Attention,
) -> Result<Var> {
    let normed = tape.layer_norm(x, p.ln1_gamma, p.ln1_beta)?;
    let mixed = multi_head(tape, normed, p, heads, attn)?;
    let projected = linear(tape, mixed, p.wo, p.bo)?;
    let h = tape.add(x, projected)?;
    let normed = tape.layer_norm(h, p.ln2_gamma, p.ln2_beta)?;
    let hidden = linear(tape, normed, p.w1, p.b1)?;
    let hidden = tape.gelu(hidden)?;
    let out = linear(tape, hidden, p.w2, p.b2)?;
    tape.add(h, out)
}

/// The bare `χ ← softmax(SDP(Q, K))·V` update with `Q, K, V = Linear(χ)`.
pub(crate) fn attention_only(
    tape: &mut Tape,
    x: Var,
    p: &BlockParams<Var>,
    heads: usize,
    attn: &Attention,
) -> Result<Var> {
    multi_head(tape, x, p, heads, attn)
}
