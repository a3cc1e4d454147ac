//! Positional encoding, the windowed attention bias and multi-head
//! attention on the tape.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Sinusoidal encoding: `sin(t / 10000^(2k/d))` in column `2k` and the
/// cosine in column `2k + 1`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[t, d], |i| {
        let (pos, col) = (i / d, i % d);
        let k = col / 2;
        let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
        if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `[T, T]` bias: 0 where `max(i − σ1, 0) ≤ j < min(i + σ2, T)`, else −∞.
pub fn alibi_bias_matrix(t: usize, sigma1: usize, sigma2: usize) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::InvalidArgument("bias matrix needs T >= 1".into()));
    }
    let mut data = vec![f64::NEG_INFINITY; t * t];
    for i in 0..t {
        let lo = i.saturating_sub(sigma1);
        let hi = (i + sigma2).min(t);
        if lo >= hi {
            return Err(Error::InvalidArgument(format!(
                "bias row {i} has no open entry (sigma1={sigma1}, sigma2={sigma2})"
            )));
        }
        data[i * t + lo..i * t + hi].fill(0.0);
    }
    Tensor::new(vec![t, t], data)
}

/// Strictly-upper-triangular mask: frame `i` may not see frames `j > i`.
pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|i| i % t > i / t).collect()
}

/// Result of [`multi_head_attention`].
pub struct Attention {
    /// Heads concatenated, before any output projection: `[T_q, d]`.
    pub output: Var,
    /// Per-head `[T_q, T_k]` attention weights.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention split over `heads` column groups. `bias`
/// is added to the scores; its −∞ entries are excluded from the softmax.
pub fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, bias: &Tensor, heads: usize) -> Result<Attention> {
    let (qs, ks, vs) = (
        tape.value(q).shape().to_vec(),
        tape.value(k).shape().to_vec(),
        tape.value(v).shape().to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::shape("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
    }
    if heads == 0 || qs[1] % heads != 0 || vs[1] % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("width {} not divisible by {heads} heads", qs[1]),
        ));
    }
    if bias.shape() != [qs[0], ks[0]] {
        return Err(Error::shape(
            "attention",
            format!("bias {:?} for scores [{}, {}]", bias.shape(), qs[0], ks[0]),
        ));
    }
    let masked: Vec<bool> = bias.data().iter().map(|&b| b == f64::NEG_INFINITY).collect();
    let finite_bias = bias
        .data()
        .iter()
        .any(|&b| b.is_finite() && b != 0.0)
        .then(|| bias.map(|b| if b.is_finite() { b } else { 0.0 }));
    let (dq, dv) = (qs[1] / heads, vs[1] / heads);
    let scale = 1.0 / (dq as f64).sqrt();
    let kt = tape.transpose(k)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dq, (h + 1) * dq)?;
        let kh = tape.slice_axis0(kt, h * dq, (h + 1) * dq)?;
        let vh = tape.slice_cols(v, h * dv, (h + 1) * dv)?;
        let scores = tape.matmul(qh, kh)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(b) = &finite_bias {
            let b = tape.leaf(b.clone());
            scores = tape.add(scores, b)?;
        }
        let scores = tape.masked_fill(scores, &masked, f64::NEG_INFINITY)?;
        let w = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let output = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok(Attention { output, weights })
}

/// Biased cross-attention with an output projection `w_o`.
pub fn biased_cross_attention(
    tape: &mut Tape,
    q_e: Var,
    k_a: Var,
    v_a: Var,
    bias: &Tensor,
    heads: usize,
    w_o: Var,
) -> Result<Var> {
    let att = multi_head_attention(tape, q_e, k_a, v_a, bias, heads)?;
    tape.matmul(att.output, w_o)
}
