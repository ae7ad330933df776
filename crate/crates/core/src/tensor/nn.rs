use super::array::Real;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Projection weights for one multi-head self-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct MhsaParams {
    /// `[C, 3C]`, columns ordered query | key | value.
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

/// Scaled dot-product multi-head self-attention.
///
/// `tokens` is `[N, C]` (one sequence) or `[B, N, C]` (B independent
/// sequences that never attend to each other). The output has the input shape.
pub fn mhsa(g: &mut Graph, tokens: Var, heads: usize, p: &MhsaParams) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    let (b, n, c) = match shape[..] {
        [n, c] => (1, n, c),
        [b, n, c] => (b, n, c),
        _ => return Err(Error::Dimension(format!("mhsa expects [N, C] or [B, N, C], got {shape:?}"))),
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("embedding width {c} is not divisible by {heads} heads")));
    }
    let d = c / heads;
    let qkv = g.linear(tokens, p.qkv_w, p.qkv_b)?;
    let qkv = g.reshape(qkv, &[b, n, 3, heads, d])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, &[3, b * heads, n, d])?;
    let mut parts = [tokens; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let s = g.slice_axis0(qkv, i, 1)?;
        *part = g.reshape(s, &[b * heads, n, d])?;
    }
    let [q, k, v] = parts;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (d as Real).sqrt());
    let weights = g.softmax_last(scores);
    let ctx = g.bmm(weights, v, false)?;
    let ctx = g.reshape(ctx, &[b, heads, n, d])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &shape)?;
    g.linear(ctx, p.out_w, p.out_b)
}
