//! Pre-norm transformer encoder with retrieval-token-guided token filtering.

use crate::autodiff::{Graph, Var};
use crate::config::{AttentionScale, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{BlockParams, EncoderParams, LinearParams};
use crate::tensor::Real;
use crate::tokenizer::TokenEmbedding;

/// Per-head `(n+1)×(n+1)` row-stochastic attention matrices of one block.
#[derive(Clone, Debug)]
pub struct AttentionScores {
    pub heads: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    /// `E″`: retrieval token followed by the surviving visual tokens.
    pub tokens: TokenEmbedding,
    /// Attention of every block, in block order.
    pub attention: Vec<AttentionScores>,
    /// For each filtering step, the kept row indices (0 = retrieval token)
    /// relative to that step's input.
    pub kept: Vec<Vec<usize>>,
}

pub(crate) fn linear<T: Real>(g: &mut Graph<T>, x: Var, p: &LinearParams<Var>) -> Result<Var> {
    let y = g.matmul(x, p.weight)?;
    g.add_row(y, p.bias)
}

fn logit_scale(d: usize, heads: usize, mode: AttentionScale) -> f64 {
    let width = match mode {
        AttentionScale::PerHead => d / heads,
        AttentionScale::FullWidth => d,
    };
    1.0 / (width as f64).sqrt()
}

/// Scaled dot-product attention split into `heads` column blocks; returns
/// the concatenated head outputs and each head's attention matrix.
pub(crate) fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mode: AttentionScale,
) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(q)[1];
    if g.shape(k)[1] != d || g.shape(v)[1] != d {
        return Err(Error::dims("attention", g.shape(q), g.shape(k)));
    }
    let dh = d / heads;
    let scale = T::of(logit_scale(d, heads, mode));
    let mut outs = Vec::with_capacity(heads);
    let mut scores = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale)?;
        let attn = g.softmax_rows(logits)?;
        outs.push(g.matmul(attn, vh)?);
        scores.push(attn);
    }
    let out = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, scores))
}

/// `E + Proj(MHA(LN(E)))`.
pub fn msa<T: Real>(
    g: &mut Graph<T>,
    e: TokenEmbedding,
    block: &BlockParams<Var>,
    cfg: &ModelConfig,
) -> Result<(TokenEmbedding, AttentionScores)> {
    let x = e.tokens;
    let n = g.layer_norm(x, block.ln1.gamma, block.ln1.beta, cfg.ln_eps)?;
    let q = linear(g, n, &block.query)?;
    let k = linear(g, n, &block.key)?;
    let v = linear(g, n, &block.value)?;
    let (heads, scores) = multi_head_attention(g, q, k, v, cfg.heads, cfg.attention_scale)?;
    let out = linear(g, heads, &block.proj)?;
    let tokens = g.add(x, out)?;
    Ok((TokenEmbedding { tokens, ..e }, AttentionScores { heads: scores }))
}

/// `E + FC2(GELU(FC1(LN(E))))`.
pub fn mlp_block<T: Real>(
    g: &mut Graph<T>,
    e: TokenEmbedding,
    block: &BlockParams<Var>,
    cfg: &ModelConfig,
) -> Result<TokenEmbedding> {
    let x = e.tokens;
    let n = g.layer_norm(x, block.ln2.gamma, block.ln2.beta, cfg.ln_eps)?;
    let h = linear(g, n, &block.fc1)?;
    let h = g.gelu(h)?;
    let out = linear(g, h, &block.fc2)?;
    let tokens = g.add(x, out)?;
    Ok(TokenEmbedding { tokens, ..e })
}

/// Head-averaged attention of the retrieval token over the `n` visual tokens.
pub fn rt_attention<T: Real>(g: &Graph<T>, scores: &AttentionScores) -> Vec<f64> {
    let first = g.value(scores.heads[0]);
    let cols = first.last_dim();
    let mut avg = vec![0.0; cols - 1];
    for &h in &scores.heads {
        for (a, v) in avg.iter_mut().zip(&g.value(h).row(0)[1..]) {
            *a += v.f64();
        }
    }
    let heads = scores.heads.len() as f64;
    avg.iter_mut().for_each(|a| *a /= heads);
    avg
}

/// Indices (0-based over visual tokens) of the `k` highest scores, ties to the
/// lower index, returned in ascending order.
pub fn top_k_tokens(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::contract("filter_tokens", format!("k = {k} outside 1..={}", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// `ceil(ratio · n)` clamped to `1..=n`.
pub fn keep_count(n: usize, ratio: f64) -> usize {
    // The epsilon absorbs products like 0.7 · 10 = 7.000000000000001.
    let k = (ratio * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n.max(1))
}

/// Keeps the retrieval token plus the `k` visual tokens it attends to most,
/// preserving their original order.
pub fn filter_tokens<T: Real>(
    g: &mut Graph<T>,
    e: TokenEmbedding,
    scores: &AttentionScores,
    k: usize,
) -> Result<(TokenEmbedding, Vec<usize>)> {
    let rt = rt_attention(g, scores);
    if rt.len() + 1 != e.rows(g) {
        return Err(Error::dims("filter_tokens", g.shape(e.tokens), g.shape(scores.heads[0])));
    }
    let rows: Vec<usize> = std::iter::once(0).chain(top_k_tokens(&rt, k)?.into_iter().map(|i| i + 1)).collect();
    let tokens = g.select_rows(e.tokens, &rows)?;
    Ok((TokenEmbedding { tokens, ..e }, rows))
}

/// Runs all blocks, filtering after each block listed in the config.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    e: TokenEmbedding,
    p: &EncoderParams<Var>,
    cfg: &ModelConfig,
) -> Result<Encoded> {
    let filter_at = cfg.filter_layers();
    let mut x = e;
    let mut attention = Vec::with_capacity(p.blocks.len());
    let mut kept = Vec::new();
    for (l, block) in p.blocks.iter().enumerate() {
        let (after_attn, scores) = msa(g, x, block, cfg)?;
        x = mlp_block(g, after_attn, block, cfg)?;
        if filter_at.contains(&(l + 1)) {
            let n = x.rows(g) - 1;
            let (filtered, rows) = filter_tokens(g, x, &scores, keep_count(n, cfg.keep_ratio))?;
            x = filtered;
            kept.push(rows);
        }
        attention.push(scores);
    }
    Ok(Encoded { tokens: x, attention, kept })
}
