//! Attention layers as graph operations.
//!
//! Every function accepts activations of shape `[N, D]` or `[B, N, D]`.
//! Token pooling reduces a per-token tensor `[.., N, C]` to `[.., R, C]`:
//! [`Pooling::Mean`] gives `R = 1`, a pooling matrix `[.., R, N]` gives one
//! row per query position (prefix means keep decoders causal, masked means
//! skip padding). `alpha` is then `[.., R, M]` and `beta` is `[.., R, D]`,
//! both broadcast over the token rows they apply to.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    scope, AttentionWeights, BlockVariant, FeedForwardWeights, HorizontalWeights, NormWeights, VerticalWeights,
};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Additive logit for masked positions.
pub const MASKED_LOGIT: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Reduction over the token axis used by the augmentation networks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    /// Plain mean over all tokens.
    #[default]
    Mean,
    /// Left-multiply by a row-stochastic matrix `[.., R, N]`.
    Matrix(NodeId),
}

/// Inverted dropout applied to each sublayer output before its residual.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config("dropout", format!("rate {rate} outside [0, 1)")));
        }
        Ok(Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn apply<T: Real>(&mut self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let data: Vec<f64> = (0..g.value(x).numel())
            .map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let mask = g.constant(Tensor::from_f64(g.shape(x).to_vec(), &data)?);
        g.mul(x, mask)
    }
}

/// Masks, pooling and dropout shared by the blocks of one stack.
#[derive(Clone, Debug, Default)]
pub struct AttnContext {
    /// Additive mask broadcast onto self-attention logits `[.., N, N]`.
    pub self_mask: Option<NodeId>,
    /// Additive mask broadcast onto cross-attention logits `[.., N, S]`.
    pub cross_mask: Option<NodeId>,
    pub pooling: Pooling,
    pub dropout: Option<Dropout>,
}

/// Head outputs `H_m` and attention matrices of one multi-head pass.
#[derive(Clone, Debug)]
pub struct Heads {
    pub outputs: Vec<NodeId>,
    pub attn: Vec<NodeId>,
}

/// Graph nodes of one attention sublayer.
#[derive(Clone, Debug)]
pub struct SublayerOutput {
    /// `LayerNorm(x + inner)`.
    pub output: NodeId,
    /// Variant output before the residual.
    pub inner: NodeId,
    pub alpha: Option<NodeId>,
    pub beta: Option<NodeId>,
    pub attn: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub output: NodeId,
    /// Self-attention first, then cross-attention for decoder blocks.
    pub sublayers: Vec<SublayerOutput>,
}

/// `[n, n]` additive mask hiding positions after the query.
pub fn causal_mask<T: Real>(n: usize) -> Tensor<T> {
    let masked = T::from_f64_lossy(MASKED_LOGIT);
    let data = (0..n * n)
        .map(|i| if i % n > i / n { masked } else { T::zero() })
        .collect();
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// `[n, n]` row-stochastic matrix averaging each prefix `0..=i`.
pub fn prefix_mean_pooling<T: Real>(n: usize) -> Tensor<T> {
    let data = (0..n * n)
        .map(|i| {
            let (row, col) = (i / n, i % n);
            if col <= row {
                T::one() / T::from_usize(row + 1).expect("length fits the float type")
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(vec![n, n], data).expect("square matrix")
}

/// Returns `(softmax(q k^T / sqrt(d_k) + mask) v, attention matrix)`.
pub fn sdpa<T: Real>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<NodeId>,
) -> Result<(NodeId, NodeId)> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    let (rq, rk, rv) = (sq.len(), sk.len(), sv.len());
    if rq < 2 || rq != rk || rq != rv {
        return Err(Error::shape(format!(
            "sdpa rank mismatch: q {sq:?}, k {sk:?}, v {sv:?}"
        )));
    }
    if sq[rq - 1] != sk[rk - 1] {
        return Err(Error::shape(format!("sdpa key width mismatch: q {sq:?}, k {sk:?}")));
    }
    if sk[rk - 2] != sv[rv - 2] || sq[..rq - 2] != sk[..rk - 2] || sk[..rk - 2] != sv[..rv - 2] {
        return Err(Error::shape(format!(
            "sdpa length mismatch: q {sq:?}, k {sk:?}, v {sv:?}"
        )));
    }
    let d_k = sq[rq - 1] as f64;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.scale(logits, T::from_f64_lossy(1.0 / d_k.sqrt()))?;
    if let Some(mask) = mask {
        logits = g.add(logits, mask)?;
    }
    let attn = g.softmax(logits, -1)?;
    let out = g.matmul(attn, v)?;
    Ok((out, attn))
}

/// All heads `H_m = sdpa(x W_q, kv W_k, kv W_v)`.
pub fn heads<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    kv: NodeId,
    w: &AttentionWeights<NodeId>,
    mask: Option<NodeId>,
) -> Result<Heads> {
    let prev = g.set_flop_scope(scope::SDPA);
    let mut outputs = Vec::with_capacity(w.heads.len());
    let mut attn = Vec::with_capacity(w.heads.len());
    for head in &w.heads {
        let q = g.matmul(x, head.w_q)?;
        let k = g.matmul(kv, head.w_k)?;
        let v = g.matmul(kv, head.w_v)?;
        let (h, a) = sdpa(g, q, k, v, mask)?;
        outputs.push(h);
        attn.push(a);
    }
    g.set_flop_scope(prev);
    Ok(Heads { outputs, attn })
}

/// `Concat(H_1..H_M) W^M`.
pub fn project<T: Real>(g: &mut Graph<T>, heads: &[NodeId], w_o: NodeId) -> Result<NodeId> {
    let prev = g.set_flop_scope(scope::SDPA);
    let cat = g.concat(heads, -1)?;
    let y = g.matmul(cat, w_o);
    g.set_flop_scope(prev);
    y
}

/// `Concat(alpha_1 H_1, .., alpha_M H_M) W^M` for any weights `alpha`.
pub fn reweight_and_project<T: Real>(g: &mut Graph<T>, heads: &[NodeId], alpha: NodeId, w_o: NodeId) -> Result<NodeId> {
    let prev = g.set_flop_scope(scope::HORIZONTAL);
    let mut scaled = Vec::with_capacity(heads.len());
    for (m, &h) in heads.iter().enumerate() {
        let a = g.slice(alpha, -1, m, 1)?;
        scaled.push(g.mul(h, a)?);
    }
    g.set_flop_scope(prev);
    project(g, &scaled, w_o)
}

fn pool<T: Real>(g: &mut Graph<T>, x: NodeId, pooling: &Pooling) -> Result<NodeId> {
    match *pooling {
        Pooling::Mean => {
            let mut shape = g.shape(x).to_vec();
            let rank = shape.len();
            let m = g.mean(x, -2)?;
            shape[rank - 2] = 1;
            g.reshape(m, &shape)
        }
        Pooling::Matrix(p) => g.matmul(p, x),
    }
}

/// Unnormalized head weights `e_m = exp(s_m - max_m s_m)` of the scores
/// `s_m = pool(ReLU(H_m W^A1 + x W^A2) W^B + b^B)`, with their sum over
/// heads. `alpha = weights / total`.
#[derive(Clone, Copy, Debug)]
pub struct HeadScores {
    /// `[.., R, M]`.
    pub weights: NodeId,
    /// `[.., R, 1]`, at least 1.
    pub total: NodeId,
}

pub fn head_scores<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    heads: &[NodeId],
    w: &HorizontalWeights<NodeId>,
    pooling: &Pooling,
) -> Result<HeadScores> {
    let prev = g.set_flop_scope(scope::HORIZONTAL);
    let d_v = g.shape(w.w_a1)[0];
    let context = g.matmul(x, w.w_a2)?;
    let w_b = g.reshape(w.w_b, &[d_v, 1])?;
    // b^B shifts every head's score equally and the weights are normalized
    // over heads, so it never enters the graph and its gradient is
    // identically zero.
    let mut scores = Vec::with_capacity(heads.len());
    for &h in heads {
        let a = g.matmul(h, w.w_a1)?;
        let a = g.add(a, context)?;
        let a = g.relu(a)?;
        let b = g.matmul(a, w_b)?;
        scores.push(pool(g, b, pooling)?);
    }
    let scores = g.concat(&scores, -1)?;
    // The shift cancels in every normalized quantity, so it is a constant.
    let m = heads.len();
    let mut shape = g.shape(scores).to_vec();
    let shift: Vec<T> = g
        .value(scores)
        .data()
        .chunks(m)
        .map(|row| -row.iter().copied().fold(T::neg_infinity(), T::max))
        .collect();
    *shape.last_mut().expect("rank >= 2") = 1;
    let shift = g.constant(Tensor::new(shape, shift)?);
    let shifted = g.add(scores, shift)?;
    let weights = g.exp(shifted)?;
    let ones = g.constant(Tensor::ones(vec![m, 1])?);
    let total = g.matmul(weights, ones)?;
    g.set_flop_scope(prev);
    Ok(HeadScores { weights, total })
}

/// `alpha = softmax_m(s_m)`, shape `[.., R, M]`.
pub fn horizontal_alpha<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    heads: &[NodeId],
    w: &HorizontalWeights<NodeId>,
    pooling: &Pooling,
) -> Result<NodeId> {
    let s = head_scores(g, x, heads, w, pooling)?;
    normalize(g, s.weights, s)
}

/// `y / total`, broadcast over the rows `y` shares with the scores.
fn normalize<T: Real>(g: &mut Graph<T>, y: NodeId, s: HeadScores) -> Result<NodeId> {
    let prev = g.set_flop_scope(scope::HORIZONTAL);
    let out = g.div(y, s.total);
    g.set_flop_scope(prev);
    out
}

/// `Y^H = Concat(alpha_1 H_1, .., alpha_M H_M) W^M`, evaluated as
/// `Concat(e_1 H_1, .., e_M H_M) W^M / total`. Returns `Y^H` and `alpha`.
/// Uniform scores give `e_m = 1` and `total = M` exactly, so `Y^H` is then
/// exactly `Y^M / M`.
pub fn horizontal_attend<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    heads: &[NodeId],
    w: &HorizontalWeights<NodeId>,
    w_o: NodeId,
    pooling: &Pooling,
) -> Result<(NodeId, NodeId)> {
    let s = head_scores(g, x, heads, w, pooling)?;
    let alpha = normalize(g, s.weights, s)?;
    let y = reweight_and_project(g, heads, s.weights, w_o)?;
    Ok((normalize(g, y, s)?, alpha))
}

/// `beta = sigmoid(pool(ReLU(x W^U1 + y W^U2)) W^U + b^U)`, shape `[.., R, D]`.
pub fn vertical_beta<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    y: NodeId,
    w: &VerticalWeights<NodeId>,
    pooling: &Pooling,
) -> Result<NodeId> {
    let prev = g.set_flop_scope(scope::VERTICAL);
    let ux = g.matmul(x, w.w_u1)?;
    let uy = g.matmul(y, w.w_u2)?;
    let u = g.add(ux, uy)?;
    let u = g.relu(u)?;
    let u = pool(g, u, pooling)?;
    let z = g.matmul(u, w.w_u)?;
    let z = g.add(z, w.b_u)?;
    let beta = g.sigmoid(z);
    g.set_flop_scope(prev);
    beta
}

/// `beta * y`, broadcast over token rows.
pub fn gate<T: Real>(g: &mut Graph<T>, y: NodeId, beta: NodeId) -> Result<NodeId> {
    let prev = g.set_flop_scope(scope::VERTICAL);
    let out = g.mul(y, beta);
    g.set_flop_scope(prev);
    out
}

fn add_and_norm<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    inner: NodeId,
    norm: &NormWeights<NodeId>,
    dropout: Option<&mut Dropout>,
) -> Result<NodeId> {
    let prev = g.set_flop_scope(scope::OTHER);
    let inner = match dropout {
        Some(d) => d.apply(g, inner)?,
        None => inner,
    };
    let sum = g.add(x, inner)?;
    let out = g.layer_norm(sum, norm.gain, norm.bias, T::from_f64_lossy(LAYER_NORM_EPS));
    g.set_flop_scope(prev);
    out
}

/// One attention sublayer of `variant`: queries and augmentation context
/// from `x`, keys and values from `kv`, then residual and layer norm.
#[allow(clippy::too_many_arguments)]
pub fn sublayer<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    kv: NodeId,
    variant: BlockVariant,
    w: &AttentionWeights<NodeId>,
    mask: Option<NodeId>,
    pooling: &Pooling,
    dropout: Option<&mut Dropout>,
) -> Result<SublayerOutput> {
    w.check_variant(variant)?;
    let heads = heads(g, x, kv, w, mask)?;
    let (mut inner, alpha) = match &w.horizontal {
        Some(hw) => {
            let (y, alpha) = horizontal_attend(g, x, &heads.outputs, hw, w.w_o, pooling)?;
            (y, Some(alpha))
        }
        None => (project(g, &heads.outputs, w.w_o)?, None),
    };
    let mut beta = None;
    if let Some(vw) = &w.vertical {
        let b = vertical_beta(g, x, inner, vw, pooling)?;
        inner = gate(g, inner, b)?;
        beta = Some(b);
    }
    let output = add_and_norm(g, x, inner, &w.norm, dropout)?;
    Ok(SublayerOutput {
        output,
        inner,
        alpha,
        beta,
        attn: heads.attn,
    })
}

/// `LayerNorm(x + ReLU(x W1 + b1) W2 + b2)`.
pub fn feed_forward<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    w: &FeedForwardWeights<NodeId>,
    dropout: Option<&mut Dropout>,
) -> Result<NodeId> {
    let prev = g.set_flop_scope(scope::FFN);
    let h = g.matmul(x, w.w1)?;
    let h = g.add(h, w.b1)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, w.w2)?;
    let h = g.add(h, w.b2)?;
    g.set_flop_scope(prev);
    add_and_norm(g, x, h, &w.norm, dropout)
}

/// Self-attention sublayer followed by the feed-forward sublayer.
pub fn encoder_block<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    variant: BlockVariant,
    w: &super::BlockWeights<NodeId>,
    ctx: &mut AttnContext,
) -> Result<BlockOutput> {
    let attn = sublayer(
        g,
        x,
        x,
        variant,
        &w.attention,
        ctx.self_mask,
        &ctx.pooling,
        ctx.dropout.as_mut(),
    )?;
    let output = feed_forward(g, attn.output, &w.ffn, ctx.dropout.as_mut())?;
    Ok(BlockOutput {
        output,
        sublayers: vec![attn],
    })
}

/// Masked self-attention, cross-attention over `memory`, feed-forward.
#[allow(clippy::too_many_arguments)]
pub fn decoder_block<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    memory: NodeId,
    variant: BlockVariant,
    self_attention: &AttentionWeights<NodeId>,
    cross_attention: &AttentionWeights<NodeId>,
    ffn: &FeedForwardWeights<NodeId>,
    ctx: &mut AttnContext,
) -> Result<BlockOutput> {
    let first = sublayer(
        g,
        x,
        x,
        variant,
        self_attention,
        ctx.self_mask,
        &ctx.pooling,
        ctx.dropout.as_mut(),
    )?;
    let second = sublayer(
        g,
        first.output,
        memory,
        variant,
        cross_attention,
        ctx.cross_mask,
        &ctx.pooling,
        ctx.dropout.as_mut(),
    )?;
    let output = feed_forward(g, second.output, ffn, ctx.dropout.as_mut())?;
    Ok(BlockOutput {
        output,
        sublayers: vec![first, second],
    })
}
