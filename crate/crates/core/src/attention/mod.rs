//! Scaled dot-product and multi-head attention, plus the two augmentations:
//!
//! * horizontal attention re-weights the head outputs with a simplex vector
//!   `alpha` before they are concatenated and projected;
//! * vertical attention gates the channels of the projected output with
//!   `beta` in `(0, 1)^D`.
//!
//! Graph-level building blocks live in [`layers`]; the free functions in this
//! module evaluate them eagerly on plain tensors.

pub mod layers;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::impl_weights;
use crate::params::{ParamKind, ParamSpec, Weights};
use crate::tensor::{Real, Tensor};

pub use layers::{AttnContext, BlockOutput, Dropout, Heads, Pooling, SublayerOutput, LAYER_NORM_EPS, MASKED_LOGIT};

/// FLOP scope labels used by the attention layers.
pub mod scope {
    pub const SDPA: &str = "sdpa";
    pub const HORIZONTAL: &str = "horizontal";
    pub const VERTICAL: &str = "vertical";
    pub const FFN: &str = "ffn";
    pub const OTHER: &str = "other";
}

/// Which augmentation path a block runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockVariant {
    Baseline,
    Horizontal,
    Vertical,
    Both,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 4] = [
        BlockVariant::Baseline,
        BlockVariant::Horizontal,
        BlockVariant::Vertical,
        BlockVariant::Both,
    ];

    pub fn has_horizontal(self) -> bool {
        matches!(self, BlockVariant::Horizontal | BlockVariant::Both)
    }

    pub fn has_vertical(self) -> bool {
        matches!(self, BlockVariant::Vertical | BlockVariant::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockVariant::Baseline => "baseline",
            BlockVariant::Horizontal => "horizontal",
            BlockVariant::Vertical => "vertical",
            BlockVariant::Both => "both",
        }
    }
}

impl std::str::FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::config(
                    "variant",
                    format!("unknown variant `{s}` (expected baseline, horizontal, vertical or both)"),
                )
            })
    }
}

impl std::fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Widths of one attention sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Squeeze width of the vertical gate.
    pub d_a: usize,
}

impl AttentionConfig {
    /// `d_k = d_v = d_model / num_heads` and `d_a = max(1, d_model / 4)`.
    pub fn new(d_model: usize, num_heads: usize) -> Self {
        let head = (d_model / num_heads.max(1)).max(1);
        Self {
            d_model,
            num_heads,
            d_k: head,
            d_v: head,
            d_a: default_squeeze(d_model),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_a", self.d_a),
        ] {
            if value == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.d_a >= self.d_model {
            return Err(Error::config(
                "d_a",
                format!("squeeze width {} must be below d_model {}", self.d_a, self.d_model),
            ));
        }
        Ok(())
    }
}

pub fn default_squeeze(d_model: usize) -> usize {
    (d_model / 4).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<P> {
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
}
impl_weights!(HeadWeights {
    w_q: slot,
    w_k: slot,
    w_v: slot
});

/// Parameters of the head re-weighting network.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizontalWeights<P> {
    /// `[d_v, d_v]`, applied to each head output.
    pub w_a1: P,
    /// `[d_model, d_v]`, applied to the context input.
    pub w_a2: P,
    /// `[d_v]` scoring vector.
    pub w_b: P,
    /// Scalar score bias.
    pub b_b: P,
}
impl_weights!(HorizontalWeights {
    w_a1: slot,
    w_a2: slot,
    w_b: slot,
    b_b: slot
});

/// Parameters of the channel gate.
#[derive(Clone, Debug, PartialEq)]
pub struct VerticalWeights<P> {
    /// `[d_model, d_a]`, applied to the context input.
    pub w_u1: P,
    /// `[d_model, d_a]`, applied to the attention output.
    pub w_u2: P,
    /// `[d_a, d_model]`.
    pub w_u: P,
    /// `[d_model]`.
    pub b_u: P,
}
impl_weights!(VerticalWeights {
    w_u1: slot,
    w_u2: slot,
    w_u: slot,
    b_u: slot
});

#[derive(Clone, Debug, PartialEq)]
pub struct NormWeights<P> {
    pub gain: P,
    pub bias: P,
}
impl_weights!(NormWeights { gain: slot, bias: slot });

/// One attention sublayer: per-head projections, the output projection
/// `w_o` (`[num_heads * d_v, d_model]`), optional augmentation networks and
/// the post-residual layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<P> {
    pub heads: Vec<HeadWeights<P>>,
    pub w_o: P,
    pub horizontal: Option<HorizontalWeights<P>>,
    pub vertical: Option<VerticalWeights<P>>,
    pub norm: NormWeights<P>,
}
impl_weights!(AttentionWeights {
    heads: list,
    w_o: slot,
    horizontal: optional,
    vertical: optional,
    norm: nested,
});

/// Position-wise feed-forward sublayer with its layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardWeights<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
    pub norm: NormWeights<P>,
}
impl_weights!(FeedForwardWeights {
    w1: slot,
    b1: slot,
    w2: slot,
    b2: slot,
    norm: nested
});

/// Encoder-style block: self-attention sublayer followed by feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<P> {
    pub attention: AttentionWeights<P>,
    pub ffn: FeedForwardWeights<P>,
}
impl_weights!(BlockWeights {
    attention: nested,
    ffn: nested
});

pub type AttentionParams<T> = AttentionWeights<Tensor<T>>;
pub type BlockParams<T> = BlockWeights<Tensor<T>>;

impl NormWeights<ParamSpec> {
    pub fn layout(d_model: usize) -> Self {
        Self {
            gain: ParamSpec::ones(&[d_model], ParamKind::LayerNorm),
            bias: ParamSpec::zeros(&[d_model], ParamKind::LayerNorm),
        }
    }
}

impl AttentionWeights<ParamSpec> {
    /// Shapes and initializers. The final projection and bias of each
    /// augmentation network start at zero, so a fresh network yields uniform
    /// `alpha` and `beta = 0.5`.
    pub fn layout(cfg: &AttentionConfig, variant: BlockVariant) -> Self {
        let d = cfg.d_model;
        let heads = (0..cfg.num_heads)
            .map(|_| HeadWeights {
                w_q: ParamSpec::matrix(d, cfg.d_k, ParamKind::QkvProjection),
                w_k: ParamSpec::matrix(d, cfg.d_k, ParamKind::QkvProjection),
                w_v: ParamSpec::matrix(d, cfg.d_v, ParamKind::QkvProjection),
            })
            .collect();
        let horizontal = variant.has_horizontal().then(|| HorizontalWeights {
            w_a1: ParamSpec::matrix(cfg.d_v, cfg.d_v, ParamKind::Horizontal),
            w_a2: ParamSpec::matrix(d, cfg.d_v, ParamKind::Horizontal),
            w_b: ParamSpec::zeros(&[cfg.d_v], ParamKind::Horizontal),
            b_b: ParamSpec::zeros(&[], ParamKind::Horizontal),
        });
        let vertical = variant.has_vertical().then(|| VerticalWeights {
            w_u1: ParamSpec::matrix(d, cfg.d_a, ParamKind::Vertical),
            w_u2: ParamSpec::matrix(d, cfg.d_a, ParamKind::Vertical),
            w_u: ParamSpec::zeros(&[cfg.d_a, d], ParamKind::Vertical),
            b_u: ParamSpec::zeros(&[d], ParamKind::Vertical),
        });
        Self {
            heads,
            w_o: ParamSpec::matrix(cfg.num_heads * cfg.d_v, d, ParamKind::OutputProjection),
            horizontal,
            vertical,
            norm: NormWeights::layout(d),
        }
    }
}

impl FeedForwardWeights<ParamSpec> {
    pub fn layout(d_model: usize, width: usize) -> Self {
        Self {
            w1: ParamSpec::matrix(d_model, width, ParamKind::FeedForward),
            b1: ParamSpec::zeros(&[width], ParamKind::FeedForward),
            w2: ParamSpec::matrix(width, d_model, ParamKind::FeedForward),
            b2: ParamSpec::zeros(&[d_model], ParamKind::FeedForward),
            norm: NormWeights::layout(d_model),
        }
    }
}

impl BlockWeights<ParamSpec> {
    pub fn layout(cfg: &AttentionConfig, ffn_width: usize, variant: BlockVariant) -> Self {
        Self {
            attention: AttentionWeights::layout(cfg, variant),
            ffn: FeedForwardWeights::layout(cfg.d_model, ffn_width),
        }
    }
}

impl<P> AttentionWeights<P> {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Error unless exactly the augmentation sets `variant` needs are present.
    pub fn check_variant(&self, variant: BlockVariant) -> Result<()> {
        let check = |present: bool, wanted: bool, what: &str| {
            if present == wanted {
                Ok(())
            } else if wanted {
                Err(Error::config(
                    "variant",
                    format!("{variant} block needs {what} attention parameters"),
                ))
            } else {
                Err(Error::config(
                    "variant",
                    format!("{variant} block must not carry {what} attention parameters"),
                ))
            }
        };
        check(self.horizontal.is_some(), variant.has_horizontal(), "horizontal")?;
        check(self.vertical.is_some(), variant.has_vertical(), "vertical")
    }
}

/// Head re-weighting vectors, one row per pooled position (a single row
/// for full-sequence pooling).
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaWeights<T: Real = f64> {
    alpha: Tensor<T>,
}

impl<T: Real> AlphaWeights<T> {
    pub fn new(alpha: Tensor<T>) -> Result<Self> {
        let rows = alpha.numel() / alpha.shape().last().copied().unwrap_or(1);
        let w = Self { alpha };
        w.check_simplex(simplex_tolerance::<T>(w.num_heads()))
            .map_err(|e| Error::Contract(format!("alpha is not on the simplex: {e} ({rows} rows)")))?;
        Ok(w)
    }

    pub fn num_heads(&self) -> usize {
        self.alpha.shape().last().copied().unwrap_or(1)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.alpha
    }

    /// Rows of `num_heads` weights each.
    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.alpha.data().chunks(self.num_heads())
    }

    /// Every row is non-negative and sums to one within `tol`.
    pub fn check_simplex(&self, tol: f64) -> std::result::Result<(), String> {
        for (i, row) in self.rows().enumerate() {
            let sum: f64 = row.iter().map(|x| x.to_f64_lossless()).sum();
            if (sum - 1.0).abs() > tol {
                return Err(format!("row {i} sums to {sum}"));
            }
            if let Some(x) = row.iter().find(|x| !(**x >= T::zero())) {
                return Err(format!("row {i} has entry {x}"));
            }
        }
        Ok(())
    }
}

/// Channel gates, one row of `d_model` values per pooled position.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaWeights<T: Real = f64> {
    beta: Tensor<T>,
}

impl<T: Real> BetaWeights<T> {
    pub fn new(beta: Tensor<T>) -> Result<Self> {
        let w = Self { beta };
        if !w.in_closed_unit_interval() {
            return Err(Error::Contract("beta outside [0, 1]".into()));
        }
        Ok(w)
    }

    pub fn width(&self) -> usize {
        self.beta.shape().last().copied().unwrap_or(1)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.beta
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.beta.data().chunks(self.width())
    }

    /// Every entry lies strictly inside `(0, 1)`.
    pub fn in_open_unit_interval(&self) -> bool {
        self.beta.data().iter().all(|&b| b > T::zero() && b < T::one())
    }

    /// Sigmoid saturates to exactly 0 or 1 at the ends of the float range,
    /// so the representable invariant is the closed interval.
    fn in_closed_unit_interval(&self) -> bool {
        self.beta.data().iter().all(|&b| b >= T::zero() && b <= T::one())
    }
}

pub(crate) fn simplex_tolerance<T: Real>(heads: usize) -> f64 {
    (8.0 * heads as f64 * T::epsilon().to_f64_lossless()).max(1e-9)
}

/// `[1, C]` becomes `[C]`; other shapes are kept.
fn squeeze_single_row<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    match t.shape() {
        [1, c] => t.clone().reshape(vec![*c]).expect("same element count"),
        _ => t.clone(),
    }
}

fn bind<T: Real, W: Weights<Tensor<T>>>(g: &mut Graph<T>, weights: &W) -> W::With<crate::autodiff::NodeId> {
    weights.map("", &mut |_, t| g.constant(t.clone()))
}

/// `softmax(Q K^T / sqrt(d_k)) V`. Returns the output and the attention
/// matrix. `K` and `V` may be longer or shorter than `Q` (cross-attention).
pub fn sdpa<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    sdpa_masked(q, k, v, None)
}

/// [`sdpa`] with an optional additive logit mask of shape `[N, N_src]`;
/// see [`layers::causal_mask`].
pub fn sdpa_masked<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let mask = mask.map(|m| g.constant(m.clone()));
    let (out, attn) = layers::sdpa(&mut g, q, k, v, mask)?;
    Ok((g.value(out).clone(), g.value(attn).clone()))
}

/// Multi-head self-attention `Y^M = Concat(H_1..H_M) W^M` with the head
/// outputs `H_m`.
pub fn multi_head<T: Real>(x: &Tensor<T>, params: &AttentionParams<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let w = bind(&mut g, params);
    let xi = g.constant(x.clone());
    let heads = layers::heads(&mut g, xi, xi, &w, None)?;
    let y = layers::project(&mut g, &heads.outputs, w.w_o)?;
    Ok((
        g.value(y).clone(),
        heads.outputs.iter().map(|&h| g.value(h).clone()).collect(),
    ))
}

/// Head weights computed from the context `x` and the head outputs, with
/// mean pooling over all tokens.
pub fn horizontal_alpha<T: Real>(
    x: &Tensor<T>,
    heads: &[Tensor<T>],
    params: &AttentionParams<T>,
) -> Result<AlphaWeights<T>> {
    let hw = params
        .horizontal
        .as_ref()
        .ok_or_else(|| Error::config("variant", "horizontal attention parameters are missing"))?;
    if heads.len() != params.num_heads() {
        return Err(Error::shape(format!(
            "expected {} head outputs, got {}",
            params.num_heads(),
            heads.len()
        )));
    }
    let mut g = Graph::new();
    let hw = bind(&mut g, hw);
    let xi = g.constant(x.clone());
    let hs: Vec<_> = heads.iter().map(|h| g.constant(h.clone())).collect();
    let alpha = layers::horizontal_alpha(&mut g, xi, &hs, &hw, &Pooling::Mean)?;
    AlphaWeights::new(squeeze_single_row(g.value(alpha)))
}

/// `Y^H = Concat(alpha_1 H_1, ..., alpha_M H_M) W^M`.
pub fn horizontal_attend<T: Real>(x: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    if params.horizontal.is_none() {
        return Err(Error::config("variant", "horizontal attention parameters are missing"));
    }
    let mut g = Graph::new();
    let w = bind(&mut g, params);
    let xi = g.constant(x.clone());
    let heads = layers::heads(&mut g, xi, xi, &w, None)?;
    let hw = w.horizontal.as_ref().expect("checked above");
    let (y, _) = layers::horizontal_attend(&mut g, xi, &heads.outputs, hw, w.w_o, &Pooling::Mean)?;
    Ok(g.value(y).clone())
}

/// Channel gates computed from the context `x` and the attention output
/// `y_m`, with mean pooling over all tokens.
pub fn vertical_beta<T: Real>(x: &Tensor<T>, y_m: &Tensor<T>, params: &AttentionParams<T>) -> Result<BetaWeights<T>> {
    let vw = params
        .vertical
        .as_ref()
        .ok_or_else(|| Error::config("variant", "vertical attention parameters are missing"))?;
    let mut g = Graph::new();
    let vw = bind(&mut g, vw);
    let (xi, yi) = (g.constant(x.clone()), g.constant(y_m.clone()));
    let beta = layers::vertical_beta(&mut g, xi, yi, &vw, &Pooling::Mean)?;
    BetaWeights::new(squeeze_single_row(g.value(beta)))
}

/// `Y^V = beta * Y^M`, with `beta` broadcast over tokens.
pub fn vertical_attend<T: Real>(x: &Tensor<T>, y_m: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    let vw = params
        .vertical
        .as_ref()
        .ok_or_else(|| Error::config("variant", "vertical attention parameters are missing"))?;
    let mut g = Graph::new();
    let vw = bind(&mut g, vw);
    let (xi, yi) = (g.constant(x.clone()), g.constant(y_m.clone()));
    let beta = layers::vertical_beta(&mut g, xi, yi, &vw, &Pooling::Mean)?;
    let y = layers::gate(&mut g, yi, beta)?;
    Ok(g.value(y).clone())
}

/// Full encoder-style block: the variant's attention output, residual and
/// layer norm, then the feed-forward sublayer.
pub fn block_forward<T: Real>(x: &Tensor<T>, variant: BlockVariant, params: &BlockParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let w = bind(&mut g, params);
    let xi = g.constant(x.clone());
    let out = layers::encoder_block(&mut g, xi, variant, &w, &mut AttnContext::default())?;
    Ok(g.value(out.output).clone())
}
