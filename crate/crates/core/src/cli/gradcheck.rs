//! Gradient-check suite: every operation, then full encoder and decoder
//! blocks per variant.

use std::fmt;
use std::str::FromStr;

use crate::attention::layers::{causal_mask, decoder_block, encoder_block, prefix_mean_pooling};
use crate::attention::{
    AttentionConfig, AttentionWeights, AttnContext, BlockVariant, BlockWeights, FeedForwardWeights, Pooling,
};
use crate::autodiff::gradcheck::{op_suite, random_tensor, weighted_sum, GradChecker};
use crate::autodiff::{GradCheckReport, NodeId, OpKind};
use crate::error::{Error, Result};
use crate::model::DecoderBlockWeights;
use crate::params::{init_weights, InitStyle, ParamSpec, Weights};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
pub const MAX_TOKENS: usize = 8;
pub const MAX_WIDTH: usize = 16;
/// Steps whose per-element minimum separates finite-difference artifacts
/// from backward errors: rounding noise shrinks as the step grows, and
/// ReLU kink crossings vanish once the step is below the distance to the
/// kink.
pub const ARTIFACT_STEPS: [f64; 3] = [1e-6, 1e-5, 1e-3];
/// Block instance used when no seed is given. At `STEP` no element of this
/// instance sits on a finite-difference artifact; most random instances
/// have at least one, which only [`min_over_steps`] tells apart.
pub const DEFAULT_SEED: u64 = 6;

/// Block sizes for the check. `d_k = d_v = max(1, d / m)` and the
/// feed-forward width is `4 d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub d_a: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            n: 3,
            d: 8,
            m: 2,
            d_a: 2,
        }
    }
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > MAX_TOKENS {
            return Err(Error::config("N", format!("must lie in 1..={MAX_TOKENS}")));
        }
        if self.d == 0 || self.d > MAX_WIDTH {
            return Err(Error::config("D", format!("must lie in 1..={MAX_WIDTH}")));
        }
        self.attention().validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        let head = (self.d / self.m.max(1)).max(1);
        AttentionConfig {
            d_model: self.d,
            num_heads: self.m,
            d_k: head,
            d_v: head,
            d_a: self.d_a,
        }
    }
}

/// Parses `N=3,D=8,M=2,Da=2`; omitted keys keep their defaults.
impl FromStr for Dims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut dims = Dims::default();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::config("dims", format!("`{part}` is not KEY=VALUE")))?;
            let value: usize = value
                .trim()
                .parse()
                .map_err(|_| Error::config("dims", format!("`{value}` is not a non-negative integer")))?;
            match key.trim() {
                "N" => dims.n = value,
                "D" => dims.d = value,
                "M" => dims.m = value,
                "Da" => dims.d_a = value,
                other => {
                    return Err(Error::config(
                        "dims",
                        format!("unknown key `{other}` (expected N, D, M, Da)"),
                    ))
                }
            }
        }
        Ok(dims)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N={},D={},M={},Da={}", self.n, self.d, self.m, self.d_a)
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub ops: Vec<CheckResult>,
    pub blocks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.ops.iter().chain(&self.blocks).filter(|r| !r.passed())
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn max_relative_error(&self) -> f64 {
        self.ops
            .iter()
            .chain(&self.blocks)
            .map(|r| r.report.max_relative_error)
            .fold(0.0, f64::max)
    }
}

/// Runs the op suite and both block kinds for each of `variants`, with the
/// backward rule of `fault` corrupted if given.
pub fn run_suite(variants: &[BlockVariant], dims: &Dims, fault: Option<OpKind>) -> Result<SuiteReport> {
    run_suite_seeded(variants, dims, fault, DEFAULT_SEED)
}

/// [`run_suite`] with block inputs and parameters drawn from `seed`.
pub fn run_suite_seeded(
    variants: &[BlockVariant],
    dims: &Dims,
    fault: Option<OpKind>,
    seed: u64,
) -> Result<SuiteReport> {
    dims.validate()?;
    let checker = GradChecker::new(STEP)?.with_fault(fault);
    let ops = op_suite(&checker)?
        .into_iter()
        .map(|(name, report)| CheckResult {
            name: name.to_string(),
            report,
        })
        .collect();
    let mut blocks = Vec::new();
    for &variant in variants {
        blocks.push(CheckResult {
            name: format!("encoder_block/{variant}"),
            report: encoder_check(&checker, variant, dims, seed)?,
        });
        blocks.push(CheckResult {
            name: format!("decoder_block/{variant}"),
            report: decoder_check(&checker, variant, dims, seed)?,
        });
    }
    Ok(SuiteReport { ops, blocks })
}

/// Inputs are the listed activations followed by every parameter of
/// `layout`, initialized with perturbed constants so that no gradient path
/// is trivially zero.
fn inputs<W: Weights<ParamSpec>>(activations: Vec<Tensor<f64>>, layout: &W, seed: u64) -> Vec<Tensor<f64>> {
    let values = init_weights::<f64, _>(layout, seed, InitStyle::Perturbed);
    let mut all = activations;
    values.visit("", &mut |_, t| all.push(t.clone()));
    all
}

fn bind<W: Weights<ParamSpec>>(layout: &W, ids: &[NodeId]) -> W::With<NodeId> {
    let mut rest = ids.iter().copied();
    layout.map("", &mut |_, _| rest.next().expect("one id per parameter"))
}

/// Checks one encoder block on inputs drawn from `seed`.
pub fn encoder_check(checker: &GradChecker, variant: BlockVariant, dims: &Dims, seed: u64) -> Result<GradCheckReport> {
    let seed = seed.wrapping_mul(1000);
    let cfg = dims.attention();
    let layout = BlockWeights::layout(&cfg, 4 * dims.d, variant);
    let inputs = inputs(vec![random_tensor(&[dims.n, dims.d], seed + 11)], &layout, seed + 12);
    checker.check(
        |g, ids| {
            let w = bind(&layout, &ids[1..]);
            let out = encoder_block(g, ids[0], variant, &w, &mut AttnContext::default())?;
            weighted_sum(g, out.output, seed + 13)
        },
        &inputs,
    )
}

/// Checks one decoder block, with causal self-attention and prefix pooling,
/// on inputs drawn from `seed`.
pub fn decoder_check(checker: &GradChecker, variant: BlockVariant, dims: &Dims, seed: u64) -> Result<GradCheckReport> {
    let seed = seed.wrapping_mul(1000);
    let cfg = dims.attention();
    let layout = DecoderBlockWeights {
        self_attention: AttentionWeights::layout(&cfg, variant),
        cross_attention: AttentionWeights::layout(&cfg, variant),
        ffn: FeedForwardWeights::layout(dims.d, 4 * dims.d),
    };
    let memory_len = dims.n + 1;
    let activations = vec![
        random_tensor(&[dims.n, dims.d], seed + 21),
        random_tensor(&[memory_len, dims.d], seed + 22),
    ];
    let inputs = inputs(activations, &layout, seed + 23);
    checker.check(
        |g, ids| {
            let w = bind(&layout, &ids[2..]);
            let mask = g.constant(causal_mask(dims.n));
            let pool = g.constant(prefix_mean_pooling(dims.n));
            let mut ctx = AttnContext {
                self_mask: Some(mask),
                cross_mask: None,
                pooling: Pooling::Matrix(pool),
                dropout: None,
            };
            let out = decoder_block(
                g,
                ids[0],
                ids[1],
                variant,
                &w.self_attention,
                &w.cross_attention,
                &w.ffn,
                &mut ctx,
            )?;
            weighted_sum(g, out.output, seed + 24)
        },
        &inputs,
    )
}

/// Largest element error after taking, per element, the smallest error
/// across `reports`, which must check the same function at different steps.
pub fn min_over_steps(reports: &[GradCheckReport]) -> f64 {
    let Some(first) = reports.first() else {
        return 0.0;
    };
    let mut best = first.element_errors.clone();
    for r in &reports[1..] {
        for (b, e) in best.iter_mut().zip(&r.element_errors) {
            for (x, y) in b.iter_mut().zip(e) {
                *x = x.min(*y);
            }
        }
    }
    best.iter().flatten().copied().fold(0.0, f64::max)
}
