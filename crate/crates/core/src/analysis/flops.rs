//! Multiply-accumulate estimates for one encoder block.
//!
//! The block processes a single unpadded sequence of `n` tokens with
//! full-sequence mean pooling. Costs follow the graph tally: a matmul
//! `[p, q] x [q, r]` is `p q r`, elementwise ops and reductions are 1 per
//! element, softmax is 3 per element and layer norm 5 per element.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::group_digits;
use crate::attention::layers::{encoder_block, AttnContext};
use crate::attention::{scope, BlockVariant, BlockWeights};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{init_weights, InitStyle, Weights};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub n: u64,
    /// `M N^2 Dk`, inside `sdpa_total`.
    pub sdpa_scores: u64,
    /// `M N^2 Dv`, inside `sdpa_total`.
    pub sdpa_weighted_sum: u64,
    /// Projections, scores, scaling, softmax, weighted sums and `W^M`.
    pub sdpa_total: u64,
    pub horizontal_extra: u64,
    pub vertical_extra: u64,
    pub ffn: u64,
    /// Residual additions and layer norms.
    pub other: u64,
}

impl FlopReport {
    /// Cost of a block that enables both augmentations.
    pub fn total(&self) -> u64 {
        self.sdpa_total + self.horizontal_extra + self.vertical_extra + self.ffn + self.other
    }

    /// Rows under [`super::REPORT_CSV_HEADER`], without the header.
    pub fn to_csv(&self) -> String {
        let mut out = format!("flops,n,{},,\n", self.n);
        for (item, v) in self.items() {
            out.push_str(&format!("flops,{item},{v},,\n"));
        }
        out
    }

    fn items(&self) -> [(&'static str, u64); 8] {
        [
            ("sdpa_scores", self.sdpa_scores),
            ("sdpa_weighted_sum", self.sdpa_weighted_sum),
            ("sdpa_total", self.sdpa_total),
            ("horizontal_extra", self.horizontal_extra),
            ("vertical_extra", self.vertical_extra),
            ("ffn", self.ffn),
            ("other", self.other),
            ("total", self.total()),
        ]
    }
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "multiply-accumulates per encoder block at N = {}", self.n)?;
        for (item, v) in self.items() {
            writeln!(f, "  {item:<18} {:>16}", group_digits(v))?;
        }
        Ok(())
    }
}

/// Closed-form costs at sequence length `n`. Augmentation costs are reported
/// whatever `config.variant` is.
pub fn estimate_flops(config: &ModelConfig, n: usize) -> Result<FlopReport> {
    if n == 0 {
        return Err(Error::Input("sequence length must be at least 1".into()));
    }
    let n = n as u64;
    let (d, m, dk, dv, da, f) = (
        config.d_model as u64,
        config.num_heads as u64,
        config.d_k as u64,
        config.d_v as u64,
        config.d_a as u64,
        config.ffn_width as u64,
    );
    let sdpa_scores = m * n * n * dk;
    let sdpa_weighted_sum = m * n * n * dv;
    let projections = m * n * d * (2 * dk + dv) + n * m * dv * d;
    // scale plus 3 per softmax entry
    let normalization = m * 4 * n * n;
    // context, per-head scores and pooling, shift/exp/sum/divide of the M
    // weights, reweighting, and the final division of the projected output
    let horizontal_extra = n * d * dv + m * (n * dv * dv + 3 * n * dv + n) + 4 * m + m * n * dv + n * d;
    let vertical_extra = 2 * n * d * da + 3 * n * da + da * d + 2 * d + n * d;
    Ok(FlopReport {
        n,
        sdpa_scores,
        sdpa_weighted_sum,
        sdpa_total: sdpa_scores + sdpa_weighted_sum + projections + normalization,
        horizontal_extra,
        vertical_extra,
        ffn: 2 * n * d * f + 2 * n * f + n * d,
        other: 2 * 6 * n * d,
    })
}

/// Runs one encoder block with both augmentations on random input and reads
/// the graph's per-scope tally.
pub fn measure_flops(config: &ModelConfig, n: usize) -> Result<FlopReport> {
    if n == 0 {
        return Err(Error::Input("sequence length must be at least 1".into()));
    }
    let attn = config.attention();
    attn.validate()?;
    let layout = BlockWeights::layout(&attn, config.ffn_width, BlockVariant::Both);
    let values = init_weights::<f64, _>(&layout, config.seed, InitStyle::Standard);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x: Vec<f64> = (0..n * config.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut g = Graph::<f64>::new();
    let weights = values.map("", &mut |_, t: &Tensor<f64>| g.constant(t.clone()));
    let x = g.constant(Tensor::from_f64(vec![n, config.d_model], &x)?);
    let (score_macs, weighted_macs) = {
        let mut probe = Graph::<f64>::new();
        let q = probe.constant(Tensor::zeros(vec![n, config.d_k])?);
        let v = probe.constant(Tensor::zeros(vec![n, config.d_v])?);
        let kt = probe.transpose(q)?;
        probe.matmul(q, kt)?;
        let after_scores = probe.total_flops();
        let a = probe.constant(Tensor::zeros(vec![n, n])?);
        probe.matmul(a, v)?;
        (after_scores, probe.total_flops() - after_scores)
    };
    encoder_block(&mut g, x, BlockVariant::Both, &weights, &mut AttnContext::default())?;
    let tally = g.flops();
    let get = |s: &str| tally.get(s).copied().unwrap_or(0);
    let heads = config.num_heads as u64;
    Ok(FlopReport {
        n: n as u64,
        sdpa_scores: heads * score_macs,
        sdpa_weighted_sum: heads * weighted_macs,
        sdpa_total: get(scope::SDPA),
        horizontal_extra: get(scope::HORIZONTAL),
        vertical_extra: get(scope::VERTICAL),
        ffn: get(scope::FFN),
        other: get(scope::OTHER),
    })
}
