//! Capture of `alpha`, `beta` and attention matrices from a forward pass.

use std::io::Write;

use crate::attention::{AlphaWeights, BetaWeights};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;
use crate::tensor::{Real, Tensor};

pub const TRACE_CSV_HEADER: &str = "stack,block,sublayer,quantity,head,row,col,value";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantity {
    Alpha,
    Beta,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stack {
    Encoder,
    Decoder,
}

impl Stack {
    pub fn name(self) -> &'static str {
        match self {
            Stack::Encoder => "encoder",
            Stack::Decoder => "decoder",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sublayer {
    SelfAttention,
    CrossAttention,
}

impl Sublayer {
    pub fn name(self) -> &'static str {
        match self {
            Sublayer::SelfAttention => "self",
            Sublayer::CrossAttention => "cross",
        }
    }
}

/// Captured quantities of one attention sublayer. `alpha` rows are `[M]`
/// (one row for the encoder, one per target position for the decoder),
/// `beta` rows are `[D]`, and each attention matrix is `[queries, keys]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord<T: Real> {
    pub stack: Stack,
    pub block: usize,
    pub sublayer: Sublayer,
    pub alpha: Option<AlphaWeights<T>>,
    pub beta: Option<BetaWeights<T>>,
    pub attn: Vec<Tensor<T>>,
}

/// Runs `src` through the encoder and the decoder input `tgt` (fed as is,
/// no tokens added) through the decoder, recording `quantities` for every
/// attention sublayer.
pub fn trace_attention<T: Real>(
    model: &Seq2SeqModel<T>,
    src: &[usize],
    tgt: &[usize],
    quantities: &[Quantity],
) -> Result<Vec<TraceRecord<T>>> {
    let variant = model.config().variant;
    let want = |q: Quantity| quantities.contains(&q);
    if want(Quantity::Alpha) && !variant.has_horizontal() {
        return Err(Error::config(
            "variant",
            format!("{variant} blocks have no horizontal attention to trace"),
        ));
    }
    if want(Quantity::Beta) && !variant.has_vertical() {
        return Err(Error::config(
            "variant",
            format!("{variant} blocks have no vertical attention to trace"),
        ));
    }
    let (src, tgt) = (model.pad(&[src.to_vec()])?, model.pad(&[tgt.to_vec()])?);
    let mut g = Graph::<T>::new();
    let weights = model.bind(&mut g, false);
    let out = model.network(&weights, None).forward(&mut g, &src, &tgt)?;

    let unbatch = |id: NodeId| -> Result<Tensor<T>> {
        let t = g.value(id).clone();
        let shape = t.shape()[1..].to_vec();
        t.reshape(shape)
    };
    let mut records = Vec::new();
    let stacks = [(Stack::Encoder, &out.encoder), (Stack::Decoder, &out.decoder)];
    for (stack, blocks) in stacks {
        for (block, b) in blocks.iter().enumerate() {
            for (i, s) in b.sublayers.iter().enumerate() {
                let alpha = match s.alpha {
                    Some(a) if want(Quantity::Alpha) => Some(AlphaWeights::new(unbatch(a)?)?),
                    _ => None,
                };
                let beta = match s.beta {
                    Some(b) if want(Quantity::Beta) => Some(BetaWeights::new(unbatch(b)?)?),
                    _ => None,
                };
                let attn = if want(Quantity::Attention) {
                    s.attn.iter().map(|&a| unbatch(a)).collect::<Result<_>>()?
                } else {
                    Vec::new()
                };
                records.push(TraceRecord {
                    stack,
                    block,
                    sublayer: if i == 0 {
                        Sublayer::SelfAttention
                    } else {
                        Sublayer::CrossAttention
                    },
                    alpha,
                    beta,
                    attn,
                });
            }
        }
    }
    Ok(records)
}

fn write_rows<T: Real>(
    out: &mut impl Write,
    prefix: &str,
    quantity: &str,
    head: &str,
    t: &Tensor<T>,
) -> std::io::Result<()> {
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    for (i, v) in t.data().iter().enumerate() {
        writeln!(
            out,
            "{prefix},{quantity},{head},{},{},{}",
            i / cols,
            i % cols,
            v.to_f64_lossless()
        )?;
    }
    Ok(())
}

/// Writes the header and one row per traced scalar. `head` is empty for
/// `alpha` (whose columns are heads) and `beta` (whose columns are channels).
pub fn write_trace_csv<T: Real>(records: &[TraceRecord<T>], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for r in records {
        let prefix = format!("{},{},{}", r.stack.name(), r.block, r.sublayer.name());
        if let Some(a) = &r.alpha {
            write_rows(out, &prefix, "alpha", "", a.tensor())?;
        }
        if let Some(b) = &r.beta {
            write_rows(out, &prefix, "beta", "", b.tensor())?;
        }
        for (m, a) in r.attn.iter().enumerate() {
            write_rows(out, &prefix, "attn", &m.to_string(), a)?;
        }
    }
    Ok(())
}
