//! Parameter accounting, FLOP estimates and attention traces.
//!
//! Enumerated counts are ground truth. Closed forms derived from the layer
//! shapes must agree with them exactly; the published per-sublayer formulas
//! are carried alongside as `published` and every mismatch is listed
//! as a discrepancy.

mod flops;
mod trace;

use std::fmt;

use crate::model::{ModelConfig, ModelWeights, Seq2SeqModel};
use crate::params::{ParamKind, ParamSpec, Weights};
use crate::tensor::{Real, Tensor};

pub use flops::{estimate_flops, measure_flops, FlopReport};
pub use trace::{trace_attention, write_trace_csv, Quantity, Stack, Sublayer, TraceRecord, TRACE_CSV_HEADER};

/// Header of [`ParamReport::to_csv`] and [`FlopReport::to_csv`] rows.
pub const REPORT_CSV_HEADER: &str = "report,item,value,closed_form,published";

/// Per-sublayer quantity with its shape-derived and published closed forms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClosedForm {
    pub item: &'static str,
    /// Enumerated scalars in one attention sublayer.
    pub enumerated: u64,
    pub formula: &'static str,
    pub closed_form: u64,
    pub published_formula: &'static str,
    pub published: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Discrepancy {
    pub item: &'static str,
    pub enumerated: u64,
    pub published: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    /// Scalars per category, in [`ParamKind::ALL`] order.
    pub counts: Vec<(ParamKind, u64)>,
    pub total: u64,
    /// Attention sublayers in the model: one per encoder block, two per
    /// decoder block.
    pub attention_sublayers: u64,
    pub closed_forms: Vec<ClosedForm>,
    pub discrepancies: Vec<Discrepancy>,
}

impl ParamReport {
    pub fn count(&self, kind: ParamKind) -> u64 {
        self.counts.iter().find(|(k, _)| *k == kind).map_or(0, |(_, n)| *n)
    }

    pub fn closed_form(&self, item: &str) -> Option<&ClosedForm> {
        self.closed_forms.iter().find(|c| c.item == item)
    }

    /// Rows under [`REPORT_CSV_HEADER`], without the header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (kind, n) in &self.counts {
            out.push_str(&format!("params,{},{n},,\n", kind.name()));
        }
        out.push_str(&format!("params,total,{},,\n", self.total));
        out.push_str(&format!("params,attention_sublayers,{},,\n", self.attention_sublayers));
        for c in &self.closed_forms {
            out.push_str(&format!(
                "per_sublayer,{},{},{},{}\n",
                c.item, c.enumerated, c.closed_form, c.published
            ));
        }
        for d in &self.discrepancies {
            out.push_str(&format!("discrepancy,{},{},,{}\n", d.item, d.enumerated, d.published));
        }
        out
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "parameters by category")?;
        for (kind, n) in &self.counts {
            writeln!(f, "  {:<18} {:>14}", kind.name(), group_digits(*n))?;
        }
        writeln!(f, "  {:<18} {:>14}", "total", group_digits(self.total))?;
        writeln!(f, "per attention sublayer ({} sublayers)", self.attention_sublayers)?;
        for c in &self.closed_forms {
            writeln!(
                f,
                "  {:<18} enumerated {:>12}  {} = {:>12} published {} = {:>12}",
                c.item,
                group_digits(c.enumerated),
                c.formula,
                group_digits(c.closed_form),
                c.published_formula,
                group_digits(c.published)
            )?;
        }
        if self.discrepancies.is_empty() {
            writeln!(f, "discrepancies: none")?;
        } else {
            writeln!(f, "discrepancies")?;
            for d in &self.discrepancies {
                let diff = d.enumerated as i128 - d.published as i128;
                writeln!(
                    f,
                    "  {:<18} enumerated {:>12} vs published {:>12} ({diff:+})",
                    d.item,
                    group_digits(d.enumerated),
                    group_digits(d.published)
                )?;
            }
        }
        Ok(())
    }
}

/// `1234567` as `1,234,567`.
pub fn group_digits(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Enumerates a trained or freshly built model.
pub fn count_params<T: Real>(model: &Seq2SeqModel<T>) -> ParamReport {
    let layout = ModelWeights::layout(model.config());
    let mut kinds = Vec::new();
    layout.visit("", &mut |_, spec: &ParamSpec| kinds.push(spec.kind));
    let mut sizes = Vec::with_capacity(kinds.len());
    model
        .weights()
        .visit("", &mut |_, t: &Tensor<T>| sizes.push(t.numel() as u64));
    report(model.config(), kinds.into_iter().zip(sizes))
}

/// Enumerates the layout `config` would build, without allocating weights.
pub fn count_params_for_config(config: &ModelConfig) -> ParamReport {
    let layout = ModelWeights::layout(config);
    let mut entries = Vec::new();
    layout.visit("", &mut |_, spec: &ParamSpec| {
        entries.push((spec.kind, spec.numel() as u64))
    });
    report(config, entries)
}

fn report(config: &ModelConfig, entries: impl IntoIterator<Item = (ParamKind, u64)>) -> ParamReport {
    let mut counts: Vec<(ParamKind, u64)> = ParamKind::ALL.iter().map(|&k| (k, 0)).collect();
    for (kind, n) in entries {
        let slot = counts
            .iter_mut()
            .find(|(k, _)| *k == kind)
            .expect("every kind is listed");
        slot.1 += n;
    }
    let total = counts.iter().map(|(_, n)| n).sum();
    let sublayers = (config.num_encoder_blocks + 2 * config.num_decoder_blocks) as u64;
    let per_sublayer = |kind: ParamKind| {
        let n = counts.iter().find(|(k, _)| *k == kind).map_or(0, |(_, n)| *n);
        n.checked_div(sublayers).unwrap_or(0)
    };

    let (d, m, dk, dv, da) = (
        config.d_model as u64,
        config.num_heads as u64,
        config.d_k as u64,
        config.d_v as u64,
        config.d_a as u64,
    );
    let mut closed_forms = Vec::new();
    if sublayers > 0 {
        closed_forms.push(ClosedForm {
            item: "multi_head",
            enumerated: per_sublayer(ParamKind::QkvProjection) + per_sublayer(ParamKind::OutputProjection),
            formula: "M(2D Dk + D Dv) + M Dv D",
            closed_form: m * (2 * d * dk + d * dv) + m * dv * d,
            published_formula: "2MD^2",
            published: 2 * m * d * d,
        });
    }
    if config.variant.has_horizontal() && sublayers > 0 {
        closed_forms.push(ClosedForm {
            item: ParamKind::Horizontal.name(),
            enumerated: per_sublayer(ParamKind::Horizontal),
            formula: "Dv^2 + D Dv + Dv + 1",
            closed_form: dv * dv + d * dv + dv + 1,
            published_formula: "2D^2 + D",
            published: 2 * d * d + d,
        });
    }
    if config.variant.has_vertical() && sublayers > 0 {
        closed_forms.push(ClosedForm {
            item: ParamKind::Vertical.name(),
            enumerated: per_sublayer(ParamKind::Vertical),
            formula: "3 D Da + D",
            closed_form: 3 * d * da + d,
            published_formula: "3D^2",
            published: 3 * d * d,
        });
    }
    let discrepancies = closed_forms
        .iter()
        .filter(|c| c.enumerated != c.published)
        .map(|c| Discrepancy {
            item: c.item,
            enumerated: c.enumerated,
            published: c.published,
        })
        .collect();
    ParamReport {
        counts,
        total,
        attention_sublayers: sublayers,
        closed_forms,
        discrepancies,
    }
}
