//! Encoder-decoder Transformer built from attention blocks of one variant.
//!
//! Sequences are batched by right-padding with [`PAD`]. Encoder keys at pad
//! positions are masked and encoder pooling averages valid tokens only.
//! Decoder self-attention is causal and decoder pooling is a prefix mean,
//! so no decoder position depends on a later one; since padding sits at the
//! end, this also keeps padding out of every valid position.

use serde::{Deserialize, Serialize};

use crate::attention::layers::{self, causal_mask, prefix_mean_pooling, BlockOutput};
use crate::attention::{
    scope, AttentionConfig, AttentionWeights, AttnContext, BlockVariant, BlockWeights, Dropout, FeedForwardWeights,
    Pooling, MASKED_LOGIT,
};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::impl_weights;
use crate::params::{init_weights, Init, InitStyle, ParamKind, ParamSpec, Weights};
use crate::tensor::{Real, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Architecture and initialization seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "ModelConfigFile")]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub num_encoder_blocks: usize,
    pub num_decoder_blocks: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    pub variant: BlockVariant,
    pub seed: u64,
    /// Dropout rate on sublayer outputs during training.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfigFile::default().into()
    }
}

/// On-disk form: widths derived from `d_model` and `num_heads` may be
/// omitted.
#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelConfigFile {
    vocab_size: usize,
    d_model: usize,
    num_heads: usize,
    d_k: Option<usize>,
    d_v: Option<usize>,
    d_a: Option<usize>,
    num_encoder_blocks: usize,
    num_decoder_blocks: usize,
    ffn_width: Option<usize>,
    max_len: usize,
    variant: BlockVariant,
    seed: u64,
    dropout: f64,
}

impl Default for ModelConfigFile {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            d_model: 512,
            num_heads: 8,
            d_k: None,
            d_v: None,
            d_a: None,
            num_encoder_blocks: 6,
            num_decoder_blocks: 6,
            ffn_width: None,
            max_len: 64,
            variant: BlockVariant::Baseline,
            seed: 0,
            dropout: 0.0,
        }
    }
}

impl From<ModelConfigFile> for ModelConfig {
    fn from(f: ModelConfigFile) -> Self {
        let head = (f.d_model / f.num_heads.max(1)).max(1);
        Self {
            vocab_size: f.vocab_size,
            d_model: f.d_model,
            num_heads: f.num_heads,
            d_k: f.d_k.unwrap_or(head),
            d_v: f.d_v.unwrap_or(head),
            d_a: f.d_a.unwrap_or_else(|| crate::attention::default_squeeze(f.d_model)),
            num_encoder_blocks: f.num_encoder_blocks,
            num_decoder_blocks: f.num_decoder_blocks,
            ffn_width: f.ffn_width.unwrap_or(4 * f.d_model),
            max_len: f.max_len,
            variant: f.variant,
            seed: f.seed,
            dropout: f.dropout,
        }
    }
}

impl ModelConfig {
    /// Defaults with the given width, head count, depths and variant; the
    /// dependent widths follow `d_model` and `num_heads`.
    pub fn small(
        vocab_size: usize,
        d_model: usize,
        num_heads: usize,
        blocks: (usize, usize),
        variant: BlockVariant,
    ) -> Self {
        ModelConfigFile {
            vocab_size,
            d_model,
            num_heads,
            num_encoder_blocks: blocks.0,
            num_decoder_blocks: blocks.1,
            variant,
            ..ModelConfigFile::default()
        }
        .into()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            num_heads: self.num_heads,
            d_k: self.d_k,
            d_v: self.d_v,
            d_a: self.d_a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be at least 2"));
        }
        self.attention().validate()?;
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::config("d_model", "sinusoidal positions need an even width"));
        }
        if self.num_encoder_blocks + self.num_decoder_blocks == 0 {
            return Err(Error::config(
                "num_encoder_blocks",
                "the model needs at least one block",
            ));
        }
        if self.ffn_width == 0 {
            return Err(Error::config("ffn_width", "must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlockWeights<P> {
    pub self_attention: AttentionWeights<P>,
    pub cross_attention: AttentionWeights<P>,
    pub ffn: FeedForwardWeights<P>,
}
impl_weights!(DecoderBlockWeights {
    self_attention: nested,
    cross_attention: nested,
    ffn: nested,
});

/// All trainable parameters, in checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<P> {
    /// `[vocab_size, d_model]`, shared by source and target tokens.
    pub embedding: P,
    pub encoder: Vec<BlockWeights<P>>,
    pub decoder: Vec<DecoderBlockWeights<P>>,
    /// `[d_model, vocab_size]`, untied from the embedding.
    pub output: P,
}
impl_weights!(ModelWeights {
    embedding: slot,
    encoder: list,
    decoder: list,
    output: slot,
});

impl ModelWeights<ParamSpec> {
    pub fn layout(cfg: &ModelConfig) -> Self {
        let attn = cfg.attention();
        let d = cfg.d_model;
        Self {
            embedding: ParamSpec {
                shape: vec![cfg.vocab_size, d],
                kind: ParamKind::Embedding,
                init: Init::Uniform(1.0 / (d as f64).sqrt()),
            },
            encoder: (0..cfg.num_encoder_blocks)
                .map(|_| BlockWeights::layout(&attn, cfg.ffn_width, cfg.variant))
                .collect(),
            decoder: (0..cfg.num_decoder_blocks)
                .map(|_| DecoderBlockWeights {
                    self_attention: AttentionWeights::layout(&attn, cfg.variant),
                    cross_attention: AttentionWeights::layout(&attn, cfg.variant),
                    ffn: FeedForwardWeights::layout(d, cfg.ffn_width),
                })
                .collect(),
            // Unit-variance states give logits of variance 1 / (3 D), close
            // to uniform predictions at initialization.
            output: ParamSpec {
                shape: vec![d, cfg.vocab_size],
                kind: ParamKind::Embedding,
                init: Init::Uniform(1.0 / d as f64),
            },
        }
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/D))`, `PE[pos, 2i+1] = cos(..)`.
pub fn positional_encoding<T: Real>(max_len: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::config(
            "d_model",
            format!("positional encoding needs an even width, got {d}"),
        ));
    }
    if max_len == 0 {
        return Err(Error::config("max_len", "must be at least 1"));
    }
    let mut data = Vec::with_capacity(max_len * d);
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::from_f64(vec![max_len, d], &data)
}

/// Right-padded token batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    /// `batch * len` ids, row-major.
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub len: usize,
}

impl Padded {
    pub fn new(seqs: &[Vec<usize>], vocab_size: usize, max_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Input("sequences must hold at least one token".into()));
        }
        if len > max_len {
            return Err(Error::Input(format!("sequence length {len} exceeds max_len {max_len}")));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            if let Some(&bad) = s.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::Input(format!(
                    "token {bad} out of range for vocabulary of {vocab_size}"
                )));
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        Ok(Self {
            ids,
            lens: seqs.iter().map(Vec::len).collect(),
            len,
        })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn is_ragged(&self) -> bool {
        self.lens.iter().any(|&l| l != self.len)
    }

    /// `[B, 1, L]` additive mask over pad keys, or `None` without padding.
    fn key_mask<T: Real>(&self) -> Option<Tensor<T>> {
        self.is_ragged().then(|| {
            let masked = T::from_f64_lossy(MASKED_LOGIT);
            let data = self
                .lens
                .iter()
                .flat_map(|&l| (0..self.len).map(move |j| if j < l { T::zero() } else { masked }))
                .collect();
            Tensor::new(vec![self.batch(), 1, self.len], data).expect("mask shape")
        })
    }

    /// `[B, 1, L]` mean over valid positions, or `None` without padding.
    fn valid_mean<T: Real>(&self) -> Option<Tensor<T>> {
        self.is_ragged().then(|| {
            let data = self
                .lens
                .iter()
                .flat_map(|&l| {
                    let w = T::one() / T::from_usize(l).expect("length fits the float type");
                    (0..self.len).map(move |j| if j < l { w } else { T::zero() })
                })
                .collect();
            Tensor::new(vec![self.batch(), 1, self.len], data).expect("pooling shape")
        })
    }
}

/// Encoder output and the mask that hides its padding.
#[derive(Clone, Debug)]
pub struct Memory {
    pub states: NodeId,
    pub key_mask: Option<NodeId>,
    pub blocks: Vec<BlockOutput>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B, T, vocab_size]`.
    pub logits: NodeId,
    pub encoder: Vec<BlockOutput>,
    pub decoder: Vec<BlockOutput>,
}

/// Graph-level pieces of the model, parameterized by bound weights.
pub struct Network<'a, T: Real> {
    pub config: &'a ModelConfig,
    pub weights: &'a ModelWeights<NodeId>,
    pub positions: &'a Tensor<T>,
    /// Seed for dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
}

impl<T: Real> Network<'_, T> {
    fn embed(&self, g: &mut Graph<T>, tokens: &Padded) -> Result<NodeId> {
        let d = self.config.d_model;
        let rows = g.gather_rows(self.weights.embedding, &tokens.ids)?;
        let x = g.reshape(rows, &[tokens.batch(), tokens.len, d])?;
        let x = g.scale(x, T::from_f64_lossy((d as f64).sqrt()))?;
        let pe = Tensor::new(vec![tokens.len, d], self.positions.data()[..tokens.len * d].to_vec())?;
        let pe = g.constant(pe);
        g.add(x, pe)
    }

    fn dropout(&self, salt: u64) -> Result<Option<Dropout>> {
        match self.dropout_seed {
            Some(seed) if self.config.dropout > 0.0 => Ok(Some(Dropout::new(
                self.config.dropout,
                seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ salt,
            )?)),
            _ => Ok(None),
        }
    }

    pub fn encode(&self, g: &mut Graph<T>, src: &Padded) -> Result<Memory> {
        let prev = g.set_flop_scope(scope::OTHER);
        let mut x = self.embed(g, src)?;
        let key_mask = src.key_mask::<T>().map(|m| g.constant(m));
        let pooling = match src.valid_mean::<T>() {
            Some(p) => Pooling::Matrix(g.constant(p)),
            None => Pooling::Mean,
        };
        let mut ctx = AttnContext {
            self_mask: key_mask,
            cross_mask: None,
            pooling,
            dropout: self.dropout(1)?,
        };
        let mut blocks = Vec::with_capacity(self.weights.encoder.len());
        for w in &self.weights.encoder {
            let out = layers::encoder_block(g, x, self.config.variant, w, &mut ctx)?;
            x = out.output;
            blocks.push(out);
        }
        g.set_flop_scope(prev);
        Ok(Memory {
            states: x,
            key_mask,
            blocks,
        })
    }

    /// Decoder states `[B, T, D]` for teacher-forced inputs `tgt`.
    pub fn decode(&self, g: &mut Graph<T>, memory: &Memory, tgt: &Padded) -> Result<(NodeId, Vec<BlockOutput>)> {
        let prev = g.set_flop_scope(scope::OTHER);
        let mut y = self.embed(g, tgt)?;
        let (b, t) = (tgt.batch(), tgt.len);
        let mask = g.constant(causal_mask::<T>(t));
        let prefix = prefix_mean_pooling::<T>(t);
        let pool = Tensor::new(vec![b, t, t], prefix.data().repeat(b))?;
        let mut ctx = AttnContext {
            self_mask: Some(mask),
            cross_mask: memory.key_mask,
            pooling: Pooling::Matrix(g.constant(pool)),
            dropout: self.dropout(2)?,
        };
        let mut blocks = Vec::with_capacity(self.weights.decoder.len());
        for w in &self.weights.decoder {
            let out = layers::decoder_block(
                g,
                y,
                memory.states,
                self.config.variant,
                &w.self_attention,
                &w.cross_attention,
                &w.ffn,
                &mut ctx,
            )?;
            y = out.output;
            blocks.push(out);
        }
        g.set_flop_scope(prev);
        Ok((y, blocks))
    }

    pub fn logits(&self, g: &mut Graph<T>, states: NodeId) -> Result<NodeId> {
        let prev = g.set_flop_scope(scope::OTHER);
        let out = g.matmul(states, self.weights.output);
        g.set_flop_scope(prev);
        out
    }

    pub fn forward(&self, g: &mut Graph<T>, src: &Padded, tgt: &Padded) -> Result<Forward> {
        if src.batch() != tgt.batch() {
            return Err(Error::Input(format!(
                "{} source sequences but {} target sequences",
                src.batch(),
                tgt.batch()
            )));
        }
        let memory = self.encode(g, src)?;
        let (states, decoder) = self.decode(g, &memory, tgt)?;
        let logits = self.logits(g, states)?;
        Ok(Forward {
            logits,
            encoder: memory.blocks,
            decoder,
        })
    }
}

/// Seq2seq Transformer with parameters stored in precision `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqModel<T: Real = f32> {
    config: ModelConfig,
    weights: ModelWeights<Tensor<T>>,
    positions: Tensor<T>,
}

impl<T: Real> Seq2SeqModel<T> {
    /// Deterministic initialization from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        Self::build_with(config, InitStyle::Standard)
    }

    pub fn build_with(config: &ModelConfig, style: InitStyle) -> Result<Self> {
        config.validate()?;
        let weights = init_weights(&ModelWeights::layout(config), config.seed, style);
        Self::from_weights(config.clone(), weights)
    }

    /// Model from explicit parameters, whose names and shapes must match the
    /// layout of `config`.
    pub fn from_weights(config: ModelConfig, weights: ModelWeights<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = ModelWeights::layout(&config);
        let expected = layout.named("");
        let found = weights.named("");
        if expected.len() != found.len() {
            return Err(Error::config(
                "weights",
                format!("expected {} tensors, got {}", expected.len(), found.len()),
            ));
        }
        for ((name, spec), (other, t)) in expected.iter().zip(&found) {
            if name != other || spec.shape != t.shape() {
                return Err(Error::shape(format!(
                    "parameter {other} has shape {:?}, expected {name} with shape {:?}",
                    t.shape(),
                    spec.shape
                )));
            }
        }
        let positions = positional_encoding(config.max_len, config.d_model)?;
        Ok(Self {
            config,
            weights,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights<Tensor<T>> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ModelWeights<Tensor<T>> {
        &mut self.weights
    }

    pub fn positions(&self) -> &Tensor<T> {
        &self.positions
    }

    pub fn num_parameters(&self) -> usize {
        crate::params::count_scalars(&self.weights)
    }

    pub fn cast<U: Real>(&self) -> Seq2SeqModel<U> {
        Seq2SeqModel {
            config: self.config.clone(),
            weights: self.weights.map("", &mut |_, t| t.cast()),
            positions: self.positions.cast(),
        }
    }

    /// Insert the parameters into `g`, as trainable leaves if `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ModelWeights<NodeId> {
        self.weights.map("", &mut |_, t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    pub fn network<'a>(&'a self, weights: &'a ModelWeights<NodeId>, dropout_seed: Option<u64>) -> Network<'a, T> {
        Network {
            config: &self.config,
            weights,
            positions: &self.positions,
            dropout_seed,
        }
    }

    pub fn pad(&self, seqs: &[Vec<usize>]) -> Result<Padded> {
        Padded::new(seqs, self.config.vocab_size, self.config.max_len)
    }

    /// Logits `[len(tgt), vocab_size]` for decoder inputs `tgt` (which the
    /// caller starts with [`BOS`]).
    pub fn forward(&self, src: &[usize], tgt: &[usize]) -> Result<Tensor<T>> {
        let logits = self.forward_batch(&[src.to_vec()], &[tgt.to_vec()])?;
        let v = self.config.vocab_size;
        logits.reshape(vec![tgt.len(), v])
    }

    /// Logits `[B, T, vocab_size]`; rows past a target's length are padding.
    pub fn forward_batch(&self, src: &[Vec<usize>], tgt: &[Vec<usize>]) -> Result<Tensor<T>> {
        let (src, tgt) = (self.pad(src)?, self.pad(tgt)?);
        let mut g = Graph::new();
        let w = self.bind(&mut g, false);
        let out = self.network(&w, None).forward(&mut g, &src, &tgt)?;
        Ok(g.value(out.logits).clone())
    }

    /// Greedy decoding: append the argmax token (lowest id on ties) until
    /// `eos_id` or `max_steps` tokens. The result excludes `bos_id` and
    /// `eos_id`.
    pub fn greedy_decode(&self, src: &[usize], max_steps: usize, bos_id: usize, eos_id: usize) -> Result<Vec<usize>> {
        Ok(self
            .greedy_decode_batch(&[src.to_vec()], max_steps, bos_id, eos_id)?
            .remove(0))
    }

    pub fn greedy_decode_batch(
        &self,
        src: &[Vec<usize>],
        max_steps: usize,
        bos_id: usize,
        eos_id: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let v = self.config.vocab_size;
        if bos_id >= v || eos_id >= v {
            return Err(Error::Input(format!(
                "special ids {bos_id}/{eos_id} out of range for {v}"
            )));
        }
        if max_steps > self.config.max_len {
            return Err(Error::Input(format!(
                "max_steps {max_steps} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let mut outputs = vec![Vec::new(); src.len()];
        if max_steps == 0 || src.is_empty() {
            return Ok(outputs);
        }
        let src = self.pad(src)?;
        let memory = {
            let mut g = Graph::new();
            let w = self.bind(&mut g, false);
            let m = self.network(&w, None).encode(&mut g, &src)?;
            g.value(m.states).clone()
        };
        let mut done = vec![false; outputs.len()];
        let mut prefixes = vec![vec![bos_id]; outputs.len()];
        for _ in 0..max_steps {
            let active: Vec<usize> = (0..outputs.len()).filter(|&i| !done[i]).collect();
            if active.is_empty() {
                break;
            }
            let mut g = Graph::new();
            let w = self.bind(&mut g, false);
            let net = self.network(&w, None);
            let (s, d) = (src.len, self.config.d_model);
            let mem_data: Vec<T> = active
                .iter()
                .flat_map(|&i| memory.data()[i * s * d..(i + 1) * s * d].iter().copied())
                .collect();
            let states = g.constant(Tensor::new(vec![active.len(), s, d], mem_data)?);
            let subset = Padded {
                ids: Vec::new(),
                lens: active.iter().map(|&i| src.lens[i]).collect(),
                len: s,
            };
            let key_mask = subset.key_mask::<T>().map(|m| g.constant(m));
            let mem = Memory {
                states,
                key_mask,
                blocks: Vec::new(),
            };
            let steps: Vec<Vec<usize>> = active.iter().map(|&i| prefixes[i].clone()).collect();
            let tgt = Padded::new(&steps, v, self.config.max_len)?;
            let (y, _) = net.decode(&mut g, &mem, &tgt)?;
            let logits = net.logits(&mut g, y)?;
            let values = g.value(logits).data();
            let t = tgt.len;
            for (row, &i) in active.iter().enumerate() {
                let at = (row * t + t - 1) * v;
                let next = argmax(&values[at..at + v]);
                if next == eos_id {
                    done[i] = true;
                } else {
                    outputs[i].push(next);
                    prefixes[i].push(next);
                }
            }
        }
        Ok(outputs)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate() {
        if x > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
