//! Label-smoothed cross-entropy, AdamW, synthetic seq2seq tasks and the
//! training loop.
//!
//! Reported losses are always the unsmoothed mean negative log-likelihood
//! per target token, so `ppl == exp(loss)` on every metrics row; label
//! smoothing only shapes the training objective.

mod optim;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{argmax, Seq2SeqModel, BOS, EOS, PAD};
use crate::params::Weights;
use crate::tensor::{Real, Tensor};

pub use optim::{adam_step, adamw_step, Adam, AdamW, OptimState};

/// Offset between the training and validation data seeds.
const VALIDATION_STREAM: u64 = 0x5851_f42d_4c95_7f2d;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
    Sort,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Sort => "sort",
        }
    }

    pub fn target(self, src: &[usize]) -> Vec<usize> {
        let mut t = src.to_vec();
        match self {
            Task::Copy => {}
            Task::Reverse => t.reverse(),
            Task::Sort => t.sort_unstable(),
        }
        t
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "sort" => Ok(Task::Sort),
            _ => Err(Error::config(
                "task",
                format!("unknown task `{s}` (expected copy, reverse or sort)"),
            )),
        }
    }
}

/// Float width used for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Optimization and data settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub task: Task,
    /// Inclusive source length range.
    pub seq_len: (usize, usize),
    /// Task vocabulary; `None` means the model's.
    pub vocab_size: Option<usize>,
    pub train_size: usize,
    pub val_size: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            weight_decay: 0.01,
            label_smoothing: 0.1,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            task: Task::Copy,
            seq_len: (3, 8),
            vocab_size: None,
            train_size: 1000,
            val_size: 200,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("betas", "both must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        let (lo, hi) = self.seq_len;
        if lo == 0 || lo > hi {
            return Err(Error::config("seq_len", format!("invalid range [{lo}, {hi}]")));
        }
        if let Some(v) = self.vocab_size {
            if v <= 3 {
                return Err(Error::config("vocab_size", "must exceed the 3 reserved ids"));
            }
        }
        if self.train_size == 0 {
            return Err(Error::config("train_size", "must be at least 1"));
        }
        if self.val_size == 0 {
            return Err(Error::config("val_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    fn task_vocab(&self, model_vocab: usize) -> Result<usize> {
        let v = self.vocab_size.unwrap_or(model_vocab);
        if v > model_vocab {
            return Err(Error::config(
                "vocab_size",
                format!("task vocabulary {v} exceeds the model's {model_vocab}"),
            ));
        }
        Ok(v)
    }

    /// Training and validation pairs for a model with `model_vocab` tokens.
    pub fn datasets(&self, model_vocab: usize) -> Result<Dataset> {
        let v = self.task_vocab(model_vocab)?;
        Ok(Dataset {
            train: generate_task(self.task, self.seed, self.train_size, self.seq_len, v)?,
            val: self.validation_set(model_vocab)?,
        })
    }

    /// The validation half of [`TrainConfig::datasets`].
    pub fn validation_set(&self, model_vocab: usize) -> Result<Vec<Pair>> {
        let v = self.task_vocab(model_vocab)?;
        generate_task(self.task, self.seed ^ VALIDATION_STREAM, self.val_size, self.seq_len, v)
    }
}

pub type Pair = (Vec<usize>, Vec<usize>);

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
}

/// `count` pairs with source lengths uniform in `seq_len` (inclusive) and
/// tokens uniform in `[3, vocab_size)`.
pub fn generate_task(
    task: Task,
    seed: u64,
    count: usize,
    seq_len: (usize, usize),
    vocab_size: usize,
) -> Result<Vec<Pair>> {
    let (lo, hi) = seq_len;
    if lo == 0 || lo > hi {
        return Err(Error::config("seq_len", format!("invalid range [{lo}, {hi}]")));
    }
    if vocab_size <= 3 {
        return Err(Error::config("vocab_size", "must exceed the 3 reserved ids"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let len = rng.gen_range(lo..=hi);
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(3..vocab_size)).collect();
            let tgt = task.target(&src);
            (src, tgt)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub split: Split,
    /// Unsmoothed mean negative log-likelihood per target token.
    pub loss: f64,
    pub token_accuracy: f64,
    pub ppl: f64,
}

pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

/// Smoothed target distributions `[targets.len(), V]`; rows of `pad_id`
/// positions are zero.
fn smoothed_targets<T: Real>(targets: &[usize], v: usize, eps: f64, pad_id: usize) -> Result<(Tensor<T>, usize)> {
    let mut data = vec![T::zero(); targets.len() * v];
    let off = T::from_f64_lossy(eps / v as f64);
    let on = T::from_f64_lossy(1.0 - eps + eps / v as f64);
    let mut count = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        if t >= v {
            return Err(Error::Input(format!("target {t} out of range for vocabulary of {v}")));
        }
        count += 1;
        let row = &mut data[i * v..(i + 1) * v];
        row.iter_mut().for_each(|x| *x = off);
        row[t] = on;
    }
    if count == 0 {
        return Err(Error::Input("every target is padding".into()));
    }
    Ok((Tensor::new(vec![targets.len(), v], data)?, count))
}

/// Graph nodes of the sequence loss.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub loss: NodeId,
    /// `[positions, V]` log-probabilities.
    pub log_probs: NodeId,
    pub tokens: usize,
}

/// Mean over non-pad positions of `-sum_v q_v log softmax(logits)_v`, with
/// `q = (1 - eps) one_hot + eps / V`. `logits` is `[.., V]` and `targets`
/// lists its rows in order.
pub fn label_smoothed_ce_graph<T: Real>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: &[usize],
    eps: f64,
    pad_id: usize,
) -> Result<LossNodes> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Contract(format!("label smoothing {eps} outside [0, 1)")));
    }
    let shape = g.shape(logits).to_vec();
    let v = *shape
        .last()
        .ok_or_else(|| Error::shape("logits need a vocabulary axis"))?;
    if g.value(logits).numel() != targets.len() * v {
        return Err(Error::shape(format!(
            "{} targets for logits of shape {shape:?}",
            targets.len()
        )));
    }
    let flat = g.reshape(logits, &[targets.len(), v])?;
    let log_probs = g.log_softmax(flat, -1)?;
    let (q, tokens) = smoothed_targets::<T>(targets, v, eps, pad_id)?;
    let q = g.constant(q);
    let weighted = g.mul(log_probs, q)?;
    let total = g.sum(weighted)?;
    let loss = g.scale(total, T::from_f64_lossy(-1.0 / tokens as f64))?;
    Ok(LossNodes {
        loss,
        log_probs,
        tokens,
    })
}

/// Eager form of [`label_smoothed_ce_graph`] for logits `[T, V]`.
pub fn label_smoothed_ce<T: Real>(logits: &Tensor<T>, targets: &[usize], eps: f64, pad_id: usize) -> Result<T> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let nodes = label_smoothed_ce_graph(&mut g, l, targets, eps, pad_id)?;
    g.value(nodes.loss).item()
}

/// Teacher-forcing inputs `[BOS] + tgt` and targets `tgt + [EOS]`.
pub fn teacher_forcing(tgt: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(tgt.len() + 1);
    input.push(BOS);
    input.extend_from_slice(tgt);
    let mut target = tgt.to_vec();
    target.push(EOS);
    (input, target)
}

/// Padded decoder inputs and flat padded targets of a batch.
fn batch_targets(pairs: &[&Pair], len: usize) -> Vec<usize> {
    let mut targets = Vec::with_capacity(pairs.len() * len);
    for (_, tgt) in pairs {
        let (_, t) = teacher_forcing(tgt);
        targets.extend(t.iter().copied().chain(std::iter::repeat(PAD)).take(len));
    }
    targets
}

/// Sums of negative log-likelihood and correct argmax predictions over the
/// non-pad rows.
fn tally<T: Real>(log_probs: &Tensor<T>, targets: &[usize]) -> (f64, usize) {
    let v = log_probs.shape()[1];
    let mut nll = 0.0;
    let mut correct = 0;
    for (row, &t) in log_probs.data().chunks(v).zip(targets) {
        if t == PAD {
            continue;
        }
        nll -= row[t].to_f64_lossless();
        correct += usize::from(argmax(row) == t);
    }
    (nll, correct)
}

/// Teacher-forced graph of one batch.
struct BatchGraph<T: Real> {
    g: Graph<T>,
    weights: crate::model::ModelWeights<NodeId>,
    nodes: LossNodes,
    targets: Vec<usize>,
}

fn batch_graph<T: Real>(
    model: &Seq2SeqModel<T>,
    pairs: &[&Pair],
    smoothing: f64,
    trainable: bool,
    dropout_seed: Option<u64>,
) -> Result<BatchGraph<T>> {
    let srcs: Vec<Vec<usize>> = pairs.iter().map(|(s, _)| s.clone()).collect();
    let inputs: Vec<Vec<usize>> = pairs.iter().map(|(_, t)| teacher_forcing(t).0).collect();
    let src = model.pad(&srcs)?;
    let tgt = model.pad(&inputs)?;
    let targets = batch_targets(pairs, tgt.len);
    let mut g = Graph::new();
    let weights = model.bind(&mut g, trainable);
    let fwd = model.network(&weights, dropout_seed).forward(&mut g, &src, &tgt)?;
    let nodes = label_smoothed_ce_graph(&mut g, fwd.logits, &targets, smoothing, PAD)?;
    Ok(BatchGraph {
        g,
        weights,
        nodes,
        targets,
    })
}

/// Mean loss and accuracies of `model` on `pairs`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    /// Unsmoothed teacher-forced mean NLL per target token.
    pub loss: f64,
    /// Fraction of target tokens (including the end marker) reproduced at
    /// their position by greedy decoding.
    pub token_accuracy: f64,
    pub ppl: f64,
}

/// Deterministic evaluation in batches of `batch_size`.
pub fn evaluate<T: Real>(model: &Seq2SeqModel<T>, pairs: &[Pair], batch_size: usize) -> Result<EvalMetrics> {
    if pairs.is_empty() {
        return Err(Error::Input("no evaluation data".into()));
    }
    let refs: Vec<&Pair> = pairs.iter().collect();
    let (mut nll, mut tokens, mut correct) = (0.0, 0usize, 0usize);
    for chunk in refs.chunks(batch_size.max(1)) {
        let b = batch_graph(model, chunk, 0.0, false, None)?;
        let (batch_nll, _) = tally(b.g.value(b.nodes.log_probs), &b.targets);
        nll += batch_nll;
        tokens += b.nodes.tokens;
        let srcs: Vec<Vec<usize>> = chunk.iter().map(|(s, _)| s.clone()).collect();
        let steps = chunk.iter().map(|(_, t)| t.len() + 1).max().unwrap_or(1);
        let steps = steps.min(model.config().max_len);
        let decoded = model.greedy_decode_batch(&srcs, steps, BOS, EOS)?;
        for ((_, tgt), out) in chunk.iter().zip(&decoded) {
            let (_, want) = teacher_forcing(tgt);
            let mut got = out.clone();
            if got.len() < steps {
                got.push(EOS);
            }
            correct += want.iter().zip(&got).filter(|(a, b)| a == b).count();
        }
    }
    let loss = nll / tokens as f64;
    Ok(EvalMetrics {
        loss,
        token_accuracy: correct as f64 / tokens as f64,
        ppl: perplexity(loss),
    })
}

/// Train `model` in place with AdamW on teacher-forced batches.
///
/// Emits a validation row before training (epoch 0, step 0) and, after
/// every epoch, a training row followed by a validation row. Shuffling and
/// dropout are seeded by `cfg.seed`. A non-finite training loss aborts with
/// [`Error::Divergence`].
pub fn train<T: Real>(model: &mut Seq2SeqModel<T>, cfg: &TrainConfig, data: &Dataset) -> Result<Vec<MetricsRow>> {
    train_with_progress(model, cfg, data, |_| {})
}

/// [`train`], calling `progress` with every row as it is produced.
pub fn train_with_progress<T: Real>(
    model: &mut Seq2SeqModel<T>,
    cfg: &TrainConfig,
    data: &Dataset,
    mut progress: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Input("no training data".into()));
    }
    let mut rows = Vec::with_capacity(1 + 2 * cfg.epochs);
    let mut emit = |row: MetricsRow, rows: &mut Vec<MetricsRow>| {
        progress(&row);
        rows.push(row);
    };
    let val_row = |model: &Seq2SeqModel<T>, epoch, step| -> Result<MetricsRow> {
        let m = evaluate(model, &data.val, cfg.batch_size)?;
        Ok(MetricsRow {
            epoch,
            step,
            split: Split::Val,
            loss: m.loss,
            token_accuracy: m.token_accuracy,
            ppl: m.ppl,
        })
    };
    emit(val_row(model, 0, 0)?, &mut rows);

    let optimizer = cfg.optimizer();
    let mut state = OptimState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut nll, mut tokens, mut correct) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let pairs: Vec<&Pair> = chunk.iter().map(|&i| &data.train[i]).collect();
            let dropout_seed = cfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let mut b = batch_graph(model, &pairs, cfg.label_smoothing, true, Some(dropout_seed))?;
            let objective = b.g.value(b.nodes.loss).item()?.to_f64_lossless();
            if !objective.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: objective,
                });
            }
            let (batch_nll, batch_correct) = tally(b.g.value(b.nodes.log_probs), &b.targets);
            nll += batch_nll;
            correct += batch_correct;
            tokens += b.nodes.tokens;
            b.g.backward(b.nodes.loss)?;
            let mut ids = Vec::new();
            b.weights.visit("", &mut |_, id| ids.push(*id));
            let grads: Vec<&[T]> = ids
                .iter()
                .map(|&id| b.g.grad(id).expect("parameters carry gradients"))
                .collect();
            optimizer.apply(model.weights_mut(), &grads, &mut state)?;
        }
        let loss = nll / tokens as f64;
        emit(
            MetricsRow {
                epoch,
                step,
                split: Split::Train,
                loss,
                token_accuracy: correct as f64 / tokens as f64,
                ppl: perplexity(loss),
            },
            &mut rows,
        );
        emit(val_row(model, epoch, step)?, &mut rows);
    }
    Ok(rows)
}
