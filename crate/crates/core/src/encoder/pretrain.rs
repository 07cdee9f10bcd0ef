//! Masked-language-model pretraining: a random 15% of positions (at least
//! one per sentence) are replaced by `[MASK]` and predicted through the tied
//! token embedding.

use serde::Serialize;

use super::{Batch, Encoder, EncoderError};
use crate::autodiff::{warmup_lr, Adam, AdamConfig, Graph, RngState, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 32, lr: 1e-3, mask_prob: 0.15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MlmReport {
    /// Held-out loss before training, then mean training loss per epoch.
    pub initial_dev_loss: f64,
    pub epoch_train_loss: Vec<f64>,
    pub final_dev_loss: f64,
    pub dev_accuracy: f64,
    /// Accuracy of always predicting the most frequent training token.
    pub unigram_accuracy: f64,
    /// `1 / vocab_size`.
    pub chance_accuracy: f64,
}

/// Corrupts each sequence; returns the inputs and `(row, target)` pairs over
/// the packed batch.
fn corrupt(seqs: &[&[usize]], mask_id: usize, prob: f64, rng: &mut RngState) -> (Vec<Vec<usize>>, Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(seqs.len());
    let (mut rows, mut targets) = (Vec::new(), Vec::new());
    let mut offset = 0;
    for s in seqs {
        let mut picked: Vec<usize> = (0..s.len()).filter(|_| rng.uniform() < prob).collect();
        if picked.is_empty() {
            picked.push(rng.below(s.len()));
        }
        let mut input = s.to_vec();
        for &i in &picked {
            input[i] = mask_id;
            rows.push(offset + i);
            targets.push(s[i]);
        }
        offset += s.len();
        inputs.push(input);
    }
    (inputs, rows, targets)
}

/// Records the MLM loss for one corrupted batch; returns the loss, the
/// logits, and the bound parameter vars.
fn mlm_loss(
    encoder: &Encoder,
    g: &mut Graph,
    inputs: &[Vec<usize>],
    rows: &[usize],
    targets: &[usize],
    dropout: Option<&mut RngState>,
) -> Result<(Var, Var, Vec<Var>), EncoderError> {
    let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
    let batch = Batch::new(&refs)?;
    let bound = encoder.bind(g)?;
    let (h, _) = encoder.forward(g, &bound, &batch, None, dropout)?;
    let picked = g.gather_rows(h, rows)?;
    let emb = bound.vars[encoder.params.position("embed.token")?];
    let logits = g.matmul_t(picked, false, emb, true)?;
    let logits = g.add_row(logits, bound.vars[encoder.params.position("mlm.bias")?])?;
    Ok((g.cross_entropy(logits, targets)?, logits, bound.vars))
}

/// Held-out loss and accuracy on a corruption drawn from `rng`.
fn evaluate(
    encoder: &Encoder,
    dev: &[Vec<usize>],
    mask_id: usize,
    cfg: &PretrainConfig,
    rng: &mut RngState,
) -> Result<(f64, f64, Vec<usize>), EncoderError> {
    let mut frozen = encoder.clone();
    frozen.params.set_trainable(false);
    let (mut loss, mut correct, mut n) = (0.0, 0, 0);
    let mut all_targets = Vec::new();
    for chunk in dev.chunks(cfg.batch_size.max(1)) {
        let seqs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let (inputs, rows, targets) = corrupt(&seqs, mask_id, cfg.mask_prob, rng);
        let mut g = Graph::new();
        let (l, logits, _) = mlm_loss(&frozen, &mut g, &inputs, &rows, &targets, None)?;
        loss += g.value(l).item() * targets.len() as f64;
        let lv = g.value(logits);
        for (r, &t) in targets.iter().enumerate() {
            if argmax(lv.row(r)) == t {
                correct += 1;
            }
        }
        n += targets.len();
        all_targets.extend(targets);
    }
    Ok((loss / n as f64, correct as f64 / n as f64, all_targets))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `targets` equal to the most frequent token in `train`
/// (ties broken toward the smaller id).
pub fn unigram_baseline(train: &[Vec<usize>], targets: &[usize]) -> f64 {
    let mut counts = std::collections::BTreeMap::<usize, usize>::new();
    for &t in train.iter().flatten() {
        *counts.entry(t).or_default() += 1;
    }
    let Some((&top, _)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
        return 0.0;
    };
    if targets.is_empty() {
        return 0.0;
    }
    targets.iter().filter(|&&t| t == top).count() as f64 / targets.len() as f64
}

/// Trains `encoder` in place with Adam and 10% linear warmup.
pub fn pretrain_mlm(
    encoder: &mut Encoder,
    train: &[Vec<usize>],
    dev: &[Vec<usize>],
    mask_id: usize,
    cfg: &PretrainConfig,
    rng: &mut RngState,
) -> Result<MlmReport, EncoderError> {
    if mask_id >= encoder.config.vocab_size {
        return Err(EncoderError::NoMaskToken);
    }
    if train.is_empty() || dev.is_empty() || cfg.batch_size == 0 {
        return Err(EncoderError::EmptyBatch);
    }
    let eval_seed = rng.substream(1);
    let (initial_dev_loss, _, _) = evaluate(encoder, dev, mask_id, cfg, &mut eval_seed.clone())?;
    let mut corrupt_rng = rng.substream(2);
    let mut dropout_rng = rng.substream(3);
    let mut order_rng = rng.substream(4);
    encoder.params.set_trainable(true);
    let mut adam = Adam::new(AdamConfig::default());
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut epoch_train_loss = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let seqs: Vec<&[usize]> = idx.iter().map(|&i| train[i].as_slice()).collect();
            let (inputs, rows, targets) = corrupt(&seqs, mask_id, cfg.mask_prob, &mut corrupt_rng);
            let mut g = Graph::new();
            let (loss, _, vars) = mlm_loss(encoder, &mut g, &inputs, &rows, &targets, Some(&mut dropout_rng))?;
            sum += g.value(loss).item();
            let grads = g.backward(loss)?;
            encoder.params.zero_grads();
            encoder.params.accumulate(&grads, &vars);
            adam.step(&mut encoder.params, warmup_lr(step, total, cfg.lr)?)?;
            step += 1;
        }
        epoch_train_loss.push(sum / steps_per_epoch as f64);
    }
    let (final_dev_loss, dev_accuracy, targets) = evaluate(encoder, dev, mask_id, cfg, &mut eval_seed.clone())?;
    Ok(MlmReport {
        initial_dev_loss,
        epoch_train_loss,
        final_dev_loss,
        dev_accuracy,
        unigram_accuracy: unigram_baseline(train, &targets),
        chance_accuracy: 1.0 / encoder.config.vocab_size as f64,
    })
}
