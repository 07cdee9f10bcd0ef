use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::task::Example;
use super::{
    complexity_bits, layer_sparsity, streams, ComplexityModel, ExperimentConfig, HarnessError, RunMetadata, RunResult,
    TaskData,
};
use crate::autodiff::{warmup_lr, Adam, AdamConfig, Graph, ParamStore, RngState, Tensor};
use crate::encoder::{Batch, Encoder};
use crate::hard_concrete::{build_groups, draw_uniforms, expected_l0_var, lambda_schedule, MaskConfig};
use crate::heads::{
    BiaffineHead, LinearTagHead, MaskDraw, Mlp1Probe, Prediction, Probe, ProbeMode, SubnetworkMask, Targets, TaskHead,
    THETA_INIT,
};

const EVAL_BATCH: usize = 128;

/// Logged components of one optimization step. `total` is exactly
/// `task_loss + lambda * expected_l0` as computed on the graph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub task_loss: f64,
    pub lambda: f64,
    pub expected_l0: f64,
    pub total: f64,
}

/// A finished run with the trained components and its step log.
#[derive(Clone, Debug)]
pub struct TrainedProbe {
    pub result: RunResult,
    pub probe: Probe,
    pub steps: Vec<StepLog>,
}

fn build_probe(config: &ExperimentConfig, data: &TaskData, weights: &Encoder) -> Result<Probe, HarnessError> {
    let d = weights.config.hidden;
    let mut rng = RngState::with_stream(config.seed, streams::HEAD);
    let mask = match config.granularity {
        Some(g) => {
            let reg = weights.registry();
            let layout = build_groups(&reg, &g.spec_for(&reg)?)?;
            Some(SubnetworkMask::new(MaskConfig::default(), layout, THETA_INIT)?)
        }
        None => None,
    };
    let mlp1 = config.rank.map(|r| Mlp1Probe::new(d, r, &mut rng)).transpose()?;
    let head = match data.task {
        super::Task::Deps => TaskHead::Parse(BiaffineHead::new(d, data.labels.len(), &mut rng)?),
        _ => TaskHead::Tag(LinearTagHead::new(d, data.labels.len(), &mut rng)?),
    };
    Ok(Probe::new(config.mode, weights.clone(), mask, mlp1, head)?)
}

fn batch_of(examples: &[&Example]) -> Result<Batch, HarnessError> {
    let seqs: Vec<&[usize]> = examples.iter().map(|e| e.ids.as_slice()).collect();
    Ok(Batch::new(&seqs)?)
}

/// Frozen encoder outputs per example, reused by every MLP-1 step.
struct HiddenCache {
    rows: Vec<Vec<f64>>,
    hidden: usize,
}

impl HiddenCache {
    fn build(encoder: &Encoder, examples: &[Example]) -> Result<Self, HarnessError> {
        let mut rows = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(EVAL_BATCH) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let b = batch_of(&refs)?;
            let h = encoder.encode(&b, None)?;
            for s in b.segments.iter() {
                rows.push(h.data()[s.start * h.cols()..(s.start + s.len) * h.cols()].to_vec());
            }
        }
        Ok(Self { rows, hidden: encoder.config.hidden })
    }

    fn gather(&self, idx: &[usize]) -> Result<Tensor, HarnessError> {
        let data: Vec<f64> = idx.iter().flat_map(|&i| self.rows[i].iter().copied()).collect();
        Ok(Tensor::new(vec![data.len() / self.hidden, self.hidden], data)?)
    }
}

fn step_all(adams: &mut [(Adam, f64)], stores: Vec<&mut ParamStore>, step: usize, total: usize) -> Result<(), HarnessError> {
    for ((adam, lr), store) in adams.iter_mut().zip(stores) {
        adam.step(store, warmup_lr(step, total, *lr)?)?;
    }
    Ok(())
}

/// Trains a probe per `config` on `data` starting from `weights` (already
/// prepared for the config's condition) and evaluates it after every epoch.
pub fn run_probe(config: &ExperimentConfig, data: &TaskData, weights: &Encoder) -> Result<TrainedProbe, HarnessError> {
    run_probe_with(config, data, weights, &ComplexityModel::default())
}

pub(crate) fn run_probe_with(
    config: &ExperimentConfig,
    data: &TaskData,
    weights: &Encoder,
    complexity: &ComplexityModel,
) -> Result<TrainedProbe, HarnessError> {
    config.validate()?;
    if config.task != data.task {
        return Err(HarnessError::Config(format!("config task {} but data for {}", config.task, data.task)));
    }
    let started = Instant::now();
    let mut probe = build_probe(config, data, weights)?;
    let mode = config.mode;
    let eval_set = data.split(config.eval_split);
    let (train_cache, eval_cache) = if mode == ProbeMode::Mlp1 {
        (Some(HiddenCache::build(&probe.encoder, &data.train)?), Some(HiddenCache::build(&probe.encoder, eval_set)?))
    } else {
        (None, None)
    };

    // Optimizers in the order of `stores` below: mask, encoder, MLP, head.
    let adam = || Adam::new(AdamConfig::default());
    let mut adams = vec![(adam(), config.mask_lr), (adam(), config.other_lr), (adam(), config.other_lr), (adam(), config.other_lr)];
    let mut shuffle = RngState::with_stream(config.seed, streams::SHUFFLE);
    let mut noise = RngState::with_stream(config.seed, streams::MASK_NOISE);
    let mut dropout = RngState::with_stream(config.seed, streams::DROPOUT);

    let n = data.train.len();
    let per_epoch = n.div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let mut steps = Vec::with_capacity(total_steps);
    let (mut metric_trajectory, mut loss_trajectory, mut l0_trajectory) = (Vec::new(), Vec::new(), Vec::new());
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        shuffle.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let examples: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let batch = batch_of(&examples)?;
            let labels: Vec<usize> = examples.iter().flat_map(|e| e.labels.iter().copied()).collect();
            let heads: Vec<usize> = examples.iter().flat_map(|e| e.heads.iter().copied()).collect();
            let targets = match probe.head {
                TaskHead::Tag(_) => Targets::Tags(&labels),
                TaskHead::Parse(_) => Targets::Parse { heads: &heads, labels: &labels },
            };
            let progress = step as f64 / total_steps as f64;
            let lambda = if mode == ProbeMode::Subnetwork { lambda_schedule(progress, config.lambda_max)? } else { 0.0 };

            let mut g = Graph::new();
            let fwd = match &train_cache {
                Some(cache) => probe.forward_cached(&mut g, &cache.gather(chunk)?)?,
                None => {
                    let draw = match &probe.mask {
                        // One noise draw per batch, shared by every token.
                        Some(m) => MaskDraw::Sample(draw_uniforms(m.layout.group_count(), &mut noise)),
                        None => MaskDraw::Deterministic,
                    };
                    probe.forward(&mut g, &batch, &draw)?
                }
            };
            let task = probe.task_loss(&mut g, &fwd, &batch, targets, Some(&mut dropout))?;
            let (loss, expected_l0) = match (&probe.mask, fwd.theta) {
                (Some(m), Some(theta)) => {
                    let r = expected_l0_var(&mut g, theta, &m.config)?;
                    let penalty = g.scale(r, lambda)?;
                    (g.add(task, penalty)?, g.value(r).item())
                }
                _ => (task, 0.0),
            };
            let (task_loss, total) = (g.value(task).item(), g.value(loss).item());
            if !total.is_finite() {
                return Err(HarnessError::NonFinite { epoch, step, task_loss, penalty: lambda * expected_l0 });
            }
            steps.push(StepLog { epoch, step, task_loss, lambda, expected_l0, total });
            epoch_loss += total;

            let grads = g.backward(loss)?;
            probe.zero_grads();
            probe.accumulate(&grads, &fwd);
            let Probe { encoder, mask, mlp1, head, .. } = &mut probe;
            let mut empty = [ParamStore::new(), ParamStore::new()];
            let [e0, e1] = &mut empty;
            let stores = vec![
                mask.as_mut().map_or(e0, |m| &mut m.params),
                &mut encoder.params,
                mlp1.as_mut().map_or(e1, |m| &mut m.params),
                head.params_mut(),
            ];
            step_all(&mut adams, stores, step, total_steps)?;
            step += 1;
        }
        loss_trajectory.push(epoch_loss / per_epoch as f64);
        metric_trajectory.push(evaluate(&probe, data, eval_set, eval_cache.as_ref())?);
        if let Some(m) = &probe.mask {
            l0_trajectory.push(m.expected_l0());
        }
    }

    let parameter_count = probe.parameter_count();
    let (bits_lower, bits_upper) = complexity_bits(mode, parameter_count, complexity)?;
    let sparsity = probe.mask.as_ref().map(|m| layer_sparsity(m.theta(), &m.config, &m.layout)).transpose()?;
    let result = RunResult {
        config: config.clone(),
        metadata: RunMetadata {
            metric: data.task.metric_name().into(),
            decoder: "greedy per-dependent argmax".into(),
            las_average: "unweighted mean over sentences".into(),
            final_metric_rule: "last epoch".into(),
            eval_split: config.eval_split,
        },
        final_metric: *metric_trajectory.last().expect("at least one epoch"),
        metric_trajectory,
        loss_trajectory,
        expected_l0_trajectory: l0_trajectory,
        parameter_count,
        bits_lower,
        bits_upper,
        sparsity,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedProbe { result, probe, steps })
}

/// Task metric of `probe` on `examples` under the evaluation mask.
fn evaluate(probe: &Probe, data: &TaskData, examples: &[Example], cache: Option<&HiddenCache>) -> Result<f64, HarnessError> {
    let (mut labels, mut heads) = (Vec::with_capacity(examples.len()), Vec::with_capacity(examples.len()));
    for (c, chunk) in examples.chunks(EVAL_BATCH).enumerate() {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = batch_of(&refs)?;
        let mut g = Graph::new();
        let fwd = match cache {
            Some(cache) => {
                let idx: Vec<usize> = (c * EVAL_BATCH..c * EVAL_BATCH + chunk.len()).collect();
                probe.forward_cached(&mut g, &cache.gather(&idx)?)?
            }
            None => probe.forward(&mut g, &batch, &MaskDraw::Deterministic)?,
        };
        let (flat_labels, flat_heads) = match probe.predict(&mut g, &fwd, &batch)? {
            Prediction::Tags(t) => (t, Vec::new()),
            Prediction::Parse(p) => (p.labels, p.heads),
        };
        for s in batch.segments.iter() {
            labels.push(flat_labels[s.start..s.start + s.len].to_vec());
            heads.push(flat_heads.get(s.start..s.start + s.len).map(<[usize]>::to_vec).unwrap_or_default());
        }
    }
    data.score(examples, &labels, &heads)
}
