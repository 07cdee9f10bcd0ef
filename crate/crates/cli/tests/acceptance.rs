//! Acceptance gate: one PASS/FAIL line per check.
//!
//! `cargo test -p subprobe-cli --test acceptance` runs everything; name
//! filters (`-- gradients bit_accounting`) select checks by substring. The
//! experiment checks share one cache of corpora, pre-trained encoders, and
//! probe runs, so running them together costs little more than the slowest.
//!
//! Failures are reported but do not fail the process, so that a workspace
//! `cargo test` still runs every other target; pass `--strict` (or set
//! `SUBPROBE_ACCEPTANCE_STRICT=1`) to exit non-zero when any check fails.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use subprobe_core::autodiff::{Graph, ParamStore, RngState, Tensor, Var};
use subprobe_core::data::{
    format_conll2003, format_conllu, generate_corpus, macro_las, parse_conll2003, parse_conllu, span_f1, Corpus,
    SyntheticGrammar,
};
use subprobe_core::encoder::{Batch, Encoder, EncoderConfig, PretrainConfig};
use subprobe_core::hard_concrete::{
    apply_mask, build_groups, dense_masks, draw_uniforms, expected_l0, expected_l0_var, lambda_schedule, sample_mask,
    Granularity, MaskConfig,
};
use subprobe_core::harness::{
    complexity_bits, mass_ratio, matched_comparisons, pareto_sweep, prepare_base, prepare_condition, run_probe,
    select_lambda_max, sparsity_centroid, streams, ComplexityModel, Condition, ExperimentConfig, RunResult, Task,
    TaskData, LAMBDA_LADDER,
};
use subprobe_core::heads::{
    Bound, BiaffineHead, LinearTagHead, MaskDraw, Mlp1Probe, Probe, ProbeMode, SubnetworkMask, Targets, TaskHead,
    MLP1_RANK_LADDER, THETA_INIT,
};

// Tolerances and budgets.
const MC_SAMPLES: usize = 100_000;
const MC_TOL: f64 = 0.005;
const MC_BUDGET_SECS: f64 = 10.0;
const FD_STEP: f64 = 1e-5;
const FD_RTOL: f64 = 1e-4;
const FD_ATOL: f64 = 1e-9;
const GRAD_BUDGET_SECS: f64 = 60.0;
const IDENTITY_TOL: f64 = 1e-12;
const SPAN_PAIRS: usize = 1000;
const REPRO_BUDGET_SECS: f64 = 30.0 * 60.0;
const RESET_GAP: f64 = 0.10;
const UNIFORM_RATIO: f64 = 2.0;
const SEEDS: [u64; 3] = [0, 1, 2];
const MIN_SEEDS: usize = 2;

// Reduced training recipe for the directional experiments: 3 epochs instead
// of 30, with the non-mask learning rate scaled up by the same factor so the
// total update budget matches the default recipe.
const SENTENCES: usize = 10_000;
const EPOCHS: usize = 3;
const OTHER_LR: f64 = ExperimentConfig::DEFAULT_OTHER_LR * (ExperimentConfig::DEFAULT_EPOCHS / EPOCHS) as f64;
const PARETO_GRANULARITIES: [Granularity; 3] = [Granularity::Matrix, Granularity::ColumnTiles(4), Granularity::ColumnTiles(16)];
const PARETO_RANKS: [usize; 3] = [1, 2, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = fn() -> Outcome;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let strict = args.iter().any(|a| a == "--strict") || std::env::var_os("SUBPROBE_ACCEPTANCE_STRICT").is_some_and(|v| v == "1");
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let checks: [(&str, Check); 10] = [
        ("hard_concrete_distribution", hard_concrete_distribution),
        ("gradients", gradients),
        ("bit_accounting", bit_accounting),
        ("masking_identity", masking_identity),
        ("metric_oracles", metric_oracles),
        ("condition_and_probe_ordering", condition_and_probe_ordering),
        ("matched_complexity", matched_complexity),
        ("layer_sparsity_profile", layer_sparsity_profile),
        ("cli_determinism", cli_determinism),
        ("lambda_monotonicity", lambda_monotonicity),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        failed += usize::from(!result.pass);
        println!("{} {name} ({secs:.1}s): {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    println!("acceptance: {} of {ran} passed, {failed} failed", ran - failed);
    if strict && failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Distribution

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn hard_concrete_distribution() -> Outcome {
    let start = Instant::now();
    let cfg = MaskConfig::default();
    let mut notes = Vec::new();
    let mut pass = true;
    for (i, theta) in [-2.0, 0.0, 2.0].into_iter().enumerate() {
        let z = sample_mask(&vec![theta; MC_SAMPLES], &cfg, &mut RngState::new(100 + i as u64)).unwrap().z;
        let nonzero = z.iter().filter(|&&v| v > 0.0).count() as f64 / MC_SAMPLES as f64;
        // P(z > 0) = P(s > -γ/(ζ-γ)), which rearranges to a logistic tail.
        let target = sigmoid(theta - cfg.beta * (-cfg.gamma / cfg.zeta).ln());
        pass &= (nonzero - target).abs() <= MC_TOL;
        pass &= z.iter().all(|v| (0.0..=1.0).contains(v));
        if theta == 0.0 {
            let zeros = z.iter().filter(|&&v| v == 0.0).count();
            let ones = z.iter().filter(|&&v| v == 1.0).count();
            pass &= zeros > 0 && ones > 0 && (target - 0.8318).abs() < 5e-5;
            notes.push(format!("θ=0: P(z>0) {nonzero:.4} vs {target:.4}, {zeros} zeros, {ones} ones"));
        } else {
            notes.push(format!("θ={theta}: {nonzero:.4} vs {target:.4}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < MC_BUDGET_SECS;
    outcome(pass, format!("{}; {secs:.2}s", notes.join("; ")))
}

// ---------------------------------------------------------------------------
// Gradients

/// Largest violation of `|a - n| <= rtol·max(|a|,|n|) + atol` between
/// analytic gradients and central differences of `f`, as a ratio (≤ 1 is
/// within tolerance).
fn fd_worst(analytic: &[f64], x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / (FD_RTOL * a.abs().max(numeric.abs()) + FD_ATOL));
    }
    worst
}

/// Checks every parameter of the store selected by `store` against
/// differences of `loss`, perturbing a clone of `base`.
fn fd_store<T: Clone>(base: &T, store: fn(&mut T) -> &mut ParamStore, loss: impl Fn(&T) -> f64) -> f64 {
    let mut scratch = base.clone();
    let params: Vec<(usize, Vec<f64>, Vec<f64>)> = store(&mut scratch)
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(i, p)| (i, p.value.data().to_vec(), p.grad.data().to_vec()))
        .collect();
    let mut worst: f64 = 0.0;
    for (i, value, grad) in params {
        let shape = store(&mut scratch).params()[i].value.shape().to_vec();
        let w = fd_worst(&grad, &value, |x| {
            store(&mut scratch).params_mut()[i].value = Tensor::new(shape.clone(), x.to_vec()).unwrap();
            loss(&scratch)
        });
        store(&mut scratch).params_mut()[i].value = Tensor::new(shape, value).unwrap();
        worst = worst.max(w);
    }
    worst
}

fn small_encoder(seed: u64) -> Encoder {
    let cfg = EncoderConfig { layers: 2, hidden: 8, heads: 2, ff: 16, vocab_size: 12, max_len: 10, dropout: 0.1 };
    Encoder::new(cfg, &mut RngState::new(seed)).unwrap()
}

fn small_batch() -> Batch {
    Batch::new(&[&[4, 5, 6, 7], &[8, 9, 4], &[5]]).unwrap()
}

const GOLD_HEADS: [usize; 8] = [2, 0, 2, 3, 0, 1, 1, 0];
const GOLD_LABELS: [usize; 8] = [1, 0, 2, 1, 0, 2, 1, 0];
const GOLD_TAGS: [usize; 8] = [0, 1, 2, 1, 3, 0, 2, 1];

fn targets(head: &TaskHead) -> Targets<'static> {
    match head {
        TaskHead::Tag(_) => Targets::Tags(&GOLD_TAGS),
        TaskHead::Parse(_) => Targets::Parse { heads: &GOLD_HEADS, labels: &GOLD_LABELS },
    }
}

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = RngState::new(seed);
    for p in store.params_mut() {
        let n = p.value.len();
        p.value = Tensor::new(p.value.shape().to_vec(), (0..n).map(|_| 0.5 * rng.standard_normal()).collect()).unwrap();
    }
}

/// Subnetwork objective `task + λ·R(θ)` under fixed uniforms, checked with
/// respect to the mask logits and the head.
fn subnetwork_objective(head: TaskHead, seed: u64) -> (f64, f64) {
    const LAMBDA: f64 = 0.7;
    let enc = small_encoder(seed);
    let reg = enc.registry();
    let layout = build_groups(&reg, &Granularity::Neuron.spec_for(&reg).unwrap()).unwrap();
    let n = layout.group_count();
    let mut mask = SubnetworkMask::new(MaskConfig::default(), layout, THETA_INIT).unwrap();
    let u = draw_uniforms(n, &mut RngState::new(seed + 1));
    // Keep every gate strictly inside (0, 1) so the loss is smooth in θ.
    let mut rng = RngState::new(seed + 2);
    let theta: Vec<f64> = u.iter().map(|&x| -(x / (1.0 - x)).ln() + rng.standard_normal().clamp(-1.5, 1.5)).collect();
    mask.params.params_mut()[0].value = Tensor::vector(theta);
    let mut probe = Probe::new(ProbeMode::Subnetwork, enc, Some(mask), None, head).unwrap();
    randomize(probe.head.params_mut(), seed + 3);
    let batch = small_batch();
    let objective = |p: &Probe, g: &mut Graph| {
        let fwd = p.forward(g, &batch, &MaskDraw::Sample(u.clone())).unwrap();
        let task = p.task_loss(g, &fwd, &batch, targets(&p.head), None).unwrap();
        let r = expected_l0_var(g, fwd.theta.unwrap(), &MaskConfig::default()).unwrap();
        let r = g.scale(r, LAMBDA).unwrap();
        (g.add(task, r).unwrap(), fwd)
    };
    let mut g = Graph::new();
    let (loss, fwd) = objective(&probe, &mut g);
    let grads = g.backward(loss).unwrap();
    probe.accumulate(&grads, &fwd);
    let loss_of = |p: &Probe| {
        let mut g = Graph::new();
        let (l, _) = objective(p, &mut g);
        g.value(l).item()
    };
    (
        fd_store(&probe, |p| &mut p.mask.as_mut().unwrap().params, loss_of),
        fd_store(&probe, |p| p.head.params_mut(), loss_of),
    )
}

/// A head's loss on a free hidden-state input; returns the loss, the input
/// leaf and the bound head parameters.
fn head_loss(head: &TaskHead, g: &mut Graph, h: Tensor) -> (Var, Var, Vec<Var>) {
    let x = g.leaf(h, true);
    let batch = small_batch();
    match head {
        TaskHead::Tag(t) => {
            let b = Bound::new(&t.params, g);
            (t.loss(g, &b, x, &GOLD_TAGS, None).unwrap(), x, b.vars.clone())
        }
        TaskHead::Parse(p) => {
            let b = Bound::new(&p.params, g);
            (p.loss(g, &b, x, &batch.segments, &GOLD_HEADS, &GOLD_LABELS).unwrap(), x, b.vars.clone())
        }
    }
}

/// A head's own loss, with respect to its input and its parameters.
fn head_alone(mut head: TaskHead, seed: u64) -> f64 {
    randomize(head.params_mut(), seed);
    let mut rng = RngState::new(seed + 1);
    let h: Vec<f64> = (0..8 * 8).map(|_| rng.standard_normal()).collect();
    let hidden = Tensor::new(vec![8, 8], h.clone()).unwrap();
    let loss_at = |head: &TaskHead, input: Tensor| {
        let mut g = Graph::new();
        let (l, _, _) = head_loss(head, &mut g, input);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let (loss, x, vars) = head_loss(&head, &mut g, hidden.clone());
    let grads = g.backward(loss).unwrap();
    let input_grad = grads.get(x).unwrap().data().to_vec();
    head.params_mut().accumulate(&grads, &vars);
    let wrt_input = fd_worst(&input_grad, &h, |v| loss_at(&head, Tensor::new(vec![8, 8], v.to_vec()).unwrap()));
    let wrt_params = fd_store(&head, |h| h.params_mut(), |h| loss_at(h, hidden.clone()));
    wrt_input.max(wrt_params)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cfg = MaskConfig::default();
    let mut rng = RngState::new(5);
    let theta: Vec<f64> = (0..40).map(|_| 2.0 * rng.standard_normal()).collect();
    let mut g = Graph::new();
    let t = g.leaf(Tensor::vector(theta.clone()), true);
    let r = expected_l0_var(&mut g, t, &cfg).unwrap();
    let analytic = g.backward(r).unwrap().get(t).unwrap().data().to_vec();
    let l0 = fd_worst(&analytic, &theta, |x| expected_l0(x, &cfg));

    let tag = || TaskHead::Tag(LinearTagHead::new(8, 4, &mut RngState::new(0)).unwrap());
    let parse = || TaskHead::Parse(BiaffineHead::new(8, 3, &mut RngState::new(0)).unwrap());
    let (tag_theta, tag_head) = subnetwork_objective(tag(), 11);
    let (parse_theta, parse_head) = subnetwork_objective(parse(), 21);
    let tag_alone = head_alone(tag(), 31);
    let parse_alone = head_alone(parse(), 41);
    let worst = [l0, tag_theta, tag_head, parse_theta, parse_head, tag_alone, parse_alone];
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&w| w <= 1.0) && secs < GRAD_BUDGET_SECS;
    outcome(
        pass,
        format!(
            "worst error / tolerance: expected_l0 {l0:.3}, objective θ {tag_theta:.3}/{parse_theta:.3}, objective head {tag_head:.3}/{parse_head:.3}, heads alone {tag_alone:.3}/{parse_alone:.3} (tag/parse); {secs:.1}s"
        ),
    )
}

// ---------------------------------------------------------------------------
// Bits and schedule

fn toy_encoder() -> Encoder {
    Encoder::new(EncoderConfig::toy(40), &mut RngState::new(3)).unwrap()
}

fn bit_accounting() -> Outcome {
    let model = ComplexityModel::default();
    let enc = toy_encoder();
    let layers = enc.config.layers;
    let d = enc.config.hidden;
    let reg = enc.registry();
    let layout = build_groups(&reg, &Granularity::Matrix.spec_for(&reg).unwrap()).unwrap();
    let mask = SubnetworkMask::new(MaskConfig::default(), layout, THETA_INIT).unwrap();
    let head = TaskHead::Tag(LinearTagHead::new(d, 5, &mut RngState::new(0)).unwrap());
    let probe = Probe::new(ProbeMode::Subnetwork, enc.clone(), Some(mask), None, head.clone()).unwrap();
    let sub = complexity_bits(ProbeMode::Subnetwork, probe.parameter_count(), &model).unwrap();
    let mut pass = sub == ((6 * layers) as f64, (6 * layers) as f64);
    for r in MLP1_RANK_LADDER {
        let mlp = Mlp1Probe::new(d, r, &mut RngState::new(1)).unwrap();
        let p = Probe::new(ProbeMode::Mlp1, enc.clone(), None, Some(mlp), head.clone()).unwrap();
        let bits = complexity_bits(ProbeMode::Mlp1, p.parameter_count(), &model).unwrap();
        pass &= bits == ((2 * d * r) as f64, (64 * d * r) as f64);
    }
    let mut schedule = Vec::new();
    for lm in [1.0, 5.0, 25.0, 125.0, 0.3] {
        let s = [0.25, 0.5, 0.75].map(|p| lambda_schedule(p, lm).unwrap());
        pass &= s == [0.0, lm / 2.0, lm];
        schedule.push(format!("{lm}:{s:?}"));
    }
    outcome(pass, format!("matrix-level bits {sub:?} for {layers} layers; mlp1 (2dr, 64dr) at every rank; λ at 0.25/0.5/0.75: {}", schedule.join(" ")))
}

// ---------------------------------------------------------------------------
// Masking

fn masking_identity() -> Outcome {
    let enc = toy_encoder();
    let reg = enc.registry();
    let batch = Batch::new(&[&[4, 9, 12, 30, 7], &[5, 6], &[39, 38, 37, 36, 35, 34, 33]]).unwrap();
    let layout = build_groups(&reg, &Granularity::Neuron.spec_for(&reg).unwrap()).unwrap();
    let head = TaskHead::Tag(LinearTagHead::new(64, 3, &mut RngState::new(0)).unwrap());
    // Far above the stretch threshold every gate clamps to exactly one.
    let ones = SubnetworkMask::new(MaskConfig::default(), layout, 50.0).unwrap();
    let masked = Probe::new(ProbeMode::Subnetwork, enc.clone(), Some(ones), None, head.clone()).unwrap();
    let plain = Probe::new(ProbeMode::Finetune, enc.clone(), None, None, head).unwrap();
    let mut g = Graph::new();
    let a = masked.forward(&mut g, &batch, &MaskDraw::Deterministic).unwrap().features;
    let b = plain.forward(&mut g, &batch, &MaskDraw::Deterministic).unwrap().features;
    let diff = g.value(a).max_abs_diff(g.value(b));
    let mut pass = diff < IDENTITY_TOL;

    let mut mismatched = Vec::new();
    for gran in Granularity::ladder() {
        let layout = build_groups(&reg, &gran.spec_for(&reg).unwrap()).unwrap();
        let mut rng = RngState::new(9);
        let theta: Vec<f64> = (0..layout.group_count()).map(|_| rng.standard_normal()).collect();
        let z = sample_mask(&theta, &MaskConfig::default(), &mut rng).unwrap().z;
        let mut g = Graph::new();
        let bound = enc.bind(&mut g).unwrap();
        let weights = bound.registry_vars();
        let zv = g.constant(Tensor::vector(z.clone()));
        let grouped = apply_mask(&mut g, &weights, zv, &layout).unwrap();
        let dense = dense_masks(&layout, &z);
        let exact = grouped.iter().zip(&weights).zip(&dense).all(|((m, w), d)| {
            let expected: Vec<f64> = g.value(*w).data().iter().zip(d.data()).map(|(a, b)| a * b).collect();
            g.value(*m).data() == expected.as_slice()
        });
        if !exact {
            mismatched.push(gran.to_string());
        }
    }
    pass &= mismatched.is_empty();
    outcome(pass, format!("all-ones mask max |Δ| {diff:.2e}; grouped vs dense mismatches at {mismatched:?} over 9 granularities"))
}

// ---------------------------------------------------------------------------
// Metrics and readers

const TAG_POOL: [&str; 7] = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG"];

fn random_tags(rng: &mut RngState, n: usize) -> Vec<String> {
    (0..n).map(|_| TAG_POOL[rng.below(TAG_POOL.len())].to_string()).collect()
}

/// Every `(type, start, end)` for which the tags form a chunk: the first
/// token opens an entity of that type (a `B-`, or an `I-` not continuing
/// the same type), every later token is `I-` of the type, and the next
/// token does not continue it.
fn brute_spans(tags: &[String]) -> Vec<(String, usize, usize)> {
    let split = |t: &str| t.split_once('-').map(|(p, ty)| (p.to_string(), ty.to_string()));
    let mut out = Vec::new();
    for start in 0..tags.len() {
        for end in start + 1..=tags.len() {
            for ty in ["PER", "LOC", "ORG"] {
                let opens = match split(&tags[start]) {
                    Some((p, t)) if t == ty => p == "B" || start == 0 || split(&tags[start - 1]).is_none_or(|(_, pt)| pt != ty),
                    _ => false,
                };
                let inside = (start + 1..end).all(|k| tags[k] == format!("I-{ty}"));
                let closed = end == tags.len() || tags[end] != format!("I-{ty}");
                if opens && inside && closed {
                    out.push((ty.to_string(), start, end));
                }
            }
        }
    }
    out
}

fn brute_f1(pred: &[String], gold: &[String]) -> (usize, usize, usize, f64) {
    let (p, g) = (brute_spans(pred), brute_spans(gold));
    let tp = p.iter().filter(|s| g.contains(s)).count();
    let prec = if p.is_empty() { 0.0 } else { tp as f64 / p.len() as f64 };
    let rec = if g.is_empty() { 0.0 } else { tp as f64 / g.len() as f64 };
    let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
    (tp, p.len(), g.len(), f1)
}

fn metric_oracles() -> Outcome {
    let mut rng = RngState::new(77);
    let mut span_mismatch = 0;
    for _ in 0..SPAN_PAIRS {
        let n = 1 + rng.below(12);
        let (p, g) = (random_tags(&mut rng, n), random_tags(&mut rng, n));
        let got = span_f1(std::slice::from_ref(&p), std::slice::from_ref(&g)).unwrap();
        let (tp, np, ng, f1) = brute_f1(&p, &g);
        if (got.true_positives, got.predicted, got.gold) != (tp, np, ng) || (got.f1 - f1).abs() > 1e-12 {
            span_mismatch += 1;
        }
    }

    let gold = vec![vec![(0, "root"), (1, "obj"), (1, "punct")]];
    let pred = vec![vec![(0, "root"), (1, "nsubj"), (1, "punct")]];
    let las_one = macro_las(&pred, &gold).unwrap();
    let gold2 = vec![vec![(0, "a"), (1, "b")], vec![(0, "a"), (1, "b")]];
    let pred2 = vec![vec![(0, "a"), (1, "b")], vec![(0, "a"), (2, "b")]];
    let las_two = macro_las(&pred2, &gold2).unwrap();
    let las_ok = las_one == 2.0 / 3.0 && las_two == 0.75;

    let corpus = generate_corpus(&SyntheticGrammar::shipped(), 500, &mut RngState::new(4)).unwrap();
    let conllu = format_conllu(&corpus);
    let conll = format_conll2003(&corpus);
    let mut reread = parse_conllu(&conllu).unwrap();
    let ner = parse_conll2003(&conll).unwrap();
    let text_ok = format_conllu(&reread) == conllu && format_conll2003(&ner) == conll;
    reread.merge_ner(&ner).unwrap();
    let round_trip = text_ok && reread == corpus;

    outcome(
        span_mismatch == 0 && las_ok && round_trip,
        format!(
            "span F1 disagreements {span_mismatch}/{SPAN_PAIRS}; macro LAS {las_one:.6} and {las_two}; readers round-trip {} sentences byte-exactly: {round_trip}",
            corpus.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Shared experiment cache

struct SeedBase {
    seed: u64,
    data: Vec<TaskData>,
    weights: BTreeMap<Condition, Encoder>,
}

fn bases() -> &'static [SeedBase] {
    static CELL: OnceLock<Vec<SeedBase>> = OnceLock::new();
    CELL.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let corpus: Corpus =
                    generate_corpus(&SyntheticGrammar::shipped(), SENTENCES, &mut RngState::with_stream(seed, streams::DATA)).unwrap();
                let base = prepare_base(&corpus, seed, &PretrainConfig::default()).unwrap();
                let data = Task::ALL.iter().map(|&t| TaskData::new(t, &corpus, &base.vocab).unwrap()).collect();
                let weights = Condition::ALL.iter().map(|&c| (c, prepare_condition(&base.encoder, c, seed).unwrap())).collect();
                SeedBase { seed, data, weights }
            })
            .collect()
    })
}

fn config(task: Task, condition: Condition, mode: ProbeMode, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(task, condition, mode, seed);
    c.epochs = EPOCHS;
    c.other_lr = OTHER_LR;
    c
}

/// Runs `c` once per process; repeated requests return the cached result.
fn run(c: &ExperimentConfig) -> RunResult {
    static CACHE: OnceLock<Mutex<HashMap<String, RunResult>>> = OnceLock::new();
    let key = serde_json::to_string(c).unwrap();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().unwrap().get(&key) {
        return r.clone();
    }
    let base = bases().iter().find(|b| b.seed == c.seed).expect("seed has a base");
    let data = &base.data[Task::ALL.iter().position(|&t| t == c.task).unwrap()];
    let result = run_probe(c, data, &base.weights[&c.condition]).unwrap().result;
    cache.lock().unwrap().insert(key, result.clone());
    result
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn condition_and_probe_ordering() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut notes = Vec::new();
    for &task in Task::ALL {
        let (mut gap_ok, mut order_ok) = (0, 0);
        let mut rows = Vec::new();
        for &seed in &SEEDS {
            let sub = run(&config(task, Condition::Pretrained, ProbeMode::Subnetwork, seed)).final_metric;
            let reset = run(&config(task, Condition::ResetAll, ProbeMode::Subnetwork, seed)).final_metric;
            let mlp = run(&config(task, Condition::Pretrained, ProbeMode::Mlp1, seed)).final_metric;
            let fine = run(&config(task, Condition::Pretrained, ProbeMode::Finetune, seed)).final_metric;
            gap_ok += usize::from(sub - reset >= RESET_GAP);
            order_ok += usize::from(fine >= sub && sub >= mlp);
            rows.push(format!("s{seed} sub {} reset_all {} mlp1 {} finetune {}", pct(sub), pct(reset), pct(mlp), pct(fine)));
        }
        let gap_pass = gap_ok == SEEDS.len();
        let order_pass = order_ok >= MIN_SEEDS;
        pass &= gap_pass && order_pass;
        notes.push(format!(
            "{task} [gap≥10 in {gap_ok}/3 {}, finetune≥sub≥mlp1 in {order_ok}/3 {}] {}",
            if gap_pass { "ok" } else { "FAIL" },
            if order_pass { "ok" } else { "FAIL" },
            rows.join(", ")
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < REPRO_BUDGET_SECS;
    outcome(pass, format!("{}; {:.0}s", notes.join(" | "), secs))
}

fn matched_complexity() -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for (ti, &task) in Task::ALL.iter().enumerate() {
        let mut wins = [0usize; 3];
        let mut detail = Vec::new();
        for base in bases() {
            let template = config(task, Condition::Pretrained, ProbeMode::Subnetwork, base.seed);
            let (rows, _) = pareto_sweep(
                &template,
                &base.data[ti],
                &base.weights[&Condition::Pretrained],
                &PARETO_GRANULARITIES,
                &PARETO_RANKS,
                1,
            )
            .unwrap();
            let cmp = matched_comparisons(&rows);
            for (k, c) in cmp.iter().take(3).enumerate() {
                wins[k] += usize::from(c.subnetwork_metric >= c.mlp1_metric);
                detail.push(format!(
                    "s{} {}@{} {} vs {} {}",
                    base.seed,
                    c.subnetwork_setting,
                    c.bits,
                    pct(c.subnetwork_metric),
                    c.mlp1_setting,
                    pct(c.mlp1_metric)
                ));
            }
            pass &= cmp.len() >= 3;
        }
        let ok = wins.iter().all(|&w| w >= MIN_SEEDS);
        pass &= ok;
        notes.push(format!("{task} wins per point {wins:?} {} [{}]", if ok { "ok" } else { "FAIL" }, detail.join(", ")));
    }
    outcome(pass, notes.join(" | "))
}

fn sweep_result(task: Task, seed: u64, lambda: f64) -> RunResult {
    let mut c = config(task, Condition::Pretrained, ProbeMode::Subnetwork, seed);
    c.lambda_max = lambda;
    run(&c)
}

fn lambda_monotonicity() -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for &task in Task::ALL {
        for &seed in &SEEDS {
            let l0: Vec<f64> = LAMBDA_LADDER.iter().map(|&l| sweep_result(task, seed, l).final_expected_l0().unwrap()).collect();
            let ok = l0.windows(2).all(|w| w[1] <= w[0]);
            pass &= ok;
            notes.push(format!("{task} s{seed} {}{}", l0.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(">="), if ok { "" } else { " FAIL" }));
        }
    }
    outcome(pass, format!("final expected L0 over λ_max {LAMBDA_LADDER:?}: {}", notes.join(", ")))
}

fn layer_sparsity_profile() -> Outcome {
    let mut seeds_ok = 0;
    let mut notes = Vec::new();
    for &seed in &SEEDS {
        let mut centroids = Vec::new();
        let mut ratios = Vec::new();
        let mut lambdas = Vec::new();
        for &task in Task::ALL {
            let finetune = run(&config(task, Condition::Pretrained, ProbeMode::Finetune, seed)).final_metric;
            let candidates: Vec<(f64, f64)> = LAMBDA_LADDER.iter().map(|&l| (l, sweep_result(task, seed, l).final_metric)).collect();
            let choice = select_lambda_max(&candidates, finetune);
            let pre = sweep_result(task, seed, choice.lambda);
            let mut c = config(task, Condition::ResetEncoder, ProbeMode::Subnetwork, seed);
            c.lambda_max = choice.lambda;
            let reset = run(&c);
            centroids.push(sparsity_centroid(&pre.sparsity.unwrap().all).unwrap_or(f64::NAN));
            ratios.push(mass_ratio(&reset.sparsity.unwrap().all));
            lambdas.push(format!("{}{}", choice.lambda, if choice.fallback { "*" } else { "" }));
        }
        let ordered = centroids.windows(2).all(|w| w[1] >= w[0]);
        let uniform = ratios.iter().all(|&r| r < UNIFORM_RATIO);
        seeds_ok += usize::from(ordered && uniform);
        notes.push(format!(
            "s{seed} λ {} centroids {} ({}) reset_encoder max/min {} ({})",
            lambdas.join("/"),
            centroids.iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>().join("/"),
            if ordered { "ordered" } else { "not ordered" },
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join("/"),
            if uniform { "uniform" } else { "not uniform" },
        ));
    }
    outcome(seeds_ok >= MIN_SEEDS, format!("{seeds_ok}/3 seeds satisfy both; pos/deps/ner: {}", notes.join(" | ")))
}

// ---------------------------------------------------------------------------
// CLI determinism

fn subprobe(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_subprobe"))
        .args(args)
        .current_dir(dir)
        .env_remove("SUBPROBE_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline(dir: &Path) -> Result<(), String> {
    let q = ["--epochs", "1", "--batch-size", "16", "--seed", "3"];
    let with = |head: &[&'static str]| -> Vec<&'static str> { head.iter().copied().chain(q).collect() };
    let data = ["--corpus", "data/corpus.conllu", "--ckpt", "enc.ckpt"];
    subprobe(dir, &["gen-data", "--n", "120", "--seed", "3", "--out", "data"])?;
    subprobe(dir, &["pretrain", "--corpus", "data/corpus.conllu", "--epochs", "1", "--seed", "3", "--out", "enc.ckpt"])?;
    for (task, mode, extra, out) in [
        ("ner", "subnetwork", "--granularity=cols:4", "p_sub"),
        ("pos", "mlp1", "--rank=4", "p_mlp"),
        ("deps", "finetune", "--lambda-max=1", "p_ft"),
    ] {
        let mut args = with(&["probe"]);
        args.extend(data);
        args.extend(["--task", task, "--mode", mode, extra, "--out", out]);
        subprobe(dir, &args)?;
    }
    let mut pareto = with(&["sweep", "--kind", "pareto", "--task", "pos", "--granularities", "matrix,cols:4", "--ranks", "1,2", "--jobs", "2"]);
    pareto.extend(data);
    pareto.extend(["--out", "s_pareto"]);
    subprobe(dir, &pareto)?;
    let mut lambda = with(&["sweep", "--kind", "lambda", "--task", "deps", "--lambdas", "1,25", "--granularity", "matrix", "--jobs", "2"]);
    lambda.extend(data);
    lambda.extend(["--out", "s_lambda"]);
    subprobe(dir, &lambda)?;
    subprobe(dir, &["analyze", "--mask", "p_sub/mask.ckpt", "--out", "analysis"])
}

fn cli_determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for d in [&a, &b] {
        std::fs::create_dir_all(d).unwrap();
        if let Err(e) = pipeline(d) {
            return outcome(false, format!("command failed: {e}"));
        }
    }
    let (fa, fb) = (files(&a), files(&b));
    let differing: Vec<String> = fa
        .iter()
        .filter(|(p, bytes)| fb.get(*p) != Some(bytes))
        .map(|(p, _)| p.display().to_string())
        .chain(fb.keys().filter(|p| !fa.contains_key(*p)).map(|p| p.display().to_string()))
        .collect();
    let kinds = |ext: &str| fa.keys().filter(|p| p.extension().is_some_and(|e| e == ext)).count();
    outcome(
        differing.is_empty(),
        format!(
            "{} files ({} csv, {} json, {} ckpt, {} svg) from gen-data, pretrain, probe x3, sweep x2, analyze; differing: {differing:?}",
            fa.len(),
            kinds("csv"),
            kinds("json"),
            kinds("ckpt"),
            kinds("svg")
        ),
    )
}
