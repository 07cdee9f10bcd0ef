use super::*;
use crate::autodiff::Segment;
use crate::encoder::{Batch, Encoder, EncoderConfig};
use crate::hard_concrete::{build_groups, draw_uniforms, expected_l0_var, Granularity, MaskConfig};
use crate::testing::assert_close;

const STEP: f64 = 1e-5;
const RTOL: f64 = 1e-4;

fn small() -> EncoderConfig {
    EncoderConfig { layers: 2, hidden: 8, heads: 2, ff: 16, vocab_size: 12, max_len: 10, dropout: 0.1 }
}

fn batch() -> Batch {
    Batch::new(&[&[4, 5, 6, 7], &[8, 9, 4], &[5]]).unwrap()
}

// Gold trees for `batch()`: heads are 0 (root) or 1-based within a sentence.
const GOLD_HEADS: [usize; 8] = [2, 0, 2, 3, 0, 1, 1, 0];
const GOLD_LABELS: [usize; 8] = [1, 0, 2, 1, 0, 2, 1, 0];
const GOLD_TAGS: [usize; 8] = [0, 1, 2, 1, 3, 0, 2, 1];

fn random_tensor(shape: &[usize], scale: f64, rng: &mut RngState) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.standard_normal()).collect()).unwrap()
}

/// Replaces every parameter with larger random values so that no gradient
/// is trivially zero.
fn scramble(store: &mut ParamStore, seed: u64) {
    let mut rng = RngState::new(seed);
    for p in store.params_mut() {
        p.value = random_tensor(p.value.shape(), 0.5, &mut rng);
    }
}

/// Compares the accumulated gradient of every trainable parameter in
/// `store_of(base)` with central differences of `loss`.
fn check_store<T: Clone>(
    base: &T,
    store_of: impl Fn(&mut T) -> &mut ParamStore,
    loss: impl Fn(&T) -> f64,
    what: &str,
) {
    let mut probe = base.clone();
    let names: Vec<(String, Vec<f64>, bool)> = store_of(&mut probe)
        .iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec(), p.trainable))
        .collect();
    for (name, analytic, trainable) in names {
        if !trainable {
            continue;
        }
        // Every coordinate for small tensors, a spread-out subset otherwise.
        let stride = (analytic.len() / 24).max(1);
        let idx: Vec<usize> = (0..analytic.len()).step_by(stride).collect();
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let eval = |delta: f64| {
                let mut t = base.clone();
                t_store_shift(store_of(&mut t), &name, i, delta);
                loss(&t)
            };
            numeric.push((eval(STEP) - eval(-STEP)) / (2.0 * STEP));
        }
        let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        assert_close(&picked, &numeric, RTOL, &format!("{what}: {name}"));
    }
}

fn t_store_shift(store: &mut ParamStore, name: &str, i: usize, delta: f64) {
    store.get_mut(name).unwrap().value.data_mut()[i] += delta;
}

fn hidden_leaf(g: &mut Graph, seed: u64) -> Var {
    g.leaf(random_tensor(&[8, 8], 1.0, &mut RngState::new(seed)), true)
}

fn segments() -> std::rc::Rc<[Segment]> {
    batch().segments
}

#[test]
fn tag_head_gradients_match_finite_differences() {
    let mut head = LinearTagHead::new(8, 4, &mut RngState::new(1)).unwrap();
    scramble(&mut head.params, 2);
    let loss_of = |h: &LinearTagHead| {
        let mut g = Graph::new();
        let b = Bound::new(&h.params, &mut g);
        let x = hidden_leaf(&mut g, 3);
        let l = h.loss(&mut g, &b, x, &GOLD_TAGS, None).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let b = Bound::new(&head.params, &mut g);
    let x = hidden_leaf(&mut g, 3);
    let l = head.loss(&mut g, &b, x, &GOLD_TAGS, None).unwrap();
    let grads = g.backward(l).unwrap();
    let vars = b.vars.clone();
    head.params.accumulate(&grads, &vars);
    check_store(&head, |h| &mut h.params, loss_of, "tag head");
}

#[test]
fn biaffine_gradients_match_finite_differences() {
    let mut head = BiaffineHead::new(8, 3, &mut RngState::new(1)).unwrap();
    scramble(&mut head.params, 4);
    let segs = segments();
    let loss_of = |h: &BiaffineHead| {
        let mut g = Graph::new();
        let b = Bound::new(&h.params, &mut g);
        let x = hidden_leaf(&mut g, 5);
        let l = h.loss(&mut g, &b, x, &segs, &GOLD_HEADS, &GOLD_LABELS).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let b = Bound::new(&head.params, &mut g);
    let x = hidden_leaf(&mut g, 5);
    let l = head.loss(&mut g, &b, x, &segs, &GOLD_HEADS, &GOLD_LABELS).unwrap();
    let grads = g.backward(l).unwrap();
    let vars = b.vars.clone();
    head.params.accumulate(&grads, &vars);
    check_store(&head, |h| &mut h.params, loss_of, "biaffine head");
}

fn subnetwork_probe(head: TaskHead, seed: u64) -> Probe {
    let enc = Encoder::new(small(), &mut RngState::new(seed)).unwrap();
    let reg = enc.registry();
    let layout = build_groups(&reg, &Granularity::Neuron.spec_for(&reg).unwrap()).unwrap();
    let mut mask = SubnetworkMask::new(MaskConfig::default(), layout, THETA_INIT).unwrap();
    let mut rng = RngState::new(seed + 1);
    let n = mask.layout.group_count();
    mask.params.params_mut()[0].value = Tensor::new(vec![n], (0..n).map(|_| 1.0 + rng.standard_normal()).collect()).unwrap();
    let mut probe = Probe::new(ProbeMode::Subnetwork, enc, Some(mask), None, head).unwrap();
    scramble(probe.head.params_mut(), seed + 2);
    probe
}

/// Task loss plus `lambda · R(θ)` under fixed uniforms.
fn objective(probe: &Probe, g: &mut Graph, u: &[f64], targets: Targets, lambda: f64) -> (Var, ProbeForward) {
    let b = batch();
    let fwd = probe.forward(g, &b, &MaskDraw::Sample(u.to_vec())).unwrap();
    let task = probe.task_loss(g, &fwd, &b, targets, None).unwrap();
    let m = probe.mask.as_ref().unwrap();
    let r = expected_l0_var(g, fwd.theta.unwrap(), &m.config).unwrap();
    let r = g.scale(r, lambda).unwrap();
    (g.add(task, r).unwrap(), fwd)
}

fn check_subnetwork(head: TaskHead, targets: Targets) {
    let mut probe = subnetwork_probe(head, 7);
    let u = draw_uniforms(probe.mask.as_ref().unwrap().layout.group_count(), &mut RngState::new(9));
    let mut g = Graph::new();
    let (loss, fwd) = objective(&probe, &mut g, &u, targets, 0.7);
    let grads = g.backward(loss).unwrap();
    probe.accumulate(&grads, &fwd);
    let loss_of = |p: &Probe| {
        let mut g = Graph::new();
        let (l, _) = objective(p, &mut g, &u, targets, 0.7);
        g.value(l).item()
    };
    check_store(&probe, |p| &mut p.mask.as_mut().unwrap().params, loss_of, "mask logits");
    check_store(&probe, |p| p.head.params_mut(), loss_of, "head under mask");
    assert!(probe.encoder.params.iter().all(|p| p.grad.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn subnetwork_objective_gradients_with_tag_head() {
    let head = TaskHead::Tag(LinearTagHead::new(8, 4, &mut RngState::new(0)).unwrap());
    check_subnetwork(head, Targets::Tags(&GOLD_TAGS));
}

#[test]
fn subnetwork_objective_gradients_with_parse_head() {
    let head = TaskHead::Parse(BiaffineHead::new(8, 3, &mut RngState::new(0)).unwrap());
    check_subnetwork(head, Targets::Parse { heads: &GOLD_HEADS, labels: &GOLD_LABELS });
}

fn mlp_probe(rank: usize) -> Probe {
    let enc = Encoder::new(small(), &mut RngState::new(11)).unwrap();
    let mut mlp = Mlp1Probe::new(8, rank, &mut RngState::new(12)).unwrap();
    scramble(&mut mlp.params, 13);
    let head = TaskHead::Tag(LinearTagHead::new(8, 4, &mut RngState::new(14)).unwrap());
    let mut probe = Probe::new(ProbeMode::Mlp1, enc, None, Some(mlp), head).unwrap();
    scramble(probe.head.params_mut(), 15);
    probe
}

#[test]
fn mlp1_gradients_match_and_encoder_stays_frozen() {
    let mut probe = mlp_probe(3);
    let b = batch();
    let loss_of = |p: &Probe| {
        let mut g = Graph::new();
        let fwd = p.forward(&mut g, &b, &MaskDraw::Deterministic).unwrap();
        let l = p.task_loss(&mut g, &fwd, &b, Targets::Tags(&GOLD_TAGS), None).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let fwd = probe.forward(&mut g, &b, &MaskDraw::Deterministic).unwrap();
    let l = probe.task_loss(&mut g, &fwd, &b, Targets::Tags(&GOLD_TAGS), None).unwrap();
    let grads = g.backward(l).unwrap();
    probe.accumulate(&grads, &fwd);
    check_store(&probe, |p| &mut p.mlp1.as_mut().unwrap().params, loss_of, "mlp1");
    assert!(probe.encoder.params.iter().all(|p| p.grad.data().iter().all(|&x| x == 0.0)));
    assert!(probe.mlp1.as_ref().unwrap().params.iter().all(|p| p.grad.data().iter().any(|&x| x != 0.0)));
}

#[test]
fn cached_mlp1_forward_matches_full_forward() {
    let probe = mlp_probe(2);
    let b = batch();
    let hidden = probe.encoder.encode(&b, None).unwrap();
    let mut g = Graph::new();
    let full = probe.forward(&mut g, &b, &MaskDraw::Deterministic).unwrap();
    let cached = probe.forward_cached(&mut g, &hidden).unwrap();
    assert_eq!(g.value(full.features), g.value(cached.features));
}

/// Rank by Gaussian elimination with partial pivoting.
fn numeric_rank(mut rows: Vec<Vec<f64>>, tol: f64) -> usize {
    let cols = rows.first().map_or(0, Vec::len);
    let mut rank = 0;
    for c in 0..cols {
        let Some(p) = (rank..rows.len()).max_by(|&a, &b| rows[a][c].abs().total_cmp(&rows[b][c].abs())) else {
            break;
        };
        if rows[p][c].abs() <= tol {
            continue;
        }
        rows.swap(rank, p);
        for r in rank + 1..rows.len() {
            let f = rows[r][c] / rows[rank][c];
            for k in c..cols {
                rows[r][k] -= f * rows[rank][k];
            }
        }
        rank += 1;
    }
    rank
}

#[test]
fn mlp1_weight_has_the_requested_rank() {
    for rank in [1, 2, 5, 8] {
        let p = mlp_probe(rank);
        let m = p.mlp1.as_ref().unwrap();
        let (down, up) = (&m.params.get("mlp1.down").unwrap().value, &m.params.get("mlp1.up").unwrap().value);
        let full: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..8).map(|j| (0..rank).map(|k| down.get(i, k) * up.get(j, k)).sum()).collect())
            .collect();
        assert_eq!(numeric_rank(full, 1e-9), rank);
        assert_eq!(Mlp1Probe::parameter_count(8, rank).unwrap(), 2 * 8 * rank);
        assert_eq!(p.parameter_count(), 2 * 8 * rank);
    }
    assert!(Mlp1Probe::new(8, 0, &mut RngState::new(0)).is_err());
    assert!(Mlp1Probe::parameter_count(8, 0).is_err());
}

#[test]
fn zero_tag_head_is_uniform() {
    let mut head = LinearTagHead::new(8, 5, &mut RngState::new(0)).unwrap();
    for p in head.params.params_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let mut g = Graph::new();
    let b = Bound::new(&head.params, &mut g);
    let x = hidden_leaf(&mut g, 1);
    let probs = head.probabilities(&mut g, &b, x).unwrap();
    assert!(g.value(probs).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn single_token_sentence_attaches_to_root() {
    let mut head = BiaffineHead::new(8, 3, &mut RngState::new(2)).unwrap();
    scramble(&mut head.params, 3);
    let segs = [Segment { start: 0, len: 1 }];
    let mut g = Graph::new();
    let b = Bound::new(&head.params, &mut g);
    let x = g.leaf(random_tensor(&[1, 8], 1.0, &mut RngState::new(4)), false);
    let out = head.decode(&mut g, &b, x, &segs).unwrap();
    assert_eq!(out.heads, vec![0]);
}

#[test]
fn greedy_decoding_never_picks_itself() {
    // Two tokens; self-attachment scores are the largest in each row.
    let scores = [0.0, 9.0, 1.0, /* */ 0.5, 2.0, 9.0];
    assert_eq!(biaffine::greedy_heads(&scores, 2), vec![2, 1]);
}

#[test]
fn out_of_range_gold_head_is_rejected() {
    let head = BiaffineHead::new(8, 3, &mut RngState::new(2)).unwrap();
    let mut g = Graph::new();
    let b = Bound::new(&head.params, &mut g);
    let x = hidden_leaf(&mut g, 1);
    let mut heads = GOLD_HEADS;
    heads[7] = 2;
    let err = head.loss(&mut g, &b, x, &segments(), &heads, &GOLD_LABELS).unwrap_err();
    assert!(matches!(err, HeadError::HeadOutOfRange { head: 2, len: 1 }));
}

#[test]
fn all_ones_subnetwork_matches_the_plain_encoder() {
    let head = TaskHead::Tag(LinearTagHead::new(8, 4, &mut RngState::new(0)).unwrap());
    let mut probe = subnetwork_probe(head.clone(), 21);
    // Far above the stretch threshold, every group clamps to exactly one.
    let n = probe.mask.as_ref().unwrap().layout.group_count();
    probe.mask.as_mut().unwrap().params.params_mut()[0].value = Tensor::full(&[n], 50.0);
    let finetune = Probe::new(ProbeMode::Finetune, probe.encoder.clone(), None, None, head).unwrap();
    let b = batch();
    let mut g = Graph::new();
    let masked = probe.forward(&mut g, &b, &MaskDraw::Deterministic).unwrap();
    let plain = finetune.forward(&mut g, &b, &MaskDraw::Deterministic).unwrap();
    assert!(g.value(masked.features).max_abs_diff(g.value(plain.features)) <= 1e-12);
}

#[test]
fn component_validation_and_mode_names() {
    let enc = Encoder::new(small(), &mut RngState::new(0)).unwrap();
    let head = TaskHead::Tag(LinearTagHead::new(8, 4, &mut RngState::new(0)).unwrap());
    let mlp = Mlp1Probe::new(8, 2, &mut RngState::new(0)).unwrap();
    assert!(matches!(
        Probe::new(ProbeMode::Subnetwork, enc.clone(), None, None, head.clone()),
        Err(HeadError::Components { mode: ProbeMode::Subnetwork, .. })
    ));
    assert!(Probe::new(ProbeMode::Finetune, enc.clone(), None, Some(mlp.clone()), head.clone()).is_err());
    let wide = Mlp1Probe::new(16, 2, &mut RngState::new(0)).unwrap();
    assert!(Probe::new(ProbeMode::Mlp1, enc.clone(), None, Some(wide), head.clone()).is_err());
    let p = Probe::new(ProbeMode::Mlp1, enc.clone(), None, Some(mlp), head.clone()).unwrap();
    assert!(p.encoder.params.iter().all(|q| !q.trainable));
    assert!(p.forward_cached(&mut Graph::new(), &Tensor::zeros(&[1, 8])).is_ok());
    let f = Probe::new(ProbeMode::Finetune, enc, None, None, head).unwrap();
    assert!(f.encoder.params.iter().all(|q| q.trainable));
    assert!(f.forward_cached(&mut Graph::new(), &Tensor::zeros(&[1, 8])).is_err());
    for m in ProbeMode::ALL {
        assert_eq!(m.to_string().parse::<ProbeMode>().unwrap(), m);
    }
    assert!("mlp".parse::<ProbeMode>().is_err());
}

#[test]
fn probe_checkpoint_round_trips() {
    let trained = mlp_probe(3);
    let bytes = probe_checkpoint(&trained).to_bytes();
    let ck = crate::checkpoint::Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.meta("rank").unwrap(), "3");
    let mut fresh = mlp_probe(3);
    scramble(fresh.head.params_mut(), 99);
    assert_ne!(fresh, trained);
    load_probe_checkpoint(&mut fresh, &ck).unwrap();
    assert_eq!(fresh, trained);

    let mut wrong_rank = mlp_probe(2);
    assert!(load_probe_checkpoint(&mut wrong_rank, &ck).is_err());
    let head = TaskHead::Parse(BiaffineHead::new(8, 3, &mut RngState::new(0)).unwrap());
    let mut sub = subnetwork_probe(head, 1);
    assert!(load_probe_checkpoint(&mut sub, &ck).is_err());
    let own = probe_checkpoint(&sub);
    assert!(own.meta("rank").is_err());
    load_probe_checkpoint(&mut sub, &own).unwrap();
}
