//! Finite-difference checks for every primitive op.

use std::rc::Rc;

use super::*;
use crate::testing::{assert_close, numeric_grad};

fn random_tensor(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
}

/// Checks d(sum(w ⊙ f(inputs)))/d(inputs) for a fixed random weighting `w`.
fn check(shapes: &[&[usize]], build: impl Fn(&mut Graph, &[Var]) -> Var) {
    check_with(shapes, |_, t| t, build)
}

fn check_with(
    shapes: &[&[usize]],
    prep: impl Fn(usize, Tensor) -> Tensor,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) {
    let mut rng = RngState::new(11);
    let inputs: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| prep(i, random_tensor(&mut rng, s))).collect();
    let eval = |inputs: &[Tensor], grad: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let out = build(&mut g, &vars);
        let mut wr = RngState::new(99);
        let w = random_tensor(&mut wr, g.value(out).shape());
        let wv = g.constant(w);
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        (g, vars, loss)
    };
    let (g, vars, loss) = eval(&inputs, true);
    let grads = g.backward(loss).unwrap();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        let numeric = numeric_grad(input.data(), 1e-6, |x| {
            let mut perturbed = inputs.clone();
            perturbed[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
            let (g, _, loss) = eval(&perturbed, false);
            g.value(loss).item()
        });
        assert_close(&analytic, &numeric, 1e-6, &format!("input {k}"));
    }
}

#[test]
fn matmul_all_transpose_flags() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa: &[usize] = if ta { &[4, 3] } else { &[3, 4] };
        let sb: &[usize] = if tb { &[5, 4] } else { &[4, 5] };
        check(&[sa, sb], |g, v| g.matmul_t(v[0], ta, v[1], tb).unwrap());
    }
}

#[test]
fn elementwise_binary_ops() {
    check(&[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]).unwrap());
    check(&[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]).unwrap());
    check(&[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]).unwrap());
}

#[test]
fn broadcast_adds() {
    check(&[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1]).unwrap());
    check(&[&[3, 4], &[3]], |g, v| g.add_column(v[0], v[1]).unwrap());
}

#[test]
fn unary_ops() {
    check(&[&[3, 4]], |g, v| g.scale(v[0], -2.5).unwrap());
    check(&[&[3, 4]], |g, v| g.sigmoid(v[0]).unwrap());
    check(&[&[3, 4]], |g, v| g.exp(v[0]).unwrap());
    check(&[&[3, 4]], |g, v| g.relu(v[0]).unwrap());
    check(&[&[3, 4]], |g, v| g.clamp(v[0], -0.5, 0.5).unwrap());
    check(&[&[3, 4]], |g, v| g.transpose(v[0]).unwrap());
    check_with(&[&[3, 4]], |_, t| t.map(|x| x.abs() + 0.5), |g, v| g.log(v[0]).unwrap());
}

#[test]
fn reductions() {
    check(&[&[3, 4]], |g, v| g.sum(v[0]).unwrap());
    check(&[&[3, 4]], |g, v| g.mean(v[0]).unwrap());
}

#[test]
fn layer_norm_with_and_without_affine() {
    check(&[&[3, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5).unwrap());
    check(&[&[3, 6]], |g, v| g.layer_norm(v[0], None, None, 1e-5).unwrap());
}

#[test]
fn softmax_and_cross_entropy() {
    check(&[&[3, 5]], |g, v| g.softmax_rows(v[0]).unwrap());
    check(&[&[4, 5]], |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2]).unwrap());
}

#[test]
fn gathers_and_slices() {
    check(&[&[5, 3]], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]).unwrap());
    let idx: std::sync::Arc<[usize]> = vec![0, 0, 1, 2, 2, 2].into();
    check(&[&[3]], move |g, v| g.gather(v[0], idx.clone(), &[2, 3]).unwrap());
    check(&[&[5, 3]], |g, v| g.slice_rows(v[0], 1, 3).unwrap());
    check(&[&[2, 3], &[4, 3]], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap());
    check(&[&[3, 8], &[3, 4]], |g, v| g.block_row_dot(v[0], v[1]).unwrap());
}

#[test]
fn segmented_attention() {
    let segments: Rc<[Segment]> = vec![Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }].into();
    check(&[&[7, 8], &[7, 8], &[7, 8]], move |g, v| g.attention(v[0], v[1], v[2], segments.clone(), 2).unwrap());
}

#[test]
fn dropout_gradient_uses_the_same_mask() {
    check(&[&[4, 5]], |g, v| {
        let mut rng = RngState::new(5);
        g.dropout(v[0], 0.7, &mut rng).unwrap()
    });
}

#[test]
fn sigmoid_basics() {
    assert_eq!(sigmoid(0.0), 0.5);
    let d = numeric_grad(&[0.0], 1e-6, |x| sigmoid(x[0]));
    assert_close(&[0.25], &d, 1e-6, "sigmoid'(0)");
}

#[test]
fn layer_norm_output_is_standardized() {
    let mut rng = RngState::new(2);
    let mut g = Graph::new();
    let x = g.constant(random_tensor(&mut rng, &[4, 16]).map(|v| 3.0 * v + 7.0));
    let y = g.layer_norm(x, None, None, 1e-5).unwrap();
    for r in 0..4 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn backward_contracts() {
    let mut g = Graph::new();
    let p = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
    let q = g.leaf(Tensor::vector(vec![4.0, 5.0, 6.0]), true);
    let unused = g.leaf(Tensor::vector(vec![1.0]), true);
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    assert!(grads.get(unused).is_none());

    let pq = g.mul(p, q).unwrap();
    let dot = g.sum(pq).unwrap();
    let grads = g.backward(dot).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[4.0, 5.0, 6.0]);
    assert_eq!(grads.get(q).unwrap().data(), &[1.0, 2.0, 3.0]);

    assert!(matches!(g.backward(pq), Err(AutodiffError::NonScalarLoss { .. })));
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(AutodiffError::Shape { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(g.add_row(a, b), Err(AutodiffError::Shape { op: "add_row", .. })));
}

#[test]
fn non_finite_forward_is_reported() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![0.0, -1.0]));
    assert_eq!(g.log(a), Err(AutodiffError::NonFinite { op: "log", stage: "forward" }));
}
