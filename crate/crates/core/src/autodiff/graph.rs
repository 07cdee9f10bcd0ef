//! The computation record: a tape of tensor-valued primitive ops with a
//! single reverse sweep.

use std::rc::Rc;
use std::sync::Arc;

use super::tensor::gemm;
use super::{AutodiffError, RngState, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows forming one sequence inside a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, bias: Var },
    AddColumn { a: Var, col: Var },
    Scale { a: Var, factor: f64 },
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Clamp { a: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Dropout { a: Var, mask: Vec<f64> },
    GatherRows { a: Var, idx: Vec<usize> },
    Gather { src: Var, idx: Arc<[usize]> },
    Attention { q: Var, k: Var, v: Var, segments: Rc<[Segment]>, heads: usize, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    Transpose(Var),
    BlockRowDot { t: Var, d: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::AddColumn { .. } => "add_column",
            Op::Scale { .. } => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Dropout { .. } => "dropout",
            Op::GatherRows { .. } => "gather_rows",
            Op::Gather { .. } => "gather",
            Op::Attention { .. } => "attention",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Transpose(_) => "transpose",
            Op::BlockRowDot { .. } => "block_row_dot",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` when the loss does
    /// not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Records tensor operations in topological order.
///
/// Nodes are appended as ops run, so the tape order is already topological
/// and [`backward`](Graph::backward) is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Softmax probabilities stored by an [`attention`](Self::attention)
    /// node: for each segment, then each head, a row-major `len × len`
    /// block. `None` for any other node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Adds an input tensor. Gradients are only propagated toward leaves
    /// created with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op.name(), stage: "forward" });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn require_matrix(&self, op: &'static str, a: Var) -> Result<(usize, usize), AutodiffError> {
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())));
        }
        Ok((t.rows(), t.cols()))
    }

    /// `op(a) · op(b)`, where `ta`/`tb` transpose the stored operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, AutodiffError> {
        let (ar, ac) = self.require_matrix("matmul", a)?;
        let (br, bc) = self.require_matrix("matmul", b)?;
        let inner_a = if ta { ar } else { ac };
        let inner_b = if tb { bc } else { br };
        if inner_a != inner_b {
            return Err(shape_err(
                "matmul",
                format!("[{ar}, {ac}]{} x [{br}, {bc}]{}", if ta { "^T" } else { "" }, if tb { "^T" } else { "" }),
            ));
        }
        let out = gemm(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_t(a, false, b, false)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.require_matrix("add_row", a)?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(shape_err("add_row", format!("[{r}, {c}] + bias {:?}", b.shape())));
        }
        let mut out = self.value(a).clone();
        let bias_data = b.data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(&bias_data) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow { a, bias }, &[a, bias])
    }

    /// Adds a length-`rows` vector to every column.
    pub fn add_column(&mut self, a: Var, col: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.require_matrix("add_column", a)?;
        let v = self.value(col);
        if v.len() != r {
            return Err(shape_err("add_column", format!("[{r}, {c}] + column {:?}", v.shape())));
        }
        let col_data = v.data().to_vec();
        let mut out = self.value(a).clone();
        for (row, y) in out.data_mut().chunks_mut(c.max(1)).zip(&col_data) {
            for x in row {
                *x += y;
            }
        }
        self.push(out, Op::AddColumn { a, col }, &[a, col])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale { a, factor }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Clamps into `[lo, hi]`. The subgradient is 1 strictly inside the
    /// interval and 0 at or beyond either bound.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp { a, lo, hi }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    /// Row-wise layer normalization with optional affine gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        eps: f64,
    ) -> Result<Var, AutodiffError> {
        let (r, c) = self.require_matrix("layer_norm", x)?;
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).len() != c {
                return Err(shape_err("layer_norm", format!("[{r}, {c}] with affine {:?}", self.value(p).shape())));
            }
        }
        let input = self.value(x);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = input.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * is;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let g = self.value(g).data();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(g).for_each(|(v, s)| *v *= s);
            }
        }
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(b).for_each(|(v, s)| *v += s);
            }
        }
        let out = Tensor::matrix(r, c, out)?;
        let mut inputs = vec![x];
        inputs.extend(gain);
        inputs.extend(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &inputs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.require_matrix("softmax", a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::matrix(r, c, out)?;
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let (r, c) = self.require_matrix("cross_entropy", logits)?;
        if targets.len() != r || r == 0 {
            return Err(shape_err("cross_entropy", format!("{r} rows vs {} targets", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err("cross_entropy", format!("target {t} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += log_z - row[t];
            softmax_in_place(row);
        }
        let out = Tensor::scalar(loss / r as f64);
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits])
    }

    /// Inverted dropout: zeroes entries with probability `1 - keep` and
    /// rescales survivors by `1 / keep`.
    pub fn dropout(&mut self, a: Var, keep: f64, rng: &mut RngState) -> Result<Var, AutodiffError> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(shape_err("dropout", format!("keep probability {keep} outside (0, 1]")));
        }
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 }).collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { a, mask }, &[a])
    }

    /// Selects rows by index (repeats allowed). Serves as embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let (r, c) = self.require_matrix("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} out of range for {r} rows")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(src.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, out)?;
        self.push(out, Op::GatherRows { a, idx: idx.to_vec() }, &[a])
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        self.gather_rows(table, ids)
    }

    /// `out[i] = src[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, src: Var, idx: Arc<[usize]>, shape: &[usize]) -> Result<Var, AutodiffError> {
        let s = self.value(src);
        let n: usize = shape.iter().product();
        if n != idx.len() {
            return Err(shape_err("gather", format!("{} indices for shape {shape:?}", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s.len()) {
            return Err(shape_err("gather", format!("index {bad} out of range for {} values", s.len())));
        }
        let data = idx.iter().map(|&i| s.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push(out, Op::Gather { src, idx }, &[src])
    }

    /// Multi-head scaled dot-product self-attention applied independently
    /// within each segment of a packed batch.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Rc<[Segment]>,
        heads: usize,
    ) -> Result<Var, AutodiffError> {
        let (n, d) = self.require_matrix("attention", q)?;
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("{heads} heads do not divide width {d}")));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if covered != n || segments.iter().any(|s| s.start + s.len > n) {
            return Err(shape_err("attention", format!("segments cover {covered} of {n} rows")));
        }
        let (out, probs) =
            attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), d, &segments, heads);
        let out = Tensor::matrix(n, d, out)?;
        self.push(out, Op::Attention { q, k, v, segments, heads, probs }, &[q, k, v])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no inputs".into()));
        };
        let (_, c) = self.require_matrix("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.require_matrix("concat_rows", p)?;
            if pc != c {
                return Err(shape_err("concat_rows", format!("{pc} columns vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.require_matrix("slice_rows", a)?;
        if start + len > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::matrix(len, c, data)?;
        self.push(out, Op::SliceRows { a, start }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.require_matrix("transpose", a)?;
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// For `t: n × (B·q)` and `d: n × q`, returns `n × B` with
    /// `out[i, b] = Σ_c t[i, b·q + c] · d[i, c]`.
    pub fn block_row_dot(&mut self, t: Var, d: Var) -> Result<Var, AutodiffError> {
        let (n, tc) = self.require_matrix("block_row_dot", t)?;
        let (dn, q) = self.require_matrix("block_row_dot", d)?;
        if dn != n || q == 0 || tc % q != 0 {
            return Err(shape_err("block_row_dot", format!("[{n}, {tc}] against [{dn}, {q}]")));
        }
        let blocks = tc / q;
        let (tv, dv) = (self.value(t), self.value(d));
        let mut out = vec![0.0; n * blocks];
        for i in 0..n {
            let (trow, drow) = (tv.row(i), dv.row(i));
            for b in 0..blocks {
                out[i * blocks + b] = trow[b * q..(b + 1) * q].iter().zip(drow).map(|(x, y)| x * y).sum();
            }
        }
        let out = Tensor::matrix(n, blocks, out)?;
        self.push(out, Op::BlockRowDot { t, d }, &[t, d])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(AutodiffError::NonFinite { op: node.op.name(), stage: "backward" });
            }
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let da = if ta { gemm(bv, tb, g, true) } else { gemm(g, false, bv, !tb) };
                    self.acc(grads, a, da);
                }
                if self.wants(b) {
                    let db = if tb { gemm(g, true, av, ta) } else { gemm(av, !ta, g, false) };
                    self.acc(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    self.acc(grads, a, elementwise(g, self.value(b), |x, y| x * y));
                }
                if self.wants(b) {
                    self.acc(grads, b, elementwise(g, self.value(a), |x, y| x * y));
                }
            }
            &Op::AddRow { a, bias } => {
                self.acc(grads, a, g.clone());
                if self.wants(bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        db.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    let shape = self.value(bias).shape().to_vec();
                    self.acc(grads, bias, Tensor::new(shape, db).expect("bias shape"));
                }
            }
            &Op::AddColumn { a, col } => {
                self.acc(grads, a, g.clone());
                if self.wants(col) {
                    let c = g.cols().max(1);
                    let dc: Vec<f64> = g.data().chunks(c).map(|row| row.iter().sum()).collect();
                    let shape = self.value(col).shape().to_vec();
                    self.acc(grads, col, Tensor::new(shape, dc).expect("column shape"));
                }
            }
            &Op::Scale { a, factor } => self.acc(grads, a, g.map(|x| x * factor)),
            &Op::Sigmoid(a) => self.acc(grads, a, elementwise(g, out, |dy, s| dy * s * (1.0 - s))),
            &Op::Log(a) => self.acc(grads, a, elementwise(g, self.value(a), |dy, x| dy / x)),
            &Op::Exp(a) => self.acc(grads, a, elementwise(g, out, |dy, y| dy * y)),
            &Op::Relu(a) => {
                self.acc(grads, a, elementwise(g, self.value(a), |dy, x| if x > 0.0 { dy } else { 0.0 }))
            }
            &Op::Clamp { a, lo, hi } => self.acc(
                grads,
                a,
                elementwise(g, self.value(a), |dy, x| if x > lo && x < hi { dy } else { 0.0 }),
            ),
            &Op::Sum(a) => {
                let t = self.value(a);
                self.acc(grads, a, Tensor::full(t.shape(), g.item()));
            }
            &Op::Mean(a) => {
                let t = self.value(a);
                self.acc(grads, a, Tensor::full(t.shape(), g.item() / t.len() as f64));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = g.cols();
                if let Some(gv) = *gain {
                    if self.wants(gv) {
                        let mut dg = vec![0.0; c];
                        for (grow, hrow) in g.data().chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                dg[j] += grow[j] * hrow[j];
                            }
                        }
                        let shape = self.value(gv).shape().to_vec();
                        self.acc(grads, gv, Tensor::new(shape, dg).expect("gain shape"));
                    }
                }
                if let Some(bv) = *bias {
                    if self.wants(bv) {
                        let mut db = vec![0.0; c];
                        for grow in g.data().chunks(c) {
                            db.iter_mut().zip(grow).for_each(|(s, v)| *s += v);
                        }
                        let shape = self.value(bv).shape().to_vec();
                        self.acc(grads, bv, Tensor::new(shape, db).expect("bias shape"));
                    }
                }
                if self.wants(*x) {
                    let gain_data = gain.map(|gv| self.value(gv).data());
                    let mut dx = vec![0.0; g.len()];
                    let mut dxhat = vec![0.0; c];
                    for (r, (grow, hrow)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dxhat[j] = grow[j] * gain_data.map_or(1.0, |gd| gd[j]);
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[r * c + j] = inv_std[r] * (dxhat[j] - m1 - hrow[j] * m2);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(g.shape().to_vec(), dx).expect("layer_norm shape"));
                }
            }
            &Op::SoftmaxRows(a) => {
                let c = g.cols().max(1);
                let mut da = vec![0.0; g.len()];
                for ((drow, grow), prow) in da.chunks_mut(c).zip(g.data().chunks(c)).zip(out.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(prow).map(|(x, p)| x * p).sum();
                    for j in 0..c {
                        drow[j] = prow[j] * (grow[j] - dot);
                    }
                }
                self.acc(grads, a, Tensor::new(g.shape().to_vec(), da).expect("softmax shape"));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let lt = self.value(*logits);
                let c = lt.cols();
                let scale = g.item() / targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= scale;
                }
                self.acc(grads, *logits, Tensor::new(lt.shape().to_vec(), d).expect("logits shape"));
            }
            Op::Dropout { a, mask } => {
                let d = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d).expect("dropout shape"));
            }
            Op::GatherRows { a, idx } => {
                let src = self.value(*a);
                let c = src.cols();
                let mut d = vec![0.0; src.len()];
                for (k, &r) in idx.iter().enumerate() {
                    let grow = &g.data()[k * c..(k + 1) * c];
                    d[r * c..(r + 1) * c].iter_mut().zip(grow).for_each(|(s, v)| *s += v);
                }
                self.acc(grads, *a, Tensor::new(src.shape().to_vec(), d).expect("gather_rows shape"));
            }
            Op::Gather { src, idx } => {
                let s = self.value(*src);
                let mut d = vec![0.0; s.len()];
                for (&i, v) in idx.iter().zip(g.data()) {
                    d[i] += v;
                }
                self.acc(grads, *src, Tensor::new(s.shape().to_vec(), d).expect("gather shape"));
            }
            Op::Attention { q, k, v, segments, heads, probs } => {
                let d = g.cols();
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    g.data(),
                    probs,
                    d,
                    segments,
                    *heads,
                );
                let shape = g.shape().to_vec();
                self.acc(grads, *q, Tensor::new(shape.clone(), dq).expect("q shape"));
                self.acc(grads, *k, Tensor::new(shape.clone(), dk).expect("k shape"));
                self.acc(grads, *v, Tensor::new(shape, dv).expect("v shape"));
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let n = t.rows() * c;
                    if self.wants(p) {
                        let d = g.data()[offset..offset + n].to_vec();
                        self.acc(grads, p, Tensor::new(t.shape().to_vec(), d).expect("concat shape"));
                    }
                    offset += n;
                }
            }
            &Op::SliceRows { a, start } => {
                let src = self.value(a);
                let c = src.cols();
                let mut d = vec![0.0; src.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.acc(grads, a, Tensor::new(src.shape().to_vec(), d).expect("slice shape"));
            }
            &Op::Transpose(a) => self.acc(grads, a, g.transpose()),
            &Op::BlockRowDot { t, d } => {
                let (tv, dv) = (self.value(t), self.value(d));
                let (n, q) = (dv.rows(), dv.cols());
                let blocks = tv.cols() / q;
                if self.wants(t) {
                    let mut dt = vec![0.0; tv.len()];
                    for i in 0..n {
                        for b in 0..blocks {
                            let gb = g.data()[i * blocks + b];
                            for c in 0..q {
                                dt[i * blocks * q + b * q + c] = gb * dv.data()[i * q + c];
                            }
                        }
                    }
                    self.acc(grads, t, Tensor::new(tv.shape().to_vec(), dt).expect("block shape"));
                }
                if self.wants(d) {
                    let mut dd = vec![0.0; dv.len()];
                    for i in 0..n {
                        for b in 0..blocks {
                            let gb = g.data()[i * blocks + b];
                            for c in 0..q {
                                dd[i * q + c] += gb * tv.data()[i * blocks * q + b * q + c];
                            }
                        }
                    }
                    self.acc(grads, d, Tensor::new(dv.shape().to_vec(), dd).expect("block shape"));
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Returns the attention output and the per-(segment, head) probability
/// blocks laid out consecutively.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    segments: &[Segment],
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let total: usize = segments.iter().map(|s| s.len * s.len * heads).sum();
    let mut probs = Vec::with_capacity(total);
    let mut out = vec![0.0; q.len()];
    for seg in segments {
        let n = seg.len;
        for h in 0..heads {
            let off = h * dh;
            let base = probs.len();
            probs.resize(base + n * n, 0.0);
            let p = &mut probs[base..];
            for i in 0..n {
                let qi = &q[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                for j in 0..n {
                    let kj = &k[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                    p[i * n + j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(&mut p[i * n..(i + 1) * n]);
                let orow = &mut out[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                for j in 0..n {
                    let pij = p[i * n + j];
                    let vj = &v[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                    orow.iter_mut().zip(vj).for_each(|(o, x)| *o += pij * x);
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dout: &[f64],
    probs: &[f64],
    d: usize,
    segments: &[Segment],
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (mut dq, mut dk, mut dv) = (vec![0.0; q.len()], vec![0.0; k.len()], vec![0.0; v.len()]);
    let mut base = 0;
    let mut ds = Vec::new();
    for seg in segments {
        let n = seg.len;
        ds.resize(n * n, 0.0);
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[base..base + n * n];
            base += n * n;
            let row = |t: usize| (seg.start + t) * d + off..(seg.start + t) * d + off + dh;
            for i in 0..n {
                let go = &dout[row(i)];
                let mut dot = 0.0;
                for j in 0..n {
                    let vj = &v[row(j)];
                    let dp: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    ds[i * n + j] = dp;
                    dot += p[i * n + j] * dp;
                    let pij = p[i * n + j];
                    let r = row(j);
                    dv[r].iter_mut().zip(go).for_each(|(s, x)| *s += pij * x);
                }
                for j in 0..n {
                    ds[i * n + j] = p[i * n + j] * (ds[i * n + j] - dot) * scale;
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let s = ds[i * n + j];
                    if s == 0.0 {
                        continue;
                    }
                    let (ri, rj) = (row(i), row(j));
                    for c in 0..dh {
                        dq[ri.start + c] += s * k[rj.start + c];
                        dk[rj.start + c] += s * q[ri.start + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
