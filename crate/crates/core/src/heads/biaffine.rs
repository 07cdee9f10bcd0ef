//! Biaffine dependency head with a learned root vector.
//!
//! For dependent `i` and candidate head `j` (0 = root):
//!
//! ```text
//! arc(i, j)      = dep_i · U · head_jᵀ + head_j · u
//! label(i, j)_l  = dep'_i · U_l · head'_jᵀ + dep'_i · w_l + head'_j · v_l + b_l
//! ```
//!
//! where `dep`, `head`, `dep'`, `head'` are ReLU projections of the hidden
//! states (the root row uses the learned `root` vector). Arc scores for a
//! sentence of `n` tokens form an `(n+1) × n` table, stored dependent-major.

use std::rc::Rc;

use super::{argmax, init_param, Bound, HeadError};
use crate::autodiff::{Graph, ParamStore, RngState, Segment, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BiaffineHead {
    pub params: ParamStore,
    pub labels: usize,
    pub arc_dim: usize,
    pub label_dim: usize,
}

/// Decoded heads (0 = root, else 1-based within the sentence) and label ids,
/// aligned with the packed rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseOutput {
    pub heads: Vec<usize>,
    pub labels: Vec<usize>,
}

impl BiaffineHead {
    /// `arc_dim = label_dim = hidden / 2`.
    pub fn new(hidden: usize, labels: usize, rng: &mut RngState) -> Result<Self, HeadError> {
        let (a, b) = (hidden / 2, hidden / 2);
        if a == 0 || labels == 0 {
            return Err(HeadError::Config(format!("biaffine head needs hidden >= 2 and labels > 0, got {hidden}, {labels}")));
        }
        let mut p = ParamStore::new();
        init_param(&mut p, "root", &[1, hidden], rng)?;
        for (name, dim) in [("arc.dep", a), ("arc.head", a), ("lab.dep", b), ("lab.head", b)] {
            init_param(&mut p, &format!("{name}.weight"), &[hidden, dim], rng)?;
            init_param(&mut p, &format!("{name}.bias"), &[dim], rng)?;
        }
        init_param(&mut p, "arc.u", &[a, a], rng)?;
        init_param(&mut p, "arc.head_prior", &[1, a], rng)?;
        init_param(&mut p, "lab.u", &[b, labels * b], rng)?;
        init_param(&mut p, "lab.dep_linear", &[b, labels], rng)?;
        init_param(&mut p, "lab.head_linear", &[b, labels], rng)?;
        init_param(&mut p, "lab.bias", &[labels], rng)?;
        Ok(Self { params: p, labels, arc_dim: a, label_dim: b })
    }

    fn project(g: &mut Graph, bound: &Bound, x: Var, name: &str) -> Result<Var, HeadError> {
        let y = g.matmul(x, bound.get(&format!("{name}.weight"))?)?;
        let y = g.add_row(y, bound.get(&format!("{name}.bias"))?)?;
        Ok(g.relu(y)?)
    }

    /// Per-sentence arc score matrices, `n × (n+1)` (dependent rows, head
    /// columns with the root first).
    pub fn arc_scores(&self, g: &mut Graph, bound: &Bound, h: Var, segments: &[Segment]) -> Result<Vec<Var>, HeadError> {
        let root = bound.get("root")?;
        let dep = Self::project(g, bound, h, "arc.dep")?;
        let head = Self::project(g, bound, h, "arc.head")?;
        let root_head = Self::project(g, bound, root, "arc.head")?;
        let dep_u = g.matmul(dep, bound.get("arc.u")?)?;
        let prior = bound.get("arc.head_prior")?;
        let mut out = Vec::with_capacity(segments.len());
        for s in segments {
            let heads = g.slice_rows(head, s.start, s.len)?;
            let heads = g.concat_rows(&[root_head, heads])?;
            let deps = g.slice_rows(dep_u, s.start, s.len)?;
            let scores = g.matmul_t(deps, false, heads, true)?;
            let bias = g.matmul_t(prior, false, heads, true)?;
            out.push(g.add_row(scores, bias)?);
        }
        Ok(out)
    }

    /// Label logits (`rows × labels`) for each token attached to `heads`.
    pub fn label_scores(
        &self,
        g: &mut Graph,
        bound: &Bound,
        h: Var,
        segments: &[Segment],
        heads: &[usize],
    ) -> Result<Var, HeadError> {
        let rows = g.value(h).rows();
        if heads.len() != rows {
            return Err(HeadError::Targets { got: heads.len(), expected: rows });
        }
        let root = bound.get("root")?;
        let dep = Self::project(g, bound, h, "lab.dep")?;
        let head = Self::project(g, bound, h, "lab.head")?;
        let root_head = Self::project(g, bound, root, "lab.head")?;
        let table = g.concat_rows(&[root_head, head])?;
        let mut idx = Vec::with_capacity(rows);
        for s in segments {
            for &hd in &heads[s.start..s.start + s.len] {
                if hd > s.len {
                    return Err(HeadError::HeadOutOfRange { head: hd, len: s.len });
                }
                idx.push(if hd == 0 { 0 } else { 1 + s.start + hd - 1 });
            }
        }
        let chosen = g.gather_rows(table, &idx)?;
        let t = g.matmul(dep, bound.get("lab.u")?)?;
        let bil = g.block_row_dot(t, chosen)?;
        let dl = g.matmul(dep, bound.get("lab.dep_linear")?)?;
        let hl = g.matmul(chosen, bound.get("lab.head_linear")?)?;
        let s = g.add(bil, dl)?;
        let s = g.add(s, hl)?;
        Ok(g.add_row(s, bound.get("lab.bias")?)?)
    }

    /// Mean per-token arc cross-entropy plus mean label cross-entropy, with
    /// labels scored on the gold head.
    pub fn loss(
        &self,
        g: &mut Graph,
        bound: &Bound,
        h: Var,
        segments: &Rc<[Segment]>,
        gold_heads: &[usize],
        gold_labels: &[usize],
    ) -> Result<Var, HeadError> {
        let rows = g.value(h).rows();
        if gold_heads.len() != rows || gold_labels.len() != rows {
            return Err(HeadError::Targets { got: gold_heads.len().min(gold_labels.len()), expected: rows });
        }
        for s in segments.iter() {
            if let Some(&bad) = gold_heads[s.start..s.start + s.len].iter().find(|&&x| x > s.len) {
                return Err(HeadError::HeadOutOfRange { head: bad, len: s.len });
            }
        }
        let arcs = self.arc_scores(g, bound, h, segments)?;
        let mut arc_loss: Option<Var> = None;
        for (s, scores) in segments.iter().zip(arcs) {
            let ce = g.cross_entropy(scores, &gold_heads[s.start..s.start + s.len])?;
            let weighted = g.scale(ce, s.len as f64 / rows as f64)?;
            arc_loss = Some(match arc_loss {
                Some(acc) => g.add(acc, weighted)?,
                None => weighted,
            });
        }
        let arc_loss = arc_loss.ok_or_else(|| HeadError::Config("empty batch".into()))?;
        let labels = self.label_scores(g, bound, h, segments, gold_heads)?;
        let label_loss = g.cross_entropy(labels, gold_labels)?;
        Ok(g.add(arc_loss, label_loss)?)
    }

    /// Greedy decoding: each dependent takes its best-scoring head (never
    /// itself), then its best label for that head.
    pub fn decode(&self, g: &mut Graph, bound: &Bound, h: Var, segments: &[Segment]) -> Result<ParseOutput, HeadError> {
        let arcs = self.arc_scores(g, bound, h, segments)?;
        let mut heads = Vec::with_capacity(g.value(h).rows());
        for (s, scores) in segments.iter().zip(arcs) {
            heads.extend(greedy_heads(g.value(scores).data(), s.len));
        }
        let labels = self.label_scores(g, bound, h, segments, &heads)?;
        let lv = g.value(labels);
        let labels = (0..lv.rows()).map(|r| argmax(lv.row(r))).collect();
        Ok(ParseOutput { heads, labels })
    }
}

/// Argmax over each row of an `n × (n+1)` score table, skipping the
/// self-attachment column `i + 1`.
pub(crate) fn greedy_heads(scores: &[f64], n: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let row = &scores[i * (n + 1)..(i + 1) * (n + 1)];
            let mut best = 0;
            for j in 1..=n {
                if j != i + 1 && row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
