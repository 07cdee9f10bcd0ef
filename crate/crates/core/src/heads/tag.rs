use super::{argmax, init_param, Bound, HeadError};
use crate::autodiff::{Graph, ParamStore, RngState, Var};

pub const TAG_DROPOUT: f64 = 0.1;

/// Dropout, then a linear layer to tag logits; softmax lives in the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTagHead {
    pub params: ParamStore,
    pub dropout: f64,
    pub tags: usize,
}

impl LinearTagHead {
    pub fn new(hidden: usize, tags: usize, rng: &mut RngState) -> Result<Self, HeadError> {
        if hidden == 0 || tags == 0 {
            return Err(HeadError::Config(format!("tag head needs positive sizes, got {hidden}x{tags}")));
        }
        let mut params = ParamStore::new();
        init_param(&mut params, "tag.weight", &[hidden, tags], rng)?;
        init_param(&mut params, "tag.bias", &[tags], rng)?;
        Ok(Self { params, dropout: TAG_DROPOUT, tags })
    }

    /// Logits `rows × tags`. Dropout applies only when `training` is given.
    pub fn logits(&self, g: &mut Graph, bound: &Bound, h: Var, training: Option<&mut RngState>) -> Result<Var, HeadError> {
        let x = match training {
            Some(rng) if self.dropout > 0.0 => g.dropout(h, 1.0 - self.dropout, rng)?,
            _ => h,
        };
        let y = g.matmul(x, bound.get("tag.weight")?)?;
        Ok(g.add_row(y, bound.get("tag.bias")?)?)
    }

    /// Mean token cross-entropy.
    pub fn loss(
        &self,
        g: &mut Graph,
        bound: &Bound,
        h: Var,
        targets: &[usize],
        training: Option<&mut RngState>,
    ) -> Result<Var, HeadError> {
        let rows = g.value(h).rows();
        if targets.len() != rows {
            return Err(HeadError::Targets { got: targets.len(), expected: rows });
        }
        let logits = self.logits(g, bound, h, training)?;
        Ok(g.cross_entropy(logits, targets)?)
    }

    /// Per-token tag distributions (eval mode).
    pub fn probabilities(&self, g: &mut Graph, bound: &Bound, h: Var) -> Result<Var, HeadError> {
        let logits = self.logits(g, bound, h, None)?;
        Ok(g.softmax_rows(logits)?)
    }

    pub fn predict(&self, g: &mut Graph, bound: &Bound, h: Var) -> Result<Vec<usize>, HeadError> {
        let logits = self.logits(g, bound, h, None)?;
        let t = g.value(logits);
        Ok((0..t.rows()).map(|r| argmax(t.row(r))).collect())
    }
}
