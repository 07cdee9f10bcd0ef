//! Classification heads, the MLP-1 probe, and probe composition.

mod biaffine;
mod io;
mod mlp;
mod probe;
mod tag;

pub use biaffine::{BiaffineHead, ParseOutput};
pub use io::{load_probe_checkpoint, probe_checkpoint};
pub use mlp::{Mlp1Probe, MLP1_RANK_LADDER};
pub use probe::{MaskDraw, Prediction, Probe, ProbeForward, ProbeMode, SubnetworkMask, Targets, THETA_INIT};
pub use tag::{LinearTagHead, TAG_DROPOUT};

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamStore, RngState, Tensor, Var};
use crate::encoder::EncoderError;
use crate::hard_concrete::MaskError;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("invalid head config: {0}")]
    Config(String),
    #[error("gold head {head} out of range for a sentence of {len} tokens")]
    HeadOutOfRange { head: usize, len: usize },
    #[error("probe mode {mode} {detail}")]
    Components { mode: ProbeMode, detail: String },
    #[error("target length {got} does not match {expected} tokens")]
    Targets { got: usize, expected: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Truncated normal (σ = 0.02) for matrices, zeros for vectors.
pub(crate) fn init_param(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut RngState) -> Result<(), HeadError> {
    let t = if shape.len() == 1 {
        Tensor::zeros(shape)
    } else {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.truncated_normal(crate::encoder::INIT_STD)).collect())?
    };
    store.insert(name, t, true)?;
    Ok(())
}

/// Vars of a bound parameter store, looked up by name.
pub struct Bound<'a> {
    store: &'a ParamStore,
    pub vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn new(store: &'a ParamStore, g: &mut Graph) -> Self {
        Self { store, vars: store.bind(g) }
    }

    /// Reuses vars from an earlier [`ParamStore::bind`] of `store`.
    pub fn with_vars(store: &'a ParamStore, vars: Vec<Var>) -> Self {
        Self { store, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var, HeadError> {
        Ok(self.vars[self.store.position(name)?])
    }
}

/// A task head: per-token tagging or biaffine parsing.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskHead {
    Tag(LinearTagHead),
    Parse(BiaffineHead),
}

impl TaskHead {
    pub fn params(&self) -> &ParamStore {
        match self {
            TaskHead::Tag(h) => &h.params,
            TaskHead::Parse(h) => &h.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            TaskHead::Tag(h) => &mut h.params,
            TaskHead::Parse(h) => &mut h.params,
        }
    }
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

#[cfg(test)]
mod tests;
