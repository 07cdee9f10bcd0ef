//! A small pre-LN transformer encoder whose attention and feed-forward
//! matrices form the maskable registry.
//!
//! Weights use the `y = x · W` convention, so a matrix column is one output
//! neuron. Parameter names:
//!
//! ```text
//! embed.token, embed.position
//! layer.{l}.ln1.gain, layer.{l}.ln1.bias
//! layer.{l}.{q,k,v,o}, layer.{l}.{q,k,v,o}.bias
//! layer.{l}.ln2.gain, layer.{l}.ln2.bias
//! layer.{l}.ff1, layer.{l}.ff1.bias, layer.{l}.ff2, layer.{l}.ff2.bias
//! final_ln.gain, final_ln.bias
//! mlm.bias
//! ```
//!
//! The masked-language-model output layer is tied to `embed.token`.

mod io;
mod pretrain;

pub use io::{encoder_checkpoint, encoder_manifest, read_encoder_checkpoint};
pub use pretrain::{pretrain_mlm, unigram_baseline, MlmReport, PretrainConfig};

use std::rc::Rc;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamStore, RngState, Segment, Tensor, Var};
use crate::hard_concrete::{MaskError, MaskableMatrix, MatrixKind};

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds the maximum length {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {size}")]
    UnknownToken { id: usize, size: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("vocabulary lacks the [MASK] token")]
    NoMaskToken,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn toy(vocab_size: usize) -> Self {
        Self { layers: 4, hidden: 64, heads: 4, ff: 128, vocab_size, max_len: 32, dropout: 0.1 }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.ff == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return bad(format!("all sizes must be positive: {self:?}"));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide hidden size {}", self.heads, self.hidden));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Parameters in one transformer layer: four attention projections with
    /// biases, the two feed-forward matrices with biases, and two layer norms.
    pub fn layer_parameter_count(&self) -> usize {
        let (d, f) = (self.hidden, self.ff);
        4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    }

    pub fn embedding_parameter_count(&self) -> usize {
        (self.vocab_size + self.max_len) * self.hidden
    }

    /// Everything: embeddings, layers, final layer norm, and MLM bias.
    pub fn parameter_count(&self) -> usize {
        self.embedding_parameter_count() + self.layers * self.layer_parameter_count() + 2 * self.hidden + self.vocab_size
    }

    /// The 6·L maskable matrices in canonical order.
    pub fn registry(&self) -> Vec<MaskableMatrix> {
        let (d, f) = (self.hidden, self.ff);
        (0..self.layers)
            .flat_map(|l| {
                MatrixKind::ALL.into_iter().map(move |kind| {
                    let (rows, cols) = match kind {
                        MatrixKind::FeedForwardIn => (d, f),
                        MatrixKind::FeedForwardOut => (f, d),
                        _ => (d, d),
                    };
                    MaskableMatrix { name: matrix_name(l, kind), layer: l, kind, rows, cols }
                })
            })
            .collect()
    }
}

pub fn matrix_name(layer: usize, kind: MatrixKind) -> String {
    format!("layer.{layer}.{}", kind.short_name())
}

/// Token sequences packed row-wise into one matrix.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Rc<[Segment]>,
}

impl Batch {
    pub fn new(sequences: &[&[usize]]) -> Result<Self, EncoderError> {
        if sequences.is_empty() || sequences.iter().any(|s| s.is_empty()) {
            return Err(EncoderError::EmptyBatch);
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(sequences.len());
        for s in sequences {
            segments.push(Segment { start: ids.len(), len: s.len() });
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        Ok(Self { ids, positions, segments: segments.into() })
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }
}

/// Replacement values for the registry matrices during one forward pass,
/// aligned with [`EncoderConfig::registry`].
pub type MaskedWeights = Vec<Var>;

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

/// Names of the transformer-layer parameters (everything except the
/// embeddings and the MLM bias).
fn layer_param_names(config: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f) = (config.hidden, config.ff);
    let mut out = Vec::new();
    for l in 0..config.layers {
        let p = |s: &str| format!("layer.{l}.{s}");
        out.push((p("ln1.gain"), vec![d], Init::One));
        out.push((p("ln1.bias"), vec![d], Init::Zero));
        for kind in MatrixKind::ALL {
            let (rows, cols) = match kind {
                MatrixKind::FeedForwardIn => (d, f),
                MatrixKind::FeedForwardOut => (f, d),
                _ => (d, d),
            };
            if kind == MatrixKind::FeedForwardIn {
                out.push((p("ln2.gain"), vec![d], Init::One));
                out.push((p("ln2.bias"), vec![d], Init::Zero));
            }
            out.push((matrix_name(l, kind), vec![rows, cols], Init::Normal));
            out.push((format!("{}.bias", matrix_name(l, kind)), vec![cols], Init::Zero));
        }
    }
    out.push(("final_ln.gain".into(), vec![d], Init::One));
    out.push(("final_ln.bias".into(), vec![d], Init::Zero));
    out
}

fn embedding_names(config: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    vec![
        ("embed.token".into(), vec![config.vocab_size, config.hidden], Init::Normal),
        ("embed.position".into(), vec![config.max_len, config.hidden], Init::Normal),
    ]
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zero,
    One,
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut RngState) -> Tensor {
    match init {
        Init::Normal => {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.truncated_normal(INIT_STD)).collect()).expect("shape")
        }
        Init::Zero => Tensor::zeros(shape),
        Init::One => Tensor::full(shape, 1.0),
    }
}

/// Handles for one forward pass: every parameter bound on the graph.
pub struct BoundEncoder {
    pub vars: Vec<Var>,
    registry_pos: Vec<usize>,
}

impl BoundEncoder {
    /// The registry matrices' vars in canonical order.
    pub fn registry_vars(&self) -> Vec<Var> {
        self.registry_pos.iter().map(|&i| self.vars[i]).collect()
    }
}

impl Encoder {
    /// Fresh weights: truncated-normal matrices and embeddings, zero biases,
    /// unit layer-norm gains.
    pub fn new(config: EncoderConfig, rng: &mut RngState) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, init) in embedding_names(&config).into_iter().chain(layer_param_names(&config)) {
            params.insert(name, init_tensor(&shape, init, rng), true)?;
        }
        params.insert("mlm.bias", Tensor::zeros(&[config.vocab_size]), true)?;
        Ok(Self { config, params })
    }

    pub fn registry(&self) -> Vec<MaskableMatrix> {
        self.config.registry()
    }

    /// Re-initializes every transformer-layer parameter; embeddings and the
    /// MLM bias are kept.
    pub fn reset_encoder(&mut self, rng: &mut RngState) -> Result<(), EncoderError> {
        for (name, shape, init) in layer_param_names(&self.config) {
            self.params.get_mut(&name)?.value = init_tensor(&shape, init, rng);
        }
        Ok(())
    }

    /// Re-initializes every parameter.
    pub fn reset_all(&mut self, rng: &mut RngState) -> Result<(), EncoderError> {
        for (name, shape, init) in embedding_names(&self.config) {
            self.params.get_mut(&name)?.value = init_tensor(&shape, init, rng);
        }
        self.reset_encoder(rng)?;
        self.params.get_mut("mlm.bias")?.value = Tensor::zeros(&[self.config.vocab_size]);
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundEncoder, EncoderError> {
        let vars = self.params.bind(g);
        let registry_pos =
            self.registry().iter().map(|m| self.params.position(&m.name)).collect::<Result<Vec<_>, _>>()?;
        Ok(BoundEncoder { vars, registry_pos })
    }

    fn var(&self, b: &BoundEncoder, name: &str) -> Result<Var, EncoderError> {
        Ok(b.vars[self.params.position(name)?])
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<(), EncoderError> {
        for seg in batch.segments.iter() {
            if seg.len > self.config.max_len {
                return Err(EncoderError::TooLong { len: seg.len, max: self.config.max_len });
            }
        }
        if let Some(&id) = batch.ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(EncoderError::UnknownToken { id, size: self.config.vocab_size });
        }
        Ok(())
    }

    /// Records the forward pass and returns the final hidden states
    /// (`rows × hidden`) plus each layer's attention node.
    ///
    /// `masked` replaces the registry matrices (e.g. with `φ * Z`);
    /// `dropout` enables residual and embedding dropout.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundEncoder,
        batch: &Batch,
        masked: Option<&MaskedWeights>,
        mut dropout: Option<&mut RngState>,
    ) -> Result<(Var, Vec<Var>), EncoderError> {
        self.check_batch(batch)?;
        let c = &self.config;
        let registry = bound.registry_vars();
        let weights = match masked {
            Some(m) if m.len() != registry.len() => {
                return Err(MaskError::Layout(format!("{} masked weights for {} matrices", m.len(), registry.len())).into())
            }
            Some(m) => m.clone(),
            None => registry,
        };
        let keep = 1.0 - c.dropout;
        let mut drop = |g: &mut Graph, x: Var| -> Result<Var, EncoderError> {
            match dropout.as_deref_mut() {
                Some(rng) if c.dropout > 0.0 => Ok(g.dropout(x, keep, rng)?),
                _ => Ok(x),
            }
        };
        let tok = g.embedding(self.var(bound, "embed.token")?, &batch.ids)?;
        let pos = g.embedding(self.var(bound, "embed.position")?, &batch.positions)?;
        let mut x = g.add(tok, pos)?;
        x = drop(g, x)?;
        let mut attn_nodes = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let w = |k: usize| weights[l * 6 + k];
            let p = |s: &str| self.var(bound, &format!("layer.{l}.{s}"));
            let h = g.layer_norm(x, Some(p("ln1.gain")?), Some(p("ln1.bias")?), LAYER_NORM_EPS)?;
            let proj = |g: &mut Graph, k: usize, input: Var, bias: &str| -> Result<Var, EncoderError> {
                let y = g.matmul(input, w(k))?;
                Ok(g.add_row(y, p(bias)?)?)
            };
            let q = proj(g, 0, h, "q.bias")?;
            let k = proj(g, 1, h, "k.bias")?;
            let v = proj(g, 2, h, "v.bias")?;
            let a = g.attention(q, k, v, batch.segments.clone(), c.heads)?;
            attn_nodes.push(a);
            let o = proj(g, 3, a, "o.bias")?;
            let o = drop(g, o)?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, Some(p("ln2.gain")?), Some(p("ln2.bias")?), LAYER_NORM_EPS)?;
            let f = proj(g, 4, h, "ff1.bias")?;
            let f = g.relu(f)?;
            let f = proj(g, 5, f, "ff2.bias")?;
            let f = drop(g, f)?;
            x = g.add(x, f)?;
        }
        let out = g.layer_norm(x, Some(self.var(bound, "final_ln.gain")?), Some(self.var(bound, "final_ln.bias")?), LAYER_NORM_EPS)?;
        Ok((out, attn_nodes))
    }

    /// Hidden states for one batch without recording gradients, optionally
    /// under fixed dense per-weight masks (aligned with the registry).
    pub fn encode(&self, batch: &Batch, dense_masks: Option<&[Tensor]>) -> Result<Tensor, EncoderError> {
        let mut g = Graph::new();
        let frozen = Encoder { config: self.config, params: frozen_copy(&self.params) };
        let bound = frozen.bind(&mut g)?;
        let masked = match dense_masks {
            Some(masks) => {
                let reg = bound.registry_vars();
                if masks.len() != reg.len() {
                    return Err(MaskError::Layout(format!("{} dense masks for {} matrices", masks.len(), reg.len())).into());
                }
                let mut out = Vec::with_capacity(reg.len());
                for (&w, m) in reg.iter().zip(masks) {
                    let m = g.constant(m.clone());
                    out.push(g.mul(w, m)?);
                }
                Some(out)
            }
            None => None,
        };
        let (h, _) = frozen.forward(&mut g, &bound, batch, masked.as_ref(), None)?;
        Ok(g.value(h).clone())
    }
}

fn frozen_copy(params: &ParamStore) -> ParamStore {
    let mut p = params.clone();
    p.set_trainable(false);
    p
}
