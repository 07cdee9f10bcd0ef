use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Bound, HeadError, Mlp1Probe, ParseOutput, TaskHead};
use crate::autodiff::{Gradients, Graph, ParamStore, RngState, Tensor, Var};
use crate::encoder::{Batch, BoundEncoder, Encoder};
use crate::hard_concrete::{apply_mask, deterministic_mask, expected_l0, mask_var, GroupLayout, MaskConfig};

/// Initial mask logit. `σ(2 / β)` puts nearly all mass on keeping a group,
/// so training starts close to the full encoder.
pub const THETA_INIT: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Frozen encoder under a learned hard-concrete mask.
    Subnetwork,
    /// Frozen encoder followed by a rank-limited one-layer MLP.
    Mlp1,
    /// Every encoder weight trained.
    Finetune,
}

impl ProbeMode {
    pub const ALL: [ProbeMode; 3] = [ProbeMode::Subnetwork, ProbeMode::Mlp1, ProbeMode::Finetune];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeMode::Subnetwork => "subnetwork",
            ProbeMode::Mlp1 => "mlp1",
            ProbeMode::Finetune => "finetune",
        }
    }
}

impl fmt::Display for ProbeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeMode {
    type Err = HeadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| HeadError::Config(format!("unknown probe mode {s:?} (expected subnetwork, mlp1 or finetune)")))
    }
}

/// Which mask a subnetwork forward pass uses.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskDraw {
    /// Stochastic sample from fixed uniforms, one per group.
    Sample(Vec<f64>),
    /// The `u = 0.5` median mask used for evaluation.
    Deterministic,
}

/// Learned mask logits over a group layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SubnetworkMask {
    pub config: MaskConfig,
    pub layout: GroupLayout,
    /// A single trainable `"mask.theta"` vector.
    pub params: ParamStore,
}

impl SubnetworkMask {
    pub fn new(config: MaskConfig, layout: GroupLayout, theta_init: f64) -> Result<Self, HeadError> {
        config.validate()?;
        let mut params = ParamStore::new();
        params.insert("mask.theta", Tensor::full(&[layout.group_count()], theta_init), true)?;
        Ok(Self { config, layout, params })
    }

    pub fn theta(&self) -> &[f64] {
        self.params.params()[0].value.data()
    }

    pub fn expected_l0(&self) -> f64 {
        expected_l0(self.theta(), &self.config)
    }

    /// Group values of the evaluation mask.
    pub fn deterministic(&self) -> Vec<f64> {
        deterministic_mask(self.theta(), &self.config).z
    }
}

/// Targets for one packed batch.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Tags(&'a [usize]),
    Parse { heads: &'a [usize], labels: &'a [usize] },
}

/// Predictions for one packed batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    Tags(Vec<usize>),
    Parse(ParseOutput),
}

/// Graph handles from one probe forward pass.
pub struct ProbeForward {
    /// Features fed to the task head.
    pub features: Var,
    /// Each encoder layer's attention node (empty for cached inputs).
    pub attention: Vec<Var>,
    /// The mask logits, when a subnetwork mask is present.
    pub theta: Option<Var>,
    encoder: Option<BoundEncoder>,
    mask: Vec<Var>,
    mlp1: Vec<Var>,
    head: Vec<Var>,
}

/// An encoder plus the components a probe mode trains.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub mode: ProbeMode,
    pub encoder: Encoder,
    pub mask: Option<SubnetworkMask>,
    pub mlp1: Option<Mlp1Probe>,
    pub head: TaskHead,
}

impl Probe {
    /// Checks that the components match `mode` and freezes the encoder
    /// unless fine-tuning.
    pub fn new(
        mode: ProbeMode,
        mut encoder: Encoder,
        mask: Option<SubnetworkMask>,
        mlp1: Option<Mlp1Probe>,
        head: TaskHead,
    ) -> Result<Self, HeadError> {
        let fail = |detail: &str| Err(HeadError::Components { mode, detail: detail.into() });
        match (mode, mask.is_some(), mlp1.is_some()) {
            (ProbeMode::Subnetwork, true, false) | (ProbeMode::Mlp1, false, true) | (ProbeMode::Finetune, false, false) => {}
            (ProbeMode::Subnetwork, _, _) => return fail("needs a mask and no MLP"),
            (ProbeMode::Mlp1, _, _) => return fail("needs an MLP and no mask"),
            (ProbeMode::Finetune, _, _) => return fail("takes neither a mask nor an MLP"),
        }
        if let Some(m) = &mask {
            let registry = encoder.registry();
            if !m.layout.registry().eq(registry.iter()) {
                return fail("mask layout does not match the encoder registry");
            }
        }
        if let Some(m) = &mlp1 {
            if m.hidden != encoder.config.hidden {
                return fail("MLP width does not match the encoder");
            }
        }
        encoder.params.set_trainable(mode == ProbeMode::Finetune);
        Ok(Self { mode, encoder, mask, mlp1, head })
    }

    /// Trainable scalars the mode adds on top of the encoder: mask groups,
    /// the MLP factors, or every encoder parameter when fine-tuning. The
    /// task head is excluded.
    pub fn parameter_count(&self) -> usize {
        match self.mode {
            ProbeMode::Subnetwork => self.mask.as_ref().map_or(0, |m| m.layout.group_count()),
            ProbeMode::Mlp1 => self.mlp1.as_ref().map_or(0, |m| m.params.numel()),
            ProbeMode::Finetune => self.encoder.params.numel(),
        }
    }

    /// Records the encoder (masked in subnetwork mode) and the MLP.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, draw: &MaskDraw) -> Result<ProbeForward, HeadError> {
        let bound = self.encoder.bind(g)?;
        let (theta, mask_vars, masked) = match &self.mask {
            Some(m) => {
                let vars = m.params.bind(g);
                let u = match draw {
                    MaskDraw::Sample(u) => Some(u.as_slice()),
                    MaskDraw::Deterministic => None,
                };
                let z = mask_var(g, vars[0], &m.config, u)?;
                let weights = apply_mask(g, &bound.registry_vars(), z, &m.layout)?;
                (Some(vars[0]), vars, Some(weights))
            }
            None => (None, Vec::new(), None),
        };
        let (h, attention) = self.encoder.forward(g, &bound, batch, masked.as_ref(), None)?;
        let mut fwd = self.finish(g, h)?;
        fwd.attention = attention;
        fwd.theta = theta;
        fwd.mask = mask_vars;
        fwd.encoder = Some(bound);
        Ok(fwd)
    }

    /// Starts from precomputed encoder outputs. Only valid when the encoder
    /// is frozen and unmasked, i.e. in MLP-1 mode.
    pub fn forward_cached(&self, g: &mut Graph, hidden: &Tensor) -> Result<ProbeForward, HeadError> {
        if self.mode != ProbeMode::Mlp1 {
            return Err(HeadError::Components { mode: self.mode, detail: "cannot reuse cached encoder outputs".into() });
        }
        let h = g.constant(hidden.clone());
        self.finish(g, h)
    }

    fn finish(&self, g: &mut Graph, h: Var) -> Result<ProbeForward, HeadError> {
        let (features, mlp1) = match &self.mlp1 {
            Some(m) => {
                let b = Bound::new(&m.params, g);
                (m.forward(g, &b, h)?, b.vars)
            }
            None => (h, Vec::new()),
        };
        let head = self.head.params().bind(g);
        Ok(ProbeForward { features, attention: Vec::new(), theta: None, encoder: None, mask: Vec::new(), mlp1, head })
    }

    /// Task loss on top of a forward pass; `training` enables head dropout.
    pub fn task_loss(
        &self,
        g: &mut Graph,
        fwd: &ProbeForward,
        batch: &Batch,
        targets: Targets,
        training: Option<&mut RngState>,
    ) -> Result<Var, HeadError> {
        let bound = Bound::with_vars(self.head.params(), fwd.head.clone());
        match (&self.head, targets) {
            (TaskHead::Tag(h), Targets::Tags(t)) => h.loss(g, &bound, fwd.features, t, training),
            (TaskHead::Parse(h), Targets::Parse { heads, labels }) => {
                h.loss(g, &bound, fwd.features, &batch.segments, heads, labels)
            }
            _ => Err(HeadError::Config("targets do not match the task head".into())),
        }
    }

    pub fn predict(&self, g: &mut Graph, fwd: &ProbeForward, batch: &Batch) -> Result<Prediction, HeadError> {
        let bound = Bound::with_vars(self.head.params(), fwd.head.clone());
        Ok(match &self.head {
            TaskHead::Tag(h) => Prediction::Tags(h.predict(g, &bound, fwd.features)?),
            TaskHead::Parse(h) => Prediction::Parse(h.decode(g, &bound, fwd.features, &batch.segments)?),
        })
    }

    /// Adds the gradients of every bound component into its store.
    pub fn accumulate(&mut self, grads: &Gradients, fwd: &ProbeForward) {
        if let Some(b) = &fwd.encoder {
            self.encoder.params.accumulate(grads, &b.vars);
        }
        if let Some(m) = &mut self.mask {
            m.params.accumulate(grads, &fwd.mask);
        }
        if let Some(m) = &mut self.mlp1 {
            m.params.accumulate(grads, &fwd.mlp1);
        }
        self.head.params_mut().accumulate(grads, &fwd.head);
    }

    pub fn zero_grads(&mut self) {
        self.encoder.params.zero_grads();
        if let Some(m) = &mut self.mask {
            m.params.zero_grads();
        }
        if let Some(m) = &mut self.mlp1 {
            m.params.zero_grads();
        }
        self.head.params_mut().zero_grads();
    }
}
