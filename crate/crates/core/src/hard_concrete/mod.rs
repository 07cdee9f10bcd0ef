//! Stretched hard-concrete masks over groups of encoder weights.
//!
//! Each mask group `i` owns a location parameter `θ_i`. A sample is
//!
//! ```text
//! u ~ Unif(δ, 1 − δ)
//! s = σ((logit(u) + θ) / β)
//! z = clamp(s · (ζ − γ) + γ, 0, 1)
//! ```
//!
//! which puts non-zero probability on exactly 0 and exactly 1. The sparsity
//! penalty is the mean probability that a group is non-zero.

mod groups;
mod io;

pub use groups::{
    apply_mask, build_groups, dense_masks, Granularity, GranularitySpec, GroupLayout, MaskableMatrix, MatrixGroups,
    MatrixKind,
};
pub use io::{mask_checkpoint, read_mask_checkpoint};

use thiserror::Error;

use crate::autodiff::{sigmoid, AutodiffError, Graph, RngState, Tensor, Var};

/// Uniform draws are kept inside `(δ, 1 − δ)` so `logit(u)` stays finite.
pub const UNIFORM_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("invalid mask config: {0}")]
    Config(String),
    #[error("matrix {name} ({rows}x{cols}) is not divisible into {rows_per_mask}x{cols_per_mask} tiles")]
    Tiling { name: String, rows: usize, cols: usize, rows_per_mask: usize, cols_per_mask: usize },
    #[error("unknown granularity {0:?}")]
    UnknownGranularity(String),
    #[error("mask layout mismatch: {0}")]
    Layout(String),
    #[error("lambda schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Temperature and stretch interval of the hard-concrete distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { beta: 2.0 / 3.0, gamma: -0.1, zeta: 1.1 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(MaskError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.gamma < 0.0 && self.zeta > 1.0) {
            return Err(MaskError::Config(format!(
                "need gamma < 0 < 1 < zeta, got gamma={} zeta={}",
                self.gamma, self.zeta
            )));
        }
        Ok(())
    }

    /// `−β · ln(−γ/ζ)`, the shift inside the expected-L0 sigmoid.
    pub fn l0_shift(&self) -> f64 {
        -self.beta * (-self.gamma / self.zeta).ln()
    }

    fn stretch(&self, s: f64) -> f64 {
        s * (self.zeta - self.gamma) + self.gamma
    }
}

/// A realized mask, aligned with θ.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSample {
    pub z: Vec<f64>,
    /// The uniform draws behind a stochastic sample; `None` for the
    /// deterministic evaluation mask.
    pub u: Option<Vec<f64>>,
}

fn logit(u: f64) -> f64 {
    (u / (1.0 - u)).ln()
}

/// One hard-concrete value for location `theta` and noise `logit_u`.
pub fn hard_concrete(theta: f64, logit_u: f64, config: &MaskConfig) -> f64 {
    let s = sigmoid((theta + logit_u) * (1.0 / config.beta));
    config.stretch(s).clamp(0.0, 1.0)
}

/// Draws `n` uniforms in `(δ, 1 − δ)`.
pub fn draw_uniforms(n: usize, rng: &mut RngState) -> Vec<f64> {
    (0..n).map(|_| UNIFORM_MARGIN + (1.0 - 2.0 * UNIFORM_MARGIN) * rng.uniform()).collect()
}

/// Samples `z` for every group.
pub fn sample_mask(theta: &[f64], config: &MaskConfig, rng: &mut RngState) -> Result<MaskSample, MaskError> {
    config.validate()?;
    let u = draw_uniforms(theta.len(), rng);
    Ok(mask_from_uniforms(theta, config, u))
}

/// The mask produced by fixed uniform draws `u`.
pub fn mask_from_uniforms(theta: &[f64], config: &MaskConfig, u: Vec<f64>) -> MaskSample {
    let z = theta.iter().zip(&u).map(|(&t, &ui)| hard_concrete(t, logit(ui), config)).collect();
    MaskSample { z, u: Some(u) }
}

/// The evaluation mask: the distribution median, obtained by plugging in
/// `u = 0.5`. Values stay continuous in `[0, 1]`.
pub fn deterministic_mask(theta: &[f64], config: &MaskConfig) -> MaskSample {
    let z = theta.iter().map(|&t| hard_concrete(t, 0.0, config)).collect();
    MaskSample { z, u: None }
}

/// `R(θ) = mean_i σ(θ_i − β ln(−γ/ζ))`, the expected fraction of non-zero
/// mask groups.
pub fn expected_l0(theta: &[f64], config: &MaskConfig) -> f64 {
    if theta.is_empty() {
        return 0.0;
    }
    let shift = config.l0_shift();
    theta.iter().map(|&t| sigmoid(t + shift)).sum::<f64>() / theta.len() as f64
}

/// Records the hard-concrete transform of `theta` on the graph. `u` fixes
/// the noise; `None` gives the deterministic median mask.
pub fn mask_var(g: &mut Graph, theta: Var, config: &MaskConfig, u: Option<&[f64]>) -> Result<Var, MaskError> {
    config.validate()?;
    let n = g.value(theta).len();
    let noise = match u {
        Some(u) => {
            if u.len() != n {
                return Err(MaskError::Layout(format!("{} uniforms for {n} groups", u.len())));
            }
            u.iter().map(|&x| logit(x)).collect()
        }
        None => vec![0.0; n],
    };
    let shape = g.value(theta).shape().to_vec();
    let noise = g.constant(Tensor::new(shape.clone(), noise)?);
    let t = g.add(theta, noise)?;
    let t = g.scale(t, 1.0 / config.beta)?;
    let s = g.sigmoid(t)?;
    let s = g.scale(s, config.zeta - config.gamma)?;
    let gamma = g.constant(Tensor::full(&shape, config.gamma));
    let stretched = g.add(s, gamma)?;
    Ok(g.clamp(stretched, 0.0, 1.0)?)
}

/// Differentiable expected-L0 penalty on the graph.
pub fn expected_l0_var(g: &mut Graph, theta: Var, config: &MaskConfig) -> Result<Var, MaskError> {
    let shape = g.value(theta).shape().to_vec();
    let shift = g.constant(Tensor::full(&shape, config.l0_shift()));
    let t = g.add(theta, shift)?;
    let p = g.sigmoid(t)?;
    Ok(g.mean(p)?)
}

/// Regularization strength at training `progress ∈ [0, 1]`: zero for the
/// first quarter, linear up to `lambda_max` over the next half, then flat.
pub fn lambda_schedule(progress: f64, lambda_max: f64) -> Result<f64, MaskError> {
    if lambda_max.is_nan() || lambda_max < 0.0 {
        return Err(MaskError::Schedule(format!("lambda_max must be non-negative, got {lambda_max}")));
    }
    if !(0.0..=1.0).contains(&progress) {
        return Err(MaskError::Schedule(format!("progress {progress} outside [0, 1]")));
    }
    Ok(if progress <= 0.25 {
        0.0
    } else if progress >= 0.75 {
        lambda_max
    } else {
        lambda_max * ((progress - 0.25) / 0.5)
    })
}
