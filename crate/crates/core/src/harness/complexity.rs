use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::heads::ProbeMode;

/// Bits charged per transmitted probe parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityModel {
    /// One bit per binary mask group.
    pub bits_per_mask_param: f64,
    /// Bounds for real-valued parameters.
    pub real_bits_lower: f64,
    pub real_bits_upper: f64,
}

impl Default for ComplexityModel {
    fn default() -> Self {
        Self { bits_per_mask_param: 1.0, real_bits_lower: 1.0, real_bits_upper: 32.0 }
    }
}

impl ComplexityModel {
    /// Real parameters quantized uniformly over `[a, b]` at resolution `eps`
    /// cost exactly [`precision_bits`] each.
    pub fn with_precision(a: f64, b: f64, eps: f64) -> Result<Self, HarnessError> {
        let bits = precision_bits(a, b, eps)?;
        Ok(Self { real_bits_lower: bits, real_bits_upper: bits, ..Self::default() })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let ok = self.bits_per_mask_param > 0.0 && self.real_bits_lower > 0.0 && self.real_bits_lower <= self.real_bits_upper;
        if !ok || !self.real_bits_upper.is_finite() {
            return Err(HarnessError::Config(format!("invalid complexity model {self:?}")));
        }
        Ok(())
    }
}

/// `log2((b − a) / eps)`: bits to address one of the uniform grid points.
pub fn precision_bits(a: f64, b: f64, eps: f64) -> Result<f64, HarnessError> {
    if !(b > a && eps > 0.0 && eps.is_finite()) {
        return Err(HarnessError::Config(format!("precision needs a < b and eps > 0, got a={a} b={b} eps={eps}")));
    }
    Ok(((b - a) / eps).log2())
}

/// `(lower, upper)` bits to transmit `parameter_count` probe parameters.
/// Mask groups cost a fixed number of bits; real parameters span the
/// model's bounds.
pub fn complexity_bits(mode: ProbeMode, parameter_count: usize, model: &ComplexityModel) -> Result<(f64, f64), HarnessError> {
    model.validate()?;
    let n = parameter_count as f64;
    Ok(match mode {
        ProbeMode::Subnetwork => (n * model.bits_per_mask_param, n * model.bits_per_mask_param),
        ProbeMode::Mlp1 | ProbeMode::Finetune => (n * model.real_bits_lower, n * model.real_bits_upper),
    })
}
