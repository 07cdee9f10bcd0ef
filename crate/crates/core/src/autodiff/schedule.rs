use super::AutodiffError;

/// Fraction of training spent in linear warmup.
pub const WARMUP_FRACTION: f64 = 0.1;

/// Linear warmup from 0 to `base_lr` over the first 10% of `total_steps`,
/// constant afterwards.
pub fn warmup_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64, AutodiffError> {
    if total_steps == 0 {
        return Err(AutodiffError::EmptySchedule);
    }
    let warmup = WARMUP_FRACTION * total_steps as f64;
    let s = step as f64;
    Ok(if s < warmup { base_lr * s / warmup } else { base_lr })
}
