//! Mask checkpoints: hard-concrete constants, granularity, the tiled
//! registry, and θ as 64-bit floats in group order.
//!
//! Metadata keys: `beta`, `gamma`, `zeta`, `granularity`, `group_count`,
//! `matrices`, and one `matrix.{i}` entry per registered matrix formatted
//! `name,layer,kind,rows,cols,rows_per_mask,cols_per_mask`. The single
//! tensor is `theta` with shape `[group_count]`.

use super::groups::{GroupLayout, MatrixGroups};
use super::{Granularity, MaskConfig, MaskableMatrix, MatrixKind};
use crate::autodiff::Tensor;
use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointKind};

pub fn mask_checkpoint(config: &MaskConfig, layout: &GroupLayout, theta: &[f64]) -> Checkpoint {
    let mut c = Checkpoint::new(CheckpointKind::Mask)
        .with_meta("beta", config.beta)
        .with_meta("gamma", config.gamma)
        .with_meta("zeta", config.zeta)
        .with_meta("granularity", layout.granularity)
        .with_meta("group_count", layout.group_count())
        .with_meta("matrices", layout.matrices.len());
    for (i, m) in layout.matrices.iter().enumerate() {
        let mm = &m.matrix;
        c = c.with_meta(
            format!("matrix.{i}"),
            format!(
                "{},{},{},{},{},{},{}",
                mm.name,
                mm.layer,
                mm.kind.short_name(),
                mm.rows,
                mm.cols,
                m.rows_per_mask,
                m.cols_per_mask
            ),
        );
    }
    c.push_tensor("theta", Tensor::vector(theta.to_vec()));
    c
}

pub fn read_mask_checkpoint(c: &Checkpoint) -> Result<(MaskConfig, GroupLayout, Vec<f64>), CheckpointError> {
    c.expect_kind(CheckpointKind::Mask)?;
    let invalid = |key: &str, detail: String| CheckpointError::Invalid { key: key.to_string(), detail };
    let config = MaskConfig { beta: c.meta_parse("beta")?, gamma: c.meta_parse("gamma")?, zeta: c.meta_parse("zeta")? };
    config.validate().map_err(|e| invalid("beta", e.to_string()))?;
    let granularity: Granularity = c.meta("granularity")?.parse().map_err(|e: super::MaskError| invalid("granularity", e.to_string()))?;
    let n: usize = c.meta_parse("matrices")?;
    let mut matrices = Vec::with_capacity(n);
    let mut offset = 0;
    for i in 0..n {
        let key = format!("matrix.{i}");
        let fields: Vec<&str> = c.meta(&key)?.split(',').collect();
        if fields.len() != 7 {
            return Err(invalid(&key, format!("expected 7 fields, got {}", fields.len())));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| invalid(&key, e.to_string()));
        let kind = MatrixKind::from_short_name(fields[2]).ok_or_else(|| invalid(&key, format!("kind {}", fields[2])))?;
        let matrix = MaskableMatrix {
            name: fields[0].to_string(),
            layer: num(fields[1])?,
            kind,
            rows: num(fields[3])?,
            cols: num(fields[4])?,
        };
        let groups = MatrixGroups { matrix, rows_per_mask: num(fields[5])?, cols_per_mask: num(fields[6])?, offset };
        if groups.rows_per_mask == 0 || groups.cols_per_mask == 0 {
            return Err(invalid(&key, "zero tile".into()));
        }
        offset += groups.count();
        matrices.push(groups);
    }
    let layout = GroupLayout::from_groups(granularity, matrices).map_err(|e| invalid("matrices", e.to_string()))?;
    let expected: usize = c.meta_parse("group_count")?;
    let theta = c.tensor("theta")?.data().to_vec();
    if expected != layout.group_count() || theta.len() != expected {
        return Err(invalid(
            "group_count",
            format!("header {expected}, layout {}, theta {}", layout.group_count(), theta.len()),
        ));
    }
    Ok((config, layout, theta))
}
