use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::hard_concrete::{deterministic_mask, GroupLayout, MaskConfig};

/// Per-layer fraction of maskable weights left non-zero by the evaluation
/// mask, over all matrices and over the attention matrices only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub all: Vec<f64>,
    pub attention: Vec<f64>,
}

pub fn layer_sparsity(theta: &[f64], config: &MaskConfig, layout: &GroupLayout) -> Result<LayerSparsity, HarnessError> {
    if theta.len() != layout.group_count() {
        return Err(HarnessError::Config(format!("{} mask logits for {} groups", theta.len(), layout.group_count())));
    }
    config.validate()?;
    let z = deterministic_mask(theta, config).z;
    let layers = layout.layers();
    let (mut kept, mut total) = (vec![0usize; layers], vec![0usize; layers]);
    let (mut att_kept, mut att_total) = (vec![0usize; layers], vec![0usize; layers]);
    for m in &layout.matrices {
        let per_group = m.rows_per_mask * m.cols_per_mask;
        let live = z[m.offset..m.offset + m.count()].iter().filter(|&&v| v > 0.0).count() * per_group;
        let l = m.matrix.layer;
        kept[l] += live;
        total[l] += m.matrix.rows * m.matrix.cols;
        if m.matrix.kind.is_attention() {
            att_kept[l] += live;
            att_total[l] += m.matrix.rows * m.matrix.cols;
        }
    }
    let frac = |k: &[usize], t: &[usize]| k.iter().zip(t).map(|(&a, &b)| if b == 0 { 0.0 } else { a as f64 / b as f64 }).collect();
    Ok(LayerSparsity { all: frac(&kept, &total), attention: frac(&att_kept, &att_total) })
}

/// Mass-weighted mean layer index (0-based); `None` when every layer is
/// empty.
pub fn sparsity_centroid(per_layer: &[f64]) -> Option<f64> {
    let mass: f64 = per_layer.iter().sum();
    (mass > 0.0).then(|| per_layer.iter().enumerate().map(|(l, &m)| l as f64 * m).sum::<f64>() / mass)
}

/// Largest over smallest layer mass; infinite when some layer is empty.
pub fn mass_ratio(per_layer: &[f64]) -> f64 {
    let max = per_layer.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = per_layer.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::RngState;
    use crate::encoder::EncoderConfig;
    use crate::hard_concrete::{build_groups, dense_masks, Granularity};

    fn layout(g: Granularity) -> GroupLayout {
        let reg = EncoderConfig::toy(50).registry();
        build_groups(&reg, &g.spec_for(&reg).unwrap()).unwrap()
    }

    #[test]
    fn saturated_logits() {
        let l = layout(Granularity::Neuron);
        let cfg = MaskConfig::default();
        let on = layer_sparsity(&vec![5.0; l.group_count()], &cfg, &l).unwrap();
        assert!(on.all.iter().chain(&on.attention).all(|&f| f == 1.0));
        let off = layer_sparsity(&vec![-5.0; l.group_count()], &cfg, &l).unwrap();
        assert!(off.all.iter().chain(&off.attention).all(|&f| f == 0.0));
        assert_eq!(on.all.len(), 4);
    }

    #[test]
    fn mixed_logits_match_a_dense_count() {
        let cfg = MaskConfig::default();
        for g in [Granularity::Matrix, Granularity::ColumnTiles(4), Granularity::RowTiles(16), Granularity::Weight] {
            let l = layout(g);
            let mut rng = RngState::new(3);
            let theta: Vec<f64> = (0..l.group_count()).map(|_| 2.0 * rng.standard_normal()).collect();
            let got = layer_sparsity(&theta, &cfg, &l).unwrap();
            let z = deterministic_mask(&theta, &cfg).z;
            let dense = dense_masks(&l, &z);
            let mut kept = [0.0; 4];
            let mut total = [0.0; 4];
            for (m, d) in l.matrices.iter().zip(&dense) {
                kept[m.matrix.layer] += d.data().iter().filter(|&&v| v > 0.0).count() as f64;
                total[m.matrix.layer] += d.len() as f64;
            }
            let expected: Vec<f64> = kept.iter().zip(&total).map(|(k, t)| k / t).collect();
            assert_eq!(got.all, expected, "{g}");
        }
    }

    #[test]
    fn centroid_and_ratio() {
        assert_eq!(sparsity_centroid(&[1.0, 0.0, 0.0, 1.0]), Some(1.5));
        assert_eq!(sparsity_centroid(&[0.0, 0.0]), None);
        assert_eq!(mass_ratio(&[0.2, 0.4]), 2.0);
        assert_eq!(mass_ratio(&[0.0, 0.4]), f64::INFINITY);
    }
}
