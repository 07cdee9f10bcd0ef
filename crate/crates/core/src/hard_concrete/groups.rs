//! Tiling of maskable matrices into mask groups.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::MaskError;
use crate::autodiff::{Graph, Tensor, Var};

/// Role of a maskable matrix inside a transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MatrixKind {
    Query,
    Key,
    Value,
    Output,
    FeedForwardIn,
    FeedForwardOut,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 6] = [
        MatrixKind::Query,
        MatrixKind::Key,
        MatrixKind::Value,
        MatrixKind::Output,
        MatrixKind::FeedForwardIn,
        MatrixKind::FeedForwardOut,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            MatrixKind::Query => "q",
            MatrixKind::Key => "k",
            MatrixKind::Value => "v",
            MatrixKind::Output => "o",
            MatrixKind::FeedForwardIn => "ff1",
            MatrixKind::FeedForwardOut => "ff2",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.short_name() == s)
    }

    pub fn is_attention(self) -> bool {
        matches!(self, MatrixKind::Query | MatrixKind::Key | MatrixKind::Value | MatrixKind::Output)
    }
}

/// One entry of the maskable registry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskableMatrix {
    pub name: String,
    pub layer: usize,
    pub kind: MatrixKind,
    pub rows: usize,
    pub cols: usize,
}

/// How matrices are tiled into mask groups.
///
/// The default ladder runs from one mask per matrix to one mask per weight:
/// whole matrices, 4/16/32 column tiles, single columns (neurons), columns
/// split into 4/16/32 row tiles, and single weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Granularity {
    Matrix,
    /// `k` column tiles per matrix, each spanning all rows.
    ColumnTiles(usize),
    /// One mask per column (output neuron).
    Neuron,
    /// Each column split into `k` row tiles.
    RowTiles(usize),
    Weight,
    /// The same `(rows_per_mask, cols_per_mask)` tile for every matrix.
    Fixed(usize, usize),
}

impl Granularity {
    /// Coarsest to finest.
    pub fn ladder() -> Vec<Granularity> {
        vec![
            Granularity::Matrix,
            Granularity::ColumnTiles(4),
            Granularity::ColumnTiles(16),
            Granularity::ColumnTiles(32),
            Granularity::Neuron,
            Granularity::RowTiles(4),
            Granularity::RowTiles(16),
            Granularity::RowTiles(32),
            Granularity::Weight,
        ]
    }

    /// `(rows_per_mask, cols_per_mask)` for a `rows × cols` matrix, before
    /// the divisibility check.
    pub fn tile(self, rows: usize, cols: usize) -> (usize, usize) {
        match self {
            Granularity::Matrix => (rows, cols),
            Granularity::ColumnTiles(k) => (rows, cols / k.max(1)),
            Granularity::Neuron => (rows, 1),
            Granularity::RowTiles(k) => (rows / k.max(1), 1),
            Granularity::Weight => (1, 1),
            Granularity::Fixed(r, c) => (r, c),
        }
    }

    /// Per-matrix tiles for `registry`, checking divisibility.
    pub fn spec_for(self, registry: &[MaskableMatrix]) -> Result<GranularitySpec, MaskError> {
        let tiles = registry
            .iter()
            .map(|m| {
                let (r, c) = self.tile(m.rows, m.cols);
                let ok = match self {
                    Granularity::ColumnTiles(k) => k > 0 && m.cols % k == 0,
                    Granularity::RowTiles(k) => k > 0 && m.rows % k == 0,
                    _ => true,
                };
                if !ok || r == 0 || c == 0 || m.rows % r != 0 || m.cols % c != 0 {
                    return Err(MaskError::Tiling {
                        name: m.name.clone(),
                        rows: m.rows,
                        cols: m.cols,
                        rows_per_mask: r,
                        cols_per_mask: c,
                    });
                }
                Ok((r, c))
            })
            .collect::<Result<_, _>>()?;
        Ok(GranularitySpec { granularity: self, tiles })
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::Matrix => write!(f, "matrix"),
            Granularity::ColumnTiles(k) => write!(f, "cols:{k}"),
            Granularity::Neuron => write!(f, "neuron"),
            Granularity::RowTiles(k) => write!(f, "rows:{k}"),
            Granularity::Weight => write!(f, "weight"),
            Granularity::Fixed(r, c) => write!(f, "{r}x{c}"),
        }
    }
}

impl FromStr for Granularity {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MaskError::UnknownGranularity(s.to_string());
        let num = |t: &str| t.parse::<usize>().ok().filter(|&k| k > 0).ok_or_else(bad);
        match s {
            "matrix" => Ok(Granularity::Matrix),
            "neuron" => Ok(Granularity::Neuron),
            "weight" => Ok(Granularity::Weight),
            _ => {
                if let Some(k) = s.strip_prefix("cols:") {
                    Ok(Granularity::ColumnTiles(num(k)?))
                } else if let Some(k) = s.strip_prefix("rows:") {
                    Ok(Granularity::RowTiles(num(k)?))
                } else if let Some((r, c)) = s.split_once('x') {
                    Ok(Granularity::Fixed(num(r)?, num(c)?))
                } else {
                    Err(bad())
                }
            }
        }
    }
}

/// Per-matrix `(rows_per_mask, cols_per_mask)` tiles, aligned with a registry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GranularitySpec {
    pub granularity: Granularity,
    pub tiles: Vec<(usize, usize)>,
}

/// Group assignment for one matrix: a contiguous tiling whose tiles are
/// numbered row-major starting at `offset`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatrixGroups {
    pub matrix: MaskableMatrix,
    pub rows_per_mask: usize,
    pub cols_per_mask: usize,
    pub offset: usize,
}

impl MatrixGroups {
    pub fn count(&self) -> usize {
        (self.matrix.rows / self.rows_per_mask) * (self.matrix.cols / self.cols_per_mask)
    }

    pub fn group_of(&self, row: usize, col: usize) -> usize {
        let tiles_per_row = self.matrix.cols / self.cols_per_mask;
        self.offset + (row / self.rows_per_mask) * tiles_per_row + col / self.cols_per_mask
    }

    fn index_map(&self) -> Arc<[usize]> {
        let (rows, cols) = (self.matrix.rows, self.matrix.cols);
        (0..rows * cols).map(|i| self.group_of(i / cols, i % cols)).collect::<Vec<_>>().into()
    }
}

/// The mapping from every maskable weight coordinate to its group.
#[derive(Clone, Debug)]
pub struct GroupLayout {
    pub granularity: Granularity,
    pub matrices: Vec<MatrixGroups>,
    index_maps: Vec<Arc<[usize]>>,
    count: usize,
}

impl PartialEq for GroupLayout {
    fn eq(&self, other: &Self) -> bool {
        self.granularity == other.granularity && self.matrices == other.matrices
    }
}

impl GroupLayout {
    /// Number of mask groups (the length of θ).
    pub fn group_count(&self) -> usize {
        self.count
    }

    pub fn registry(&self) -> impl Iterator<Item = &MaskableMatrix> {
        self.matrices.iter().map(|m| &m.matrix)
    }

    /// Dense weight → group index map for matrix `i`, row-major.
    pub fn index_map(&self, i: usize) -> &Arc<[usize]> {
        &self.index_maps[i]
    }

    pub fn layers(&self) -> usize {
        self.matrices.iter().map(|m| m.matrix.layer + 1).max().unwrap_or(0)
    }

    pub(crate) fn from_groups(granularity: Granularity, matrices: Vec<MatrixGroups>) -> Result<Self, MaskError> {
        let mut expected = 0;
        for m in &matrices {
            let (r, c) = (m.rows_per_mask, m.cols_per_mask);
            if r == 0 || c == 0 || m.matrix.rows % r != 0 || m.matrix.cols % c != 0 || m.offset != expected {
                return Err(MaskError::Layout(format!("inconsistent groups for {}", m.matrix.name)));
            }
            expected += m.count();
        }
        let index_maps = matrices.iter().map(MatrixGroups::index_map).collect();
        Ok(Self { granularity, matrices, index_maps, count: expected })
    }
}

/// Tiles every registered matrix per `spec`, numbering groups contiguously
/// in registry order.
pub fn build_groups(registry: &[MaskableMatrix], spec: &GranularitySpec) -> Result<GroupLayout, MaskError> {
    if spec.tiles.len() != registry.len() {
        return Err(MaskError::Layout(format!("{} tiles for {} matrices", spec.tiles.len(), registry.len())));
    }
    let mut offset = 0;
    let mut matrices = Vec::with_capacity(registry.len());
    for (m, &(r, c)) in registry.iter().zip(&spec.tiles) {
        if r == 0 || c == 0 || m.rows % r != 0 || m.cols % c != 0 {
            return Err(MaskError::Tiling {
                name: m.name.clone(),
                rows: m.rows,
                cols: m.cols,
                rows_per_mask: r,
                cols_per_mask: c,
            });
        }
        let groups = MatrixGroups { matrix: m.clone(), rows_per_mask: r, cols_per_mask: c, offset };
        offset += groups.count();
        matrices.push(groups);
    }
    GroupLayout::from_groups(spec.granularity, matrices)
}

/// `φ * Z` on the graph: each registered matrix is multiplied elementwise by
/// its group values gathered from `z`.
pub fn apply_mask(g: &mut Graph, weights: &[Var], z: Var, layout: &GroupLayout) -> Result<Vec<Var>, MaskError> {
    if weights.len() != layout.matrices.len() {
        return Err(MaskError::Layout(format!(
            "{} weights for {} registered matrices",
            weights.len(),
            layout.matrices.len()
        )));
    }
    if g.value(z).len() != layout.group_count() {
        return Err(MaskError::Layout(format!(
            "mask has {} values, layout has {} groups",
            g.value(z).len(),
            layout.group_count()
        )));
    }
    weights
        .iter()
        .zip(&layout.matrices)
        .enumerate()
        .map(|(i, (&w, m))| {
            let shape = g.value(w).shape().to_vec();
            if shape != [m.matrix.rows, m.matrix.cols] {
                return Err(MaskError::Layout(format!("{} has shape {shape:?}", m.matrix.name)));
            }
            let expanded = g.gather(z, layout.index_map(i).clone(), &shape)?;
            Ok(g.mul(w, expanded)?)
        })
        .collect()
}

/// Expands group values into one dense per-weight mask per matrix.
pub fn dense_masks(layout: &GroupLayout, z: &[f64]) -> Vec<Tensor> {
    layout
        .matrices
        .iter()
        .map(|m| {
            let (rows, cols) = (m.matrix.rows, m.matrix.cols);
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    data.push(z[m.group_of(r, c)]);
                }
            }
            Tensor::matrix(rows, cols, data).expect("dense mask shape")
        })
        .collect()
}
