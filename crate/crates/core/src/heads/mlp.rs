use super::{init_param, Bound, HeadError};
use crate::autodiff::{Graph, ParamStore, RngState, Var};
use crate::encoder::LAYER_NORM_EPS;

/// Ranks swept for the MLP-1 Pareto curve.
pub const MLP1_RANK_LADDER: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

/// One hidden layer whose `d × d` weight is factored as `down · upᵀ`
/// (both `d × r`), followed by a parameter-free layer norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp1Probe {
    pub params: ParamStore,
    pub hidden: usize,
    pub rank: usize,
}

impl Mlp1Probe {
    pub fn new(hidden: usize, rank: usize, rng: &mut RngState) -> Result<Self, HeadError> {
        if rank == 0 || hidden == 0 {
            return Err(HeadError::Config(format!("MLP-1 rank and width must be positive, got rank {rank}, width {hidden}")));
        }
        let mut params = ParamStore::new();
        init_param(&mut params, "mlp1.down", &[hidden, rank], rng)?;
        init_param(&mut params, "mlp1.up", &[hidden, rank], rng)?;
        Ok(Self { params, hidden, rank })
    }

    /// Trainable scalars: `2 · d · r`.
    pub fn parameter_count(hidden: usize, rank: usize) -> Result<usize, HeadError> {
        if rank == 0 {
            return Err(HeadError::Config("MLP-1 rank must be positive".into()));
        }
        Ok(2 * hidden * rank)
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var, HeadError> {
        let low = g.matmul(x, bound.get("mlp1.down")?)?;
        let y = g.matmul_t(low, false, bound.get("mlp1.up")?, true)?;
        let y = g.layer_norm(y, None, None, LAYER_NORM_EPS)?;
        Ok(g.relu(y)?)
    }
}
