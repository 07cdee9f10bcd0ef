//! Experiment orchestration: condition preparation, probe training, bit
//! accounting, sweeps, and layer-sparsity analysis.

mod complexity;
mod conditions;
mod output;
mod sparsity;
mod sweep;
mod task;
mod train;

pub use complexity::{complexity_bits, precision_bits, ComplexityModel};
pub use conditions::{prepare_base, prepare_condition, BaseModel};
pub use output::{
    bar_chart_svg, line_chart_svg, write_results_csv, write_results_json, write_rows_csv, write_sparsity_csv,
    write_step_log_csv,
    ResultRow, Series,
};
pub use sparsity::{layer_sparsity, mass_ratio, sparsity_centroid, LayerSparsity};
pub use sweep::{
    lambda_sweep, matched_comparisons, pareto_sweep, run_all, select_lambda_max, LambdaChoice, MatchedComparison,
    ParetoRow, LAMBDA_LADDER,
};
pub use task::{Example, Task, TaskData};
pub use train::{run_probe, StepLog, TrainedProbe};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::checkpoint::CheckpointError;
use crate::data::DataError;
use crate::encoder::EncoderError;
use crate::hard_concrete::{Granularity, MaskError};
use crate::heads::{HeadError, ProbeMode};

/// Random substreams derived from a run seed. Each consumer draws from its
/// own stream so that changing one stage never shifts another.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const RESET_ENCODER: u64 = 3;
    pub const RESET_ALL: u64 = 4;
    pub const HEAD: u64 = 5;
    pub const MASK_NOISE: u64 = 6;
    pub const DROPOUT: u64 = 7;
    pub const SHUFFLE: u64 = 8;
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("non-finite training loss at epoch {epoch}, step {step} (task {task_loss}, penalty {penalty})")]
    NonFinite { epoch: usize, step: usize, task_loss: f64, penalty: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.display().to_string(), source }
    }
}

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, ::serde::Serialize, ::serde::Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = $crate::harness::HarnessError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::ALL.iter().copied().find(|v| v.as_str() == s).ok_or_else(|| {
                    let options: Vec<&str> = Self::ALL.iter().map(|v| v.as_str()).collect();
                    $crate::harness::HarnessError::Config(format!("unknown {} {s:?} (expected one of {})", stringify!($name).to_lowercase(), options.join(", ")))
                })
            }
        }
    };
}
pub(crate) use named_enum;

named_enum! {
    /// Which weights the probe sees.
    Condition {
        Pretrained => "pretrained",
        ResetEncoder => "reset_encoder",
        ResetAll => "reset_all",
    }
}

named_enum! {
    /// Split the reported metric is computed on.
    EvalSplit {
        Dev => "dev",
        Train => "train",
    }
}

/// The recipe for one probing run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub condition: Condition,
    pub mode: ProbeMode,
    /// Set iff `mode` is subnetwork.
    #[serde(with = "granularity_serde")]
    pub granularity: Option<Granularity>,
    /// Set iff `mode` is MLP-1.
    pub rank: Option<usize>,
    pub lambda_max: f64,
    pub epochs: usize,
    pub mask_lr: f64,
    pub other_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_split: EvalSplit,
}

mod granularity_serde {
    use super::Granularity;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(g: &Option<Granularity>, s: S) -> Result<S::Ok, S::Error> {
        match g {
            Some(g) => s.serialize_some(&g.to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Granularity>, D::Error> {
        Option::<String>::deserialize(d)?.map(|s| s.parse().map_err(serde::de::Error::custom)).transpose()
    }
}

impl ExperimentConfig {
    pub const DEFAULT_LAMBDA_MAX: f64 = 1.0;
    pub const DEFAULT_EPOCHS: usize = 30;
    pub const DEFAULT_MASK_LR: f64 = 0.2;
    pub const DEFAULT_OTHER_LR: f64 = 5e-5;
    pub const DEFAULT_BATCH_SIZE: usize = 32;
    pub const DEFAULT_RANK: usize = 64;
    pub const DEFAULT_GRANULARITY: Granularity = Granularity::Neuron;

    /// Defaults for `mode`: neuron-level masks, full-rank MLP-1.
    pub fn new(task: Task, condition: Condition, mode: ProbeMode, seed: u64) -> Self {
        Self {
            task,
            condition,
            mode,
            granularity: (mode == ProbeMode::Subnetwork).then_some(Self::DEFAULT_GRANULARITY),
            rank: (mode == ProbeMode::Mlp1).then_some(Self::DEFAULT_RANK),
            lambda_max: Self::DEFAULT_LAMBDA_MAX,
            epochs: Self::DEFAULT_EPOCHS,
            mask_lr: Self::DEFAULT_MASK_LR,
            other_lr: Self::DEFAULT_OTHER_LR,
            batch_size: Self::DEFAULT_BATCH_SIZE,
            seed,
            eval_split: EvalSplit::Dev,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        match (self.mode, self.granularity.is_some(), self.rank.is_some()) {
            (ProbeMode::Subnetwork, true, false) | (ProbeMode::Mlp1, false, true) | (ProbeMode::Finetune, false, false) => {}
            (mode, g, r) => {
                return bad(format!(
                    "mode {mode} {} a granularity and {} a rank",
                    if g { "has" } else { "lacks" },
                    if r { "has" } else { "lacks" }
                ))
            }
        }
        if self.rank == Some(0) {
            return bad("rank must be positive".into());
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return bad(format!("lambda_max must be a non-negative number, got {}", self.lambda_max));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.mask_lr > 0.0 && self.other_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        Ok(())
    }

    /// Short identifier of the probe setting, e.g. `neuron` or `r8`.
    pub fn setting(&self) -> String {
        match (self.granularity, self.rank) {
            (Some(g), _) => g.to_string(),
            (_, Some(r)) => format!("r{r}"),
            _ => "full".into(),
        }
    }
}

/// How results were scored, echoed into every result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub metric: String,
    pub decoder: String,
    pub las_average: String,
    pub final_metric_rule: String,
    pub eval_split: EvalSplit,
}

/// One finished probing run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub metadata: RunMetadata,
    pub final_metric: f64,
    /// Evaluation metric after each epoch.
    pub metric_trajectory: Vec<f64>,
    /// Mean training objective per epoch.
    pub loss_trajectory: Vec<f64>,
    /// Expected L0 after each epoch (subnetwork mode only).
    pub expected_l0_trajectory: Vec<f64>,
    pub parameter_count: usize,
    pub bits_lower: f64,
    pub bits_upper: f64,
    pub sparsity: Option<LayerSparsity>,
    /// Excluded from serialized output so that repeated runs are
    /// byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunResult {
    pub fn final_expected_l0(&self) -> Option<f64> {
        self.expected_l0_trajectory.last().copied()
    }
}
