use serde::{Deserialize, Serialize};

use super::{run_probe, Condition, ExperimentConfig, HarnessError, RunResult, TaskData};
use crate::encoder::Encoder;
use crate::hard_concrete::Granularity;
use crate::heads::ProbeMode;

/// Regularization strengths swept for the λ table.
pub const LAMBDA_LADDER: [f64; 4] = [1.0, 5.0, 25.0, 125.0];

/// Runs `f` over `items` on at most `jobs` threads; results keep input
/// order, so aggregation does not depend on scheduling.
pub fn run_all<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>, HarnessError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, HarnessError> + Sync + Send,
{
    use rayon::prelude::*;
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// One point of the accuracy-complexity table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub kind: ProbeMode,
    pub setting: String,
    pub bits_lower: f64,
    pub bits_upper: f64,
    pub metric: f64,
}

/// Runs every granularity as a subnetwork probe and every rank as an MLP-1
/// probe on the pre-trained weights, starting from `template` for all other
/// settings. Rows are sorted by kind, then by bits.
pub fn pareto_sweep(
    template: &ExperimentConfig,
    data: &TaskData,
    pretrained: &Encoder,
    granularities: &[Granularity],
    ranks: &[usize],
    jobs: usize,
) -> Result<(Vec<ParetoRow>, Vec<RunResult>), HarnessError> {
    let mut configs = Vec::with_capacity(granularities.len() + ranks.len());
    for &g in granularities {
        let mut c = ExperimentConfig { mode: ProbeMode::Subnetwork, granularity: Some(g), rank: None, ..template.clone() };
        c.condition = Condition::Pretrained;
        configs.push(c);
    }
    for &r in ranks {
        let mut c = ExperimentConfig { mode: ProbeMode::Mlp1, granularity: None, rank: Some(r), ..template.clone() };
        c.condition = Condition::Pretrained;
        configs.push(c);
    }
    let results = run_all(&configs, jobs, |c| Ok(run_probe(c, data, pretrained)?.result))?;
    let mut rows: Vec<ParetoRow> = results
        .iter()
        .map(|r| ParetoRow {
            kind: r.config.mode,
            setting: r.config.setting(),
            bits_lower: r.bits_lower,
            bits_upper: r.bits_upper,
            metric: r.final_metric,
        })
        .collect();
    let kind_order = |m: ProbeMode| ProbeMode::ALL.iter().position(|&x| x == m);
    rows.sort_by(|a, b| kind_order(a.kind).cmp(&kind_order(b.kind)).then(a.bits_lower.total_cmp(&b.bits_lower)));
    Ok((rows, results))
}

/// A subnetwork-versus-MLP-1 comparison at one MLP-1 budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedComparison {
    pub mlp1_setting: String,
    /// The optimistic (1 bit per parameter) MLP-1 cost.
    pub bits: f64,
    pub mlp1_metric: f64,
    /// Best subnetwork point costing at most `bits`.
    pub subnetwork_setting: String,
    pub subnetwork_bits: f64,
    pub subnetwork_metric: f64,
}

/// For each MLP-1 point (coarsest first), the best subnetwork metric at
/// matched-or-lower bits. MLP-1 points cheaper than every subnetwork point
/// have no comparison and are skipped.
pub fn matched_comparisons(rows: &[ParetoRow]) -> Vec<MatchedComparison> {
    let mut mlp: Vec<&ParetoRow> = rows.iter().filter(|r| r.kind == ProbeMode::Mlp1).collect();
    mlp.sort_by(|a, b| a.bits_lower.total_cmp(&b.bits_lower));
    mlp.into_iter()
        .filter_map(|m| {
            let best = rows
                .iter()
                .filter(|r| r.kind == ProbeMode::Subnetwork && r.bits_upper <= m.bits_lower)
                .max_by(|a, b| a.metric.total_cmp(&b.metric).then(b.bits_upper.total_cmp(&a.bits_upper)))?;
            Some(MatchedComparison {
                mlp1_setting: m.setting.clone(),
                bits: m.bits_lower,
                mlp1_metric: m.metric,
                subnetwork_setting: best.setting.clone(),
                subnetwork_bits: best.bits_upper,
                subnetwork_metric: best.metric,
            })
        })
        .collect()
}

/// The chosen regularization strength; `fallback` marks that no candidate
/// reached the threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaChoice {
    pub lambda: f64,
    pub fallback: bool,
}

/// Largest λ whose metric is at least 90% (relative) of fine-tuning; λ = 1
/// with the fallback flag when none qualifies.
pub fn select_lambda_max(results: &[(f64, f64)], finetune_metric: f64) -> LambdaChoice {
    results
        .iter()
        .filter(|(_, m)| *m >= 0.9 * finetune_metric)
        .map(|&(l, _)| l)
        .max_by(f64::total_cmp)
        .map_or(LambdaChoice { lambda: 1.0, fallback: true }, |lambda| LambdaChoice { lambda, fallback: false })
}

/// Subnetwork runs over every `(condition, λ)` pair, conditions outer.
pub fn lambda_sweep(
    template: &ExperimentConfig,
    data: &TaskData,
    conditions: &[(Condition, &Encoder)],
    lambdas: &[f64],
    jobs: usize,
) -> Result<Vec<RunResult>, HarnessError> {
    let mut jobs_list = Vec::new();
    for (i, &(condition, _)) in conditions.iter().enumerate() {
        for &lambda_max in lambdas {
            let mut c = template.clone();
            c.mode = ProbeMode::Subnetwork;
            c.granularity = c.granularity.or(Some(ExperimentConfig::DEFAULT_GRANULARITY));
            c.rank = None;
            c.condition = condition;
            c.lambda_max = lambda_max;
            jobs_list.push((i, c));
        }
    }
    run_all(&jobs_list, jobs, |(i, c)| Ok(run_probe(c, data, conditions[*i].1)?.result))
}
