//! The experiment harness: factorial sweeps with deterministic aggregation,
//! matched-seed counterfactual pairs, and cross-metric correlation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BehaviorParams, ExperimentConfig, PolicyTag, TrainConfig};
use crate::metrics::METRIC_COLUMNS;
use crate::rng::{stream, StreamClass};
use crate::sim::{run, Trajectory};
use crate::stats::{self, StatsError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("empty grid or seed list")]
    EmptyInput,
    #[error("unknown config field '{0}'")]
    UnknownField(String),
    #[error("bad value '{value}' for field '{field}'")]
    BadValue { field: String, value: String },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// One executed sweep cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub config_index: usize,
    pub seed: u64,
    pub outcome: Result<Trajectory, String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub configs: Vec<ExperimentConfig>,
    pub seeds: Vec<u64>,
    /// Ordered by (config index, seed index), independent of parallelism.
    pub cells: Vec<CellResult>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AggregateRow {
    pub config_index: usize,
    pub mean: f64,
    pub std: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
}

impl SweepResult {
    pub fn failed_cells(&self) -> Vec<(usize, u64, String)> {
        self.cells
            .iter()
            .filter_map(|c| {
                c.outcome.as_ref().err().map(|e| (c.config_index, c.seed, e.clone()))
            })
            .collect()
    }

    /// Final-step values of `metric` for one config, over seeds, non-finite
    /// values dropped.
    pub fn final_values(&self, config_index: usize, metric: &str) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.config_index == config_index)
            .filter_map(|c| c.outcome.as_ref().ok())
            .filter_map(|t| t.last().and_then(|s| s.value(metric)))
            .filter(|v| v.is_finite())
            .collect()
    }

    /// Per-config aggregate of final-step values with a seeded bootstrap CI.
    pub fn aggregate(&self, metric: &str, stats_seed: u64) -> Vec<AggregateRow> {
        let metric_idx =
            METRIC_COLUMNS.iter().position(|m| *m == metric).unwrap_or(usize::MAX) as u64;
        (0..self.configs.len())
            .map(|ci| {
                let vals = self.final_values(ci, metric);
                if vals.len() < 2 {
                    let m = if vals.is_empty() { f64::NAN } else { vals[0] };
                    return AggregateRow {
                        config_index: ci,
                        mean: m,
                        std: f64::NAN,
                        ci_lo: f64::NAN,
                        ci_hi: f64::NAN,
                        n: vals.len(),
                    };
                }
                let mut rng =
                    stream(stats_seed, StreamClass::Stats, ci as u64, metric_idx);
                let (lo, hi) = stats::bootstrap_ci(&vals, 1000, 0.95, &mut rng)
                    .expect("len checked above");
                AggregateRow {
                    config_index: ci,
                    mean: stats::mean(&vals),
                    std: stats::std_dev(&vals),
                    ci_lo: lo,
                    ci_hi: hi,
                    n: vals.len(),
                }
            })
            .collect()
    }
}

fn run_cell(
    config: &ExperimentConfig,
    behavior: &BehaviorParams,
    training: &TrainConfig,
    seed: u64,
) -> Result<Trajectory, String> {
    run(config, behavior, training, seed).map_err(|e| e.to_string())
}

/// Execute every (config, seed) cell. Results are identical for any `jobs`
/// value: cells land in a pre-indexed slot and aggregation is an ordered
/// fold.
pub fn run_sweep(
    grid: &[ExperimentConfig],
    behavior: &BehaviorParams,
    training: &TrainConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<SweepResult, ExperimentError> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(ExperimentError::EmptyInput);
    }
    let tasks: Vec<(usize, u64)> = grid
        .iter()
        .enumerate()
        .flat_map(|(ci, _)| seeds.iter().map(move |&s| (ci, s)))
        .collect();

    let cells: Vec<CellResult> = execute(&tasks, jobs, |&(ci, seed)| CellResult {
        config_index: ci,
        seed,
        outcome: run_cell(&grid[ci], behavior, training, seed),
    });

    Ok(SweepResult { configs: grid.to_vec(), seeds: seeds.to_vec(), cells })
}

#[cfg(feature = "parallel")]
fn execute<T: Sync, R: Send>(
    tasks: &[T],
    jobs: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    if jobs <= 1 {
        return tasks.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool");
    pool.install(|| {
        use rayon::prelude::*;
        tasks.par_iter().map(|t| f(t)).collect()
    })
}

#[cfg(not(feature = "parallel"))]
fn execute<T: Sync, R: Send>(
    tasks: &[T],
    _jobs: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    tasks.iter().map(f).collect()
}

/// Config fields a counterfactual can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VaryField {
    NUsers,
    ContentRatio,
    AlphaEnthusiast,
    TActivate,
    RExplore,
    Policy,
    Steps,
}

impl VaryField {
    pub fn parse(name: &str) -> Result<Self, ExperimentError> {
        Ok(match name {
            "n_users" => VaryField::NUsers,
            "content_ratio" => VaryField::ContentRatio,
            "alpha_enthusiast" => VaryField::AlphaEnthusiast,
            "t_activate" => VaryField::TActivate,
            "r_explore" => VaryField::RExplore,
            "policy" => VaryField::Policy,
            "steps" => VaryField::Steps,
            other => return Err(ExperimentError::UnknownField(other.to_string())),
        })
    }

    pub fn apply(
        &self,
        base: &ExperimentConfig,
        value: &str,
    ) -> Result<ExperimentConfig, ExperimentError> {
        let mut c = base.clone();
        let bad = || ExperimentError::BadValue {
            field: format!("{self:?}"),
            value: value.to_string(),
        };
        match self {
            VaryField::NUsers => c.n_users = value.parse().map_err(|_| bad())?,
            VaryField::ContentRatio => c.content_ratio = value.parse().map_err(|_| bad())?,
            VaryField::AlphaEnthusiast => {
                c.alpha_enthusiast = value.parse().map_err(|_| bad())?
            }
            VaryField::TActivate => c.t_activate = value.parse().map_err(|_| bad())?,
            VaryField::RExplore => c.r_explore = value.parse().map_err(|_| bad())?,
            VaryField::Steps => c.steps = value.parse().map_err(|_| bad())?,
            VaryField::Policy => {
                c.policy.tag = match value {
                    "none" => PolicyTag::None,
                    "random" => PolicyTag::Random,
                    "content_similarity" => PolicyTag::ContentSimilarity,
                    "gat" => PolicyTag::Gat,
                    _ => return Err(bad()),
                }
            }
        }
        Ok(c)
    }
}

/// Matched-seed counterfactual: one trajectory per value, same seed,
/// everything else fixed.
#[derive(Debug, Clone)]
pub struct CounterfactualPair {
    pub values: Vec<String>,
    pub trajectories: Vec<Trajectory>,
}

impl CounterfactualPair {
    /// Per-step differences `trajectories[a] - trajectories[b]` for a metric,
    /// truncated to the shorter run.
    pub fn difference(&self, a: usize, b: usize, metric: &str) -> Vec<f64> {
        let xa = self.trajectories[a].series(metric);
        let xb = self.trajectories[b].series(metric);
        xa.iter().zip(xb.iter()).map(|(x, y)| x - y).collect()
    }
}

pub fn matched_counterfactual(
    base: &ExperimentConfig,
    behavior: &BehaviorParams,
    training: &TrainConfig,
    vary: VaryField,
    values: &[String],
    seed: u64,
) -> Result<CounterfactualPair, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::EmptyInput);
    }
    let mut trajectories = Vec::with_capacity(values.len());
    for v in values {
        let config = vary.apply(base, v)?;
        let t = run(&config, behavior, training, seed)
            .map_err(|e| ExperimentError::BadValue { field: format!("{vary:?}"), value: e.to_string() })?;
        trajectories.push(t);
    }
    Ok(CounterfactualPair { values: values.to_vec(), trajectories })
}

/// Pearson correlation matrix across metrics, computed over per-run values
/// inside a step window. Zero-variance metrics yield NaN entries.
pub fn correlation_matrix(
    sweep: &SweepResult,
    metrics: &[&str],
    window: (u32, u32),
) -> Result<Vec<Vec<f64>>, ExperimentError> {
    // One observation per (cell, step-in-window).
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); metrics.len()];
    for cell in &sweep.cells {
        let Ok(t) = &cell.outcome else { continue };
        for snap in &t.snapshots {
            if snap.step < window.0 || snap.step > window.1 {
                continue;
            }
            for (k, m) in metrics.iter().enumerate() {
                columns[k].push(snap.value(m).unwrap_or(f64::NAN));
            }
        }
    }
    if columns.first().is_none_or(|c| c.len() < 3) {
        return Err(ExperimentError::EmptyInput);
    }
    let k = metrics.len();
    let mut out = vec![vec![f64::NAN; k]; k];
    for i in 0..k {
        out[i][i] = 1.0;
        for j in (i + 1)..k {
            // Pairwise-complete observations.
            let pairs: (Vec<f64>, Vec<f64>) = columns[i]
                .iter()
                .zip(&columns[j])
                .filter(|(a, b)| a.is_finite() && b.is_finite())
                .map(|(&a, &b)| (a, b))
                .unzip();
            let r = if pairs.0.len() >= 3 {
                stats::pearson(&pairs.0, &pairs.1).unwrap_or(f64::NAN)
            } else {
                f64::NAN
            };
            out[i][j] = r;
            out[j][i] = r;
        }
    }
    Ok(out)
}
