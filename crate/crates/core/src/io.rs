//! File formats: trajectory CSV (fixed column order), TOML run
//! specs/manifests (fail-closed: unknown keys are errors), sweep grids,
//! seed lists, and GAT checkpoints.
//!
//! Float formatting uses Rust's shortest round-trip representation, so a
//! rerun with the same inputs produces byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BehaviorParams, ExperimentConfig, TrainConfig};
use crate::experiments::{AggregateRow, SweepResult};
use crate::gat::{GatDims, GatModel};
use crate::metrics::METRIC_COLUMNS;
use crate::sim::Trajectory;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const SCHEMA_VERSION: u32 = 1;

/// A run spec: everything needed to reproduce one run. Written back verbatim
/// as the run manifest, plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub schema_version: u32,
    #[serde(default)]
    pub master_seed: Option<u64>,
    /// Seed for statistics RNG (bootstrap resampling), recorded separately.
    #[serde(default)]
    pub stats_seed: Option<u64>,
    pub config: ExperimentConfig,
    #[serde(default)]
    pub behavior: BehaviorParams,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub code_version: String,
    pub command: String,
    #[serde(default)]
    pub outputs: Vec<String>,
}

impl RunSpec {
    pub fn new(config: ExperimentConfig) -> Self {
        RunSpec {
            schema_version: SCHEMA_VERSION,
            master_seed: None,
            stats_seed: None,
            config,
            behavior: BehaviorParams::default(),
            training: TrainConfig::default(),
            provenance: None,
        }
    }

    pub fn from_toml_str(text: &str, path: &str) -> Result<Self, IoError> {
        let spec: RunSpec = toml::from_str(text)
            .map_err(|e| IoError::Parse { path: path.to_string(), message: e.to_string() })?;
        if spec.schema_version != SCHEMA_VERSION {
            return Err(IoError::Parse {
                path: path.to_string(),
                message: format!(
                    "unsupported schema_version {} (expected {})",
                    spec.schema_version, SCHEMA_VERSION
                ),
            });
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| IoError::Read { path: path.display().to_string(), source: e })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}

/// Sweep grid: shared behavior/training sections plus one config per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub schema_version: u32,
    #[serde(default)]
    pub behavior: BehaviorParams,
    #[serde(default)]
    pub training: TrainConfig,
    pub cells: Vec<ExperimentConfig>,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| IoError::Read { path: path.display().to_string(), source: e })?;
        let grid: GridSpec = toml::from_str(&text)
            .map_err(|e| IoError::Parse { path: path.display().to_string(), message: e.to_string() })?;
        if grid.schema_version != SCHEMA_VERSION {
            return Err(IoError::Parse {
                path: path.display().to_string(),
                message: format!("unsupported schema_version {}", grid.schema_version),
            });
        }
        Ok(grid)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("grid serializes")
    }
}

/// Seed list: one integer per line; `#` starts a comment.
pub fn parse_seeds(text: &str, path: &str) -> Result<Vec<u64>, IoError> {
    let mut seeds = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let seed: u64 = line.parse().map_err(|_| IoError::Parse {
            path: path.to_string(),
            message: format!("line {}: not a seed: '{line}'", lineno + 1),
        })?;
        seeds.push(seed);
    }
    if seeds.is_empty() {
        return Err(IoError::Parse { path: path.to_string(), message: "no seeds".into() });
    }
    Ok(seeds)
}

pub fn load_seeds(path: &Path) -> Result<Vec<u64>, IoError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| IoError::Read { path: path.display().to_string(), source: e })?;
    parse_seeds(&text, &path.display().to_string())
}

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

/// One row per step, fixed column order.
pub fn trajectory_csv(trajectory: &Trajectory) -> String {
    let mut out = String::new();
    out.push_str("step");
    for c in METRIC_COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for snap in &trajectory.snapshots {
        let _ = write!(out, "{}", snap.step);
        for v in snap.values() {
            out.push(',');
            out.push_str(&fmt_float(v));
        }
        out.push('\n');
    }
    out
}

/// Parse a trajectory CSV produced by [`trajectory_csv`].
pub fn parse_trajectory_csv(text: &str, path: &str) -> Result<Trajectory, IoError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| IoError::Parse {
        path: path.to_string(),
        message: "empty file".into(),
    })?;
    let expected: Vec<&str> =
        std::iter::once("step").chain(METRIC_COLUMNS.iter().copied()).collect();
    let got: Vec<&str> = header.split(',').collect();
    if got != expected {
        return Err(IoError::Parse {
            path: path.to_string(),
            message: format!("unexpected header: {header}"),
        });
    }
    let mut snapshots = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected.len() {
            return Err(IoError::Parse {
                path: path.to_string(),
                message: format!("line {}: wrong field count", lineno + 2),
            });
        }
        let parse = |s: &str| -> f64 {
            if s == "nan" {
                f64::NAN
            } else {
                s.parse().unwrap_or(f64::NAN)
            }
        };
        let vals: Vec<f64> = fields[1..].iter().map(|s| parse(s)).collect();
        snapshots.push(crate::metrics::MetricsSnapshot {
            step: fields[0].parse().map_err(|_| IoError::Parse {
                path: path.to_string(),
                message: format!("line {}: bad step", lineno + 2),
            })?,
            density: vals[0],
            local_clustering_mean: vals[1],
            transitivity: vals[2],
            modularity: vals[3],
            avg_path_length: vals[4],
            reciprocity: vals[5],
            assortativity: vals[6],
            topic_entropy: vals[7],
            retention: vals[8],
            engagement_rate: vals[9],
            content_spread: vals[10],
            viral_coefficient_mean: vals[11],
            precision_at_10: vals[12],
            satisfaction_mean: vals[13],
        });
    }
    Ok(Trajectory { snapshots })
}

/// Long-format sweep CSV: one row per (cell, step, metric).
pub fn sweep_long_csv(sweep: &SweepResult) -> String {
    let mut out = String::from(
        "config_index,n_users,content_ratio,alpha_enthusiast,t_activate,r_explore,policy,seed,step,metric,value\n",
    );
    for cell in &sweep.cells {
        let cfg = &sweep.configs[cell.config_index];
        let policy = policy_name(cfg);
        let Ok(t) = &cell.outcome else { continue };
        for snap in &t.snapshots {
            for (name, value) in METRIC_COLUMNS.iter().zip(snap.values()) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    cell.config_index,
                    cfg.n_users,
                    fmt_float(cfg.content_ratio),
                    fmt_float(cfg.alpha_enthusiast),
                    cfg.t_activate,
                    fmt_float(cfg.r_explore),
                    policy,
                    cell.seed,
                    snap.step,
                    name,
                    fmt_float(value),
                );
            }
        }
    }
    out
}

/// Aggregate sweep CSV: one row per (config, metric).
pub fn sweep_aggregate_csv(sweep: &SweepResult, stats_seed: u64) -> String {
    let mut out = String::from(
        "config_index,n_users,content_ratio,alpha_enthusiast,t_activate,r_explore,policy,metric,mean,std,ci_lo,ci_hi,n\n",
    );
    for metric in METRIC_COLUMNS {
        let rows: Vec<AggregateRow> = sweep.aggregate(metric, stats_seed);
        for row in rows {
            let cfg = &sweep.configs[row.config_index];
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                row.config_index,
                cfg.n_users,
                fmt_float(cfg.content_ratio),
                fmt_float(cfg.alpha_enthusiast),
                cfg.t_activate,
                fmt_float(cfg.r_explore),
                policy_name(cfg),
                metric,
                fmt_float(row.mean),
                fmt_float(row.std),
                fmt_float(row.ci_lo),
                fmt_float(row.ci_hi),
                row.n,
            );
        }
    }
    out
}

fn policy_name(cfg: &ExperimentConfig) -> &'static str {
    use crate::config::PolicyTag::*;
    match (cfg.policy.tag, cfg.policy.frozen) {
        (None, _) => "none",
        (Random, _) => "random",
        (ContentSimilarity, _) => "content_similarity",
        (Gat, false) => "gat",
        (Gat, true) => "gat_frozen",
    }
}

/// Single-column data file (one float per line, `#` comments) for the KS
/// comparison command.
pub fn parse_column(text: &str, path: &str) -> Result<Vec<f64>, IoError> {
    let mut vals = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| IoError::Parse {
            path: path.to_string(),
            message: format!("line {}: not a number: '{line}'", lineno + 1),
        })?;
        vals.push(v);
    }
    Ok(vals)
}

/// Text checkpoint: a header line, shape metadata, then one parameter per
/// line in shortest round-trip form (bit-exact on reload).
pub fn model_to_checkpoint(model: &GatModel) -> String {
    let mut out = String::new();
    let d = model.dims;
    let _ = writeln!(out, "gat-checkpoint v1");
    let _ = writeln!(out, "in_dim {} heads {} d1 {} d2 {}", d.in_dim, d.heads, d.d1, d.d2);
    let _ = writeln!(
        out,
        "last_trained_step {}",
        model.last_trained_step.map_or(-1i64, |s| s as i64)
    );
    let _ = writeln!(out, "validation_auc {}", fmt_float(model.validation_auc));
    let _ = writeln!(out, "params {}", model.theta.len());
    for v in &model.theta {
        let _ = writeln!(out, "{v}");
    }
    out
}

pub fn model_from_checkpoint(text: &str) -> Result<GatModel, IoError> {
    let err = |m: &str| IoError::Parse { path: "checkpoint".into(), message: m.to_string() };
    let mut lines = text.lines();
    if lines.next() != Some("gat-checkpoint v1") {
        return Err(err("bad magic"));
    }
    let shape: Vec<&str> =
        lines.next().ok_or_else(|| err("missing shape"))?.split_whitespace().collect();
    if shape.len() != 8 || shape[0] != "in_dim" {
        return Err(err("bad shape line"));
    }
    let parse_usize =
        |s: &str| -> Result<usize, IoError> { s.parse().map_err(|_| err("bad shape value")) };
    let dims = GatDims {
        in_dim: parse_usize(shape[1])?,
        heads: parse_usize(shape[3])?,
        d1: parse_usize(shape[5])?,
        d2: parse_usize(shape[7])?,
    };
    let last: i64 = lines
        .next()
        .and_then(|l| l.strip_prefix("last_trained_step "))
        .ok_or_else(|| err("missing last_trained_step"))?
        .parse()
        .map_err(|_| err("bad last_trained_step"))?;
    let auc_line = lines
        .next()
        .and_then(|l| l.strip_prefix("validation_auc "))
        .ok_or_else(|| err("missing validation_auc"))?;
    let validation_auc =
        if auc_line == "nan" { f64::NAN } else { auc_line.parse().map_err(|_| err("bad auc"))? };
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("params "))
        .ok_or_else(|| err("missing params"))?
        .parse()
        .map_err(|_| err("bad param count"))?;
    if count != dims.param_count() {
        return Err(err("param count does not match dims"));
    }
    let mut theta = Vec::with_capacity(count);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        theta.push(line.parse::<f64>().map_err(|_| err("bad parameter value"))?);
    }
    if theta.len() != count {
        return Err(err("truncated parameter list"));
    }
    Ok(GatModel {
        dims,
        theta,
        last_trained_step: if last < 0 { None } else { Some(last as u32) },
        validation_auc,
    })
}
