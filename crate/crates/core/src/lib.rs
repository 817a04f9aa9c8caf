//! Agent-based simulator of recommendation/network co-evolution.
//!
//! Agents produce and consume content in a shared topic space, form follow
//! ties by homophily, and a periodically retrained graph-attention
//! recommender reshapes exposure in a closed loop. The crate also ships the
//! experiment harness (factorial sweeps, matched-seed counterfactuals,
//! bootstrap/t-test statistics) and post-hoc analyses (convergence
//! detection, mean-field Jacobian stability, finite-size scaling fits,
//! Kolmogorov-Smirnov comparison).

pub mod analysis;
pub mod behavior;
pub mod config;
pub mod experiments;
pub mod gat;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod recommender;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod types;

pub use config::{
    BehaviorParams, ConfigError, ExperimentConfig, PolicyTag, RecommenderPolicy, TrainConfig,
};
pub use metrics::MetricsSnapshot;
pub use sim::{churn_update, init_platform, run, run_with_state, step, PlatformState, Trajectory};
