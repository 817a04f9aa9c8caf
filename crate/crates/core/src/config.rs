//! Run configuration: the factorial-grid cell, behavioral constants, and
//! recommender training settings. All defaults are overridable through the
//! run-spec file and recorded verbatim in the run manifest.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Topic-space dimensionality shared by preferences and content.
pub const TOPIC_DIM: usize = 30;

/// Steps a content item stays in the active pool after creation.
pub const CONTENT_LIFESPAN: u32 = 10;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("n_users must be at least 2 (got {0})")]
    TooFewUsers(u32),
    #[error("content_ratio must be positive (got {0})")]
    NonPositiveContentRatio(f64),
    #[error("alpha_enthusiast must lie in [0, 1] (got {0})")]
    AlphaOutOfRange(f64),
    #[error("r_explore must be positive (got {0})")]
    NonPositiveExplore(f64),
    #[error("steps must be at least 1")]
    NoSteps,
    #[error("behavior: {0}")]
    Behavior(String),
    #[error("training: {0}")]
    Training(String),
}

/// Which recommendation policy drives the post-activation feed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyTag {
    /// Chronological feed only; the recommender never runs.
    None,
    /// Uniform sample of active content.
    Random,
    /// Rank by cosine similarity between user preference and content topic.
    ContentSimilarity,
    /// Graph-attention link predictor, retrained on schedule.
    #[default]
    Gat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RecommenderPolicy {
    pub tag: PolicyTag,
    /// Freeze after the first training cycle (no-retraining ablation).
    #[serde(default)]
    pub frozen: bool,
}

impl RecommenderPolicy {
    pub fn none() -> Self {
        RecommenderPolicy { tag: PolicyTag::None, frozen: false }
    }

    pub fn gat() -> Self {
        RecommenderPolicy { tag: PolicyTag::Gat, frozen: false }
    }

    pub fn frozen_gat() -> Self {
        RecommenderPolicy { tag: PolicyTag::Gat, frozen: true }
    }

    pub fn content_similarity() -> Self {
        RecommenderPolicy { tag: PolicyTag::ContentSimilarity, frozen: false }
    }

    pub fn random() -> Self {
        RecommenderPolicy { tag: PolicyTag::Random, frozen: false }
    }
}

/// One cell of the factorial grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_users: u32,
    /// Initial content pool size as a multiple of `n_users`.
    pub content_ratio: f64,
    /// Probability that an agent is an Enthusiast.
    pub alpha_enthusiast: f64,
    /// Step at which the recommender replaces the chronological feed.
    pub t_activate: u32,
    /// Exploration rate; feed sampling temperature is `1 / r_explore`.
    pub r_explore: f64,
    #[serde(default)]
    pub policy: RecommenderPolicy,
    #[serde(default = "default_steps")]
    pub steps: u32,
}

fn default_steps() -> u32 {
    50
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_users: 100,
            content_ratio: 5.0,
            alpha_enthusiast: 0.5,
            t_activate: 25,
            r_explore: 0.2,
            policy: RecommenderPolicy::gat(),
            steps: 50,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_users < 2 {
            return Err(ConfigError::TooFewUsers(self.n_users));
        }
        if !(self.content_ratio > 0.0) {
            return Err(ConfigError::NonPositiveContentRatio(self.content_ratio));
        }
        if !(0.0..=1.0).contains(&self.alpha_enthusiast) {
            return Err(ConfigError::AlphaOutOfRange(self.alpha_enthusiast));
        }
        if !(self.r_explore > 0.0) {
            return Err(ConfigError::NonPositiveExplore(self.r_explore));
        }
        if self.steps == 0 {
            return Err(ConfigError::NoSteps);
        }
        Ok(())
    }
}

/// Per-user-type scalar (Casual, Enthusiast).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypedRate {
    pub casual: f64,
    pub enthusiast: f64,
}

impl TypedRate {
    pub fn uniform(v: f64) -> Self {
        TypedRate { casual: v, enthusiast: v }
    }
}

/// Behavioral constants. Field defaults match the calibrated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorParams {
    /// Neutrality threshold: content at this similarity leaves satisfaction unchanged.
    pub tau: f64,
    /// Sensitivity to misaligned content (reactance when above `beta_plus`).
    pub beta_minus: TypedRate,
    /// Sensitivity to aligned content.
    pub beta_plus: TypedRate,
    /// Logistic coefficients of the follow probability: intercept, similarity, engagement.
    pub gamma: [f64; 3],
    /// Sharing steepness.
    pub kappa: f64,
    /// Sharing threshold on the satisfaction delta.
    pub share_threshold: f64,
    /// Std-dev of the elementwise creation noise.
    pub creation_noise_sigma: f64,
    /// Items consumed per feed.
    pub feed_size: usize,
    /// Random-discovery slots appended to every candidate pool.
    pub random_discovery: usize,
    /// Probability that a follower views an item shared by a followee.
    pub cascade_view_prob: f64,
    /// Max cascade views accepted per agent per step.
    pub cascade_cap: usize,
    /// Fraction of new content tagged Popular (rest Niche).
    pub popular_fraction: f64,
    /// Satisfaction below this marks the agent churned (absorbing).
    pub churn_threshold: f64,
    /// Trailing steps over which pairwise engagement is counted.
    pub engagement_window: u32,
    /// Windowed interactions with a creator required before an engagement
    /// opens a follow opportunity.
    pub discovery_min_interactions: u32,
}

impl Default for BehaviorParams {
    fn default() -> Self {
        BehaviorParams {
            tau: 0.5,
            beta_minus: TypedRate::uniform(1.2),
            beta_plus: TypedRate::uniform(1.0),
            gamma: [-1.0, 2.0, 1.0],
            kappa: 50.0,
            share_threshold: 0.01,
            creation_noise_sigma: 0.3,
            feed_size: 10,
            random_discovery: 2,
            cascade_view_prob: 0.25,
            cascade_cap: 3,
            popular_fraction: 0.2,
            churn_threshold: 0.2,
            engagement_window: 10,
            discovery_min_interactions: 4,
        }
    }
}

impl BehaviorParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: &str| Err(ConfigError::Behavior(m.to_string()));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return err("tau must lie in (0, 1)");
        }
        if self.beta_minus.casual <= 0.0
            || self.beta_minus.enthusiast <= 0.0
            || self.beta_plus.casual <= 0.0
            || self.beta_plus.enthusiast <= 0.0
        {
            return err("beta_minus and beta_plus must be positive");
        }
        if self.kappa <= 0.0 {
            return err("kappa must be positive");
        }
        if self.feed_size == 0 {
            return err("feed_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.cascade_view_prob) {
            return err("cascade_view_prob must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.popular_fraction) {
            return err("popular_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.churn_threshold) {
            return err("churn_threshold must lie in [0, 1)");
        }
        Ok(())
    }

    /// Scale both reactance sensitivities, keeping `beta_plus` fixed.
    pub fn with_beta_minus(mut self, value: f64) -> Self {
        self.beta_minus = TypedRate::uniform(value);
        self
    }
}

/// GAT training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    /// Negatives sampled per positive.
    pub negative_ratio: f64,
    pub retrain_period: u32,
    /// Steps of the interaction log used to build the training graph.
    pub window: u32,
    /// Minimum positive edges required to train at all.
    pub min_positives: usize,
    /// Per-node neighbor cap, applied when the user count exceeds
    /// `subsample_above`.
    pub neighbor_cap: usize,
    pub subsample_above: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            dropout: 0.3,
            batch_size: 128,
            max_epochs: 50,
            patience: 10,
            val_fraction: 0.10,
            negative_ratio: 1.0,
            retrain_period: 5,
            window: 20,
            min_positives: 20,
            neighbor_cap: 32,
            subsample_above: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: &str| Err(ConfigError::Training(m.to_string()));
        if self.learning_rate <= 0.0 {
            return err("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return err("batch_size, max_epochs and patience must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return err("val_fraction must lie in (0, 1)");
        }
        if self.negative_ratio <= 0.0 {
            return err("negative_ratio must be positive");
        }
        if self.retrain_period == 0 {
            return err("retrain_period must be positive");
        }
        Ok(())
    }
}
