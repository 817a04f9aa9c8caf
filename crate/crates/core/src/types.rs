//! Domain entities: agents, content items, and the interaction log.

use serde::{Deserialize, Serialize};

pub type AgentId = u32;
pub type ContentId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UserType {
    Casual,
    Enthusiast,
}

impl UserType {
    /// Content creation probability per step.
    pub fn creation_rate(self) -> f64 {
        match self {
            UserType::Casual => 0.05,
            UserType::Enthusiast => 0.20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContentKind {
    Niche,
    Popular,
}

#[derive(Debug, Clone)]
pub struct AgentProfile {
    pub id: AgentId,
    pub user_type: UserType,
    /// Non-negative, unit L2 norm, length [`crate::config::TOPIC_DIM`].
    pub preference: Vec<f64>,
    pub creation_rate: f64,
    /// Kept in [0, 1] by the update rule.
    pub satisfaction: f64,
    /// Churn is absorbing: once false, never true again.
    pub active: bool,
}

#[derive(Debug, Clone)]
pub struct ContentItem {
    pub id: ContentId,
    pub creator: AgentId,
    /// Non-negative, unit L2 norm.
    pub topic: Vec<f64>,
    pub kind: ContentKind,
    pub likes: u32,
    pub shares: u32,
    pub views: u32,
    pub birth_step: u32,
    pub active: bool,
}

impl ContentItem {
    /// Dominant topic index (ties resolved to the lowest index).
    pub fn dominant_topic(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.topic.iter().enumerate() {
            if v > self.topic[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    View,
    Like,
    Share,
    FollowOpportunity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventSource {
    Organic,
    Recommended,
}

/// One row of the append-only interaction log.
#[derive(Debug, Clone, Copy)]
pub struct InteractionEvent {
    pub step: u32,
    pub agent: AgentId,
    pub content: ContentId,
    pub kind: EventKind,
    pub similarity: f64,
    pub satisfaction_delta: f64,
    pub source: EventSource,
}
