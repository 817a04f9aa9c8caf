//! Platform state and the discrete timestep loop.
//!
//! One transition runs four phases in order: (1) activity — every active
//! agent builds a feed and consumes it; (2) content — cascade sharing,
//! creation, expiry; (3) network — follow-opportunity evaluation over this
//! step's engagements; (4) recommender — scheduled retraining. Churn is
//! applied at the step boundary and is absorbing. Every random draw comes
//! from a per-entity stream, so a run is a pure function of (config, seed).

use std::collections::{HashMap, HashSet, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::behavior::{
    cosine_similarity, create_content, follow_probability, sample_without_replacement,
    satisfaction_delta, share_probability, update_satisfaction,
};
use crate::config::{
    BehaviorParams, ConfigError, ExperimentConfig, PolicyTag, TrainConfig, CONTENT_LIFESPAN,
    TOPIC_DIM,
};
use crate::graph::FollowGraph;
use crate::metrics::{self, MetricsSnapshot};
use crate::recommender::{self, RecommenderState};
use crate::rng::{stream, StreamClass};
use crate::types::{
    AgentId, AgentProfile, ContentId, ContentItem, ContentKind, EventKind, EventSource,
    InteractionEvent, UserType,
};

/// Dirichlet concentration for preference and topic draws. At 1.0 the draw
/// is uniform on the simplex, which centers the cosine similarity of
/// unrelated vectors near the neutrality threshold.
pub const DIRICHLET_ALPHA: f64 = 0.85;

/// Expected density of the initial follow graph (undirected projection).
pub const INIT_DENSITY: f64 = 0.01;

/// Node sampling threshold for per-step path-length computation.
const PATH_SAMPLE_THRESHOLD: usize = 1500;
const PATH_SAMPLE_SOURCES: usize = 512;

#[derive(Debug, Clone)]
pub struct PlatformState {
    pub step: u32,
    pub graph: FollowGraph,
    pub agents: Vec<AgentProfile>,
    pub content: Vec<ContentItem>,
    pub interactions: Vec<InteractionEvent>,
    pub recommender: RecommenderState,
    master_seed: u64,
    /// Items each agent has ever viewed (feeds and cascades never repeat).
    viewed: Vec<HashSet<ContentId>>,
    engagement: EngagementWindow,
    /// Recommendations issued last step, for next-step precision.
    prev_recs: Vec<(AgentId, Vec<ContentId>)>,
}

impl PlatformState {
    /// Assemble a state from explicit parts (synthetic micro-states for the
    /// mean-field analysis and tests).
    pub fn from_parts(
        graph: FollowGraph,
        agents: Vec<AgentProfile>,
        content: Vec<ContentItem>,
        recommender: RecommenderState,
        master_seed: u64,
        engagement_window: u32,
    ) -> Self {
        let n = agents.len();
        PlatformState {
            step: 0,
            graph,
            agents,
            content,
            interactions: Vec::new(),
            recommender,
            master_seed,
            viewed: vec![HashSet::new(); n],
            engagement: EngagementWindow::new(engagement_window),
            prev_recs: Vec::new(),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn has_viewed(&self, agent: AgentId, item: ContentId) -> bool {
        self.viewed[agent as usize].contains(&item)
    }

    pub fn satisfaction_mean(&self) -> f64 {
        self.agents.iter().map(|a| a.satisfaction).sum::<f64>() / self.agents.len() as f64
    }
}

/// Rolling interaction counts per (consumer, creator) pair.
#[derive(Debug, Clone)]
struct EngagementWindow {
    window: u32,
    events: VecDeque<(u32, AgentId, AgentId)>,
    counts: HashMap<(AgentId, AgentId), u32>,
}

impl EngagementWindow {
    fn new(window: u32) -> Self {
        EngagementWindow { window, events: VecDeque::new(), counts: HashMap::new() }
    }

    fn add(&mut self, step: u32, consumer: AgentId, creator: AgentId) {
        self.events.push_back((step, consumer, creator));
        *self.counts.entry((consumer, creator)).or_insert(0) += 1;
    }

    /// Drop events older than the window ending at `now`.
    fn advance(&mut self, now: u32) {
        let min_step = now.saturating_sub(self.window.saturating_sub(1));
        while let Some(&(s, a, b)) = self.events.front() {
            if s >= min_step {
                break;
            }
            self.events.pop_front();
            if let Some(c) = self.counts.get_mut(&(a, b)) {
                *c -= 1;
                if *c == 0 {
                    self.counts.remove(&(a, b));
                }
            }
        }
    }

    /// Windowed interaction frequency, capped at 1.
    fn rate(&self, consumer: AgentId, creator: AgentId) -> f64 {
        (self.count(consumer, creator) as f64 / self.window as f64).min(1.0)
    }

    fn count(&self, consumer: AgentId, creator: AgentId) -> u32 {
        self.counts.get(&(consumer, creator)).copied().unwrap_or(0)
    }
}

/// Draw a unit-norm non-negative topic/preference vector.
pub fn sample_direction_pub(rng: &mut ChaCha8Rng) -> Vec<f64> {
    sample_direction(rng)
}

fn sample_direction(rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand_distr::{Distribution, Gamma};
    let gamma = Gamma::new(DIRICHLET_ALPHA, 1.0).expect("valid shape");
    loop {
        let mut v: Vec<f64> = (0..TOPIC_DIM).map(|_| gamma.sample(rng)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > f64::EPSILON {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

/// Build the initial platform: typed agents with simplex preferences, a
/// seeded content pool, and a sparse random follow graph.
pub fn init_platform(
    config: &ExperimentConfig,
    behavior: &BehaviorParams,
    seed: u64,
) -> Result<PlatformState, ConfigError> {
    config.validate()?;
    behavior.validate()?;
    let n = config.n_users as usize;

    let mut agents = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream(seed, StreamClass::InitAgent, i as u64, 0);
        let user_type = if rng.random::<f64>() < config.alpha_enthusiast {
            UserType::Enthusiast
        } else {
            UserType::Casual
        };
        let preference = sample_direction(&mut rng);
        agents.push(AgentProfile {
            id: i as AgentId,
            user_type,
            preference,
            creation_rate: user_type.creation_rate(),
            satisfaction: 0.5,
            active: true,
        });
    }

    let m = (config.n_users as f64 * config.content_ratio).round() as usize;
    let mut content = Vec::with_capacity(m);
    for c in 0..m {
        let mut rng = stream(seed, StreamClass::InitContent, c as u64, 0);
        let topic = sample_direction(&mut rng);
        let creator = rng.random_range(0..n) as AgentId;
        let kind = if rng.random::<f64>() < behavior.popular_fraction {
            ContentKind::Popular
        } else {
            ContentKind::Niche
        };
        content.push(ContentItem {
            id: c as ContentId,
            creator,
            topic,
            kind,
            likes: 0,
            shares: 0,
            views: 0,
            birth_step: 0,
            active: true,
        });
    }

    // Sparse start: each unordered pair connects with INIT_DENSITY, in a
    // uniformly random direction, so the projected density matches.
    let mut graph = FollowGraph::new(n);
    let mut grng = stream(seed, StreamClass::InitGraph, 0, 0);
    for i in 0..n as u32 {
        for j in (i + 1)..n as u32 {
            if grng.random::<f64>() < INIT_DENSITY {
                if grng.random::<bool>() {
                    graph.add_edge(i, j);
                } else {
                    graph.add_edge(j, i);
                }
            }
        }
    }

    Ok(PlatformState {
        step: 0,
        graph,
        agents,
        content,
        interactions: Vec::new(),
        recommender: RecommenderState::new(config.policy),
        master_seed: seed,
        viewed: vec![HashSet::new(); n],
        engagement: EngagementWindow::new(behavior.engagement_window),
        prev_recs: Vec::new(),
    })
}

/// Mark agents below the churn threshold inactive. Churn is absorbing:
/// nodes and history are retained, the flag never flips back.
pub fn churn_update(state: &mut PlatformState, behavior: &BehaviorParams) {
    for a in &mut state.agents {
        if a.active && a.satisfaction < behavior.churn_threshold {
            a.active = false;
        }
    }
}

/// Per-step accumulators feeding the metrics snapshot.
struct StepCounters {
    views: u64,
    likes: u64,
    shares: u64,
    topic_counts: Vec<u64>,
    interacted: HashSet<(AgentId, ContentId)>,
}

impl StepCounters {
    fn new() -> Self {
        StepCounters {
            views: 0,
            likes: 0,
            shares: 0,
            topic_counts: vec![0; TOPIC_DIM],
            interacted: HashSet::new(),
        }
    }
}

struct ConsumeOutcome {
    shared: bool,
}

/// One view: similarity, satisfaction update, like/share decisions, logging.
#[allow(clippy::too_many_arguments)]
fn consume_one(
    state: &mut PlatformState,
    counters: &mut StepCounters,
    behavior: &BehaviorParams,
    step: u32,
    agent_id: AgentId,
    item_id: ContentId,
    source: EventSource,
    rng: &mut ChaCha8Rng,
) -> ConsumeOutcome {
    let (sim, creator, dominant) = {
        let agent = &state.agents[agent_id as usize];
        let item = &state.content[item_id as usize];
        (
            cosine_similarity(&agent.preference, &item.topic).expect("unit vectors"),
            item.creator,
            item.dominant_topic(),
        )
    };
    let xi: f64 = rng.random();
    let theta = state.agents[agent_id as usize].user_type;
    let delta = satisfaction_delta(sim, theta, xi, behavior);
    {
        let agent = &mut state.agents[agent_id as usize];
        agent.satisfaction = update_satisfaction(agent.satisfaction, delta);
    }
    state.content[item_id as usize].views += 1;
    state.viewed[agent_id as usize].insert(item_id);
    state.engagement.add(step, agent_id, creator);
    counters.views += 1;
    counters.topic_counts[dominant] += 1;
    counters.interacted.insert((agent_id, item_id));
    state.interactions.push(InteractionEvent {
        step,
        agent: agent_id,
        content: item_id,
        kind: EventKind::View,
        similarity: sim,
        satisfaction_delta: delta,
        source,
    });

    if delta > 0.0 {
        state.content[item_id as usize].likes += 1;
        counters.likes += 1;
        state.interactions.push(InteractionEvent {
            step,
            agent: agent_id,
            content: item_id,
            kind: EventKind::Like,
            similarity: sim,
            satisfaction_delta: delta,
            source,
        });
    }

    let mut shared = false;
    if rng.random::<f64>() < share_probability(delta, behavior) {
        state.content[item_id as usize].shares += 1;
        counters.shares += 1;
        shared = true;
        state.interactions.push(InteractionEvent {
            step,
            agent: agent_id,
            content: item_id,
            kind: EventKind::Share,
            similarity: sim,
            satisfaction_delta: delta,
            source,
        });
    }
    ConsumeOutcome { shared }
}

/// Candidate feed for one agent: recommended pool post-activation, else the
/// chronological pool (recent followee items), plus random-discovery slots.
/// The final feed samples `feed_size` items through the exploration
/// distribution over similarity scores.
fn build_feed(
    state: &PlatformState,
    config: &ExperimentConfig,
    behavior: &BehaviorParams,
    active_ids: &[ContentId],
    agent_id: AgentId,
    step: u32,
    pending_recs: &mut Vec<(AgentId, Vec<ContentId>)>,
) -> Vec<(ContentId, EventSource)> {
    let mut rng = stream(state.master_seed, StreamClass::Feed, agent_id as u64, step as u64);
    let agent = &state.agents[agent_id as usize];
    let viewed = &state.viewed[agent_id as usize];
    let two_f = 2 * behavior.feed_size;

    let mut pool: Vec<(ContentId, EventSource)> = Vec::with_capacity(two_f + 2);
    let mut in_pool: HashSet<ContentId> = HashSet::new();

    let use_recommender =
        config.policy.tag != PolicyTag::None && step >= config.t_activate;
    let mut recommended = Vec::new();
    if use_recommender {
        recommended = recommender::recommend(
            &state.recommender,
            &state.agents,
            &state.content,
            viewed,
            agent_id,
            two_f,
            &mut rng,
        );
    }

    if !recommended.is_empty() {
        pending_recs.push((agent_id, recommended.iter().take(10).copied().collect()));
        for &id in &recommended {
            if in_pool.insert(id) {
                pool.push((id, EventSource::Recommended));
            }
        }
    } else {
        // Chronological: most recent active unseen items from followees.
        let mut followee_items: Vec<ContentId> = Vec::new();
        let followees: Vec<AgentId> = state.graph.followees(agent_id).collect();
        if !followees.is_empty() {
            for &id in active_ids {
                let item = &state.content[id as usize];
                if item.creator != agent_id
                    && followees.binary_search(&item.creator).is_ok()
                    && !viewed.contains(&id)
                {
                    followee_items.push(id);
                }
            }
            // Most recent first; id ties break toward newer items.
            followee_items.sort_by(|&a, &b| {
                let (ia, ib) = (&state.content[a as usize], &state.content[b as usize]);
                ib.birth_step.cmp(&ia.birth_step).then(b.cmp(&a))
            });
            followee_items.truncate(two_f);
        }
        for id in followee_items {
            if in_pool.insert(id) {
                pool.push((id, EventSource::Organic));
            }
        }
    }

    // Random-discovery slots: always shown, on top of the sampled pool.
    let mut discovery: Vec<(ContentId, EventSource)> = Vec::new();
    let mut tries = 0;
    while discovery.len() < behavior.random_discovery && tries < 20 * behavior.random_discovery {
        tries += 1;
        if active_ids.is_empty() {
            break;
        }
        let id = active_ids[rng.random_range(0..active_ids.len())];
        let item = &state.content[id as usize];
        if item.creator != agent_id && !viewed.contains(&id) && in_pool.insert(id) {
            discovery.push((id, EventSource::Organic));
        }
    }

    let take = behavior.feed_size.saturating_sub(discovery.len());
    let mut feed: Vec<(ContentId, EventSource)> = if pool.is_empty() {
        Vec::new()
    } else {
        let scores: Vec<f64> = pool
            .iter()
            .map(|&(id, _)| {
                cosine_similarity(&agent.preference, &state.content[id as usize].topic)
                    .unwrap_or(0.0)
            })
            .collect();
        sample_without_replacement(&scores, take, config.r_explore, &mut rng)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    };
    feed.extend(discovery);
    feed
}

/// Advance the platform by one step and return the step's metrics snapshot.
pub fn step(
    state: &mut PlatformState,
    config: &ExperimentConfig,
    behavior: &BehaviorParams,
    training: &TrainConfig,
) -> MetricsSnapshot {
    let s = state.step + 1;
    state.step = s;
    state.engagement.advance(s);
    let mut counters = StepCounters::new();
    let events_start = state.interactions.len();

    let active_ids: Vec<ContentId> =
        state.content.iter().filter(|c| c.active).map(|c| c.id).collect();

    // Phase 1: activity.
    let mut share_queue: VecDeque<(AgentId, ContentId)> = VecDeque::new();
    let mut pending_recs: Vec<(AgentId, Vec<ContentId>)> = Vec::new();
    let agent_count = state.agents.len();
    for agent_id in 0..agent_count as AgentId {
        if !state.agents[agent_id as usize].active {
            continue;
        }
        let feed =
            build_feed(state, config, behavior, &active_ids, agent_id, s, &mut pending_recs);
        if feed.is_empty() {
            continue;
        }
        let mut crng = stream(state.master_seed, StreamClass::Consume, agent_id as u64, s as u64);
        for (item_id, source) in feed {
            let out =
                consume_one(state, &mut counters, behavior, s, agent_id, item_id, source, &mut crng);
            if out.shared {
                share_queue.push_back((agent_id, item_id));
            }
        }
    }

    // Phase 2: content. Cascades first: shares propagate along follower
    // edges until no new accepts; each agent takes at most `cascade_cap`
    // cascade views per step and never re-views an item.
    let mut cascade_rngs: HashMap<AgentId, ChaCha8Rng> = HashMap::new();
    let mut cascade_quota: HashMap<AgentId, usize> = HashMap::new();
    while let Some((sharer, item_id)) = share_queue.pop_front() {
        let followers: Vec<AgentId> = state.graph.followers(sharer).collect();
        for f in followers {
            if !state.agents[f as usize].active {
                continue;
            }
            if state.content[item_id as usize].creator == f {
                continue;
            }
            if state.viewed[f as usize].contains(&item_id) {
                continue;
            }
            let quota = cascade_quota.entry(f).or_insert(behavior.cascade_cap);
            if *quota == 0 {
                continue;
            }
            let rng = cascade_rngs.entry(f).or_insert_with(|| {
                stream(state.master_seed, StreamClass::Cascade, f as u64, s as u64)
            });
            if rng.random::<f64>() >= behavior.cascade_view_prob {
                continue;
            }
            *cascade_quota.get_mut(&f).unwrap() -= 1;
            let rng = cascade_rngs.get_mut(&f).unwrap();
            let out = consume_one(
                state,
                &mut counters,
                behavior,
                s,
                f,
                item_id,
                EventSource::Organic,
                rng,
            );
            if out.shared {
                share_queue.push_back((f, item_id));
            }
        }
    }

    // Creation.
    for agent_id in 0..agent_count as AgentId {
        if !state.agents[agent_id as usize].active {
            continue;
        }
        let mut rng = stream(state.master_seed, StreamClass::Create, agent_id as u64, s as u64);
        if let Some(topic) = create_content(&state.agents[agent_id as usize], behavior, &mut rng) {
            let kind = if rng.random::<f64>() < behavior.popular_fraction {
                ContentKind::Popular
            } else {
                ContentKind::Niche
            };
            let id = state.content.len() as ContentId;
            state.content.push(ContentItem {
                id,
                creator: agent_id,
                topic,
                kind,
                likes: 0,
                shares: 0,
                views: 0,
                birth_step: s,
                active: true,
            });
        }
    }

    // Expiry: items strictly older than the lifespan leave the active pool.
    for item in &mut state.content {
        if item.active && s - item.birth_step > CONTENT_LIFESPAN {
            item.active = false;
        }
    }

    // Phase 3: network evolution over this step's consumption.
    let mut engaged: HashMap<AgentId, Vec<(AgentId, ContentId)>> = HashMap::new();
    for ev in &state.interactions[events_start..] {
        if ev.kind == EventKind::View {
            let creator = state.content[ev.content as usize].creator;
            engaged.entry(ev.agent).or_default().push((creator, ev.content));
        }
    }
    for agent_id in 0..agent_count as AgentId {
        if !state.agents[agent_id as usize].active {
            continue;
        }
        let Some(list) = engaged.get(&agent_id) else { continue };
        // Distinct creators, ascending, keeping the first triggering item.
        let mut creators: Vec<(AgentId, ContentId)> = Vec::new();
        {
            let mut seen = HashSet::new();
            let mut sorted = list.clone();
            sorted.sort_unstable();
            for (creator, content) in sorted {
                if creator != agent_id && seen.insert(creator) {
                    creators.push((creator, content));
                }
            }
        }
        let mut rng = stream(state.master_seed, StreamClass::Follow, agent_id as u64, s as u64);
        for (creator, content_id) in creators {
            if state.graph.has_edge(agent_id, creator) {
                continue;
            }
            // Discovery requires repeated contact within the window.
            if state.engagement.count(agent_id, creator) < behavior.discovery_min_interactions {
                continue;
            }
            let sim = cosine_similarity(
                &state.agents[agent_id as usize].preference,
                &state.agents[creator as usize].preference,
            )
            .expect("unit vectors");
            let e = state.engagement.rate(agent_id, creator);
            let p = follow_probability(sim, e, behavior);
            if rng.random::<f64>() < p {
                state.graph.add_edge(agent_id, creator);
                state.interactions.push(InteractionEvent {
                    step: s,
                    agent: agent_id,
                    content: content_id,
                    kind: EventKind::FollowOpportunity,
                    similarity: sim,
                    satisfaction_delta: 0.0,
                    source: EventSource::Organic,
                });
            }
        }
    }

    // Churn at the step boundary (absorbing).
    churn_update(state, behavior);

    // Phase 4: recommender updates.
    recommender::maybe_retrain(
        &mut state.recommender,
        &state.agents,
        &state.content,
        &state.interactions,
        s,
        config.t_activate,
        training,
        state.master_seed,
    );

    // Snapshot.
    let snapshot = compute_snapshot(state, behavior, &counters);
    state.prev_recs = pending_recs;
    snapshot
}

fn compute_snapshot(
    state: &PlatformState,
    behavior: &BehaviorParams,
    counters: &StepCounters,
) -> MetricsSnapshot {
    let adj = state.graph.undirected_adjacency();
    let satisfactions: Vec<f64> = state.agents.iter().map(|a| a.satisfaction).collect();

    let active_items: Vec<&ContentItem> = state.content.iter().filter(|c| c.active).collect();
    let (content_spread, viral_mean) = if active_items.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let views: f64 = active_items.iter().map(|c| c.views as f64).sum();
        let viral: f64 = active_items
            .iter()
            .map(|c| crate::behavior::viral_coefficient(c.shares, c.views))
            .sum();
        (views / active_items.len() as f64, viral / active_items.len() as f64)
    };

    let precision = metrics::precision_at_10(&state.prev_recs, |u, c| {
        counters.interacted.contains(&(u, c))
    })
    .unwrap_or(f64::NAN);

    let engagement_rate = if counters.views == 0 {
        0.0
    } else {
        (counters.likes + counters.shares) as f64 / counters.views as f64
    };

    MetricsSnapshot {
        step: state.step,
        density: metrics::density_from_adjacency(&adj).unwrap_or(f64::NAN),
        local_clustering_mean: metrics::local_clustering_mean(&adj),
        transitivity: metrics::global_transitivity(&adj),
        modularity: metrics::modularity(&adj).0,
        avg_path_length: metrics::avg_path_length_sampled(
            &adj,
            PATH_SAMPLE_THRESHOLD,
            PATH_SAMPLE_SOURCES,
        )
        .unwrap_or(f64::NAN),
        reciprocity: metrics::reciprocity(&state.graph).unwrap_or(f64::NAN),
        assortativity: metrics::degree_assortativity(&adj).unwrap_or(f64::NAN),
        topic_entropy: metrics::topic_entropy(&counters.topic_counts).unwrap_or(f64::NAN),
        retention: metrics::retention(&satisfactions, behavior.churn_threshold),
        engagement_rate,
        content_spread,
        viral_coefficient_mean: viral_mean,
        precision_at_10: precision,
        satisfaction_mean: state.satisfaction_mean(),
    }
}

/// A full run's per-step snapshots.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<MetricsSnapshot>,
}

impl Trajectory {
    pub fn series(&self, metric: &str) -> Vec<f64> {
        self.snapshots.iter().filter_map(|s| s.value(metric)).collect()
    }

    pub fn last(&self) -> Option<&MetricsSnapshot> {
        self.snapshots.last()
    }
}

/// Run `steps` transitions from a fresh platform.
pub fn run(
    config: &ExperimentConfig,
    behavior: &BehaviorParams,
    training: &TrainConfig,
    seed: u64,
) -> Result<Trajectory, ConfigError> {
    training.validate()?;
    let mut state = init_platform(config, behavior, seed)?;
    let mut snapshots = Vec::with_capacity(config.steps as usize);
    for _ in 0..config.steps {
        snapshots.push(step(&mut state, config, behavior, training));
    }
    Ok(Trajectory { snapshots })
}

/// Like [`run`], but also returns the final state (for post-hoc model
/// evaluation and inspection).
pub fn run_with_state(
    config: &ExperimentConfig,
    behavior: &BehaviorParams,
    training: &TrainConfig,
    seed: u64,
) -> Result<(Trajectory, PlatformState), ConfigError> {
    training.validate()?;
    let mut state = init_platform(config, behavior, seed)?;
    let mut snapshots = Vec::with_capacity(config.steps as usize);
    for _ in 0..config.steps {
        snapshots.push(step(&mut state, config, behavior, training));
    }
    Ok((Trajectory { snapshots }, state))
}
