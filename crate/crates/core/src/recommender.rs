//! Recommendation policies and the retraining schedule.
//!
//! The GAT trains on the bipartite user-content interaction graph from a
//! trailing window of the log. Node embeddings are refreshed on the same
//! cadence as retraining (a frozen model still re-embeds the current graph,
//! so the ablation compares weights, not staleness of the node table).

use std::collections::{HashMap, HashSet};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::behavior::{cosine_similarity, sigmoid};
use crate::config::{PolicyTag, RecommenderPolicy, TrainConfig, TOPIC_DIM};
use crate::gat::{gat_train, Csr, GatError, GatModel, TrainData};
use crate::rng::{stream, StreamClass};
use crate::types::{AgentId, AgentProfile, ContentId, ContentItem, EventKind, InteractionEvent};

/// Node embeddings from the most recent forward pass over the
/// interaction graph.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub built_step: u32,
    user_emb: Array2<f64>,
    item_emb: Array2<f64>,
    item_row: HashMap<ContentId, usize>,
}

impl EmbeddingTable {
    /// `sigmoid(h_user . h_item)`, or None if the item was not embedded.
    pub fn score(&self, user: AgentId, item: ContentId) -> Option<f64> {
        let row = *self.item_row.get(&item)?;
        Some(sigmoid(self.user_emb.row(user as usize).dot(&self.item_emb.row(row))))
    }

    pub fn has_item(&self, item: ContentId) -> bool {
        self.item_row.contains_key(&item)
    }

    /// Test-only constructor with explicit embeddings.
    pub fn from_parts(
        built_step: u32,
        user_emb: Array2<f64>,
        item_emb: Array2<f64>,
        item_ids: &[ContentId],
    ) -> Self {
        let item_row = item_ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        EmbeddingTable { built_step, user_emb, item_emb, item_row }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainEvent {
    pub step: u32,
    pub validation_auc: f64,
    pub epochs: usize,
    /// False when the cycle was skipped for lack of data.
    pub trained: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RecommenderState {
    pub policy: RecommenderPolicy,
    pub model: Option<GatModel>,
    pub embeddings: Option<EmbeddingTable>,
    pub history: Vec<TrainEvent>,
}

impl RecommenderState {
    pub fn new(policy: RecommenderPolicy) -> Self {
        RecommenderState { policy, model: None, embeddings: None, history: Vec::new() }
    }
}

/// Distinct (user, content) view pairs within the trailing window, in
/// first-occurrence order.
pub fn window_positive_pairs(
    interactions: &[InteractionEvent],
    step: u32,
    window: u32,
) -> Vec<(AgentId, ContentId)> {
    let from = step.saturating_sub(window.saturating_sub(1));
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for ev in interactions.iter().rev() {
        if ev.step < from {
            break;
        }
        if ev.step > step {
            continue;
        }
        if ev.kind == EventKind::View && seen.insert((ev.agent, ev.content)) {
            pairs.push((ev.agent, ev.content));
        }
    }
    pairs.reverse();
    pairs
}

/// Assemble the bipartite training bundle: all agents plus every content
/// item that is active or appears in the window. Self-loops are added when
/// the message graph is built, so nodes with no interactions stay valid.
pub fn build_train_data(
    agents: &[AgentProfile],
    content: &[ContentItem],
    interactions: &[InteractionEvent],
    step: u32,
    window: u32,
) -> (TrainData, Vec<ContentId>) {
    let n_users = agents.len();
    let pairs = window_positive_pairs(interactions, step, window);

    let mut include: Vec<ContentId> = content.iter().filter(|c| c.active).map(|c| c.id).collect();
    let mut in_window: Vec<ContentId> = pairs.iter().map(|&(_, c)| c).collect();
    include.append(&mut in_window);
    include.sort_unstable();
    include.dedup();

    let node_of: HashMap<ContentId, u32> = include
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, (n_users + i) as u32))
        .collect();

    let n_nodes = n_users + include.len();
    let mut features = Array2::<f64>::zeros((n_nodes, TOPIC_DIM));
    for (i, a) in agents.iter().enumerate() {
        for (k, &v) in a.preference.iter().enumerate() {
            features[(i, k)] = v;
        }
    }
    for (slot, &cid) in include.iter().enumerate() {
        let item = &content[cid as usize];
        for (k, &v) in item.topic.iter().enumerate() {
            features[(n_users + slot, k)] = v;
        }
    }

    let positives: Vec<(u32, u32)> =
        pairs.iter().map(|&(u, c)| (u, node_of[&c])).collect();

    // Full-graph adjacency (messages = all window edges) for embedding.
    let mut lists: Vec<Vec<u32>> = (0..n_nodes as u32).map(|i| vec![i]).collect();
    for &(u, cnode) in &positives {
        lists[u as usize].push(cnode);
        lists[cnode as usize].push(u);
    }
    for l in &mut lists {
        l[1..].sort_unstable();
        l.dedup();
    }
    let graph = Csr::from_lists(&lists);

    (TrainData { graph, features, positives, n_users }, include)
}

fn rebuild_embeddings(
    rec: &mut RecommenderState,
    data: &TrainData,
    item_ids: &[ContentId],
    step: u32,
) -> Result<(), GatError> {
    let model = rec.model.as_ref().ok_or(GatError::Untrained)?;
    let emb = model.embed(&data.graph, &data.features)?;
    let n_users = data.n_users;
    let d = emb.ncols();
    let mut user_emb = Array2::<f64>::zeros((n_users, d));
    for i in 0..n_users {
        user_emb.row_mut(i).assign(&emb.row(i));
    }
    let mut item_emb = Array2::<f64>::zeros((item_ids.len(), d));
    for r in 0..item_ids.len() {
        item_emb.row_mut(r).assign(&emb.row(n_users + r));
    }
    rec.embeddings = Some(EmbeddingTable::from_parts(step, user_emb, item_emb, item_ids));
    Ok(())
}

/// Whether the retraining schedule fires at `step`.
pub fn retrain_due(step: u32, t_activate: u32, period: u32) -> bool {
    step >= t_activate && (step - t_activate) % period == 0
}

/// Run the retraining schedule for this step. A frozen policy trains exactly
/// once at activation and only re-embeds afterwards.
pub fn maybe_retrain(
    rec: &mut RecommenderState,
    agents: &[AgentProfile],
    content: &[ContentItem],
    interactions: &[InteractionEvent],
    step: u32,
    t_activate: u32,
    cfg: &TrainConfig,
    master_seed: u64,
) {
    if rec.policy.tag != PolicyTag::Gat {
        return;
    }
    if !retrain_due(step, t_activate, cfg.retrain_period) {
        return;
    }
    let (data, item_ids) = build_train_data(agents, content, interactions, step, cfg.window);
    let skip_training = rec.policy.frozen && rec.model.is_some();
    if !skip_training {
        let mut rng = stream(master_seed, StreamClass::Train, 0, step as u64);
        match gat_train(&data, cfg, rec.model.as_ref(), step, &mut rng) {
            Ok(out) => {
                rec.history.push(TrainEvent {
                    step,
                    validation_auc: out.model.validation_auc,
                    epochs: out.epochs_run,
                    trained: true,
                });
                rec.model = Some(out.model);
            }
            Err(GatError::TooFewPositives(..)) => {
                rec.history.push(TrainEvent {
                    step,
                    validation_auc: f64::NAN,
                    epochs: 0,
                    trained: false,
                });
            }
            Err(e) => {
                // Degenerate split or numeric failure: keep the prior model.
                debug_assert!(false, "unexpected training failure: {e}");
                rec.history.push(TrainEvent {
                    step,
                    validation_auc: f64::NAN,
                    epochs: 0,
                    trained: false,
                });
            }
        }
    }
    if rec.model.is_some() {
        let _ = rebuild_embeddings(rec, &data, &item_ids, step);
    }
}

/// Rank candidate content for one user under the active policy.
///
/// Candidates are active items the user has not viewed and did not create,
/// scanned in id order. `None` policy and an untrained GAT return an empty
/// list; the caller falls back to the chronological feed.
pub fn recommend(
    rec: &RecommenderState,
    agents: &[AgentProfile],
    content: &[ContentItem],
    viewed: &HashSet<ContentId>,
    user: AgentId,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ContentId> {
    if count == 0 {
        return Vec::new();
    }
    let candidates: Vec<ContentId> = content
        .iter()
        .filter(|c| c.active && c.creator != user && !viewed.contains(&c.id))
        .map(|c| c.id)
        .collect();
    if candidates.is_empty() {
        return Vec::new();
    }
    match rec.policy.tag {
        PolicyTag::None => Vec::new(),
        PolicyTag::Random => {
            let mut pool = candidates;
            let take = count.min(pool.len());
            for i in 0..take {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate(take);
            pool
        }
        PolicyTag::ContentSimilarity => {
            let pref = &agents[user as usize].preference;
            rank_by(candidates, |id| {
                cosine_similarity(pref, &content[id as usize].topic).unwrap_or(0.0)
            })
            .into_iter()
            .take(count)
            .collect()
        }
        PolicyTag::Gat => match &rec.embeddings {
            None => Vec::new(),
            Some(table) => {
                let scored: Vec<ContentId> = candidates
                    .into_iter()
                    .filter(|&id| table.has_item(id))
                    .collect();
                rank_by(scored, |id| table.score(user, id).unwrap_or(0.0))
                    .into_iter()
                    .take(count)
                    .collect()
            }
        },
    }
}

/// Sort ids by descending score with ascending-id tie-breaking.
fn rank_by<F: Fn(ContentId) -> f64>(mut ids: Vec<ContentId>, score: F) -> Vec<ContentId> {
    let mut keyed: Vec<(f64, ContentId)> = ids.drain(..).map(|id| (score(id), id)).collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, id)| id).collect()
}

/// Score explicit user-item pairs with the current embeddings.
pub fn score_pairs(
    rec: &RecommenderState,
    user: AgentId,
    candidates: &[ContentId],
) -> Result<Vec<f64>, GatError> {
    let table = rec.embeddings.as_ref().ok_or(GatError::Untrained)?;
    if rec.model.is_none() {
        return Err(GatError::Untrained);
    }
    Ok(candidates.iter().map(|&c| table.score(user, c).unwrap_or(f64::NAN)).collect())
}

/// Evaluate a model's held-out AUC against the current interaction window.
/// Used by the retraining ablation to compare frozen and retrained weights
/// on identical data.
pub fn evaluate_model_auc(
    model: &GatModel,
    agents: &[AgentProfile],
    content: &[ContentItem],
    interactions: &[InteractionEvent],
    step: u32,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64, GatError> {
    let (data, _) = build_train_data(agents, content, interactions, step, cfg.window);
    let mut rng = stream(seed, StreamClass::Stats, 1, step as u64);
    crate::gat::evaluate_auc(model, &data, cfg, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ContentKind, EventSource, UserType};
    use rand::SeedableRng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn agent(id: u32, pref: Vec<f64>) -> AgentProfile {
        AgentProfile {
            id,
            user_type: UserType::Casual,
            preference: unit(pref),
            creation_rate: 0.05,
            satisfaction: 0.5,
            active: true,
        }
    }

    fn item(id: u32, creator: u32, topic: Vec<f64>) -> ContentItem {
        ContentItem {
            id,
            creator,
            topic: unit(topic),
            kind: ContentKind::Niche,
            likes: 0,
            shares: 0,
            views: 0,
            birth_step: 0,
            active: true,
        }
    }

    fn pad(mut v: Vec<f64>) -> Vec<f64> {
        v.resize(TOPIC_DIM, 0.0);
        v
    }

    #[test]
    fn none_policy_always_empty() {
        let agents = vec![agent(0, pad(vec![1.0]))];
        let content = vec![item(0, 0, pad(vec![1.0])), item(1, 0, pad(vec![0.0, 1.0]))];
        let rec = RecommenderState::new(RecommenderPolicy::none());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(recommend(&rec, &agents, &content, &HashSet::new(), 0, 5, &mut rng).is_empty());
    }

    #[test]
    fn content_similarity_ranks_exact_match_first() {
        let agents = vec![agent(0, pad(vec![1.0, 1.0]))];
        let content = vec![
            item(0, 1, pad(vec![0.0, 0.0, 1.0])),
            item(1, 1, pad(vec![1.0, 1.0])),
            item(2, 1, pad(vec![1.0, 0.0])),
        ];
        let rec = RecommenderState::new(RecommenderPolicy::content_similarity());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let top = recommend(&rec, &agents, &content, &HashSet::new(), 0, 2, &mut rng);
        assert_eq!(top[0], 1);
    }

    #[test]
    fn random_policy_is_uniform_chi_squared() {
        let agents = vec![agent(0, pad(vec![1.0]))];
        let k = 8usize;
        let content: Vec<ContentItem> =
            (0..k as u32).map(|i| item(i, 1, pad(vec![1.0, i as f64]))).collect();
        let rec = RecommenderState::new(RecommenderPolicy::random());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trials = 10_000;
        let mut counts = vec![0usize; k];
        for _ in 0..trials {
            let pick = recommend(&rec, &agents, &content, &HashSet::new(), 0, 1, &mut rng);
            counts[pick[0] as usize] += 1;
        }
        let expected = trials as f64 / k as f64;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-squared 99% quantile at 7 dof.
        assert!(chi2 < 18.48, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn recommend_excludes_viewed_and_own_items() {
        let agents = vec![agent(0, pad(vec![1.0])), agent(1, pad(vec![1.0]))];
        let content = vec![
            item(0, 0, pad(vec![1.0])), // own
            item(1, 1, pad(vec![1.0])), // viewed
            item(2, 1, pad(vec![1.0])),
        ];
        let rec = RecommenderState::new(RecommenderPolicy::content_similarity());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let viewed: HashSet<u32> = [1u32].into_iter().collect();
        let got = recommend(&rec, &agents, &content, &viewed, 0, 10, &mut rng);
        assert_eq!(got, vec![2]);
    }

    #[test]
    fn score_pairs_matches_sigmoid_of_dot() {
        let d = 4;
        let mut user_emb = Array2::<f64>::zeros((1, d));
        user_emb.row_mut(0).assign(&ndarray::arr1(&[0.5, 0.5, 0.5, 0.5]));
        let mut item_emb = Array2::<f64>::zeros((2, d));
        item_emb.row_mut(0).assign(&ndarray::arr1(&[0.5, 0.5, 0.5, 0.5]));
        item_emb.row_mut(1).assign(&ndarray::arr1(&[0.5, -0.5, 0.5, -0.5]));
        let table = EmbeddingTable::from_parts(0, user_emb, item_emb, &[10, 11]);
        // Identical unit embeddings -> sigmoid(1); orthogonal -> 0.5.
        assert!((table.score(0, 10).unwrap() - sigmoid(1.0)).abs() < 1e-12);
        assert!((sigmoid(1.0) - 0.7310585786300049).abs() < 1e-12);
        assert!((table.score(0, 11).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn score_pairs_errors_when_untrained() {
        let rec = RecommenderState::new(RecommenderPolicy::gat());
        assert_eq!(score_pairs(&rec, 0, &[1, 2]), Err(GatError::Untrained));
    }

    #[test]
    fn retrain_schedule_arithmetic() {
        // t_activate = 10, steps 10..=50 with period 5: fires 9 times.
        let fires: Vec<u32> = (10..=50).filter(|&s| retrain_due(s, 10, 5)).collect();
        assert_eq!(fires, vec![10, 15, 20, 25, 30, 35, 40, 45, 50]);
        assert!(!retrain_due(9, 10, 5));
        assert!(!retrain_due(12, 10, 5));
    }

    #[test]
    fn window_pairs_dedupe_and_respect_window() {
        let ev = |step, agent, content| InteractionEvent {
            step,
            agent,
            content,
            kind: EventKind::View,
            similarity: 0.5,
            satisfaction_delta: 0.0,
            source: EventSource::Organic,
        };
        let log = vec![ev(1, 0, 5), ev(1, 0, 5), ev(2, 1, 5), ev(30, 0, 6)];
        let pairs = window_positive_pairs(&log, 30, 20);
        assert_eq!(pairs, vec![(0, 6)]);
        let pairs = window_positive_pairs(&log, 2, 20);
        assert_eq!(pairs, vec![(0, 5), (1, 5)]);
    }
}
