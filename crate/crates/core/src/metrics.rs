//! Per-step metrics panel: structural graph measures on the undirected
//! projection (reciprocity stays directed), behavioral rates, and content
//! statistics.
//!
//! Values that are undefined for the current state (no edges, no views,
//! no recommendations) are reported as NaN in the snapshot rather than 0.

use std::collections::VecDeque;

use thiserror::Error;

use crate::graph::FollowGraph;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric needs at least {needed} {what}")]
    TooSmall { needed: usize, what: &'static str },
    #[error("degree sequence has zero variance; assortativity undefined")]
    ZeroVariance,
    #[error("no connected pairs; path length undefined")]
    NoConnectedPairs,
    #[error("no exposure recorded; entropy undefined")]
    NoExposure,
}

/// The fixed CSV column order, excluding the leading `step`.
pub const METRIC_COLUMNS: [&str; 14] = [
    "density",
    "local_clustering_mean",
    "transitivity",
    "modularity",
    "avg_path_length",
    "reciprocity",
    "assortativity",
    "topic_entropy",
    "retention",
    "engagement_rate",
    "content_spread",
    "viral_coefficient_mean",
    "precision_at_10",
    "satisfaction_mean",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSnapshot {
    pub step: u32,
    pub density: f64,
    pub local_clustering_mean: f64,
    pub transitivity: f64,
    pub modularity: f64,
    pub avg_path_length: f64,
    pub reciprocity: f64,
    pub assortativity: f64,
    pub topic_entropy: f64,
    pub retention: f64,
    pub engagement_rate: f64,
    pub content_spread: f64,
    pub viral_coefficient_mean: f64,
    pub precision_at_10: f64,
    pub satisfaction_mean: f64,
}

impl MetricsSnapshot {
    pub fn values(&self) -> [f64; 14] {
        [
            self.density,
            self.local_clustering_mean,
            self.transitivity,
            self.modularity,
            self.avg_path_length,
            self.reciprocity,
            self.assortativity,
            self.topic_entropy,
            self.retention,
            self.engagement_rate,
            self.content_spread,
            self.viral_coefficient_mean,
            self.precision_at_10,
            self.satisfaction_mean,
        ]
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        METRIC_COLUMNS
            .iter()
            .position(|c| *c == name)
            .map(|i| self.values()[i])
            .or_else(|| if name == "step" { Some(self.step as f64) } else { None })
    }
}

/// Undirected density `2|E| / (|V|(|V|-1))` on the projection.
pub fn density(graph: &FollowGraph) -> Result<f64, MetricError> {
    let n = graph.node_count();
    if n < 2 {
        return Err(MetricError::TooSmall { needed: 2, what: "nodes" });
    }
    let adj = graph.undirected_adjacency();
    density_from_adjacency(&adj)
}

pub fn density_from_adjacency(adj: &[Vec<u32>]) -> Result<f64, MetricError> {
    let n = adj.len();
    if n < 2 {
        return Err(MetricError::TooSmall { needed: 2, what: "nodes" });
    }
    let m: usize = adj.iter().map(Vec::len).sum::<usize>() / 2;
    Ok(2.0 * m as f64 / (n as f64 * (n - 1) as f64))
}

fn has_edge(adj: &[Vec<u32>], a: u32, b: u32) -> bool {
    adj[a as usize].binary_search(&b).is_ok()
}

/// Local clustering coefficient of one node; 0 when degree < 2.
pub fn local_clustering(adj: &[Vec<u32>], node: u32) -> f64 {
    let neigh = &adj[node as usize];
    let k = neigh.len();
    if k < 2 {
        return 0.0;
    }
    let mut links = 0usize;
    for (i, &a) in neigh.iter().enumerate() {
        for &b in &neigh[i + 1..] {
            if has_edge(adj, a, b) {
                links += 1;
            }
        }
    }
    2.0 * links as f64 / (k * (k - 1)) as f64
}

pub fn local_clustering_mean(adj: &[Vec<u32>]) -> f64 {
    if adj.is_empty() {
        return 0.0;
    }
    let total: f64 = (0..adj.len()).map(|i| local_clustering(adj, i as u32)).sum();
    total / adj.len() as f64
}

/// Global transitivity: 3 * triangles / connected triples. Zero when the
/// graph has no connected triple.
pub fn global_transitivity(adj: &[Vec<u32>]) -> f64 {
    let mut closed = 0u64; // ordered pairs of neighbors that are linked = 2 * closed per center
    let mut triples = 0u64;
    for (node, neigh) in adj.iter().enumerate() {
        let k = neigh.len() as u64;
        triples += k * (k.saturating_sub(1)) / 2;
        let _ = node;
        for (i, &a) in neigh.iter().enumerate() {
            for &b in &neigh[i + 1..] {
                if has_edge(adj, a, b) {
                    closed += 1;
                }
            }
        }
    }
    if triples == 0 {
        0.0
    } else {
        closed as f64 / triples as f64
    }
}

/// Modularity of a labeled partition under the standard null model.
pub fn partition_modularity(adj: &[Vec<u32>], labels: &[usize]) -> f64 {
    let m2: f64 = adj.iter().map(Vec::len).sum::<usize>() as f64; // 2m
    if m2 == 0.0 {
        return 0.0;
    }
    let n_comm = labels.iter().copied().max().map_or(0, |v| v + 1);
    let mut intra = vec![0.0; n_comm]; // sum of A_ij within community (each edge twice)
    let mut deg = vec![0.0; n_comm];
    for (i, neigh) in adj.iter().enumerate() {
        deg[labels[i]] += neigh.len() as f64;
        for &j in neigh {
            if labels[j as usize] == labels[i] {
                intra[labels[i]] += 1.0;
            }
        }
    }
    (0..n_comm).map(|c| intra[c] / m2 - (deg[c] / m2).powi(2)).sum()
}

/// Greedy agglomerative modularity maximization with fixed tie-breaking
/// (lowest community-id pair wins). Returns the modularity of the found
/// partition and per-node community labels (relabeled compactly in order
/// of first appearance).
pub fn modularity(adj: &[Vec<u32>]) -> (f64, Vec<usize>) {
    use std::collections::BTreeMap;
    let n = adj.len();
    let m2: f64 = adj.iter().map(Vec::len).sum::<usize>() as f64;
    if m2 == 0.0 {
        return (0.0, (0..n).collect());
    }

    // Community state: edge weights to neighboring communities, total degree.
    let mut comm_of: Vec<usize> = (0..n).collect();
    let mut neighbors: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    let mut degree: Vec<f64> = adj.iter().map(|l| l.len() as f64).collect();
    let mut alive: Vec<bool> = vec![true; n];
    for (i, neigh) in adj.iter().enumerate() {
        for &j in neigh {
            if (j as usize) != i {
                *neighbors[i].entry(j as usize).or_insert(0.0) += 1.0;
            }
        }
    }

    loop {
        // Best merge across all live community pairs.
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            if !alive[a] {
                continue;
            }
            for (&b, &w) in &neighbors[a] {
                if b <= a {
                    continue;
                }
                let dq = 2.0 * (w / m2 - (degree[a] / m2) * (degree[b] / m2));
                let better = match best {
                    None => true,
                    Some((bq, ba, bb)) => {
                        dq > bq + 1e-15 || ((dq - bq).abs() <= 1e-15 && (a, b) < (ba, bb))
                    }
                };
                if better {
                    best = Some((dq, a, b));
                }
            }
        }
        let Some((dq, a, b)) = best else { break };
        if dq <= 1e-15 {
            break;
        }
        // Merge b into a.
        let b_neighbors: Vec<(usize, f64)> =
            neighbors[b].iter().map(|(&c, &w)| (c, w)).collect();
        for (c, w) in b_neighbors {
            if c == a {
                continue;
            }
            *neighbors[a].entry(c).or_insert(0.0) += w;
            let wc = neighbors[c].remove(&b).unwrap_or(0.0);
            *neighbors[c].entry(a).or_insert(0.0) += wc;
        }
        neighbors[a].remove(&b);
        neighbors[b].clear();
        degree[a] += degree[b];
        alive[b] = false;
        for c in comm_of.iter_mut() {
            if *c == b {
                *c = a;
            }
        }
    }

    // Compact labels in order of first appearance.
    let mut relabel: BTreeMap<usize, usize> = BTreeMap::new();
    let mut labels = vec![0usize; n];
    for (i, &c) in comm_of.iter().enumerate() {
        let next = relabel.len();
        let id = *relabel.entry(c).or_insert(next);
        labels[i] = id;
    }
    (partition_modularity(adj, &labels), labels)
}

/// Mean shortest-path length over connected pairs (BFS on the projection).
/// For graphs above `sample_threshold` nodes, path sums are taken from a
/// deterministic sample of source nodes.
pub fn avg_path_length_sampled(
    adj: &[Vec<u32>],
    sample_threshold: usize,
    max_sources: usize,
) -> Result<f64, MetricError> {
    let n = adj.len();
    let sources: Vec<usize> = if n <= sample_threshold {
        (0..n).collect()
    } else {
        let stride = n.div_ceil(max_sources);
        (0..n).step_by(stride.max(1)).collect()
    };
    let mut total = 0u64;
    let mut pairs = 0u64;
    let mut dist = vec![u32::MAX; n];
    let mut queue = VecDeque::new();
    for &s in &sources {
        dist.iter_mut().for_each(|d| *d = u32::MAX);
        dist[s] = 0;
        queue.clear();
        queue.push_back(s as u32);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u as usize] {
                if dist[v as usize] == u32::MAX {
                    dist[v as usize] = dist[u as usize] + 1;
                    queue.push_back(v);
                }
            }
        }
        for (t, &d) in dist.iter().enumerate() {
            if t != s && d != u32::MAX {
                total += d as u64;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(MetricError::NoConnectedPairs);
    }
    Ok(total as f64 / pairs as f64)
}

pub fn avg_path_length(adj: &[Vec<u32>]) -> Result<f64, MetricError> {
    avg_path_length_sampled(adj, usize::MAX, usize::MAX)
}

/// Fraction of directed edges whose reverse edge exists.
pub fn reciprocity(graph: &FollowGraph) -> Result<f64, MetricError> {
    let e = graph.edge_count();
    if e == 0 {
        return Err(MetricError::TooSmall { needed: 1, what: "edges" });
    }
    Ok(graph.reciprocated_edge_count() as f64 / e as f64)
}

/// Pearson correlation of endpoint degrees over undirected edges.
pub fn degree_assortativity(adj: &[Vec<u32>]) -> Result<f64, MetricError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, neigh) in adj.iter().enumerate() {
        let di = neigh.len() as f64;
        for &j in neigh {
            if (j as usize) > i {
                let dj = adj[j as usize].len() as f64;
                // Both orientations, the standard symmetrization.
                xs.push(di);
                ys.push(dj);
                xs.push(dj);
                ys.push(di);
            }
        }
    }
    if xs.is_empty() {
        return Err(MetricError::TooSmall { needed: 1, what: "edges" });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx <= 1e-12 || vy <= 1e-12 {
        return Err(MetricError::ZeroVariance);
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Shannon entropy of an exposure histogram, normalized to [0, 1] by
/// `ln(k)` where `k` is the number of bins.
pub fn topic_entropy(counts: &[u64]) -> Result<f64, MetricError> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(MetricError::NoExposure);
    }
    if counts.len() < 2 {
        return Ok(0.0);
    }
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    Ok(h / (counts.len() as f64).ln())
}

/// Mean over users of |top-10 recommendations ∩ next-step interactions| / 10.
pub fn precision_at_10<F>(recommended: &[(u32, Vec<u32>)], interacted: F) -> Option<f64>
where
    F: Fn(u32, u32) -> bool,
{
    if recommended.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for (user, recs) in recommended {
        let hits = recs.iter().take(10).filter(|&&c| interacted(*user, c)).count();
        total += hits as f64 / 10.0;
    }
    Some(total / recommended.len() as f64)
}

/// Fraction of users whose satisfaction clears the threshold.
pub fn retention(satisfactions: &[f64], threshold: f64) -> f64 {
    if satisfactions.is_empty() {
        return 0.0;
    }
    satisfactions.iter().filter(|&&s| s >= threshold).count() as f64 / satisfactions.len() as f64
}
