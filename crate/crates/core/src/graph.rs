//! Directed follow graph over a fixed node set.
//!
//! Nodes are agent ids assigned at init; churned agents keep their node and
//! edges. Neighbor sets iterate in ascending id order, which the simulation
//! relies on for determinism.

use std::collections::BTreeSet;

#[derive(Debug, Clone, Default)]
pub struct FollowGraph {
    out: Vec<BTreeSet<u32>>,
    inn: Vec<BTreeSet<u32>>,
    edge_count: usize,
}

impl FollowGraph {
    pub fn new(n: usize) -> Self {
        FollowGraph {
            out: vec![BTreeSet::new(); n],
            inn: vec![BTreeSet::new(); n],
            edge_count: 0,
        }
    }

    pub fn node_count(&self) -> usize {
        self.out.len()
    }

    /// Number of directed edges.
    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Insert `from -> to`. Self-loops and duplicates are ignored.
    /// Returns true if the edge is new.
    pub fn add_edge(&mut self, from: u32, to: u32) -> bool {
        if from == to {
            return false;
        }
        if self.out[from as usize].insert(to) {
            self.inn[to as usize].insert(from);
            self.edge_count += 1;
            true
        } else {
            false
        }
    }

    pub fn has_edge(&self, from: u32, to: u32) -> bool {
        self.out[from as usize].contains(&to)
    }

    /// Accounts `from` follows (out-neighbors), ascending.
    pub fn followees(&self, from: u32) -> impl Iterator<Item = u32> + '_ {
        self.out[from as usize].iter().copied()
    }

    /// Accounts following `to` (in-neighbors), ascending.
    pub fn followers(&self, to: u32) -> impl Iterator<Item = u32> + '_ {
        self.inn[to as usize].iter().copied()
    }

    pub fn out_degree(&self, node: u32) -> usize {
        self.out[node as usize].len()
    }

    /// Directed edges whose reverse also exists.
    pub fn reciprocated_edge_count(&self) -> usize {
        let mut count = 0;
        for (i, outs) in self.out.iter().enumerate() {
            for &j in outs {
                if self.out[j as usize].contains(&(i as u32)) {
                    count += 1;
                }
            }
        }
        count
    }

    /// Undirected projection as sorted adjacency lists (no self-loops).
    pub fn undirected_adjacency(&self) -> Vec<Vec<u32>> {
        let n = self.node_count();
        let mut adj: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
        for (i, outs) in self.out.iter().enumerate() {
            for &j in outs {
                adj[i].insert(j);
                adj[j as usize].insert(i as u32);
            }
        }
        adj.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// All directed edges in (from, to) order, ascending.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.out
            .iter()
            .enumerate()
            .flat_map(|(i, outs)| outs.iter().map(move |&j| (i as u32, j)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edges_dedupe_and_ignore_self_loops() {
        let mut g = FollowGraph::new(3);
        assert!(g.add_edge(0, 1));
        assert!(!g.add_edge(0, 1));
        assert!(!g.add_edge(2, 2));
        assert_eq!(g.edge_count(), 1);
        assert!(g.has_edge(0, 1));
        assert!(!g.has_edge(1, 0));
    }

    #[test]
    fn undirected_projection_merges_directions() {
        let mut g = FollowGraph::new(3);
        g.add_edge(0, 1);
        g.add_edge(1, 0);
        g.add_edge(1, 2);
        let adj = g.undirected_adjacency();
        assert_eq!(adj[0], vec![1]);
        assert_eq!(adj[1], vec![0, 2]);
        assert_eq!(adj[2], vec![1]);
        assert_eq!(g.reciprocated_edge_count(), 2);
    }
}
