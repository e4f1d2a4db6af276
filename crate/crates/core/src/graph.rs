//! Bipartite user–item interaction graph.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{contract, Error, Result};
use crate::ndgrad::SparseMatrix;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionGraph {
    num_users: usize,
    num_items: usize,
    /// Edges in first-seen order.
    edges: Vec<(usize, usize)>,
    /// Per-user items in first-seen order (treated as chronological).
    user_items: Vec<Vec<usize>>,
    item_users: Vec<Vec<usize>>,
    /// Per-user items sorted, for membership tests.
    user_sorted: Vec<Vec<usize>>,
}

impl InteractionGraph {
    /// Builds a graph, collapsing duplicate edges. Returns the graph and the
    /// number of duplicates dropped.
    pub fn from_edges(
        num_users: usize,
        num_items: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<(Self, usize)> {
        let mut g = Self {
            num_users,
            num_items,
            edges: Vec::new(),
            user_items: vec![Vec::new(); num_users],
            item_users: vec![Vec::new(); num_items],
            user_sorted: vec![Vec::new(); num_users],
        };
        let mut duplicates = 0;
        for (u, i) in edges {
            if u >= num_users {
                return Err(Error::Index {
                    op: "graph user",
                    row: g.edges.len(),
                    index: u,
                    bound: num_users,
                });
            }
            if i >= num_items {
                return Err(Error::Index {
                    op: "graph item",
                    row: g.edges.len(),
                    index: i,
                    bound: num_items,
                });
            }
            match g.user_sorted[u].binary_search(&i) {
                Ok(_) => duplicates += 1,
                Err(pos) => {
                    g.user_sorted[u].insert(pos, i);
                    g.user_items[u].push(i);
                    g.item_users[i].push(u);
                    g.edges.push((u, i));
                }
            }
        }
        Ok((g, duplicates))
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn user_items(&self, u: usize) -> &[usize] {
        &self.user_items[u]
    }

    pub fn item_users(&self, i: usize) -> &[usize] {
        &self.item_users[i]
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.user_items[u].len()
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.item_users[i].len()
    }

    pub fn has_edge(&self, u: usize, i: usize) -> bool {
        self.user_sorted
            .get(u)
            .is_some_and(|items| items.binary_search(&i).is_ok())
    }

    /// Exclusion mask over items for user `u`.
    pub fn item_mask(&self, u: usize) -> Vec<bool> {
        let mut mask = vec![false; self.num_items];
        for &i in &self.user_items[u] {
            mask[i] = true;
        }
        mask
    }

    /// Symmetric normalized adjacency `D^{-1/2} A D^{-1/2}` over the stacked
    /// node set (users first, then items). Isolated nodes get empty rows.
    pub fn normalized_adjacency(&self) -> SparseMatrix {
        let n = self.num_users + self.num_items;
        let mut triplets = Vec::with_capacity(2 * self.edges.len());
        for u in 0..self.num_users {
            for &i in &self.user_sorted[u] {
                let w = 1.0 / Float::sqrt((self.user_degree(u) * self.item_degree(i)) as f64);
                triplets.push((u, self.num_users + i, w));
            }
        }
        for i in 0..self.num_items {
            let mut users = self.item_users[i].clone();
            users.sort_unstable();
            for u in users {
                let w = 1.0 / Float::sqrt((self.user_degree(u) * self.item_degree(i)) as f64);
                triplets.push((self.num_users + i, u, w));
            }
        }
        SparseMatrix::from_triplets(n, n, &triplets)
    }

    /// Consistency check of the adjacency structure against the edge list.
    pub fn validate(&self) -> Result<()> {
        let mut from_users = 0;
        for u in 0..self.num_users {
            from_users += self.user_items[u].len();
            if self.user_items[u].len() != self.user_sorted[u].len() {
                return Err(contract("user adjacency out of sync"));
            }
            for &i in &self.user_items[u] {
                if i >= self.num_items || !self.item_users[i].contains(&u) {
                    return Err(contract(alloc::format!(
                        "edge ({u}, {i}) missing on item side"
                    )));
                }
            }
        }
        let from_items: usize = self.item_users.iter().map(Vec::len).sum();
        if from_users != self.edges.len() || from_items != self.edges.len() {
            return Err(contract("degree sums disagree with edge count"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_collapse_and_adjacency_is_consistent() {
        let (g, dup) =
            InteractionGraph::from_edges(3, 4, [(0, 1), (0, 2), (1, 1), (0, 1), (2, 3)]).unwrap();
        assert_eq!(dup, 1);
        assert_eq!(g.num_edges(), 4);
        assert_eq!(g.user_items(0), &[1, 2]);
        assert_eq!(g.item_users(1), &[0, 1]);
        assert_eq!(g.item_degree(0), 0);
        assert!(g.has_edge(2, 3) && !g.has_edge(2, 2));
        g.validate().unwrap();
    }

    #[test]
    fn out_of_range_edges_are_rejected() {
        assert!(InteractionGraph::from_edges(2, 2, [(0, 2)]).is_err());
        assert!(InteractionGraph::from_edges(2, 2, [(5, 0)]).is_err());
    }

    #[test]
    fn normalized_adjacency_is_symmetric() {
        let (g, _) = InteractionGraph::from_edges(2, 3, [(0, 0), (0, 1), (1, 1), (1, 2)]).unwrap();
        let a = g.normalized_adjacency();
        let n = a.rows();
        let mut dense = vec![0.0; n * n];
        for r in 0..n {
            for (c, w) in a.row_entries(r) {
                dense[r * n + c] = w;
            }
        }
        for r in 0..n {
            for c in 0..n {
                assert_eq!(dense[r * n + c], dense[c * n + r]);
            }
        }
        // user 0 (deg 2) – item 1 (deg 2)
        assert!((dense[3] - 0.5).abs() < 1e-15);
    }
}
