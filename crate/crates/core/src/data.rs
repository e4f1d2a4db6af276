//! Catalog of external ids and item descriptions, seeded synthetic datasets
//! with planted clusters, and dataset statistics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::graph::InteractionGraph;
use crate::rng::Rng;

/// Dense index maps for users and items plus item descriptions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    users: Vec<String>,
    items: Vec<String>,
    descriptions: Vec<Option<String>>,
    user_index: BTreeMap<String, usize>,
    item_index: BTreeMap<String, usize>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an item; a repeated id is an error.
    pub fn add_item(&mut self, id: &str, description: Option<String>) -> Result<usize> {
        if self.item_index.contains_key(id) {
            return Err(contract(format!("item {id} listed twice")));
        }
        let idx = self.items.len();
        self.items.push(String::from(id));
        self.descriptions.push(description);
        self.item_index.insert(String::from(id), idx);
        Ok(idx)
    }

    /// Dense index of a user, assigned on first sight.
    pub fn intern_user(&mut self, id: &str) -> usize {
        if let Some(&u) = self.user_index.get(id) {
            return u;
        }
        let idx = self.users.len();
        self.users.push(String::from(id));
        self.user_index.insert(String::from(id), idx);
        idx
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    pub fn user_id(&self, u: usize) -> &str {
        &self.users[u]
    }

    pub fn item_id(&self, i: usize) -> &str {
        &self.items[i]
    }

    pub fn description(&self, i: usize) -> Option<&str> {
        self.descriptions[i].as_deref()
    }

    pub fn descriptions(&self) -> &[Option<String>] {
        &self.descriptions
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    /// Edge probability for a user and an item of the same cluster.
    pub in_cluster_p: f64,
    /// Edge probability across clusters.
    pub noise_p: f64,
    /// Size of each cluster's word pool.
    pub vocab_per_cluster: usize,
    /// Words per item description.
    pub description_words: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 40,
            items: 60,
            clusters: 2,
            in_cluster_p: 0.3,
            noise_p: 0.02,
            vocab_per_cluster: 12,
            description_words: 4,
            seed: 7,
        }
    }
}

const SYLLABLES: [&str; 16] = [
    "ba", "ko", "ri", "su", "ne", "ta", "mi", "lo", "ve", "du", "za", "pe", "gu", "fi", "ho", "ny",
];

/// Pronounceable word unique to `n`.
fn synthetic_word(mut n: usize) -> String {
    let mut w = String::new();
    loop {
        w.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
        if n == 0 {
            break;
        }
        n -= 1;
    }
    w
}

/// Word pool of cluster `c`; pools of different clusters are disjoint.
pub fn cluster_words(config: &SyntheticConfig, c: usize) -> Vec<String> {
    (0..config.vocab_per_cluster)
        .map(|j| synthetic_word(c * config.vocab_per_cluster + j))
        .collect()
}

/// Cluster of user `u` or item `i` (round robin).
pub fn cluster_of(index: usize, clusters: usize) -> usize {
    index % clusters
}

/// Users and items split into clusters; each (user, item) pair is an edge
/// with probability `in_cluster_p` inside a cluster and `noise_p` across.
/// Each user's edges come in a random order, which stands in for time.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(InteractionGraph, Catalog)> {
    if config.clusters == 0 || config.users == 0 || config.items == 0 {
        return Err(contract("synthetic dataset needs users, items and clusters"));
    }
    if config.vocab_per_cluster == 0 || config.description_words == 0 {
        return Err(contract("synthetic descriptions need words"));
    }
    let mut catalog = Catalog::new();
    let mut words = Rng::stream(config.seed, "synthetic-words", 0);
    let pools: Vec<Vec<String>> = (0..config.clusters)
        .map(|c| cluster_words(config, c))
        .collect();
    for i in 0..config.items {
        let pool = &pools[cluster_of(i, config.clusters)];
        let text: Vec<&str> = (0..config.description_words)
            .map(|_| pool[words.below(pool.len())].as_str())
            .collect();
        catalog.add_item(&format!("i{i}"), Some(text.join(" ")))?;
    }
    let mut edges = Vec::new();
    let mut rng = Rng::stream(config.seed, "synthetic-edges", 0);
    for u in 0..config.users {
        catalog.intern_user(&format!("u{u}"));
        let cu = cluster_of(u, config.clusters);
        let mut mine: Vec<usize> = (0..config.items)
            .filter(|&i| {
                let p = if cluster_of(i, config.clusters) == cu {
                    config.in_cluster_p
                } else {
                    config.noise_p
                };
                rng.bernoulli(p)
            })
            .collect();
        rng.shuffle(&mut mine);
        edges.extend(mine.into_iter().map(|i| (u, i)));
    }
    let (graph, _) = InteractionGraph::from_edges(config.users, config.items, edges)?;
    Ok((graph, catalog))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// `interactions / (users · items)`, 0 for an empty graph.
    pub density: f64,
}

impl DatasetStats {
    pub fn from_counts(users: usize, items: usize, interactions: usize) -> Self {
        let cells = users as f64 * items as f64;
        Self {
            users,
            items,
            interactions,
            density: if cells == 0.0 {
                0.0
            } else {
                interactions as f64 / cells
            },
        }
    }
}

pub fn dataset_stats(graph: &InteractionGraph) -> DatasetStats {
    DatasetStats::from_counts(graph.num_users(), graph.num_items(), graph.num_edges())
}

/// Builds the graph of `(user, item)` index pairs, rejecting out-of-range ids.
pub fn graph_from_pairs(
    catalog: &Catalog,
    pairs: impl IntoIterator<Item = (usize, usize)>,
) -> Result<(InteractionGraph, usize)> {
    InteractionGraph::from_edges(catalog.num_users(), catalog.num_items(), pairs).map_err(|e| {
        match e {
            Error::Index { .. } => contract(format!("interaction outside the catalog: {e}")),
            other => other,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_are_unique() {
        let mut seen: Vec<String> = (0..600).map(synthetic_word).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 600);
    }

    #[test]
    fn zero_noise_keeps_edges_in_cluster() {
        let cfg = SyntheticConfig {
            noise_p: 0.0,
            ..SyntheticConfig::default()
        };
        let (g, cat) = generate_synthetic(&cfg).unwrap();
        assert!(g.num_edges() > 0);
        assert!(g.edges().iter().all(|&(u, i)| u % 2 == i % 2));
        assert_eq!(cat.num_items(), 60);
        assert_eq!(generate_synthetic(&cfg).unwrap(), (g, cat));
    }

    #[test]
    fn stats_of_empty_graph() {
        let s = DatasetStats::from_counts(0, 0, 0);
        assert_eq!(s.density, 0.0);
        let (g, _) = InteractionGraph::from_edges(3, 4, [(0, 0), (1, 2)]).unwrap();
        assert_eq!(dataset_stats(&g).density, 2.0 / 12.0);
    }

    #[test]
    fn catalog_maps_are_bijective() {
        let mut c = Catalog::new();
        assert_eq!(c.add_item("x", None).unwrap(), 0);
        assert!(c.add_item("x", None).is_err());
        assert_eq!(c.intern_user("a"), 0);
        assert_eq!(c.intern_user("b"), 1);
        assert_eq!(c.intern_user("a"), 0);
        assert_eq!(c.user_id(c.user_index("b").unwrap()), "b");
    }
}
