//! Per-user train/test split, Precision@k / NDCG@k and the evaluation loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{contract, Error, Result};
use crate::graph::InteractionGraph;
use crate::head::{top_k_masked, Ranking};
use crate::lightgcn::GraphEmbeddings;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub train: InteractionGraph,
    /// Held-out items per user; empty for users that are not evaluated.
    pub test: Vec<Vec<usize>>,
    /// Users left without a train or a test edge.
    pub excluded_users: usize,
    pub ratio: f64,
    pub seed: u64,
}

impl EvalSplit {
    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }

    /// Users with at least one train and one test edge.
    pub fn test_users(&self) -> Vec<usize> {
        (0..self.test.len())
            .filter(|&u| !self.test[u].is_empty() && self.train.user_degree(u) > 0)
            .collect()
    }

    pub fn test_edges(&self) -> usize {
        self.test.iter().map(Vec::len).sum()
    }
}

/// Splits every user's interactions at random: `round(ratio·n)` go to
/// train, the rest to test. Train edges keep their original order.
pub fn split_dataset(graph: &InteractionGraph, ratio: f64, seed: u64) -> Result<EvalSplit> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(contract(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut in_train = BTreeMap::new();
    let mut test = vec![Vec::new(); graph.num_users()];
    let mut excluded = 0;
    for (u, slot) in test.iter_mut().enumerate() {
        let items = graph.user_items(u);
        let n = items.len();
        let n_train = Float::round(ratio * n as f64) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        Rng::stream(seed, "split", u as u64).shuffle(&mut order);
        for &j in &order[..n_train] {
            in_train.insert((u, items[j]), ());
        }
        let mut held: Vec<usize> = order[n_train..].iter().map(|&j| items[j]).collect();
        held.sort_unstable();
        if n_train == 0 || held.is_empty() {
            excluded += 1;
            if n_train == 0 {
                // Nothing to condition on: keep the user's edges for training.
                for &i in items {
                    in_train.insert((u, i), ());
                }
            }
            held.clear();
        }
        *slot = held;
    }
    let edges = graph
        .edges()
        .iter()
        .copied()
        .filter(|e| in_train.contains_key(e));
    let (train, _) = InteractionGraph::from_edges(graph.num_users(), graph.num_items(), edges)?;
    Ok(EvalSplit {
        train,
        test,
        excluded_users: excluded,
        ratio,
        seed,
    })
}

/// `|top-k ∩ relevant| / k`; missing ranks count as misses.
pub fn precision_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    hits as f64 / k as f64
}

/// Binary-relevance NDCG@k; `None` when nothing is relevant.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let discount = |r: usize| 1.0 / Float::log2((r + 1) as f64);
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(j, _)| discount(j + 1))
        .sum();
    let idcg: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    if idcg == 0.0 {
        return Some(0.0);
    }
    Some(dcg / idcg)
}

/// Produces a ranked list for a user given the items to exclude.
pub trait Ranker {
    fn rank(&self, user: usize, mask: &[bool], k: usize) -> Result<Ranking>;
}

impl<T: Fn(usize, &[bool], usize) -> Result<Ranking>> Ranker for T {
    fn rank(&self, user: usize, mask: &[bool], k: usize) -> Result<Ranking> {
        self(user, mask, k)
    }
}

/// Scores by dot products of the pretrained embeddings.
pub struct DotRanker<'a> {
    pub embeddings: &'a GraphEmbeddings,
}

impl Ranker for DotRanker<'_> {
    fn rank(&self, user: usize, mask: &[bool], k: usize) -> Result<Ranking> {
        if user >= self.embeddings.users().rows() {
            return Err(contract(format!("user {user} has no embedding")));
        }
        let scores = crate::lightgcn::dot_scores(self.embeddings, user);
        let items = top_k_masked(&scores, mask, k);
        Ok(Ranking {
            shortfall: k - items.len(),
            items,
        })
    }
}

/// Uniformly random order over the allowed items, seeded per user.
pub struct RandomRanker {
    pub seed: u64,
}

impl Ranker for RandomRanker {
    fn rank(&self, user: usize, mask: &[bool], k: usize) -> Result<Ranking> {
        let mut cand: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        Rng::stream(self.seed, "random-ranker", user as u64).shuffle(&mut cand);
        cand.truncate(k);
        Ok(Ranking {
            shortfall: k - cand.len(),
            items: cand,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mode: String,
    pub users_evaluated: usize,
    /// Users left out of the means for lack of train or test items.
    pub users_excluded: usize,
    /// `"P@5"`, `"N@10"`, ... → mean over evaluated users.
    pub metrics: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Checks a ranked list against the catalog and the exclusion mask.
pub fn check_ranking(user: usize, ranked: &[usize], mask: &[bool], k: usize) -> Result<()> {
    if ranked.len() > k {
        return Err(Error::Invariant(format!(
            "user {user}: {} items ranked for cutoff {k}",
            ranked.len()
        )));
    }
    let mut seen = vec![false; mask.len()];
    for &i in ranked {
        if i >= mask.len() {
            return Err(Error::Invariant(format!(
                "user {user}: item id {i} is not in the catalog of {}",
                mask.len()
            )));
        }
        if mask[i] {
            return Err(Error::Invariant(format!(
                "user {user}: excluded item {i} was recommended"
            )));
        }
        if core::mem::replace(&mut seen[i], true) {
            return Err(Error::Invariant(format!(
                "user {user}: item {i} ranked twice"
            )));
        }
    }
    Ok(())
}

/// Ranks every test user once at the largest cutoff and averages P@k and
/// N@k for each cutoff. Any invalid ranking is an error.
pub fn evaluate(
    ranker: &dyn Ranker,
    split: &EvalSplit,
    cutoffs: &[usize],
    mode: &str,
) -> Result<MetricReport> {
    let users = split.test_users();
    if users.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let max_k = cutoffs.iter().copied().max().unwrap_or(0);
    if max_k == 0 {
        return Err(contract("at least one positive cutoff is needed"));
    }
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for &k in cutoffs {
        sums.insert(format!("P@{k}"), 0.0);
        sums.insert(format!("N@{k}"), 0.0);
    }
    for &u in &users {
        let mask = split.train.item_mask(u);
        let ranking = ranker.rank(u, &mask, max_k)?;
        check_ranking(u, &ranking.items, &mask, max_k)?;
        let relevant = &split.test[u];
        for &k in cutoffs {
            *sums.get_mut(&format!("P@{k}")).expect("inserted") +=
                precision_at_k(&ranking.items, relevant, k);
            *sums.get_mut(&format!("N@{k}")).expect("inserted") +=
                ndcg_at_k(&ranking.items, relevant, k).expect("test users have relevant items");
        }
    }
    let n = users.len() as f64;
    Ok(MetricReport {
        mode: String::from(mode),
        users_evaluated: users.len(),
        users_excluded: split.test.len() - users.len(),
        metrics: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
    })
}

/// Exact mean and variance of the user-averaged P@k under uniformly random
/// ranking of each user's candidates (all items outside their train set).
pub fn random_precision_moments(split: &EvalSplit, k: usize) -> Result<(f64, f64)> {
    let users = split.test_users();
    if users.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut mean = 0.0;
    let mut var = 0.0;
    for &u in &users {
        let m = (split.num_items() - split.train.user_degree(u)) as f64;
        let t = split.test[u].len() as f64;
        let draws = (k as f64).min(m);
        // Hits in the top k are hypergeometric: `draws` picks from `m`
        // candidates of which `t` are relevant.
        let p = t / m;
        let hits_mean = draws * p;
        let hits_var = if m > 1.0 {
            draws * p * (1.0 - p) * (m - draws) / (m - 1.0)
        } else {
            0.0
        };
        mean += hits_mean / k as f64;
        var += hits_var / (k * k) as f64;
    }
    let n = users.len() as f64;
    Ok((mean / n, var / (n * n)))
}
