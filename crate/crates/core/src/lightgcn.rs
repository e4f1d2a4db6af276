//! LightGCN propagation and BPR pretraining of the user/item embeddings.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::checksum::Checksum;
use crate::error::{contract, Error, Result};
use crate::graph::InteractionGraph;
use crate::ndgrad::{AdamConfig, AdamState, Scalar, SparseMatrix, Tape, Tensor, Var};
use crate::rng::Rng;

/// Pretrained user and item embeddings. Frozen once pretraining finishes.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEmbeddings {
    users: Tensor<f32>,
    items: Tensor<f32>,
    layers: usize,
    frozen: bool,
}

impl GraphEmbeddings {
    pub fn new(users: Tensor<f32>, items: Tensor<f32>, layers: usize) -> Result<Self> {
        if users.shape().len() != 2 || items.shape().len() != 2 || users.cols() != items.cols() {
            return Err(Error::Dimension {
                op: "graph embeddings",
                lhs: users.shape().to_vec(),
                rhs: items.shape().to_vec(),
            });
        }
        if !users.all_finite() || !items.all_finite() {
            return Err(Error::NumericDomain {
                op: "graph embeddings",
            });
        }
        Ok(Self {
            users,
            items,
            layers,
            frozen: false,
        })
    }

    /// Loads embeddings that were already frozen, e.g. from a checkpoint.
    pub fn frozen(users: Tensor<f32>, items: Tensor<f32>, layers: usize) -> Result<Self> {
        let mut e = Self::new(users, items, layers)?;
        e.freeze();
        Ok(e)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.users.set_requires_grad(false);
        self.items.set_requires_grad(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn users(&self) -> &Tensor<f32> {
        &self.users
    }

    pub fn items(&self) -> &Tensor<f32> {
        &self.items
    }

    pub fn users_mut(&mut self) -> Result<&mut Tensor<f32>> {
        if self.frozen {
            return Err(Error::Frozen("user graph embeddings"));
        }
        Ok(&mut self.users)
    }

    pub fn items_mut(&mut self) -> Result<&mut Tensor<f32>> {
        if self.frozen {
            return Err(Error::Frozen("item graph embeddings"));
        }
        Ok(&mut self.items)
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn checksum(&self) -> String {
        Checksum::new()
            .update_f32(self.users.data())
            .update_f32(self.items.data())
            .hex()
    }
}

/// Mean over layers `0..=layers` of `Â^l X`, where `X` stacks users over items.
pub fn lightgcn_propagate<F: Scalar>(
    graph: &InteractionGraph,
    users0: &Tensor<F>,
    items0: &Tensor<F>,
    layers: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let d = users0.cols();
    if users0.rows() != graph.num_users()
        || items0.rows() != graph.num_items()
        || items0.cols() != d
    {
        return Err(Error::Dimension {
            op: "lightgcn_propagate",
            lhs: users0.shape().to_vec(),
            rhs: items0.shape().to_vec(),
        });
    }
    let adjacency = graph.normalized_adjacency();
    let mut current: Vec<F> = users0.data().iter().chain(items0.data()).copied().collect();
    let mut total = current.clone();
    let mut next = vec![F::zero(); current.len()];
    for _ in 0..layers {
        adjacency.apply(&current, d, &mut next);
        for (t, &v) in total.iter_mut().zip(&next) {
            *t = *t + v;
        }
        core::mem::swap(&mut current, &mut next);
    }
    let scale = F::one() / F::of((layers + 1) as f64);
    total.iter_mut().for_each(|v| *v = *v * scale);
    let split = graph.num_users() * d;
    let items = total.split_off(split);
    Ok((
        Tensor::new(&[graph.num_users(), d], total)?,
        Tensor::new(&[graph.num_items(), d], items)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BprConfig {
    pub dim: usize,
    pub layers: usize,
    pub lr: f64,
    pub epochs: usize,
    pub neg_samples: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for BprConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            lr: 1e-3,
            epochs: 200,
            neg_samples: 1,
            batch_size: 1024,
            l2: 1e-5,
            init_std: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainReport {
    /// Users without any training edge; they receive no BPR signal.
    pub skipped_users: usize,
    pub epoch_losses: Vec<f64>,
}

/// Differentiable LightGCN over a fixed graph.
pub struct LightGcn {
    adjacency: Arc<SparseMatrix>,
    num_users: usize,
    layers: usize,
}

impl LightGcn {
    pub fn new(graph: &InteractionGraph, layers: usize) -> Self {
        Self {
            adjacency: Arc::new(graph.normalized_adjacency()),
            num_users: graph.num_users(),
            layers,
        }
    }

    /// Mean-of-layers embeddings for the stacked ego embeddings `x0`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, x0: Var) -> Result<Var> {
        let mut current = x0;
        let mut total = x0;
        for _ in 0..self.layers {
            current = tape.spmm(&self.adjacency, current)?;
            total = tape.add(total, current)?;
        }
        tape.scale(total, F::one() / F::of((self.layers + 1) as f64))
    }

    /// Mean of `-ln σ(s(u,i⁺) - s(u,i⁻))` over `(user, pos, neg)` triples,
    /// plus `l2/2` times the mean squared norm of the ego rows involved.
    pub fn bpr_loss<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        x0: Var,
        triples: &[(usize, usize, usize)],
        l2: f64,
    ) -> Result<Var> {
        if triples.is_empty() {
            return Err(Error::Empty("bpr batch"));
        }
        let nu = self.num_users;
        let fin = self.forward(tape, x0)?;
        let users: Vec<usize> = triples.iter().map(|t| t.0).collect();
        let pos: Vec<usize> = triples.iter().map(|t| nu + t.1).collect();
        let neg: Vec<usize> = triples.iter().map(|t| nu + t.2).collect();
        let eu = tape.gather_rows(fin, &users)?;
        let ep = tape.gather_rows(fin, &pos)?;
        let en = tape.gather_rows(fin, &neg)?;
        let up = tape.mul(eu, ep)?;
        let sp = tape.row_sums(up)?;
        let un = tape.mul(eu, en)?;
        let sn = tape.row_sums(un)?;
        let diff = tape.sub(sp, sn)?;
        let ls = tape.log_sigmoid(diff)?;
        let mean_ls = tape.mean(ls)?;
        let mut loss = tape.scale(mean_ls, -F::one())?;
        if l2 > 0.0 {
            let mut rows = users;
            rows.extend(pos);
            rows.extend(neg);
            let ego = tape.gather_rows(x0, &rows)?;
            let sq = tape.mul(ego, ego)?;
            let norm = tape.sum(sq)?;
            let reg = tape.scale(norm, F::of(l2 / (2.0 * triples.len() as f64)))?;
            loss = tape.add(loss, reg)?;
        }
        Ok(loss)
    }
}

fn sample_negative(graph: &InteractionGraph, u: usize, rng: &mut Rng) -> Option<usize> {
    if graph.user_degree(u) >= graph.num_items() {
        return None;
    }
    loop {
        let i = rng.below(graph.num_items());
        if !graph.has_edge(u, i) {
            return Some(i);
        }
    }
}

/// Trains LightGCN ego embeddings with BPR and returns the frozen
/// mean-of-layers embeddings. Deterministic for a given seed.
pub fn bpr_pretrain(
    graph: &InteractionGraph,
    config: &BprConfig,
) -> Result<(GraphEmbeddings, PretrainReport)> {
    if graph.num_edges() == 0 || graph.num_users() == 0 || graph.num_items() == 0 {
        return Err(Error::Empty("interaction graph"));
    }
    if config.dim == 0 || config.batch_size == 0 || config.neg_samples == 0 {
        return Err(contract("dim, batch_size and neg_samples must be positive"));
    }
    let mut report = PretrainReport {
        skipped_users: (0..graph.num_users())
            .filter(|&u| graph.user_degree(u) == 0)
            .count(),
        ..Default::default()
    };
    if report.skipped_users > 0 {
        log::warn!(
            "{} users have no training interactions and are skipped by BPR",
            report.skipped_users
        );
    }
    let nodes = graph.num_users() + graph.num_items();
    let mut init = Rng::stream(config.seed, "bpr-init", 0);
    let ego: Vec<f32> = init
        .normal_vec(nodes * config.dim, config.init_std)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    let mut ego = Tensor::new(&[nodes, config.dim], ego)?.into_param();
    let model = LightGcn::new(graph, config.layers);
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));

    for epoch in 0..config.epochs {
        let mut rng = Rng::stream(config.seed, "bpr-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..graph.num_edges()).collect();
        rng.shuffle(&mut order);
        let mut triples = Vec::with_capacity(order.len() * config.neg_samples);
        for &e in &order {
            let (u, i) = graph.edges()[e];
            for _ in 0..config.neg_samples {
                if let Some(j) = sample_negative(graph, u, &mut rng) {
                    triples.push((u, i, j));
                }
            }
        }
        let mut total = 0.0;
        let mut batches = 0;
        for batch in triples.chunks(config.batch_size) {
            let mut tape = Tape::<f32>::new();
            let x0 = tape.leaf(&ego);
            let loss = model.bpr_loss(&mut tape, x0, batch, config.l2)?;
            total += tape.value(loss)[0] as f64;
            batches += 1;
            tape.backward(loss)?;
            tape.write_grad(x0, &mut ego)?;
            adam.step(&mut [("graph.ego", &mut ego)])?;
        }
        report.epoch_losses.push(if batches > 0 {
            total / batches as f64
        } else {
            0.0
        });
    }

    let mut tape = Tape::<f32>::new();
    let x0 = tape.leaf(&ego);
    let fin = model.forward(&mut tape, x0)?;
    let mut all = tape.value(fin).to_vec();
    let items = all.split_off(graph.num_users() * config.dim);
    let mut emb = GraphEmbeddings::new(
        Tensor::new(&[graph.num_users(), config.dim], all)?,
        Tensor::new(&[graph.num_items(), config.dim], items)?,
        config.layers,
    )?;
    emb.freeze();
    Ok((emb, report))
}

/// Dot-product scores of one user against every item.
pub fn dot_scores(emb: &GraphEmbeddings, user: usize) -> Vec<f32> {
    let u = emb.users().row(user);
    (0..emb.items().rows())
        .map(|i| {
            emb.items()
                .row(i)
                .iter()
                .zip(u)
                .fold(0.0f32, |s, (&a, &b)| s + a * b)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> InteractionGraph {
        InteractionGraph::from_edges(2, 2, [(0, 0), (0, 1), (1, 1)])
            .unwrap()
            .0
    }

    #[test]
    fn zero_layers_returns_input() {
        let g = toy();
        let u = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.3 - 1.0);
        let i = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * -0.2 + 0.4);
        let (pu, pi) = lightgcn_propagate(&g, &u, &i, 0).unwrap();
        assert_eq!(pu.data(), u.data());
        assert_eq!(pi.data(), i.data());
    }

    #[test]
    fn isolated_node_keeps_only_its_layer_zero_share() {
        let g = InteractionGraph::from_edges(3, 2, [(0, 0), (1, 1)])
            .unwrap()
            .0;
        let u = Tensor::<f64>::from_fn(&[3, 2], |i| 1.0 + i as f64);
        let i = Tensor::<f64>::from_fn(&[2, 2], |i| -(i as f64));
        let (pu, _) = lightgcn_propagate(&g, &u, &i, 3).unwrap();
        assert_eq!(pu.row(2), &[5.0 / 4.0, 6.0 / 4.0]);
    }

    #[test]
    fn frozen_embeddings_refuse_mutation() {
        let mut e =
            GraphEmbeddings::new(Tensor::zeros(&[2, 2]), Tensor::zeros(&[3, 2]), 1).unwrap();
        assert!(e.users_mut().is_ok());
        e.freeze();
        assert_eq!(
            e.users_mut().unwrap_err(),
            Error::Frozen("user graph embeddings")
        );
        assert!(e.items_mut().is_err());
    }

    #[test]
    fn equal_scores_give_ln2_loss() {
        let g = toy();
        let model = LightGcn::new(&g, 2);
        let mut tape = Tape::<f64>::new();
        let x0 = tape.constant(&[4, 3], vec![0.0; 12]).unwrap();
        let loss = model
            .bpr_loss(&mut tape, x0, &[(1, 1, 0), (0, 0, 1)], 0.0)
            .unwrap();
        assert!((tape.value(loss)[0] - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn empty_graph_is_rejected() {
        let g = InteractionGraph::from_edges(2, 2, []).unwrap().0;
        assert!(bpr_pretrain(&g, &BprConfig::default()).is_err());
    }
}
