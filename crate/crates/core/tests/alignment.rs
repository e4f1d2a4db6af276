use std::collections::HashSet;

use glta_core::align::{
    Ablation, AlignParams, ItemTextTask, Stage2Config, Stage3Config, UserItemTask, UserText,
    ITEM_TEXT_HEADER, USER_ITEM_HEADER,
};
use glta_core::data::{cluster_of, cluster_words, generate_synthetic, SyntheticConfig};
use glta_core::lightgcn::{bpr_pretrain, BprConfig, GraphEmbeddings};
use glta_core::lm::{LmConfig, TransformerLm, Vocabulary};
use glta_core::ndgrad::{AdamConfig, AdamState, Tensor};
use glta_core::rng::Rng;
use glta_core::textgen::{offline_prediction, offline_profile};

fn random_f32(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = rng.normal_vec(rows * cols, 0.1).into_iter().map(|v| v as f32).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

#[test]
fn six_item_toy_reaches_full_accuracy() {
    let words = ["apple", "river", "castle", "violin", "desert", "rocket"];
    let descriptions: Vec<Option<String>> = words.iter().map(|w| Some(w.to_string())).collect();
    let mut corpus: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    corpus.push(ITEM_TEXT_HEADER.into());
    let vocab = Vocabulary::build(&corpus, 100).unwrap();
    let mut rng = Rng::seeded(1);
    let emb = GraphEmbeddings::frozen(random_f32(&mut rng, 2, 8), random_f32(&mut rng, 6, 8), 2)
        .unwrap();
    let lm = TransformerLm::<f32>::init(LmConfig::new(vocab.len(), 64, 2, 8, 64), 3).unwrap();
    let cfg = Stage2Config {
        epochs: 300,
        lr: 1e-2,
        batch_size: 2,
        seed: 3,
        ..Stage2Config::default()
    };
    let task = ItemTextTask::new(&lm, &emb, &vocab, &descriptions, cfg).unwrap();
    let mut params = AlignParams::init(&emb, 64, 6, false, 3);
    let mut adam = AdamState::new(AdamConfig::with_lr(1e-2));
    let initial = task.mean_loss(0, &params).unwrap();
    // An untrained head is close to uniform over the six items.
    assert!((initial - 6f64.ln()).abs() / 6f64.ln() < 0.05, "initial loss {initial}");
    for epoch in 0..300 {
        task.run_epoch(epoch, &mut params, &mut adam).unwrap();
    }
    let acc: f64 = (0..20).map(|e| task.accuracy(5000 + e, &params).unwrap()).sum::<f64>() / 20.0;
    assert_eq!(acc, 1.0, "accuracy over fresh shuffles {acc}");
}

#[test]
fn user_item_loss_decreases() {
    let synth = SyntheticConfig {
        users: 12,
        items: 16,
        ..SyntheticConfig::default()
    };
    let (graph, catalog) = generate_synthetic(&synth).unwrap();
    let (emb, _) = bpr_pretrain(
        &graph,
        &BprConfig {
            dim: 8,
            epochs: 20,
            seed: 1,
            ..BprConfig::default()
        },
    )
    .unwrap();
    let mut corpus: Vec<String> = catalog.descriptions().iter().flatten().cloned().collect();
    corpus.push(USER_ITEM_HEADER.into());
    let vocab = Vocabulary::build(&corpus, 500).unwrap();
    let texts: Vec<UserText> = (0..graph.num_users())
        .map(|u| {
            let history: Vec<&str> = graph
                .user_items(u)
                .iter()
                .filter_map(|&i| catalog.description(i))
                .collect();
            UserText::encode(
                &vocab,
                &offline_profile(&history, 4),
                &offline_prediction(&history, 4, 1.0),
                8,
            )
        })
        .collect();
    let lm = TransformerLm::<f32>::init(LmConfig::new(vocab.len(), 16, 1, 2, 96), 2).unwrap();
    let cfg = Stage3Config {
        epochs: 8,
        lr: 1e-2,
        k: 3,
        context: 5,
        user_batch: 4,
        seed: 4,
        ..Stage3Config::default()
    };
    let task =
        UserItemTask::new(&lm, &emb, &graph, &vocab, &texts, Ablation::default(), cfg).unwrap();
    let mut params = AlignParams::init(&emb, 16, graph.num_items(), false, 4);
    let mut adam = AdamState::new(AdamConfig::with_lr(1e-2));
    let before = task.mean_loss(0, &params).unwrap();
    for epoch in 0..8 {
        task.run_epoch(epoch, &mut params, &mut adam).unwrap();
    }
    let after = task.mean_loss(0, &params).unwrap();
    assert!(after < 0.9 * before, "loss {before} -> {after}");
}

#[test]
fn synthetic_descriptions_separate_clusters() {
    let cfg = SyntheticConfig::default();
    let (graph, catalog) = generate_synthetic(&cfg).unwrap();
    let pools: Vec<HashSet<String>> = (0..cfg.clusters)
        .map(|c| cluster_words(&cfg, c).into_iter().collect())
        .collect();
    for (a, pa) in pools.iter().enumerate() {
        for pb in &pools[a + 1..] {
            assert!(pa.is_disjoint(pb));
        }
    }
    // A bag-of-words vote recovers every item's cluster.
    for i in 0..graph.num_items() {
        let text = catalog.description(i).unwrap();
        let votes: Vec<usize> = pools
            .iter()
            .map(|p| text.split_whitespace().filter(|w| p.contains(*w)).count())
            .collect();
        let best = (0..votes.len()).max_by_key(|&c| votes[c]).unwrap();
        assert_eq!(best, cluster_of(i, cfg.clusters), "item {i}: {text}");
        assert_eq!(votes[best], cfg.description_words);
    }
    let inside = graph
        .edges()
        .iter()
        .filter(|&&(u, i)| cluster_of(u, cfg.clusters) == cluster_of(i, cfg.clusters))
        .count();
    assert!(inside as f64 / graph.num_edges() as f64 > 0.85);
}
