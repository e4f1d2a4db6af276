//! The pipeline commands: graph pretraining, item-text alignment, text
//! generation, user-item alignment, evaluation and ablations.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use glta_core::align::{
    AlignParams, AlignedModel, ItemTextTask, Stage2Config, Stage3Config, UserItemTask, UserText,
    ITEM_TEXT_HEADER, USER_ITEM_HEADER,
};
use glta_core::data::{generate_synthetic, Catalog};
use glta_core::eval::{evaluate, random_precision_moments, split_dataset, DotRanker, EvalSplit, MetricReport};
use glta_core::graph::InteractionGraph;
use glta_core::head::InferenceMode;
use glta_core::lightgcn::{bpr_pretrain, BprConfig, GraphEmbeddings};
use glta_core::lm::{LmConfig, TransformerLm, Vocabulary};
use glta_core::ndgrad::{AdamConfig, AdamState, Moments, Tensor};
use glta_core::textgen::DEFAULT_TEXT;
use serde::Serialize;

use crate::assets::{generate_assets, TextCache, UserHistory, UserTextAssets};
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::{GenerationMode, RunConfig};
use crate::dataset::load_dataset;
use crate::error::{io_err, Error, Result};
use crate::llm::ChatClient;

/// Dataset, split and vocabulary shared by every command.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: InteractionGraph,
    pub catalog: Catalog,
    pub split: EvalSplit,
    pub vocab: Vocabulary,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (graph, catalog) = if cfg.data.interactions.is_empty() {
        generate_synthetic(&cfg.synthetic)?
    } else {
        let d = load_dataset(
            Path::new(&cfg.data.interactions),
            Path::new(&cfg.data.items),
        )?;
        (d.graph, d.catalog)
    };
    let split = split_dataset(&graph, cfg.eval.ratio, cfg.run.seed)?;
    let mut corpus: Vec<&str> = catalog.descriptions().iter().flatten().map(String::as_str).collect();
    corpus.extend([ITEM_TEXT_HEADER, USER_ITEM_HEADER, DEFAULT_TEXT]);
    let vocab = Vocabulary::build(&corpus, cfg.lm.vocab_cap)?;
    Ok(Prepared {
        graph,
        catalog,
        split,
        vocab,
    })
}

/// Per-run options that are not part of the config.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub force: bool,
    /// Continue an unfinished checkpoint of the same stage.
    pub resume: bool,
    /// Stop once this many epochs are done, leaving a resumable checkpoint.
    pub stop_after: Option<usize>,
}

fn lm_config(cfg: &RunConfig, vocab: &Vocabulary) -> LmConfig {
    LmConfig::new(
        vocab.len(),
        cfg.lm.d_model,
        cfg.lm.depth,
        cfg.lm.heads,
        cfg.lm.max_len,
    )
}

fn push_backbone(ckpt: &mut Checkpoint, emb: &GraphEmbeddings, lm: &TransformerLm) {
    ckpt.push("graph.users", emb.users());
    ckpt.push("graph.items", emb.items());
    for (name, t) in lm.named_tensors() {
        ckpt.push(name, t);
    }
    ckpt.set_meta("checksum.graph", emb.checksum());
    ckpt.set_meta("checksum.lm", lm.checksum());
}

fn array(ckpt: &Checkpoint, name: &str) -> Result<Tensor> {
    ckpt.get(name).cloned().ok_or_else(|| Error::Checkpoint {
        path: PathBuf::new(),
        msg: format!("missing array {name}"),
    })
}

/// Frozen graph embeddings and backbone stored in any checkpoint.
pub fn load_backbone(
    ckpt: &Checkpoint,
    cfg: &RunConfig,
    vocab: &Vocabulary,
) -> Result<(GraphEmbeddings, TransformerLm)> {
    let emb = GraphEmbeddings::frozen(
        array(ckpt, "graph.users")?,
        array(ckpt, "graph.items")?,
        cfg.graph.layers,
    )?;
    let lm = TransformerLm::from_named(lm_config(cfg, vocab), |n| ckpt.get(n).cloned())?;
    Ok((emb, lm))
}

fn fresh_params(cfg: &RunConfig, emb: &GraphEmbeddings) -> AlignParams {
    AlignParams::init(
        emb,
        cfg.lm.d_model,
        emb.items().rows(),
        cfg.ablation.no_user_align,
        cfg.run.seed,
    )
}

fn load_params(ckpt: &Checkpoint, cfg: &RunConfig, emb: &GraphEmbeddings) -> Result<AlignParams> {
    let mut p = fresh_params(cfg, emb);
    p.assign(|n| ckpt.get(n).cloned())?;
    Ok(p)
}

fn push_params(ckpt: &mut Checkpoint, params: &AlignParams) {
    for (name, t) in params.named() {
        ckpt.push(name, t);
    }
}

fn push_adam(ckpt: &mut Checkpoint, adam: &AdamState) {
    let mut names = Vec::new();
    for m in adam.moments() {
        let n = m.m.len();
        ckpt.push(format!("adam.m.{}", m.name), &Tensor::new(&[n], m.m.clone()).expect("non-empty"));
        ckpt.push(format!("adam.v.{}", m.name), &Tensor::new(&[n], m.v.clone()).expect("non-empty"));
        names.push(m.name.clone());
    }
    ckpt.set_meta("adam.t", adam.step_count());
    ckpt.set_meta("adam.slots", names.join(","));
}

fn load_adam(ckpt: &Checkpoint, config: AdamConfig) -> Result<AdamState> {
    let t: u64 = meta_parse(ckpt, "adam.t")?;
    let names = ckpt.meta("adam.slots").unwrap_or_default();
    let mut slots = Vec::new();
    for name in names.split(',').filter(|n| !n.is_empty()) {
        slots.push(Moments {
            name: name.to_string(),
            m: array(ckpt, &format!("adam.m.{name}"))?.into_data(),
            v: array(ckpt, &format!("adam.v.{name}"))?.into_data(),
        });
    }
    Ok(AdamState::restore(config, t, slots))
}

fn meta_parse<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    ckpt.meta(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint {
            path: PathBuf::new(),
            msg: format!("missing or malformed metadata {key}"),
        })
}

fn ensure_writable(path: &Path, opts: &RunOptions) -> Result<()> {
    if path.exists() && !opts.force && !opts.resume {
        return Err(Error::Exists(path.to_path_buf()));
    }
    Ok(())
}

/// Stage 1: BPR-trained LightGCN embeddings plus the frozen backbone.
pub fn cmd_pretrain(cfg: &RunConfig, opts: &RunOptions) -> Result<Checkpoint> {
    let path = cfg.stage1_path();
    ensure_writable(&path, &RunOptions { resume: false, ..*opts })?;
    let prep = prepare(cfg)?;
    let bpr = BprConfig {
        dim: cfg.graph.dim,
        layers: cfg.graph.layers,
        lr: cfg.graph.lr,
        epochs: cfg.graph.epochs,
        neg_samples: cfg.graph.neg_samples,
        batch_size: cfg.graph.batch_size,
        l2: cfg.graph.l2,
        init_std: cfg.graph.init_std,
        seed: cfg.run.seed,
    };
    let (emb, report) = bpr_pretrain(&prep.split.train, &bpr)?;
    let mut lm = TransformerLm::init(lm_config(cfg, &prep.vocab), cfg.run.seed)?;
    if cfg.lm.pretrain {
        let mut seqs: Vec<Vec<_>> = prep
            .catalog
            .descriptions()
            .iter()
            .flatten()
            .map(|d| prep.vocab.encode(d))
            .collect();
        seqs.push(prep.vocab.encode(ITEM_TEXT_HEADER));
        seqs.push(prep.vocab.encode(USER_ITEM_HEADER));
        let losses = lm.pretrain_next_token(&seqs, cfg.lm.pretrain_epochs, cfg.lm.pretrain_lr, cfg.run.seed)?;
        log::info!("backbone pretraining losses {losses:?}");
    }
    let mut ckpt = Checkpoint::new(Stage::Graph, cfg.snapshot());
    push_backbone(&mut ckpt, &emb, &lm);
    ckpt.set_meta("seed", cfg.run.seed);
    ckpt.set_meta("epoch", cfg.graph.epochs);
    ckpt.set_meta("complete", true);
    if let Some(l) = report.epoch_losses.last() {
        ckpt.set_meta("final_loss", l);
    }
    ckpt.save(&path, opts.force)?;
    log::info!("wrote {}", path.display());
    Ok(ckpt)
}

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    loss: f64,
    wall_ms: u128,
}

struct TrainLog {
    file: std::fs::File,
    path: PathBuf,
}

impl TrainLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    fn record(&mut self, epoch: usize, loss: f64, wall: Duration) -> Result<()> {
        let line = serde_json::to_string(&LogLine {
            epoch,
            loss,
            wall_ms: wall.as_millis(),
        })?;
        writeln!(self.file, "{line}").map_err(io_err(&self.path))
    }
}

fn check_frozen(before: &(String, String), emb: &GraphEmbeddings, lm: &TransformerLm) -> Result<()> {
    if before.0 != emb.checksum() || before.1 != lm.checksum() {
        return Err(glta_core::Error::Invariant(String::from(
            "frozen graph embeddings or backbone changed during training",
        ))
        .into());
    }
    Ok(())
}

/// Where training starts: fresh, or from an unfinished checkpoint.
struct Start {
    epoch: usize,
    params: AlignParams,
    adam: AdamState,
}

fn resume_point(
    path: &Path,
    stage: Stage,
    opts: &RunOptions,
    cfg: &RunConfig,
    emb: &GraphEmbeddings,
    adam: AdamConfig,
) -> Result<Option<Start>> {
    if !opts.resume || !path.exists() {
        return Ok(None);
    }
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_stage(&[stage])?;
    Ok(Some(Start {
        epoch: meta_parse(&ckpt, "epoch")?,
        params: load_params(&ckpt, cfg, emb)?,
        adam: load_adam(&ckpt, adam)?,
    }))
}

#[allow(clippy::too_many_arguments)]
fn stage_checkpoint(
    stage: Stage,
    cfg: &RunConfig,
    emb: &GraphEmbeddings,
    lm: &TransformerLm,
    params: &AlignParams,
    adam: &AdamState,
    epoch: usize,
    total: usize,
) -> Checkpoint {
    let mut ckpt = Checkpoint::new(stage, cfg.snapshot());
    push_backbone(&mut ckpt, emb, lm);
    push_params(&mut ckpt, params);
    push_adam(&mut ckpt, adam);
    ckpt.set_meta("seed", cfg.run.seed);
    ckpt.set_meta("epoch", epoch);
    ckpt.set_meta("complete", epoch >= total);
    ckpt
}

fn is_complete(ckpt: &Checkpoint) -> bool {
    ckpt.meta("complete") == Some("true")
}

/// Stage 2: trains the item projector and head on item-text matching. With
/// item alignment ablated it writes a skip marker instead.
pub fn cmd_align_items(cfg: &RunConfig, opts: &RunOptions) -> Result<Checkpoint> {
    let path = cfg.stage2_path();
    ensure_writable(&path, opts)?;
    let prep = prepare(cfg)?;
    let stage1 = Checkpoint::load(&cfg.stage1_path())?;
    stage1.expect_stage(&[Stage::Graph])?;
    let (emb, lm) = load_backbone(&stage1, cfg, &prep.vocab)?;
    if cfg.ablation.no_item_align {
        let mut ckpt = Checkpoint::new(Stage::ItemAlignSkipped, cfg.snapshot());
        push_backbone(&mut ckpt, &emb, &lm);
        ckpt.set_meta("seed", cfg.run.seed);
        ckpt.set_meta("complete", true);
        ckpt.save(&path, true)?;
        log::info!("item alignment ablated; wrote skip marker {}", path.display());
        return Ok(ckpt);
    }
    let frozen = (emb.checksum(), lm.checksum());
    let adam_cfg = AdamConfig::with_lr(cfg.align.lr);
    let start = match resume_point(&path, Stage::ItemAlign, opts, cfg, &emb, adam_cfg)? {
        Some(s) => s,
        None => Start {
            epoch: 0,
            params: fresh_params(cfg, &emb),
            adam: AdamState::new(adam_cfg),
        },
    };
    let s2 = Stage2Config {
        epochs: cfg.align.item_epochs,
        lr: cfg.align.lr,
        batch_size: cfg.align.item_batch,
        max_description_tokens: cfg.align.description_tokens,
        seed: cfg.run.seed,
    };
    let task = ItemTextTask::new(&lm, &emb, &prep.vocab, prep.catalog.descriptions(), s2)?;
    let Start {
        epoch: first,
        mut params,
        mut adam,
    } = start;
    let total = cfg.align.item_epochs;
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let mut log = TrainLog::open(&cfg.log_path("stage2"), first > 0)?;
    let clock = Instant::now();
    let mut epoch = first;
    while epoch < stop {
        let loss = task.run_epoch(epoch, &mut params, &mut adam)?;
        log.record(epoch, loss, clock.elapsed())?;
        log::info!("stage 2 epoch {epoch}: loss {loss:.4}");
        epoch += 1;
    }
    check_frozen(&frozen, &emb, &lm)?;
    let ckpt = stage_checkpoint(Stage::ItemAlign, cfg, &emb, &lm, &params, &adam, epoch, total);
    ckpt.save(&path, true)?;
    Ok(ckpt)
}

/// Training-split history of every user, oldest first.
pub fn histories(prep: &Prepared) -> Vec<UserHistory> {
    (0..prep.graph.num_users())
        .map(|u| UserHistory {
            user_id: prep.catalog.user_id(u).to_string(),
            descriptions: prep
                .split
                .train
                .user_items(u)
                .iter()
                .filter_map(|&i| prep.catalog.description(i).map(str::to_string))
                .collect(),
        })
        .collect()
}

/// Profile and prediction texts of every user, through the cache.
pub fn cmd_gen_profiles(cfg: &RunConfig) -> Result<Vec<UserTextAssets>> {
    let prep = prepare(cfg)?;
    user_assets(cfg, &prep)
}

fn user_assets(cfg: &RunConfig, prep: &Prepared) -> Result<Vec<UserTextAssets>> {
    let mut cache = TextCache::open(&cfg.texts_path())?;
    let client = match cfg.generation.mode {
        GenerationMode::External => Some(ChatClient::from_env(
            &cfg.generation.endpoint,
            &cfg.generation.model,
            Duration::from_secs(cfg.generation.timeout_secs),
        )?),
        GenerationMode::Offline => None,
    };
    generate_assets(&cfg.generation, &histories(prep), &mut cache, client.as_ref())
}

fn user_texts(cfg: &RunConfig, prep: &Prepared) -> Result<Vec<UserText>> {
    Ok(user_assets(cfg, prep)?
        .iter()
        .map(|a| {
            UserText::encode(
                &prep.vocab,
                &a.profile_text,
                &a.prediction_text,
                cfg.align.text_tokens,
            )
        })
        .collect())
}

/// Stage 3: trains the user encoder and head (and the item projector when
/// configured or when item alignment is ablated).
pub fn cmd_align_users(cfg: &RunConfig, opts: &RunOptions) -> Result<Checkpoint> {
    let path = cfg.stage3_path();
    ensure_writable(&path, opts)?;
    let prep = prepare(cfg)?;
    let stage2_path = cfg.stage2_path();
    let expected = if cfg.ablation.no_item_align {
        Stage::ItemAlignSkipped
    } else {
        Stage::ItemAlign
    };
    if !stage2_path.exists() {
        return Err(Error::Stage {
            expected: expected.tag().to_string(),
            found: String::from("no checkpoint"),
        });
    }
    let stage2 = Checkpoint::load(&stage2_path)?;
    stage2.expect_stage(&[expected])?;
    if !is_complete(&stage2) {
        return Err(Error::Stage {
            expected: expected.tag().to_string(),
            found: format!("{} (unfinished)", stage2.stage),
        });
    }
    let (emb, lm) = load_backbone(&stage2, cfg, &prep.vocab)?;
    let frozen = (emb.checksum(), lm.checksum());
    let adam_cfg = AdamConfig::with_lr(cfg.align.lr);
    let start = match resume_point(&path, Stage::UserAlign, opts, cfg, &emb, adam_cfg)? {
        Some(s) => s,
        None => Start {
            epoch: 0,
            params: match stage2.stage {
                Stage::ItemAlign => load_params(&stage2, cfg, &emb)?,
                _ => fresh_params(cfg, &emb),
            },
            adam: AdamState::new(adam_cfg),
        },
    };
    let texts = user_texts(cfg, &prep)?;
    let s3 = Stage3Config {
        epochs: cfg.align.user_epochs,
        lr: cfg.align.lr,
        k: cfg.align.k,
        context: cfg.align.context,
        label_policy: cfg.align.label_policy,
        train_item_projector: cfg.align.train_item_projector,
        user_batch: cfg.align.user_batch,
        seed: cfg.run.seed,
    };
    let task = UserItemTask::new(&lm, &emb, &prep.split.train, &prep.vocab, &texts, cfg.ablation, s3)?;
    let Start {
        epoch: first,
        mut params,
        mut adam,
    } = start;
    let total = cfg.align.user_epochs;
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let mut log = TrainLog::open(&cfg.log_path("stage3"), first > 0)?;
    let clock = Instant::now();
    let mut epoch = first;
    while epoch < stop {
        let loss = task.run_epoch(epoch, &mut params, &mut adam)?;
        log.record(epoch, loss, clock.elapsed())?;
        log::info!("stage 3 epoch {epoch}: loss {loss:.4}");
        epoch += 1;
    }
    check_frozen(&frozen, &emb, &lm)?;
    let ckpt = stage_checkpoint(Stage::UserAlign, cfg, &emb, &lm, &params, &adam, epoch, total);
    ckpt.save(&path, true)?;
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeReport {
    pub mode: String,
    pub users_evaluated: usize,
    pub users_excluded: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl From<MetricReport> for ModeReport {
    fn from(r: MetricReport) -> Self {
        Self {
            mode: r.mode,
            users_evaluated: r.users_evaluated,
            users_excluded: r.users_excluded,
            metrics: r.metrics,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub checkpoint: String,
    pub seed: u64,
    /// Expected P@k of a uniformly random ranking, per cutoff.
    pub random_precision: BTreeMap<String, f64>,
    pub reports: Vec<ModeReport>,
}

impl EvaluationReport {
    pub fn mode(&self, name: &str) -> Option<&ModeReport> {
        self.reports.iter().find(|r| r.mode == name)
    }
}

/// Loads the finished stage-3 checkpoint and hands the assembled model to `f`.
fn with_model<T>(
    cfg: &RunConfig,
    f: impl FnOnce(&Prepared, &AlignedModel, &GraphEmbeddings) -> Result<T>,
) -> Result<T> {
    let prep = prepare(cfg)?;
    let ckpt = Checkpoint::load(&cfg.stage3_path())?;
    ckpt.expect_stage(&[Stage::UserAlign])?;
    if !is_complete(&ckpt) {
        return Err(Error::Stage {
            expected: Stage::UserAlign.tag().to_string(),
            found: format!("{} (unfinished)", ckpt.stage),
        });
    }
    let (emb, lm) = load_backbone(&ckpt, cfg, &prep.vocab)?;
    let params = load_params(&ckpt, cfg, &emb)?;
    let texts = user_texts(cfg, &prep)?;
    let model = AlignedModel::new(
        &lm,
        &emb,
        &params,
        &prep.split.train,
        &prep.vocab,
        &texts,
        cfg.ablation,
        cfg.align.context,
    )?;
    f(&prep, &model, &emb)
}

/// Evaluates the stage-3 checkpoint under `modes`, plus the dot-product
/// baseline when `dot` is set.
pub fn evaluate_checkpoint(cfg: &RunConfig, modes: &[InferenceMode], dot: bool) -> Result<EvaluationReport> {
    let (split, reports) = with_model(cfg, |prep, model, emb| {
        let mut reports = Vec::new();
        for &mode in modes {
            let ranker = |u: usize, mask: &[bool], k: usize| model.rank(u, mode, k, mask);
            reports.push(evaluate(&ranker, &prep.split, &cfg.eval.cutoffs, mode.name())?.into());
        }
        if dot {
            let ranker = DotRanker { embeddings: emb };
            reports.push(evaluate(&ranker, &prep.split, &cfg.eval.cutoffs, "dot")?.into());
        }
        Ok((prep.split.clone(), reports))
    })?;
    let mut random_precision = BTreeMap::new();
    for &k in &cfg.eval.cutoffs {
        random_precision.insert(format!("P@{k}"), random_precision_moments(&split, k)?.0);
    }
    Ok(EvaluationReport {
        checkpoint: cfg.stage3_path().display().to_string(),
        seed: cfg.run.seed,
        random_precision,
        reports,
    })
}

/// One test user's ranked list and the items it had to avoid.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRanking {
    pub user: usize,
    pub items: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Unchecked top-k lists of every test user under `mode`, at the largest
/// cutoff.
pub fn rank_test_users(cfg: &RunConfig, mode: InferenceMode) -> Result<Vec<UserRanking>> {
    let k = cfg.eval.cutoffs.iter().copied().max().unwrap_or(0);
    with_model(cfg, |prep, model, _| {
        prep.split
            .test_users()
            .into_iter()
            .map(|user| {
                let mask = prep.split.train.item_mask(user);
                let items = model.rank(user, mode, k, &mask)?.items;
                Ok(UserRanking { user, items, mask })
            })
            .collect()
    })
}

/// Evaluates and writes the report JSON next to the checkpoints.
pub fn cmd_evaluate(cfg: &RunConfig, all_modes: bool) -> Result<EvaluationReport> {
    let modes: Vec<InferenceMode> = if all_modes {
        InferenceMode::ALL.to_vec()
    } else {
        vec![cfg.eval.mode]
    };
    let report = evaluate_checkpoint(cfg, &modes, all_modes)?;
    let path = cfg.report_path();
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(io_err(&path))?;
    Ok(report)
}

/// Runs every stage in order.
pub fn run_pipeline(cfg: &RunConfig, opts: &RunOptions, all_modes: bool) -> Result<EvaluationReport> {
    cmd_pretrain(cfg, opts)?;
    cmd_align_items(cfg, opts)?;
    cmd_gen_profiles(cfg)?;
    cmd_align_users(cfg, opts)?;
    cmd_evaluate(cfg, all_modes)
}

/// The ablation variants: name, table label and the switches they set.
pub const VARIANTS: [(&str, &str); 5] = [
    ("full", "GLTA"),
    ("no-item-align", "w/o IA"),
    ("no-user-align", "w/o UA"),
    ("no-profile", "w/o PF"),
    ("no-prediction", "w/o PD"),
];

fn variant_config(base: &RunConfig, name: &str) -> RunConfig {
    let mut cfg = base.clone();
    let a = &mut cfg.ablation;
    *a = Default::default();
    match name {
        "no-item-align" => a.no_item_align = true,
        "no-user-align" => a.no_user_align = true,
        "no-profile" => a.no_profile = true,
        "no-prediction" => a.no_prediction = true,
        _ => {}
    }
    cfg.run.work_dir = base.run.work_dir.join(name);
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub label: String,
    pub mode: String,
    pub checkpoint: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Plain-text table, one row per variant and mode.
    pub fn render(&self) -> String {
        let names: Vec<&String> = self.rows.first().map(|r| r.metrics.keys().collect()).unwrap_or_default();
        let mut out = format!("{:<8} {:<7}", "variant", "mode");
        for n in &names {
            out.push_str(&format!(" {n:>7}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<8} {:<7}", r.label, r.mode));
            for n in &names {
                out.push_str(&format!(" {:>7.4}", r.metrics.get(*n).copied().unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
        out
    }
}

/// Every variant through the full pipeline in its own directory, evaluated
/// under every inference mode.
pub fn cmd_ablate(cfg: &RunConfig, opts: &RunOptions) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (name, label) in VARIANTS {
        let vcfg = variant_config(cfg, name);
        log::info!("ablation variant {name}");
        cmd_pretrain(&vcfg, opts)?;
        cmd_align_items(&vcfg, opts)?;
        cmd_align_users(&vcfg, opts)?;
        let report = evaluate_checkpoint(&vcfg, &InferenceMode::ALL, false)?;
        for r in report.reports {
            rows.push(AblationRow {
                variant: name.to_string(),
                label: label.to_string(),
                mode: r.mode,
                checkpoint: report.checkpoint.clone(),
                metrics: r.metrics,
            });
        }
    }
    let table = AblationTable {
        seed: cfg.run.seed,
        rows,
    };
    let path = cfg.run.work_dir.join("ablation.json");
    std::fs::write(&path, serde_json::to_string_pretty(&table)?).map_err(io_err(&path))?;
    Ok(table)
}
