use alloc::vec;
use alloc::vec::Vec;

use super::projector::{Projector, ProjectorKind, ProjectorVars};
use super::template::{
    build_item_text_template, build_user_item_template, plan_item_batches, shuffled_order,
    UserPrompt, UserSource, ITEM_TEXT_HEADER, USER_ITEM_HEADER,
};
use crate::error::{contract, Error, Result};
use crate::graph::InteractionGraph;
use crate::head::{gllm_loss, GllmHead, HeadVars};
use crate::lightgcn::GraphEmbeddings;
use crate::lm::{
    Injections, LmVars, MixedSequence, Origin, TokenId, TransformerLm, Vocabulary, UNK,
};
use crate::ndgrad::{AdamState, Tape, Tensor, Var};
use crate::rng::Rng;

/// Trainable alignment parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignParams {
    pub item_projector: Projector,
    pub user: UserEncoder,
    pub head: GllmHead,
}

/// How the user token is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum UserEncoder {
    Graph(Projector),
    /// One free embedding per user (`|U| × d_model`).
    Ids(Tensor),
}

impl UserEncoder {
    pub fn source(&self) -> UserSource {
        match self {
            UserEncoder::Graph(_) => UserSource::Graph,
            UserEncoder::Ids(_) => UserSource::Id,
        }
    }

    pub fn init_ids(num_users: usize, d_model: usize, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, "user_ids", 0);
        let data = rng.normal_vec(num_users * d_model, 1.0);
        let t = Tensor::new(&[num_users, d_model], data.into_iter().map(|v| v as f32).collect())
            .expect("positive extents");
        UserEncoder::Ids(t.into_param())
    }
}

impl AlignParams {
    /// Fresh parameters. With `user_ids` the user token is a free per-user
    /// embedding instead of the projected graph embedding.
    pub fn init(
        emb: &GraphEmbeddings,
        d_model: usize,
        num_items: usize,
        user_ids: bool,
        seed: u64,
    ) -> Self {
        let user = if user_ids {
            UserEncoder::init_ids(emb.users().rows(), d_model, seed)
        } else {
            UserEncoder::Graph(Projector::init(ProjectorKind::User, emb.users(), d_model, seed))
        };
        Self {
            item_projector: Projector::init(ProjectorKind::Item, emb.items(), d_model, seed),
            user,
            head: GllmHead::init(d_model, num_items, seed),
        }
    }

    /// Every parameter tensor with its name.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("item_projector.weight", &self.item_projector.weight),
            ("item_projector.bias", &self.item_projector.bias),
        ];
        match &self.user {
            UserEncoder::Graph(p) => {
                out.push(("user_projector.weight", &p.weight));
                out.push(("user_projector.bias", &p.bias));
            }
            UserEncoder::Ids(t) => out.push(("user_ids", t)),
        }
        out.push(("head.weight", &self.head.weight));
        out.push(("head.bias", &self.head.bias));
        out
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<(&'static str, &mut Tensor)> = vec![
            ("item_projector.weight", &mut self.item_projector.weight),
            ("item_projector.bias", &mut self.item_projector.bias),
        ];
        match &mut self.user {
            UserEncoder::Graph(p) => {
                out.push(("user_projector.weight", &mut p.weight));
                out.push(("user_projector.bias", &mut p.bias));
            }
            UserEncoder::Ids(t) => out.push(("user_ids", t)),
        }
        out.push(("head.weight", &mut self.head.weight));
        out.push(("head.bias", &mut self.head.bias));
        out
    }

    /// Overwrites every tensor with the one `lookup` returns for its name.
    /// Shapes must match; trainable flags are kept.
    pub fn assign(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for (name, t) in self.named_mut() {
            let mut loaded =
                lookup(name).ok_or_else(|| contract(alloc::format!("missing tensor {name}")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "load alignment parameters",
                    lhs: t.shape().to_vec(),
                    rhs: loaded.shape().to_vec(),
                });
            }
            loaded.set_requires_grad(t.requires_grad());
            *t = loaded;
        }
        Ok(())
    }

    /// Marks which parameter groups receive gradients.
    pub fn set_trainable(&mut self, item_projector: bool, user: bool, head: bool) {
        self.item_projector.set_trainable(item_projector);
        match &mut self.user {
            UserEncoder::Graph(p) => p.set_trainable(user),
            UserEncoder::Ids(t) => t.set_requires_grad(user),
        }
        self.head.set_trainable(head);
    }

    /// One Adam step over the trainable tensors.
    fn step(&mut self, adam: &mut AdamState) -> Result<()> {
        let mut params: Vec<(&str, &mut Tensor)> = self
            .named_mut()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect();
        adam.step(&mut params)
    }

    fn record(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            item: self.item_projector.record(tape),
            user: match &self.user {
                UserEncoder::Graph(p) => UserVars::Graph(p.record(tape)),
                UserEncoder::Ids(t) => UserVars::Ids(tape.leaf(t)),
            },
            head: HeadVars {
                weight: tape.leaf(&self.head.weight),
                bias: tape.leaf(&self.head.bias),
            },
        }
    }

    fn collect_grads(&mut self, tape: &Tape, vars: &ParamVars) -> Result<()> {
        self.item_projector.collect_grads(tape, vars.item)?;
        match (&mut self.user, vars.user) {
            (UserEncoder::Graph(p), UserVars::Graph(v)) => p.collect_grads(tape, v)?,
            (UserEncoder::Ids(t), UserVars::Ids(v)) => tape.write_grad(v, t)?,
            _ => return Err(contract("user encoder changed during a step")),
        }
        self.head.collect_grads(tape, &vars.head)
    }
}

#[derive(Debug, Clone, Copy)]
enum UserVars {
    Graph(ProjectorVars),
    Ids(Var),
}

#[derive(Debug, Clone, Copy)]
struct ParamVars {
    item: ProjectorVars,
    user: UserVars,
    head: HeadVars,
}

fn gather_constant(tape: &mut Tape, m: &Tensor, rows: &[usize]) -> Result<Var> {
    let mut data = Vec::with_capacity(rows.len() * m.cols());
    for &r in rows {
        if r >= m.rows() {
            return Err(Error::Index {
                op: "embedding rows",
                row: data.len() / m.cols(),
                index: r,
                bound: m.rows(),
            });
        }
        data.extend_from_slice(m.row(r));
    }
    tape.constant(&[rows.len(), m.cols()], data)
}

/// Mean item loss over the supervised positions of `seq` (first `k`).
fn sequence_loss(
    tape: &mut Tape,
    lm: &TransformerLm,
    lm_vars: &LmVars,
    seq: &MixedSequence,
    injections: &Injections,
    head: HeadVars,
    k: usize,
) -> Result<Var> {
    let used = &seq.supervision()[..k.min(seq.supervision().len())];
    let hidden = lm.forward_recorded(tape, lm_vars, seq, injections)?;
    let rows: Vec<usize> = used.iter().map(|s| s.0).collect();
    let h = tape.gather_rows(hidden, &rows)?;
    let z = tape.matmul(h, head.weight)?;
    let z = tape.add_row(z, head.bias)?;
    let targets: Vec<(usize, usize)> = used.iter().enumerate().map(|(j, s)| (j, s.1)).collect();
    gllm_loss(tape, z, &targets, k)
}

/// Item injections for the rows `seq` references, projected on the tape.
fn item_injection(
    tape: &mut Tape,
    emb: &GraphEmbeddings,
    vars: ProjectorVars,
    seq: &MixedSequence,
    inj: &mut Injections,
) -> Result<()> {
    let rows = seq.rows_for(Origin::ItemNode);
    if rows.is_empty() {
        return Ok(());
    }
    let e = gather_constant(tape, emb.items(), &rows)?;
    let v = Projector::apply_on(tape, vars, e)?;
    inj.set(Origin::ItemNode, v, Some(&rows));
    Ok(())
}

fn encode_capped(vocab: &Vocabulary, text: &str, cap: usize) -> Vec<TokenId> {
    let mut ids = vocab.encode(text);
    ids.truncate(cap);
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Descriptions are cut to this many tokens.
    pub max_description_tokens: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch_size: 8,
            max_description_tokens: 24,
            seed: 0,
        }
    }
}

/// Item-text alignment: reorder shuffled item tokens to match descriptions.
pub struct ItemTextTask<'a> {
    lm: &'a TransformerLm,
    emb: &'a GraphEmbeddings,
    header: Vec<TokenId>,
    descriptions: Vec<Option<Vec<TokenId>>>,
    items: Vec<usize>,
    config: Stage2Config,
}

impl<'a> ItemTextTask<'a> {
    /// `descriptions[i]` is the text of item `i`; items without text are
    /// left out of training.
    pub fn new<S: AsRef<str>>(
        lm: &'a TransformerLm,
        emb: &'a GraphEmbeddings,
        vocab: &Vocabulary,
        descriptions: &[Option<S>],
        config: Stage2Config,
    ) -> Result<Self> {
        if descriptions.len() != emb.items().rows() {
            return Err(contract(alloc::format!(
                "{} descriptions for {} items",
                descriptions.len(),
                emb.items().rows()
            )));
        }
        let encoded: Vec<Option<Vec<TokenId>>> = descriptions
            .iter()
            .map(|d| {
                d.as_ref()
                    .map(|t| encode_capped(vocab, t.as_ref(), config.max_description_tokens))
                    .filter(|ids| !ids.is_empty())
            })
            .collect();
        let items: Vec<usize> = (0..encoded.len()).filter(|&i| encoded[i].is_some()).collect();
        let skipped = encoded.len() - items.len();
        if skipped > 0 {
            log::warn!("{skipped} items have no description and are skipped in item-text alignment");
        }
        if items.is_empty() {
            return Err(Error::Empty("item descriptions"));
        }
        Ok(Self {
            lm,
            emb,
            header: vocab.encode(ITEM_TEXT_HEADER),
            descriptions: encoded,
            items,
            config,
        })
    }

    pub fn config(&self) -> &Stage2Config {
        &self.config
    }

    /// Items that take part in training.
    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn skipped(&self) -> usize {
        self.descriptions.len() - self.items.len()
    }

    /// Templates of one epoch; a pure function of the seed and epoch.
    pub fn templates(&self, epoch: usize) -> Result<Vec<MixedSequence>> {
        let mut rng = Rng::stream(self.config.seed, "stage2-epoch", epoch as u64);
        let mut order = self.items.clone();
        rng.shuffle(&mut order);
        let desc_len = |i: usize| self.descriptions[i].as_ref().map_or(0, Vec::len);
        let batches = plan_item_batches(
            &order,
            desc_len,
            self.config.batch_size,
            self.header.len(),
            self.lm.max_len(),
        )?;
        batches
            .iter()
            .map(|batch| {
                let descs: Vec<&[TokenId]> = batch
                    .iter()
                    .map(|&i| self.descriptions[i].as_deref().unwrap_or(&[]))
                    .collect();
                let slots = shuffled_order(batch.len(), &mut rng);
                build_item_text_template(&self.header, batch, &descs, &slots)
            })
            .collect()
    }

    fn batch_loss(&self, tape: &mut Tape, params: &AlignParams, seq: &MixedSequence) -> Result<(Var, ParamVars)> {
        let lm_vars = self.lm.record(tape);
        let vars = params.record(tape);
        let mut inj = Injections::new();
        item_injection(tape, self.emb, vars.item, seq, &mut inj)?;
        let loss = sequence_loss(tape, self.lm, &lm_vars, seq, &inj, vars.head, usize::MAX)?;
        Ok((loss, vars))
    }

    /// Trains the item projector and head for one epoch; returns the mean
    /// loss per supervised position.
    pub fn run_epoch(&self, epoch: usize, params: &mut AlignParams, adam: &mut AdamState) -> Result<f64> {
        params.set_trainable(true, false, true);
        let mut total = 0.0;
        let mut count = 0;
        for seq in self.templates(epoch)? {
            let mut tape = Tape::new();
            let (loss, vars) = self.batch_loss(&mut tape, params, &seq)?;
            let n = seq.supervision().len();
            total += tape.value(loss)[0] as f64 * n as f64;
            count += n;
            tape.backward(loss)?;
            params.collect_grads(&tape, &vars)?;
            params.step(adam)?;
        }
        Ok(total / count as f64)
    }

    /// Mean loss of the epoch's templates without updating anything.
    pub fn mean_loss(&self, epoch: usize, params: &AlignParams) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for seq in self.templates(epoch)? {
            let mut tape = Tape::new();
            let (loss, _) = self.batch_loss(&mut tape, params, &seq)?;
            let n = seq.supervision().len();
            total += tape.value(loss)[0] as f64 * n as f64;
            count += n;
        }
        Ok(total / count as f64)
    }

    /// Fraction of supervised positions whose highest item logit is the label.
    pub fn accuracy(&self, epoch: usize, params: &AlignParams) -> Result<f64> {
        let mut hits = 0;
        let mut count = 0;
        for seq in self.templates(epoch)? {
            let mut tape = Tape::new();
            let lm_vars = self.lm.record(&mut tape);
            let vars = params.record(&mut tape);
            let mut inj = Injections::new();
            item_injection(&mut tape, self.emb, vars.item, &seq, &mut inj)?;
            let hidden = self.lm.forward_recorded(&mut tape, &lm_vars, &seq, &inj)?;
            let rows: Vec<usize> = seq.supervision().iter().map(|s| s.0).collect();
            let picked = tape.gather_rows(hidden, &rows)?;
            let h = tape.to_tensor(picked);
            let z = crate::head::compute_item_logits(&h, &params.head)?;
            for (j, &(_, y)) in seq.supervision().iter().enumerate() {
                let best = crate::head::top_k_masked(z.row(j), &vec![false; z.num_items()], 1);
                hits += usize::from(best.first() == Some(&y));
                count += 1;
            }
        }
        Ok(hits as f64 / count as f64)
    }
}

/// Which interactions become stage-3 labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelPolicy {
    /// Shuffled sample of all training interactions (they may also appear
    /// in the shown history).
    History,
    /// Labels are held out of the shown history.
    Heldout,
}

impl LabelPolicy {
    pub fn name(self) -> &'static str {
        match self {
            LabelPolicy::History => "history",
            LabelPolicy::Heldout => "heldout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "history" => Some(LabelPolicy::History),
            "heldout" => Some(LabelPolicy::Heldout),
            _ => None,
        }
    }
}

/// Template sections switched off by ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_item_align: bool,
    pub no_user_align: bool,
    pub no_profile: bool,
    pub no_prediction: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage3Config {
    pub epochs: usize,
    pub lr: f64,
    /// Answer positions per template, and labels per user and epoch.
    pub k: usize,
    /// Most recent training interactions shown as history.
    pub context: usize,
    pub label_policy: LabelPolicy,
    /// Keep training the item projector (always on without item alignment).
    pub train_item_projector: bool,
    /// Users per optimizer step.
    pub user_batch: usize,
    pub seed: u64,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            k: 10,
            context: 20,
            label_policy: LabelPolicy::History,
            train_item_projector: false,
            user_batch: 8,
            seed: 0,
        }
    }
}

/// Profile and prediction text of one user, as token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserText {
    pub profile: Vec<TokenId>,
    pub prediction: Vec<TokenId>,
}

impl UserText {
    /// Empty encodings become a single unknown token.
    pub fn encode(vocab: &Vocabulary, profile: &str, prediction: &str, cap: usize) -> Self {
        let enc = |t: &str| {
            let ids = encode_capped(vocab, t, cap);
            if ids.is_empty() {
                vec![UNK]
            } else {
                ids
            }
        };
        Self {
            profile: enc(profile),
            prediction: enc(prediction),
        }
    }
}

/// Shared prompt assembly for training and inference.
#[derive(Clone, Copy)]
pub struct UserPromptBuilder<'a> {
    pub header: &'a [TokenId],
    pub texts: &'a [UserText],
    pub ablation: Ablation,
    pub user_source: UserSource,
}

impl<'a> UserPromptBuilder<'a> {
    pub fn build(&self, user: usize, context: &[usize], answers: usize) -> Result<MixedSequence> {
        let text = self.texts.get(user).ok_or_else(|| {
            contract(alloc::format!("no profile text for user {user}"))
        })?;
        Ok(build_user_item_template(&UserPrompt {
            header: self.header,
            user,
            user_source: self.user_source,
            context,
            profile: (!self.ablation.no_profile).then_some(text.profile.as_slice()),
            prediction: (!self.ablation.no_prediction).then_some(text.prediction.as_slice()),
            answers,
        }))
    }
}

/// Last `c` items of a chronological list.
pub fn recent(items: &[usize], c: usize) -> &[usize] {
    &items[items.len().saturating_sub(c)..]
}

/// User-item alignment: predict the user's items at the answer positions.
pub struct UserItemTask<'a> {
    lm: &'a TransformerLm,
    emb: &'a GraphEmbeddings,
    train: &'a InteractionGraph,
    texts: &'a [UserText],
    header: Vec<TokenId>,
    ablation: Ablation,
    config: Stage3Config,
}

impl<'a> UserItemTask<'a> {
    pub fn new(
        lm: &'a TransformerLm,
        emb: &'a GraphEmbeddings,
        train: &'a InteractionGraph,
        vocab: &Vocabulary,
        texts: &'a [UserText],
        ablation: Ablation,
        config: Stage3Config,
    ) -> Result<Self> {
        if texts.len() != train.num_users() {
            return Err(contract(alloc::format!(
                "{} user texts for {} users",
                texts.len(),
                train.num_users()
            )));
        }
        if config.k == 0 || config.user_batch == 0 {
            return Err(contract("k and user batch must be positive"));
        }
        Ok(Self {
            lm,
            emb,
            train,
            texts,
            header: vocab.encode(USER_ITEM_HEADER),
            ablation,
            config,
        })
    }

    pub fn config(&self) -> &Stage3Config {
        &self.config
    }

    pub fn header(&self) -> &[TokenId] {
        &self.header
    }

    fn builder(&self, params: &AlignParams) -> UserPromptBuilder<'_> {
        UserPromptBuilder {
            header: &self.header,
            texts: self.texts,
            ablation: self.ablation,
            user_source: params.user.source(),
        }
    }

    /// Whether the item projector is updated in this stage.
    pub fn trains_item_projector(&self) -> bool {
        self.config.train_item_projector || self.ablation.no_item_align
    }

    /// Labels of `user` for one epoch, and the history shown with them.
    pub fn sample(&self, user: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
        let items = self.train.user_items(user);
        let k = self.config.k;
        let mut shuffled = items.to_vec();
        rng.shuffle(&mut shuffled);
        match self.config.label_policy {
            LabelPolicy::History => {
                shuffled.truncate(k.min(items.len()));
                (shuffled, recent(items, self.config.context).to_vec())
            }
            LabelPolicy::Heldout => {
                let n = k.min(items.len().saturating_sub(1));
                let labels: Vec<usize> = shuffled[..n].to_vec();
                let rest: Vec<usize> = items.iter().copied().filter(|i| !labels.contains(i)).collect();
                (labels, recent(&rest, self.config.context).to_vec())
            }
        }
    }

    /// `(user, template)` pairs of one epoch in training order. Users
    /// without labels are skipped.
    pub fn templates(&self, epoch: usize, params: &AlignParams) -> Result<Vec<(usize, MixedSequence)>> {
        let mut rng = Rng::stream(self.config.seed, "stage3-epoch", epoch as u64);
        let mut users: Vec<usize> = (0..self.train.num_users()).collect();
        rng.shuffle(&mut users);
        let builder = self.builder(params);
        let mut out = Vec::with_capacity(users.len());
        for u in users {
            let (labels, context) = self.sample(u, &mut rng);
            if labels.is_empty() {
                continue;
            }
            let mut seq = builder.build(u, &context, self.config.k)?;
            seq.check_length(self.lm.max_len())?;
            seq.supervise(&labels)?;
            out.push((u, seq));
        }
        if out.is_empty() {
            return Err(Error::Empty("users with training interactions"));
        }
        Ok(out)
    }

    fn user_loss(
        &self,
        tape: &mut Tape,
        params: &AlignParams,
        user: usize,
        seq: &MixedSequence,
    ) -> Result<(Var, ParamVars)> {
        let lm_vars = self.lm.record(tape);
        let vars = params.record(tape);
        let mut inj = Injections::new();
        match vars.user {
            UserVars::Graph(pv) => {
                let e = gather_constant(tape, self.emb.users(), &[user])?;
                let v = Projector::apply_on(tape, pv, e)?;
                inj.set(Origin::UserNode, v, Some(&[user]));
            }
            UserVars::Ids(table) => inj.set(Origin::UserId, table, None),
        }
        item_injection(tape, self.emb, vars.item, seq, &mut inj)?;
        let text = &self.texts[user];
        if !self.ablation.no_profile {
            let m = tape.gather_rows(lm_vars.token_embedding, &ids(&text.profile))?;
            inj.set(Origin::Profile, m, None);
        }
        if !self.ablation.no_prediction {
            let m = tape.gather_rows(lm_vars.token_embedding, &ids(&text.prediction))?;
            inj.set(Origin::Prediction, m, None);
        }
        let loss = sequence_loss(tape, self.lm, &lm_vars, seq, &inj, vars.head, self.config.k)?;
        Ok((loss, vars))
    }

    /// One epoch of user-item alignment; returns the mean per-user loss.
    pub fn run_epoch(&self, epoch: usize, params: &mut AlignParams, adam: &mut AdamState) -> Result<f64> {
        params.set_trainable(self.trains_item_projector(), true, true);
        let templates = self.templates(epoch, params)?;
        let mut total = 0.0;
        for chunk in templates.chunks(self.config.user_batch) {
            let scale = 1.0 / chunk.len() as f32;
            for (u, seq) in chunk {
                let mut tape = Tape::new();
                let (loss, vars) = self.user_loss(&mut tape, params, *u, seq)?;
                total += tape.value(loss)[0] as f64;
                let scaled = tape.scale(loss, scale)?;
                tape.backward(scaled)?;
                params.collect_grads(&tape, &vars)?;
            }
            params.step(adam)?;
        }
        Ok(total / templates.len() as f64)
    }

    /// Mean per-user loss of the epoch's templates, without updates.
    pub fn mean_loss(&self, epoch: usize, params: &AlignParams) -> Result<f64> {
        let templates = self.templates(epoch, params)?;
        let mut total = 0.0;
        for (u, seq) in &templates {
            let mut tape = Tape::new();
            let (loss, _) = self.user_loss(&mut tape, params, *u, seq)?;
            total += tape.value(loss)[0] as f64;
        }
        Ok(total / templates.len() as f64)
    }
}

fn ids(tokens: &[TokenId]) -> Vec<usize> {
    tokens.iter().map(|&t| t as usize).collect()
}
