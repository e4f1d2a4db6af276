use alloc::vec::Vec;

use super::projector::project_items;
use super::template::USER_ITEM_HEADER;
use super::train::{recent, Ablation, AlignParams, UserEncoder, UserPromptBuilder, UserText};
use crate::error::{contract, Result};
use crate::graph::InteractionGraph;
use crate::head::{
    compute_item_logits, infer_autoregressive, infer_first_k, infer_first_logit, GllmHead,
    InferenceMode, LogitsMatrix, Ranking,
};
use crate::lightgcn::GraphEmbeddings;
use crate::lm::{lm_forward, MixedSequence, Origin, TokenId, TransformerLm, Vocabulary};
use crate::ndgrad::Tensor;

/// A trained pipeline ready for ranking. Item and user tokens are projected
/// once up front.
pub struct AlignedModel<'a> {
    lm: &'a TransformerLm,
    head: &'a GllmHead,
    train: &'a InteractionGraph,
    texts: &'a [UserText],
    header: Vec<TokenId>,
    ablation: Ablation,
    params_user_source: crate::align::UserSource,
    items: Tensor,
    users: Tensor,
    context: usize,
}

impl<'a> AlignedModel<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        lm: &'a TransformerLm,
        emb: &GraphEmbeddings,
        params: &'a AlignParams,
        train: &'a InteractionGraph,
        vocab: &Vocabulary,
        texts: &'a [UserText],
        ablation: Ablation,
        context: usize,
    ) -> Result<Self> {
        if texts.len() != train.num_users() {
            return Err(contract("one user text per user is required"));
        }
        let items = project_items(emb.items(), &params.item_projector)?;
        let users = match &params.user {
            UserEncoder::Graph(p) => super::projector::project_users(emb.users(), p)?,
            UserEncoder::Ids(t) => t.clone(),
        };
        Ok(Self {
            lm,
            head: &params.head,
            train,
            texts,
            header: vocab.encode(USER_ITEM_HEADER),
            ablation,
            params_user_source: params.user.source(),
            items,
            users,
            context,
        })
    }

    pub fn num_items(&self) -> usize {
        self.head.num_items()
    }

    /// Projected item tokens, one row per item.
    pub fn item_tokens(&self) -> &Tensor {
        &self.items
    }

    /// The user's prompt with `answers` answer positions.
    pub fn prompt(&self, user: usize, answers: usize) -> Result<MixedSequence> {
        let builder = UserPromptBuilder {
            header: &self.header,
            texts: self.texts,
            ablation: self.ablation,
            user_source: self.params_user_source,
        };
        let context = recent(self.train.user_items(user), self.context);
        let seq = builder.build(user, context, answers)?;
        seq.check_length(self.lm.max_len())?;
        Ok(seq)
    }

    fn text_rows(&self, ids: &[TokenId]) -> Result<Tensor> {
        let table = self.lm.token_embedding();
        let mut data = Vec::with_capacity(ids.len() * table.cols());
        for &t in ids {
            data.extend_from_slice(table.row(t as usize));
        }
        Tensor::new(&[ids.len(), table.cols()], data)
    }

    fn with_sources<T>(
        &self,
        user: usize,
        f: impl FnOnce(&[(Origin, &Tensor)]) -> Result<T>,
    ) -> Result<T> {
        let text = &self.texts[user];
        let profile = self.text_rows(&text.profile)?;
        let prediction = self.text_rows(&text.prediction)?;
        let sources = [
            (self.params_user_source.origin(), &self.users),
            (Origin::ItemNode, &self.items),
            (Origin::Profile, &profile),
            (Origin::Prediction, &prediction),
        ];
        f(&sources)
    }

    /// Item logits at the first `rows` answer positions.
    pub fn logits(&self, user: usize, rows: usize) -> Result<LogitsMatrix> {
        let seq = self.prompt(user, rows)?;
        let hidden = self.with_sources(user, |s| lm_forward(self.lm, &seq, s))?;
        let mut data = Vec::with_capacity(rows * hidden.cols());
        for &p in seq.answers() {
            data.extend_from_slice(hidden.row(p));
        }
        let h = Tensor::new(&[seq.answers().len(), hidden.cols()], data)?;
        compute_item_logits(&h, self.head)
    }

    /// Ranked list of `k` items for `user` under `mode`.
    pub fn rank(&self, user: usize, mode: InferenceMode, k: usize, mask: &[bool]) -> Result<Ranking> {
        match mode {
            InferenceMode::FirstK => infer_first_k(&self.logits(user, k)?, k, mask),
            InferenceMode::FirstLogit => infer_first_logit(&self.logits(user, 1)?, k, mask),
            InferenceMode::Autoregressive => {
                let prompt = self.prompt(user, 1)?;
                self.with_sources(user, |s| {
                    infer_autoregressive(self.lm, &prompt, s, self.head, k, mask)
                })
            }
        }
    }
}
