use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::lm::{MixedSequence, Origin, TokenId, ITEM_SLOT, PRED_SLOT, PROFILE_SLOT, USER_SLOT};
use crate::rng::Rng;

/// Instruction opening the item-text template.
pub const ITEM_TEXT_HEADER: &str =
    "here are some items followed by their descriptions match each description to its item";

/// Instruction opening the user-item template.
pub const USER_ITEM_HEADER: &str =
    "given the user the items in their history their profile and prediction recommend the next items";

/// Item-text template: header, one `ITEM_SLOT` + item token per batch item
/// in `slot_order`, then every description (batch order) followed by an
/// answer position labeled with its item.
pub fn build_item_text_template(
    header: &[TokenId],
    batch: &[usize],
    descriptions: &[&[TokenId]],
    slot_order: &[usize],
) -> Result<MixedSequence> {
    if descriptions.len() != batch.len() || slot_order.len() != batch.len() {
        return Err(contract("batch, descriptions and slot order differ in length"));
    }
    let mut seen = alloc::vec![false; batch.len()];
    for &j in slot_order {
        if j >= batch.len() || core::mem::replace(&mut seen[j], true) {
            return Err(contract("slot order is not a permutation of the batch"));
        }
    }
    let mut seq = MixedSequence::new();
    seq.push_tokens(header);
    for &j in slot_order {
        seq.push_token(ITEM_SLOT).push_injected(Origin::ItemNode, batch[j]);
    }
    for (&item, desc) in batch.iter().zip(descriptions) {
        seq.push_tokens(desc);
        seq.push_supervised_answer(item);
    }
    Ok(seq)
}

/// Slot count of an item-text template.
pub fn item_text_len(header_len: usize, description_lens: impl IntoIterator<Item = usize>) -> usize {
    header_len + description_lens.into_iter().map(|l| l + 3).sum::<usize>()
}

/// Seeded shuffle of `0..n`.
pub fn shuffled_order(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

/// Cuts `items` into batches of at most `batch_size`, sizes as even as
/// possible, then halves any batch whose template would exceed `max_len`.
pub fn plan_item_batches(
    items: &[usize],
    description_len: impl Fn(usize) -> usize,
    batch_size: usize,
    header_len: usize,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(contract("batch size must be positive"));
    }
    let mut pending: Vec<Vec<usize>> = Vec::new();
    if !items.is_empty() {
        let count = items.len().div_ceil(batch_size);
        let (base, extra) = (items.len() / count, items.len() % count);
        let mut start = 0;
        for b in 0..count {
            let size = base + usize::from(b < extra);
            pending.push(items[start..start + size].to_vec());
            start += size;
        }
    }
    let mut out = Vec::new();
    // Depth-first so the output keeps the input order.
    pending.reverse();
    while let Some(batch) = pending.pop() {
        let len = item_text_len(header_len, batch.iter().map(|&i| description_len(i)));
        if len <= max_len {
            out.push(batch);
        } else if batch.len() == 1 {
            return Err(Error::Length { len, max: max_len });
        } else {
            let mid = batch.len().div_ceil(2);
            pending.push(batch[mid..].to_vec());
            pending.push(batch[..mid].to_vec());
        }
    }
    Ok(out)
}

/// Where the user token in the user-item template comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserSource {
    /// Projected graph embedding.
    Graph,
    /// Per-user id embedding.
    Id,
}

impl UserSource {
    pub fn origin(self) -> Origin {
        match self {
            UserSource::Graph => Origin::UserNode,
            UserSource::Id => Origin::UserId,
        }
    }
}

/// Inputs of one user-item template.
#[derive(Debug, Clone, Copy)]
pub struct UserPrompt<'a> {
    pub header: &'a [TokenId],
    pub user: usize,
    pub user_source: UserSource,
    /// History items shown to the model, oldest first.
    pub context: &'a [usize],
    /// Profile token ids; `None` drops the profile section.
    pub profile: Option<&'a [TokenId]>,
    /// Prediction token ids; `None` drops the prediction section.
    pub prediction: Option<&'a [TokenId]>,
    pub answers: usize,
}

/// User-item template: header, `USER_SLOT` + user token, `ITEM_SLOT` + item
/// token per context item, `PROFILE_SLOT` + embedded profile, `PRED_SLOT` +
/// embedded prediction, then `answers` answer positions.
///
/// Profile and prediction tokens are injected as rows `0..n` of their own
/// matrices (the token-table rows of the text).
pub fn build_user_item_template(p: &UserPrompt<'_>) -> MixedSequence {
    let mut seq = MixedSequence::new();
    seq.push_tokens(p.header);
    seq.push_token(USER_SLOT)
        .push_injected(p.user_source.origin(), p.user);
    for &i in p.context {
        seq.push_token(ITEM_SLOT).push_injected(Origin::ItemNode, i);
    }
    if let Some(profile) = p.profile {
        seq.push_token(PROFILE_SLOT);
        for j in 0..profile.len() {
            seq.push_injected(Origin::Profile, j);
        }
    }
    if let Some(prediction) = p.prediction {
        seq.push_token(PRED_SLOT);
        for j in 0..prediction.len() {
            seq.push_injected(Origin::Prediction, j);
        }
    }
    for _ in 0..p.answers {
        seq.push_answer();
    }
    seq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::Slot;

    #[test]
    fn item_template_labels_follow_descriptions() {
        let descs: [&[TokenId]; 2] = [&[20, 21], &[22]];
        let a = build_item_text_template(&[9], &[4, 7], &descs, &[0, 1]).unwrap();
        let targets: Vec<usize> = a.supervision().iter().map(|s| s.1).collect();
        assert_eq!(targets, [4, 7]);
        let b = build_item_text_template(&[9], &[4, 7], &descs, &[1, 0]).unwrap();
        assert_eq!(a.supervision(), b.supervision());
        assert_eq!(b.slots()[2], Slot::Injected { origin: Origin::ItemNode, row: 7 });
        assert_eq!(a.len(), item_text_len(1, [2, 1]));
        assert!(build_item_text_template(&[9], &[4, 7], &descs, &[1, 1]).is_err());
    }

    #[test]
    fn batches_are_balanced_and_split_when_long() {
        let items: Vec<usize> = (0..10).collect();
        let plan = plan_item_batches(&items, |_| 2, 4, 3, 1000).unwrap();
        let sizes: Vec<usize> = plan.iter().map(Vec::len).collect();
        assert_eq!(sizes, [4, 3, 3]);
        // Each item costs 5 slots; 3 + 4 * 5 = 23 > 15 forces halving.
        let plan = plan_item_batches(&items, |_| 2, 4, 3, 15).unwrap();
        assert!(plan.iter().all(|b| item_text_len(3, b.iter().map(|_| 2)) <= 15));
        assert_eq!(plan.concat(), items);
        assert!(plan_item_batches(&items, |_| 50, 4, 3, 15).is_err());
    }

    #[test]
    fn user_template_layout() {
        let p = UserPrompt {
            header: &[10, 11],
            user: 3,
            user_source: UserSource::Graph,
            context: &[5, 6],
            profile: Some(&[30, 31]),
            prediction: Some(&[32]),
            answers: 3,
        };
        let full = build_user_item_template(&p);
        assert_eq!(full.len(), 2 + 2 + 4 + 3 + 2 + 3);
        assert_eq!(full.answers(), &[13, 14, 15]);
        let no_pf = build_user_item_template(&UserPrompt { profile: None, ..p });
        assert_eq!(no_pf.len(), full.len() - 3);
        assert_eq!(no_pf.answers(), &[10, 11, 12]);
        let no_ua = build_user_item_template(&UserPrompt {
            user_source: UserSource::Id,
            ..p
        });
        assert_eq!(no_ua.slots()[3], Slot::Injected { origin: Origin::UserId, row: 3 });
    }
}
