//! Frozen text backbone: tokenizer, mixed token/embedding sequences and a
//! small decoder-only transformer.

mod decode;
mod sequence;
mod transformer;
mod vocab;

pub use decode::{greedy_decode, lm_forward, OutputHead};
pub use sequence::{Injections, MixedSequence, Origin, Slot};
pub use transformer::{LmConfig, LmVars, TransformerLm};
pub use vocab::{
    tokenize, TokenId, Vocabulary, BOS, EOS, ITEM_SLOT, PAD, PRED_SLOT, PROFILE_SLOT, SPECIALS,
    UNK, USER_SLOT,
};
