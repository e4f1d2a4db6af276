use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const USER_SLOT: TokenId = 4;
pub const ITEM_SLOT: TokenId = 5;
pub const PROFILE_SLOT: TokenId = 6;
pub const PRED_SLOT: TokenId = 7;

/// Special token strings. They contain `<`/`>`, which the tokenizer never
/// emits, so they cannot collide with text tokens.
pub const SPECIALS: [&str; 8] = [
    "<pad>",
    "<bos>",
    "<eos>",
    "<unk>",
    "<user>",
    "<item>",
    "<profile>",
    "<pred>",
];

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Word-level vocabulary: specials first, then text tokens by descending
/// corpus frequency (ties lexicographic).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Vocabulary {
    /// `cap` bounds the number of text tokens (specials excluded).
    pub fn build<S: AsRef<str>>(corpus: &[S], cap: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("vocabulary corpus"));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for w in tokenize(text.as_ref()) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);
        let words: Vec<String> = ranked.into_iter().map(|(w, _)| w).collect();
        Ok(Self::from_words(words))
    }

    /// Builds from an explicit text-token list (in id order after the specials).
    pub fn from_words(words: Vec<String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Text tokens in id order, specials excluded.
    pub fn words(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK as usize]))
            .collect();
        words.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_corpus_is_exhaustive() {
        let v = Vocabulary::build(&["a b", "b c"], 3).unwrap();
        assert_eq!(v.len(), SPECIALS.len() + 3);
        let mut words: Vec<&str> = v.words().iter().map(String::as_str).collect();
        words.sort();
        assert_eq!(words, ["a", "b", "c"]);
        assert_eq!(v.words()[0], "b");
    }

    #[test]
    fn round_trip_and_unknown_words() {
        let v = Vocabulary::build(&["Epic space, Opera!", "space battles"], 100).unwrap();
        let ids = v.encode("EPIC  opera space");
        assert_eq!(v.decode(&ids), "epic opera space");
        assert_eq!(v.encode("western"), [UNK]);
    }

    #[test]
    fn cap_keeps_most_frequent() {
        let v = Vocabulary::build(&["x y y z z z"], 2).unwrap();
        assert_eq!(v.words(), ["z", "y"]);
        assert_eq!(v.id("x"), UNK);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: [&str; 0] = [];
        assert!(Vocabulary::build(&empty, 10).is_err());
    }

    #[test]
    fn specials_are_disjoint_from_text() {
        let v = Vocabulary::build(&["pad unk item user"], 10).unwrap();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), i as TokenId);
        }
        assert!(v.id("pad") as usize >= SPECIALS.len());
    }
}
