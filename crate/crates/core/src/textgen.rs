//! Offline profile and prediction text: top-N term summaries of a user's
//! interacted item descriptions.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::lm::tokenize;

/// Text used when a user has no history at all.
pub const DEFAULT_TEXT: &str = "unknown-preferences";

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been",
    "but", "by", "can", "do", "for", "from", "had", "has", "have", "he", "her", "his", "how",
    "i", "if", "in", "into", "is", "it", "its", "more", "no", "not", "of", "on", "one", "or",
    "our", "out", "she", "so", "than", "that", "the", "their", "them", "then", "there", "these",
    "they", "this", "to", "up", "was", "we", "were", "what", "when", "which", "who", "will",
    "with", "you", "your",
];

pub fn is_stopword(word: &str) -> bool {
    STOPWORDS.binary_search(&word).is_ok()
}

/// Top `n` content words of `history` by term frequency, ties broken
/// lexicographically. `history` is ordered oldest first.
pub fn offline_profile<S: AsRef<str>>(history: &[S], n: usize) -> String {
    offline_prediction(history, n, 0.0)
}

/// Like [`offline_profile`], but the `j`-th description (0-based, oldest
/// first, `m` in total) counts with weight `1 + recency * (j + 1) / m`.
pub fn offline_prediction<S: AsRef<str>>(history: &[S], n: usize, recency: f64) -> String {
    if history.is_empty() {
        return String::from(DEFAULT_TEXT);
    }
    let m = history.len() as f64;
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for (j, text) in history.iter().enumerate() {
        let w = 1.0 + recency * (j + 1) as f64 / m;
        for word in tokenize(text.as_ref()) {
            if !is_stopword(&word) {
                *scores.entry(word).or_insert(0.0) += w;
            }
        }
    }
    if scores.is_empty() {
        return String::from(DEFAULT_TEXT);
    }
    // BTreeMap iterates lexicographically and the sort is stable.
    let mut ranked: Vec<(String, f64)> = scores.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let words: Vec<String> = ranked.into_iter().take(n).map(|(w, _)| w).collect();
    words.join(" ")
}

/// Chat prompt asking an external model for a user profile.
pub fn profile_prompt<S: AsRef<str>>(history: &[S]) -> String {
    format!(
        "Here are descriptions of items a user interacted with, oldest first:\n{}\n\
         Summarize this user's preferences in a few keywords. Reply with the keywords only.",
        numbered(history)
    )
}

/// Chat prompt asking an external model what the user will want next.
pub fn prediction_prompt<S: AsRef<str>>(history: &[S], profile: &str) -> String {
    format!(
        "Here are descriptions of items a user interacted with, oldest first:\n{}\n\
         Their profile: {profile}\n\
         Predict what kind of items they will interact with next, in a few keywords. \
         Reply with the keywords only.",
        numbered(history)
    )
}

fn numbered<S: AsRef<str>>(history: &[S]) -> String {
    let lines: Vec<String> = history
        .iter()
        .enumerate()
        .map(|(j, d)| format!("{}. {}", j + 1, d.as_ref()))
        .collect();
    lines.join("\n")
}
