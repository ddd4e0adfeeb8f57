//! Caption evaluation: BLEU-N and CIDEr-D.
//!
//! Scores operate on token strings. N-gram tables are ordered maps so that
//! every floating-point accumulation runs in the same order on every call.

mod bleu;
mod cider;

pub use bleu::{corpus_bleu, modified_precision, sentence_bleu, BleuCounts};
pub use cider::{cider_d, gaussian_penalty, CiderScorer, CorpusStats, CIDER_SIGMA};

use std::collections::BTreeMap;

/// Highest n-gram order used by both metrics.
pub const MAX_N: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no references given")]
    EmptyReferences,
    #[error("reference corpus is empty")]
    EmptyCorpus,
    #[error("{0} candidates but {1} reference sets")]
    Misaligned(usize, usize),
}

/// Lowercases, drops ASCII punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Counts of every n-gram of order `1..=max_n`, keyed by the space-joined words.
pub(crate) fn ngram_counts<S: AsRef<str>>(tokens: &[S], max_n: usize) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for n in 1..=max_n {
        for w in tokens.windows(n) {
            let key = w.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Order of a space-joined n-gram key.
pub(crate) fn ngram_order(key: &str) -> usize {
    key.bytes().filter(|&b| b == b' ').count() + 1
}
