//! Tokenization and feature hashing shared by the sparse index, the encoder and the reader.
//!
//! The rules are frozen so that index files and checkpoints are reproducible:
//!
//! * a *word* is a maximal run of Unicode alphanumeric characters; everything else separates;
//! * words are lowercased with [`str::to_lowercase`];
//! * *content tokens* are lowercased words that are not in [`STOPWORDS`];
//! * n-gram features are the unigrams plus (optionally) the bigrams of adjacent content tokens,
//!   a bigram rendered as `"left right"` with a single space;
//! * a feature is hashed with 32-bit FNV-1a over its UTF-8 bytes and masked into a power-of-two
//!   bucket range.

use std::collections::HashSet;
use std::sync::LazyLock;

/// English stopwords dropped from content tokens.
pub const STOPWORDS: &[&str] = &[
    "i",
    "me",
    "my",
    "myself",
    "we",
    "our",
    "ours",
    "ourselves",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
    "he",
    "him",
    "his",
    "himself",
    "she",
    "her",
    "hers",
    "herself",
    "it",
    "its",
    "itself",
    "they",
    "them",
    "their",
    "theirs",
    "themselves",
    "what",
    "which",
    "who",
    "whom",
    "this",
    "that",
    "these",
    "those",
    "am",
    "is",
    "are",
    "was",
    "were",
    "be",
    "been",
    "being",
    "have",
    "has",
    "had",
    "having",
    "do",
    "does",
    "did",
    "doing",
    "a",
    "an",
    "the",
    "and",
    "but",
    "if",
    "or",
    "because",
    "as",
    "until",
    "while",
    "of",
    "at",
    "by",
    "for",
    "with",
    "about",
    "against",
    "between",
    "into",
    "through",
    "during",
    "before",
    "after",
    "above",
    "below",
    "to",
    "from",
    "up",
    "down",
    "in",
    "out",
    "on",
    "off",
    "over",
    "under",
    "again",
    "further",
    "then",
    "once",
    "here",
    "there",
    "when",
    "where",
    "why",
    "how",
    "all",
    "any",
    "both",
    "each",
    "few",
    "more",
    "most",
    "other",
    "some",
    "such",
    "no",
    "nor",
    "not",
    "only",
    "own",
    "same",
    "so",
    "than",
    "too",
    "very",
    "s",
    "t",
    "can",
    "will",
    "just",
    "don",
    "should",
    "now",
    "d",
    "ll",
    "m",
    "o",
    "re",
    "ve",
    "y",
    "ain",
    "aren",
    "couldn",
    "didn",
    "doesn",
    "hadn",
    "hasn",
    "haven",
    "isn",
    "ma",
    "mightn",
    "mustn",
    "needn",
    "shan",
    "shouldn",
    "wasn",
    "weren",
    "won",
    "wouldn",
    "also",
    "would",
    "could",
    "may",
    "might",
    "must",
    "shall",
    "one",
    "many",
    "much",
    "every",
];

static STOPWORD_SET: LazyLock<HashSet<&'static str>> = LazyLock::new(|| STOPWORDS.iter().copied().collect());

pub fn is_stopword(token: &str) -> bool {
    STOPWORD_SET.contains(token)
}

/// Surface words of `text` in order, original case preserved.
pub fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
}

/// Byte ranges of [`words`] inside `text`.
pub fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

/// Lowercased words, stopwords included.
pub fn lower_words(text: &str) -> Vec<String> {
    words(text).map(str::to_lowercase).collect()
}

/// Lowercased non-stopword tokens.
pub fn content_tokens(text: &str) -> Vec<String> {
    words(text)
        .map(str::to_lowercase)
        .filter(|w| !is_stopword(w))
        .collect()
}

/// 32-bit FNV-1a.
pub fn fnv1a32(bytes: &[u8]) -> u32 {
    const OFFSET: u32 = 0x811c_9dc5;
    const PRIME: u32 = 0x0100_0193;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u32::from(b)).wrapping_mul(PRIME))
}

/// Hashes one feature string into `[0, bucket_count)`; `bucket_count` must be a power of two.
pub fn hash_feature(feature: &str, bucket_count: u32) -> u32 {
    debug_assert!(bucket_count.is_power_of_two());
    fnv1a32(feature.as_bytes()) & (bucket_count - 1)
}

/// Unigram (and bigram when `ngrams >= 2`) feature strings of a token sequence.
pub fn ngram_strings(tokens: &[String], ngrams: u32) -> Vec<String> {
    let mut out: Vec<String> = tokens.to_vec();
    if ngrams >= 2 {
        out.extend(tokens.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    }
    out
}

/// Hashed unigram/bigram feature ids of a token sequence (with repetition).
pub fn hashed_ngrams(tokens: &[String], ngrams: u32, bucket_count: u32) -> Vec<u32> {
    ngram_strings(tokens, ngrams)
        .iter()
        .map(|f| hash_feature(f, bucket_count))
        .collect()
}

/// SQuAD-style answer normalization: lowercase, delete ASCII punctuation, drop the articles
/// `a`/`an`/`the`, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let no_punct: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Position of the first occurrence of `needle` inside `haystack`, both already lowercased word
/// sequences.
pub fn find_subsequence(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Whole-token, case-insensitive, punctuation-insensitive containment test.
pub fn contains_answer(text: &str, answer: &str) -> bool {
    find_subsequence(&lower_words(text), &lower_words(answer)).is_some()
}
