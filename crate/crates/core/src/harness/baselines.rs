//! Non-graph comparison strategies. Each returns a two-paragraph pseudo-path.

use std::collections::HashSet;

use crate::corpus::{ParaIdx, WikiGraph};
use crate::error::Result;
use crate::retriever::{Candidate, ModelScorer, PathScorer, RetrieverModel};
use crate::tfidf::{self, SparseIndex};
use crate::Corpus;

/// The two best TF-IDF paragraphs.
pub fn tfidf_top2(question: &str, index: &SparseIndex) -> Vec<ParaIdx> {
    tfidf::top_f(index, question, 2)
        .into_iter()
        .map(|(p, _)| p)
        .collect()
}

/// Scores each pool member independently under the initial state and keeps the best two
/// (probability descending, ties by index).
fn rerank_pool(
    question: &str,
    pool: &[ParaIdx],
    model: &RetrieverModel,
    corpus: &Corpus,
) -> Result<Vec<ParaIdx>> {
    let mut scorer = ModelScorer::new(model, corpus, question);
    let h1 = scorer.initial_state()?;
    let mut scored: Vec<(f64, ParaIdx)> = pool
        .iter()
        .map(|&p| (scorer.logit(&h1, Candidate::Paragraph(p)), p))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(2).map(|(_, p)| p).collect())
}

/// Re-ranks the top-`f` TF-IDF paragraphs with a non-recurrent scorer.
pub fn rerank(
    question: &str,
    index: &SparseIndex,
    model: &RetrieverModel,
    corpus: &Corpus,
    f: usize,
) -> Result<Vec<ParaIdx>> {
    let pool: Vec<ParaIdx> = tfidf::top_f(index, question, f)
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    rerank_pool(question, &pool, model, corpus)
}

/// Like [`rerank`], with the pool widened by the out-neighbors of every top-`f` paragraph.
pub fn rerank_2hop(
    question: &str,
    index: &SparseIndex,
    graph: &WikiGraph,
    model: &RetrieverModel,
    corpus: &Corpus,
    f: usize,
) -> Result<Vec<ParaIdx>> {
    let top: Vec<ParaIdx> = tfidf::top_f(index, question, f)
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let mut seen: HashSet<ParaIdx> = top.iter().copied().collect();
    let mut pool = top.clone();
    for &p in &top {
        for &n in graph.out(p) {
            if seen.insert(n) {
                pool.push(n);
            }
        }
    }
    rerank_pool(question, &pool, model, corpus)
}
