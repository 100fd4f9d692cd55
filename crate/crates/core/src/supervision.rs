//! Training-example construction: gold and augmented retriever paths with mined negatives, and
//! supervised, distantly supervised and distorted reader examples.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, write_jsonl, Corpus, ParaIdx, WikiGraph};
use crate::error::{Error, Result};
use crate::retriever::{StepNegatives, TrainItem, TrainingPath};
use crate::text;
use crate::tfidf::{self, SparseIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Span,
    Yes,
    No,
}

/// One line of a questions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingQuestion {
    pub qid: String,
    pub question: String,
    #[serde(default)]
    pub answers: Vec<String>,
    pub gold_paras: Vec<String>,
    #[serde(default)]
    pub answer_bearing: Option<String>,
    pub answer_type: AnswerType,
}

impl TrainingQuestion {
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        if self.answer_type == AnswerType::Span && self.answers.is_empty() {
            return Err(Error::Integrity(format!(
                "question {}: span question without answers",
                self.qid
            )));
        }
        if self.gold_paras.is_empty() {
            return Err(Error::Integrity(format!(
                "question {}: no gold paragraphs",
                self.qid
            )));
        }
        for id in self.gold_paras.iter().chain(&self.answer_bearing) {
            corpus.require(id)?;
        }
        if let Some(a) = &self.answer_bearing {
            if !self.gold_paras.contains(a) {
                return Err(Error::Integrity(format!(
                    "question {}: answer_bearing {a:?} is not a gold paragraph",
                    self.qid
                )));
            }
        }
        Ok(())
    }

    pub fn gold_indices(&self, corpus: &Corpus) -> Result<Vec<ParaIdx>> {
        self.gold_paras.iter().map(|id| corpus.require(id)).collect()
    }

    /// Whether `text` contains any acceptable answer (whole-token, case-insensitive).
    pub fn answered_by(&self, text: &str) -> bool {
        self.answers.iter().any(|a| text::contains_answer(text, a))
    }
}

pub fn read_questions(path: &Path) -> Result<Vec<TrainingQuestion>> {
    read_jsonl(path)
}

pub fn write_questions(path: &Path, questions: &[TrainingQuestion]) -> Result<()> {
    write_jsonl(path, questions)
}

/// Orders the gold paragraphs so the answer-bearing one comes last. Yes/no questions keep the
/// annotated order unless `answer_bearing` says otherwise.
pub fn derive_gold_path(tq: &TrainingQuestion, corpus: &Corpus, graph: &WikiGraph) -> Result<Vec<ParaIdx>> {
    let gold = tq.gold_indices(corpus)?;
    if gold.len() == 1 {
        return Ok(gold);
    }
    if let Some(a) = &tq.answer_bearing {
        let a = corpus.require(a)?;
        let mut path: Vec<ParaIdx> = gold.iter().copied().filter(|&p| p != a).collect();
        path.push(a);
        return Ok(path);
    }
    if tq.answer_type != AnswerType::Span {
        return Ok(gold);
    }
    if gold.len() != 2 {
        return Err(Error::Integrity(format!(
            "question {}: cannot order {} gold paragraphs without answer_bearing",
            tq.qid,
            gold.len()
        )));
    }
    let (p, q) = (gold[0], gold[1]);
    match (tq.answered_by(corpus.text(p)), tq.answered_by(corpus.text(q))) {
        (false, true) => Ok(vec![p, q]),
        (true, false) => Ok(vec![q, p]),
        (true, true) => {
            // the bridge paragraph links to the answer paragraph
            if graph.has_edge(q, p) && !graph.has_edge(p, q) {
                Ok(vec![q, p])
            } else {
                Ok(vec![p, q])
            }
        }
        (false, false) => Err(Error::Integrity(format!(
            "question {}: no gold paragraph contains an answer string",
            tq.qid
        ))),
    }
}

/// `[p_r] ++ gold` for the best-ranked `c1` member that links to the first gold paragraph and is
/// not already on the path.
pub fn augment_paths(gold: &[ParaIdx], c1: &[ParaIdx], graph: &WikiGraph) -> Option<Vec<ParaIdx>> {
    let first = *gold.first()?;
    let pr = c1
        .iter()
        .copied()
        .find(|&p| !gold.contains(&p) && graph.has_edge(p, first))?;
    Some(std::iter::once(pr).chain(gold.iter().copied()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisionConfig {
    /// Per-step negative cap.
    pub negatives: usize,
    /// TF-IDF depth used for augmentation and the distant-supervision scan.
    pub tfidf_depth: usize,
    /// Distorted reader paths per question.
    pub reader_negatives: usize,
    pub augment: bool,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig {
            negatives: 50,
            tfidf_depth: 20,
            reader_negatives: 1,
            augment: true,
        }
    }
}

/// Per-step negatives for `path`: TF-IDF negatives at step 1; at later steps out-neighbors of the
/// previous selection that do not hold an answer, topped up with TF-IDF negatives. `[EOE]` is a
/// negative at every step but the last. Single-hop questions use TF-IDF negatives only.
pub fn mine_negatives(
    tq: &TrainingQuestion,
    path: &[ParaIdx],
    exclude: &[ParaIdx],
    index: &SparseIndex,
    corpus: &Corpus,
    graph: &WikiGraph,
    n: usize,
) -> Vec<StepNegatives> {
    let multi_hop = tq.gold_paras.len() > 1;
    let banned: HashSet<ParaIdx> = path.iter().chain(exclude).copied().collect();
    let ranked: Vec<ParaIdx> = tfidf::top_f(index, &tq.question, n + banned.len())
        .into_iter()
        .map(|(p, _)| p)
        .filter(|p| !banned.contains(p))
        .collect();
    let mut out = Vec::with_capacity(path.len() + 1);
    for t in 0..=path.len() {
        let mut negs: Vec<ParaIdx> = Vec::new();
        let mut seen: HashSet<ParaIdx> = HashSet::new();
        if t > 0 && multi_hop {
            for &nb in graph.out(path[t - 1]) {
                if negs.len() == n {
                    break;
                }
                if !banned.contains(&nb) && !tq.answered_by(corpus.text(nb)) && seen.insert(nb) {
                    negs.push(nb);
                }
            }
        }
        for &p in &ranked {
            if negs.len() >= n {
                break;
            }
            if seen.insert(p) {
                negs.push(p);
            }
        }
        out.push(StepNegatives {
            paragraphs: negs,
            eoe: t < path.len(),
        });
    }
    out
}

/// Gold path plus optional augmented path, each with its own negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverExample {
    pub qid: String,
    pub question: String,
    pub gold: TrainingPath,
    pub augmented: Option<TrainingPath>,
}

impl RetrieverExample {
    pub fn to_train_item(&self) -> TrainItem {
        TrainItem {
            question: self.question.clone(),
            paths: std::iter::once(self.gold.clone())
                .chain(self.augmented.clone())
                .collect(),
        }
    }
}

pub fn build_retriever_example(
    tq: &TrainingQuestion,
    index: &SparseIndex,
    corpus: &Corpus,
    graph: &WikiGraph,
    config: &SupervisionConfig,
) -> Result<RetrieverExample> {
    tq.validate(corpus)?;
    let gold = derive_gold_path(tq, corpus, graph)?;
    let augmented = if config.augment {
        let c1: Vec<ParaIdx> = tfidf::top_f(index, &tq.question, config.tfidf_depth)
            .into_iter()
            .map(|(p, _)| p)
            .collect();
        augment_paths(&gold, &c1, graph)
    } else {
        None
    };
    let pr: Vec<ParaIdx> = augmented.iter().map(|g| g[0]).collect();
    let gold_negs = mine_negatives(tq, &gold, &pr, index, corpus, graph, config.negatives);
    let augmented = augmented.map(|g| TrainingPath {
        negatives: mine_negatives(tq, &g, &gold, index, corpus, graph, config.negatives),
        paragraphs: g,
    });
    Ok(RetrieverExample {
        qid: tq.qid.clone(),
        question: tq.question.clone(),
        gold: TrainingPath {
            paragraphs: gold,
            negatives: gold_negs,
        },
        augmented,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathLabel {
    Gold,
    Distorted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Supervised,
    Distant,
}

/// What the reader should predict for a path. Span indices are 0-based, inclusive, and count
/// paragraph words of the concatenated path (question words excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ReaderTarget {
    Span {
        start: usize,
        end: usize,
    },
    Yes,
    No,
    /// Distorted path: only the re-ranking loss applies.
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderExample {
    pub qid: String,
    pub question: String,
    pub path: Vec<ParaIdx>,
    pub target: ReaderTarget,
    pub label: PathLabel,
    pub origin: Origin,
}

/// First occurrence of any answer in the path's word sequence, answers tried in order.
pub fn locate_answer(tq: &TrainingQuestion, path: &[ParaIdx], corpus: &Corpus) -> Option<(usize, usize)> {
    let words: Vec<String> = path
        .iter()
        .flat_map(|&p| text::lower_words(corpus.text(p)))
        .collect();
    tq.answers
        .iter()
        .filter_map(|a| {
            let needle = text::lower_words(a);
            text::find_subsequence(&words, &needle).map(|s| (s, s + needle.len() - 1))
        })
        .min()
}

/// The supervised example on the gold path.
pub fn build_gold_reader_example(
    tq: &TrainingQuestion,
    gold: &[ParaIdx],
    corpus: &Corpus,
) -> Result<ReaderExample> {
    let target = match tq.answer_type {
        AnswerType::Yes => ReaderTarget::Yes,
        AnswerType::No => ReaderTarget::No,
        AnswerType::Span => {
            let (start, end) = locate_answer(tq, gold, corpus).ok_or_else(|| {
                Error::Integrity(format!("question {}: answer not found in gold path", tq.qid))
            })?;
            ReaderTarget::Span { start, end }
        }
    };
    Ok(ReaderExample {
        qid: tq.qid.clone(),
        question: tq.question.clone(),
        path: gold.to_vec(),
        target,
        label: PathLabel::Gold,
        origin: Origin::Supervised,
    })
}

/// A single-paragraph example from the best-ranked non-gold paragraph that contains an answer.
pub fn build_distant_examples(
    tq: &TrainingQuestion,
    index: &SparseIndex,
    corpus: &Corpus,
    depth: usize,
) -> Result<Option<ReaderExample>> {
    if tq.answer_type != AnswerType::Span {
        return Ok(None);
    }
    let gold: HashSet<ParaIdx> = tq.gold_indices(corpus)?.into_iter().collect();
    for (p, _) in tfidf::top_f(index, &tq.question, depth) {
        if gold.contains(&p) {
            continue;
        }
        if let Some((start, end)) = locate_answer(tq, &[p], corpus) {
            return Ok(Some(ReaderExample {
                qid: tq.qid.clone(),
                question: tq.question.clone(),
                path: vec![p],
                target: ReaderTarget::Span { start, end },
                label: PathLabel::Gold,
                origin: Origin::Distant,
            }));
        }
    }
    Ok(None)
}

/// Distorted paths: the last (answer-bearing) gold paragraph is swapped for top TF-IDF paragraphs
/// that contain no answer string. Returns fewer than `count` (possibly none) when the ranking runs
/// out of eligible paragraphs.
pub fn build_reader_negatives(
    tq: &TrainingQuestion,
    gold: &[ParaIdx],
    index: &SparseIndex,
    corpus: &Corpus,
    depth: usize,
    count: usize,
) -> Vec<ReaderExample> {
    let Some((_, prefix)) = gold.split_last() else {
        return Vec::new();
    };
    tfidf::top_f(index, &tq.question, depth)
        .into_iter()
        .map(|(p, _)| p)
        .filter(|p| !gold.contains(p) && !tq.answered_by(corpus.text(*p)))
        .take(count)
        .map(|x| ReaderExample {
            qid: tq.qid.clone(),
            question: tq.question.clone(),
            path: prefix.iter().copied().chain([x]).collect(),
            target: ReaderTarget::Masked,
            label: PathLabel::Distorted,
            origin: Origin::Supervised,
        })
        .collect()
}

/// Gold, distant and distorted reader examples for one question.
pub fn build_reader_examples(
    tq: &TrainingQuestion,
    index: &SparseIndex,
    corpus: &Corpus,
    graph: &WikiGraph,
    config: &SupervisionConfig,
) -> Result<Vec<ReaderExample>> {
    tq.validate(corpus)?;
    let gold = derive_gold_path(tq, corpus, graph)?;
    let mut out = vec![build_gold_reader_example(tq, &gold, corpus)?];
    out.extend(build_distant_examples(tq, index, corpus, config.tfidf_depth)?);
    out.extend(build_reader_negatives(
        tq,
        &gold,
        index,
        corpus,
        config.tfidf_depth,
        config.reader_negatives,
    ));
    Ok(out)
}
