//! Retrieval (AR, PR, P EM) and answer (EM, F1) metrics.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ParaIdx};
use crate::error::{Error, Result};
use crate::supervision::{AnswerType, TrainingQuestion};
use crate::text;

/// Retrieved paragraphs for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPrediction {
    pub qid: String,
    pub paragraphs: Vec<ParaIdx>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub qid: String,
    /// `None` for questions without answer strings (yes/no), which AR skips.
    pub answer_recall: Option<bool>,
    pub paragraph_recall: bool,
    pub paragraph_em: bool,
    pub path_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub ar: f64,
    pub pr: f64,
    pub p_em: f64,
    pub questions: usize,
    pub mean_path_len: f64,
    /// Path length -> number of questions.
    pub length_histogram: BTreeMap<usize, usize>,
    pub per_question: Vec<RetrievalRecord>,
}

/// Pairs each gold item with its prediction by qid. Every qid must appear exactly once on each
/// side.
fn align<'a, P>(
    preds: &'a [P],
    pred_qid: impl Fn(&P) -> &str,
    gold: &'a [TrainingQuestion],
) -> Result<Vec<(&'a TrainingQuestion, &'a P)>> {
    let mut by_qid: HashMap<&str, &P> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_qid.insert(pred_qid(p), p).is_some() {
            return Err(Error::Integrity(format!(
                "duplicate prediction for qid {}",
                pred_qid(p)
            )));
        }
    }
    let mut seen = HashSet::with_capacity(gold.len());
    let mut out = Vec::with_capacity(gold.len());
    for q in gold {
        if !seen.insert(q.qid.as_str()) {
            return Err(Error::Integrity(format!("duplicate gold qid {}", q.qid)));
        }
        let p = by_qid
            .get(q.qid.as_str())
            .ok_or_else(|| Error::Integrity(format!("no prediction for qid {}", q.qid)))?;
        out.push((q, *p));
    }
    if let Some(extra) = preds.iter().find(|p| !seen.contains(pred_qid(p))) {
        return Err(Error::Integrity(format!(
            "prediction for unknown qid {}",
            pred_qid(extra)
        )));
    }
    Ok(out)
}

fn mean(xs: impl Iterator<Item = bool>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for x in xs {
        n += 1;
        hit += x as usize;
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

pub fn eval_retrieval(
    predictions: &[RetrievalPrediction],
    gold: &[TrainingQuestion],
    corpus: &Corpus,
) -> Result<RetrievalMetrics> {
    let pairs = align(predictions, |p| p.qid.as_str(), gold)?;
    let mut per_question = Vec::with_capacity(pairs.len());
    let mut length_histogram = BTreeMap::new();
    for (q, p) in pairs {
        let gold_idx = q.gold_indices(corpus)?;
        let retrieved: HashSet<ParaIdx> = p.paragraphs.iter().copied().collect();
        let answer_recall =
            (!q.answers.is_empty()).then(|| p.paragraphs.iter().any(|&x| q.answered_by(corpus.text(x))));
        *length_histogram.entry(p.paragraphs.len()).or_insert(0) += 1;
        per_question.push(RetrievalRecord {
            qid: q.qid.clone(),
            answer_recall,
            paragraph_recall: gold_idx.iter().any(|g| retrieved.contains(g)),
            paragraph_em: gold_idx.iter().all(|g| retrieved.contains(g)),
            path_len: p.paragraphs.len(),
        });
    }
    let n = per_question.len();
    Ok(RetrievalMetrics {
        ar: mean(per_question.iter().filter_map(|r| r.answer_recall)),
        pr: mean(per_question.iter().map(|r| r.paragraph_recall)),
        p_em: mean(per_question.iter().map(|r| r.paragraph_em)),
        questions: n,
        mean_path_len: if n == 0 {
            0.0
        } else {
            per_question.iter().map(|r| r.path_len).sum::<usize>() as f64 / n as f64
        },
        length_histogram,
        per_question,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub qid: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerScore {
    pub qid: String,
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerMetrics {
    pub em: f64,
    pub f1: f64,
    pub questions: usize,
    pub per_question: Vec<AnswerScore>,
}

/// Token-level F1 between normalized strings.
pub fn f1_score(prediction: &str, gold: &str) -> f64 {
    let p = text::normalize_answer(prediction);
    let g = text::normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return (pt.is_empty() && gt.is_empty()) as u8 as f64;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    (text::normalize_answer(prediction) == text::normalize_answer(gold)) as u8 as f64
}

/// Acceptable answer strings: the annotated answers, or `yes`/`no` for comparison questions.
pub fn gold_answers(q: &TrainingQuestion) -> Vec<String> {
    match q.answer_type {
        AnswerType::Span => q.answers.clone(),
        AnswerType::Yes => vec!["yes".into()],
        AnswerType::No => vec!["no".into()],
    }
}

/// Max-over-gold EM and F1. An empty prediction scores 0 against any non-empty gold answer.
pub fn eval_answers(predictions: &[AnswerRecord], gold: &[TrainingQuestion]) -> Result<AnswerMetrics> {
    let pairs = align(predictions, |p| p.qid.as_str(), gold)?;
    let per_question: Vec<AnswerScore> = pairs
        .into_iter()
        .map(|(q, p)| {
            let golds = gold_answers(q);
            let best = |f: fn(&str, &str) -> f64| golds.iter().map(|g| f(&p.answer, g)).fold(0.0, f64::max);
            AnswerScore {
                qid: q.qid.clone(),
                em: best(exact_match),
                f1: best(f1_score),
            }
        })
        .collect();
    let n = per_question.len();
    let avg = |f: fn(&AnswerScore) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_question.iter().map(f).sum::<f64>() / n as f64
        }
    };
    Ok(AnswerMetrics {
        em: avg(|s| s.em),
        f1: avg(|s| s.f1),
        questions: n,
        per_question,
    })
}
