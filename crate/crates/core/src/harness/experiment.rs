//! End-to-end experiment: train the retriever (and optionally the re-ranking baseline and the
//! reader) on one question split, then evaluate every enabled strategy on the other.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baselines;
use super::metrics::{
    eval_answers, eval_retrieval, AnswerMetrics, AnswerRecord, RetrievalMetrics, RetrievalPrediction,
};
use super::synth::{gen_synthetic, SyntheticConfig};
use crate::corpus::{Corpus, ParaIdx, WikiGraph};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::reader::{train_reader, ReaderConfig, ReaderParams, ReaderTrainConfig};
use crate::retriever::{
    beam_search, train_retriever, ReasoningPath, RetrievalConfig, RetrievalContext, RetrievalMode,
    RetrieverModel, TrainConfig, TrainItem, TrainReport,
};
use crate::supervision::{
    build_reader_examples, build_reader_negatives, build_retriever_example, derive_gold_path, AnswerType,
    SupervisionConfig, TrainingQuestion,
};
use crate::tfidf::{IndexConfig, SparseIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    Retriever(RetrievalMode),
    TfidfTop2,
    Rerank,
    Rerank2Hop,
}

impl Strategy {
    fn needs_rerank_model(self) -> bool {
        matches!(
            self,
            Strategy::Rerank | Strategy::Rerank2Hop | Strategy::Retriever(RetrievalMode::NoRecurrence)
        )
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tfidf-top2" => Ok(Strategy::TfidfTop2),
            "rerank" => Ok(Strategy::Rerank),
            "rerank-2hop" => Ok(Strategy::Rerank2Hop),
            other => other.parse().map(Strategy::Retriever),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Retriever(m) => write!(f, "{m}"),
            Strategy::TfidfTop2 => write!(f, "tfidf-top2"),
            Strategy::Rerank => write!(f, "rerank"),
            Strategy::Rerank2Hop => write!(f, "rerank-2hop"),
        }
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

/// Which retrieved paragraphs the retrieval metrics see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricPaths {
    /// The top-scoring path only.
    Best,
    /// Every paragraph of every returned path.
    Union,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticConfig,
    /// Leading questions used for training; the rest are evaluated.
    pub train_questions: usize,
    pub index: IndexConfig,
    pub encoder: EncoderConfig,
    pub retriever_train: TrainConfig,
    pub supervision: SupervisionConfig,
    pub retrieval: RetrievalConfig,
    /// TF-IDF depth of the re-ranking baselines.
    pub baseline_f: usize,
    pub strategies: Vec<Strategy>,
    pub metric_paths: MetricPaths,
    pub train_reader: bool,
    pub reader: ReaderConfig,
    pub reader_train: ReaderTrainConfig,
    /// Retriever strategy whose paths the reader reads.
    pub reader_strategy: RetrievalMode,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synthetic: SyntheticConfig::default(),
            train_questions: 500,
            index: IndexConfig::default(),
            encoder: EncoderConfig::default(),
            retriever_train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            supervision: SupervisionConfig {
                reader_negatives: 3,
                ..SupervisionConfig::default()
            },
            retrieval: RetrievalConfig {
                f: 20,
                ..RetrievalConfig::default()
            },
            baseline_f: 20,
            strategies: vec![
                Strategy::Retriever(RetrievalMode::Adaptive),
                Strategy::Retriever(RetrievalMode::Greedy),
                Strategy::Retriever(RetrievalMode::Fixed(1)),
                Strategy::Retriever(RetrievalMode::Fixed(2)),
                Strategy::Retriever(RetrievalMode::NoRecurrence),
                Strategy::TfidfTop2,
                Strategy::Rerank,
                Strategy::Rerank2Hop,
            ],
            metric_paths: MetricPaths::Best,
            train_reader: true,
            reader: ReaderConfig::default(),
            reader_train: ReaderTrainConfig {
                epochs: 10,
                batch_size: 32,
                ..ReaderTrainConfig::default()
            },
            reader_strategy: RetrievalMode::Adaptive,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.retrieval.validate()?;
        self.retriever_train.validate()?;
        self.encoder.validate()?;
        self.index.validate()?;
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies enabled".into()));
        }
        if self.baseline_f == 0 {
            return Err(Error::Config("baseline_f must be at least 1".into()));
        }
        if self.train_reader {
            self.reader.validate()?;
        }
        Ok(())
    }

    /// Retrieval settings for one retriever strategy.
    pub fn retrieval_for(&self, mode: RetrievalMode) -> RetrievalConfig {
        RetrievalConfig {
            mode,
            ..self.retrieval.clone()
        }
    }
}

/// Corpus and question split an experiment runs on.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub corpus: Corpus,
    pub graph: WikiGraph,
    pub train: Vec<TrainingQuestion>,
    pub eval: Vec<TrainingQuestion>,
}

impl ExperimentData {
    /// Generates the synthetic set and splits off the first `train_questions` for training.
    pub fn synthetic(config: &ExperimentConfig) -> Result<Self> {
        let data = gen_synthetic(&config.synthetic)?;
        if config.train_questions >= data.questions.len() {
            return Err(Error::Config(format!(
                "train_questions ({}) leaves no evaluation questions out of {}",
                config.train_questions,
                data.questions.len()
            )));
        }
        let mut questions = data.questions;
        let eval = questions.split_off(config.train_questions);
        Ok(ExperimentData {
            corpus: data.corpus,
            graph: data.graph,
            train: questions,
            eval,
        })
    }
}

/// Trained components. `rerank` is a retriever trained without recurrence.
#[derive(Debug, Clone)]
pub struct Models {
    pub retriever: RetrieverModel,
    pub rerank: Option<RetrieverModel>,
    pub reader: Option<ReaderParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub retrieval: RetrievalMetrics,
    pub answers: Option<AnswerMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReaderSummary {
    /// Answers from the reader-selected path among the top-`B` retriever paths.
    pub reranked: StrategyRow,
    /// Answers from the top retriever path.
    pub no_rerank: StrategyRow,
    /// Fraction of held-out questions whose gold path gets a higher `P(E|q)` than its distorted
    /// counterpart.
    pub discrimination_accuracy: f64,
    pub discrimination_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingSummary {
    pub retriever: Option<TrainReport>,
    pub rerank: Option<TrainReport>,
    pub reader: Option<TrainReport>,
    pub retriever_examples: usize,
    pub reader_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub train_questions: usize,
    pub eval_questions: usize,
    pub corpus_paragraphs: usize,
    pub training: TrainingSummary,
    pub rows: Vec<StrategyRow>,
    pub reader: Option<ReaderSummary>,
}

/// Wall-clock seconds per phase; kept out of the report so reports stay reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timings {
    pub train_retriever: f64,
    pub train_rerank: f64,
    pub train_reader: f64,
    pub evaluate: f64,
}

pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub models: Models,
    pub timings: Timings,
}

/// Retriever training items for `questions`, built in parallel and returned in input order.
pub fn retriever_items(
    questions: &[TrainingQuestion],
    index: &SparseIndex,
    corpus: &Corpus,
    graph: &WikiGraph,
    config: &SupervisionConfig,
) -> Result<Vec<TrainItem>> {
    questions
        .par_iter()
        .map(|q| build_retriever_example(q, index, corpus, graph, config).map(|e| e.to_train_item()))
        .collect()
}

/// Whether any question has a yes/no answer, which enables the reader's answer-class head.
pub fn declares_yes_no(questions: &[TrainingQuestion]) -> bool {
    questions.iter().any(|q| q.answer_type != AnswerType::Span)
}

fn train_models(
    config: &ExperimentConfig,
    data: &ExperimentData,
    index: &SparseIndex,
    timings: &mut Timings,
) -> Result<(Models, TrainingSummary)> {
    let items = retriever_items(&data.train, index, &data.corpus, &data.graph, &config.supervision)?;
    let t = Instant::now();
    let mut retriever = RetrieverModel::init(config.encoder.clone(), config.seed)?;
    let retriever_report = train_retriever(&mut retriever, &data.corpus, &items, &config.retriever_train)?;
    timings.train_retriever = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (rerank, rerank_report) = if config.strategies.iter().any(|s| s.needs_rerank_model()) {
        let mut m = RetrieverModel::init(config.encoder.clone(), config.seed)?;
        let tc = TrainConfig {
            recurrent: false,
            ..config.retriever_train.clone()
        };
        let r = train_retriever(&mut m, &data.corpus, &items, &tc)?;
        (Some(m), Some(r))
    } else {
        (None, None)
    };
    timings.train_rerank = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (reader, reader_report, reader_examples) = if config.train_reader {
        let examples: Vec<_> = data
            .train
            .par_iter()
            .map(|q| build_reader_examples(q, index, &data.corpus, &data.graph, &config.supervision))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let mut reader_config = config.reader.clone();
        reader_config.yes_no |= declares_yes_no(&data.train);
        let mut r = ReaderParams::init(reader_config, config.seed)?;
        let report = train_reader(&mut r, &data.corpus, &examples, &config.reader_train)?;
        (Some(r), Some(report), examples.len())
    } else {
        (None, None, 0)
    };
    timings.train_reader = t.elapsed().as_secs_f64();

    Ok((
        Models {
            retriever,
            rerank,
            reader,
        },
        TrainingSummary {
            retriever: Some(retriever_report),
            rerank: rerank_report,
            reader: reader_report,
            retriever_examples: items.len(),
            reader_examples,
        },
    ))
}

fn flatten(paths: &[ReasoningPath], which: MetricPaths) -> Vec<ParaIdx> {
    match which {
        MetricPaths::Best => paths.first().map(|p| p.paragraphs.clone()).unwrap_or_default(),
        MetricPaths::Union => {
            let mut seen = BTreeSet::new();
            paths
                .iter()
                .flat_map(|p| p.paragraphs.iter().copied())
                .filter(|p| seen.insert(*p))
                .collect()
        }
    }
}

/// Top paths of one retriever strategy for every question, in question order.
pub fn retrieve_all(
    questions: &[TrainingQuestion],
    model: &RetrieverModel,
    ctx: &RetrievalContext<'_>,
    config: &RetrievalConfig,
) -> Result<Vec<Vec<ReasoningPath>>> {
    questions
        .par_iter()
        .map(|q| beam_search(&q.question, model, ctx, config, None).map(|o| o.paths))
        .collect()
}

fn predictions(questions: &[TrainingQuestion], paragraphs: Vec<Vec<ParaIdx>>) -> Vec<RetrievalPrediction> {
    questions
        .iter()
        .zip(paragraphs)
        .map(|(q, p)| RetrievalPrediction {
            qid: q.qid.clone(),
            paragraphs: p,
        })
        .collect()
}

fn require_rerank(models: &Models) -> Result<&RetrieverModel> {
    models
        .rerank
        .as_ref()
        .ok_or_else(|| Error::Usage("strategy needs a retriever trained without recurrence".into()))
}

/// Gold-vs-distorted pairwise accuracy of the reader's path probability.
pub fn discrimination_accuracy(
    reader: &ReaderParams,
    questions: &[TrainingQuestion],
    index: &SparseIndex,
    corpus: &Corpus,
    graph: &WikiGraph,
    depth: usize,
) -> Result<(f64, usize)> {
    let outcomes: Vec<Option<bool>> = questions
        .par_iter()
        .filter(|q| q.answer_type == AnswerType::Span)
        .map(|q| {
            let gold = derive_gold_path(q, corpus, graph)?;
            let Some(neg) = build_reader_negatives(q, &gold, index, corpus, depth, 1).pop() else {
                return Ok(None);
            };
            let texts = |p: &[ParaIdx]| p.iter().map(|&i| corpus.text(i)).collect::<Vec<_>>();
            let pg = reader.rerank_prob(&q.question, &texts(&gold));
            let pd = reader.rerank_prob(&q.question, &texts(&neg.path));
            Ok(Some(pg > pd))
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<bool> = outcomes.into_iter().flatten().collect();
    let n = pairs.len();
    let acc = if n == 0 {
        0.0
    } else {
        pairs.iter().filter(|&&x| x).count() as f64 / n as f64
    };
    Ok((acc, n))
}

/// Trains any missing components, then evaluates every enabled strategy on `data.eval`.
pub fn run_experiment(
    config: &ExperimentConfig,
    data: &ExperimentData,
    pretrained: Option<Models>,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    if data.train.is_empty() && pretrained.is_none() {
        return Err(Error::Usage(
            "no training questions and no trained models supplied".into(),
        ));
    }
    let mut timings = Timings::default();
    let index = SparseIndex::over_paragraphs(&data.corpus, config.index)?;
    let (models, training) = match pretrained {
        Some(m) => (
            m,
            TrainingSummary {
                retriever: None,
                rerank: None,
                reader: None,
                retriever_examples: 0,
                reader_examples: 0,
            },
        ),
        None => train_models(config, data, &index, &mut timings)?,
    };
    let ctx = RetrievalContext {
        corpus: &data.corpus,
        graph: &data.graph,
        index: &index,
        article_index: None,
    };
    let t = Instant::now();
    let eval = &data.eval;
    let mut rows = Vec::with_capacity(config.strategies.len());
    let mut reader_paths: Option<Vec<Vec<ReasoningPath>>> = None;
    for &strategy in &config.strategies {
        let paragraphs: Vec<Vec<ParaIdx>> = match strategy {
            Strategy::Retriever(mode) => {
                let model = if mode == RetrievalMode::NoRecurrence {
                    require_rerank(&models)?
                } else {
                    &models.retriever
                };
                let paths = retrieve_all(eval, model, &ctx, &config.retrieval_for(mode))?;
                let flat = paths.iter().map(|p| flatten(p, config.metric_paths)).collect();
                if mode == config.reader_strategy {
                    reader_paths = Some(paths);
                }
                flat
            }
            Strategy::TfidfTop2 => eval
                .iter()
                .map(|q| baselines::tfidf_top2(&q.question, &index))
                .collect(),
            Strategy::Rerank => {
                let m = require_rerank(&models)?;
                eval.par_iter()
                    .map(|q| baselines::rerank(&q.question, &index, m, &data.corpus, config.baseline_f))
                    .collect::<Result<_>>()?
            }
            Strategy::Rerank2Hop => {
                let m = require_rerank(&models)?;
                eval.par_iter()
                    .map(|q| {
                        baselines::rerank_2hop(
                            &q.question,
                            &index,
                            &data.graph,
                            m,
                            &data.corpus,
                            config.baseline_f,
                        )
                    })
                    .collect::<Result<_>>()?
            }
        };
        rows.push(StrategyRow {
            strategy: strategy.to_string(),
            retrieval: eval_retrieval(&predictions(eval, paragraphs), eval, &data.corpus)?,
            answers: None,
        });
    }

    let reader = match &models.reader {
        None => None,
        Some(reader) => {
            let paths = match reader_paths {
                Some(p) => p,
                None => retrieve_all(
                    eval,
                    &models.retriever,
                    &ctx,
                    &config.retrieval_for(config.reader_strategy),
                )?,
            };
            let read = |rerank: bool| -> Result<StrategyRow> {
                let preds: Vec<_> = eval
                    .par_iter()
                    .zip(&paths)
                    .map(|(q, ps)| {
                        if rerank {
                            reader.answer(&data.corpus, &q.question, ps)
                        } else {
                            reader.answer_without_rerank(&data.corpus, &q.question, ps)
                        }
                    })
                    .collect();
                let answers: Vec<AnswerRecord> = eval
                    .iter()
                    .zip(&preds)
                    .map(|(q, p)| AnswerRecord {
                        qid: q.qid.clone(),
                        answer: p.answer.clone(),
                    })
                    .collect();
                let chosen = preds.into_iter().map(|p| p.path).collect();
                let name = if rerank { "reader" } else { "reader-no-rerank" };
                Ok(StrategyRow {
                    strategy: format!("{}+{name}", config.reader_strategy),
                    retrieval: eval_retrieval(&predictions(eval, chosen), eval, &data.corpus)?,
                    answers: Some(eval_answers(&answers, eval)?),
                })
            };
            let (acc, n) = discrimination_accuracy(
                reader,
                eval,
                &index,
                &data.corpus,
                &data.graph,
                config.supervision.tfidf_depth,
            )?;
            Some(ReaderSummary {
                reranked: read(true)?,
                no_rerank: read(false)?,
                discrimination_accuracy: acc,
                discrimination_pairs: n,
            })
        }
    };
    timings.evaluate = t.elapsed().as_secs_f64();

    Ok(ExperimentOutcome {
        report: ExperimentReport {
            train_questions: data.train.len(),
            eval_questions: eval.len(),
            corpus_paragraphs: data.corpus.len(),
            training,
            rows,
            reader,
        },
        models,
        timings,
    })
}

impl ExperimentReport {
    pub fn row(&self, strategy: &str) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    /// Aligned plain-text table, one line per strategy.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<&StrategyRow> = self.rows.iter().collect();
        if let Some(r) = &self.reader {
            rows.push(&r.reranked);
            rows.push(&r.no_rerank);
        }
        let width = rows.iter().map(|r| r.strategy.len()).max().unwrap_or(8).max(8);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {:>7}  lengths",
            "strategy", "AR", "PR", "P_EM", "EM", "F1", "avg_len"
        );
        for r in rows {
            let m = &r.retrieval;
            let (em, f1) = match &r.answers {
                Some(a) => (format!("{:.3}", a.em), format!("{:.3}", a.f1)),
                None => ("-".into(), "-".into()),
            };
            let hist: Vec<String> = m
                .length_histogram
                .iter()
                .map(|(l, c)| format!("{l}:{c}"))
                .collect();
            let _ = writeln!(
                out,
                "{:<width$}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6}  {:>6}  {:>7.3}  {}",
                r.strategy,
                m.ar,
                m.pr,
                m.p_em,
                em,
                f1,
                m.mean_path_len,
                hist.join(" ")
            );
        }
        if let Some(r) = &self.reader {
            let _ = writeln!(
                out,
                "gold-vs-distorted discrimination: {:.3} over {} pairs",
                r.discrimination_accuracy, r.discrimination_pairs
            );
        }
        out
    }
}
