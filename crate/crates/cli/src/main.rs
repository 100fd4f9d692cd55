//! `pathqa`: build indexes and graphs, train the retriever and reader, retrieve, answer and
//! evaluate over a hyperlinked paragraph corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pathqa::checkpoint::Checkpoint;
use pathqa::corpus::read_jsonl;
use pathqa::harness::experiment::{declares_yes_no, retrieve_all, retriever_items};
use pathqa::harness::{
    eval_answers, eval_retrieval, gen_synthetic, run_experiment, AnswerRecord, ExperimentConfig,
    ExperimentData, MetricPaths, RetrievalPrediction,
};
use pathqa::reader::{train_reader, ReaderParams};
use pathqa::retriever::{train_retriever, RetrievalContext, TrainConfig};
use pathqa::supervision::{
    build_reader_examples, read_questions, write_questions, AnswerType, TrainingQuestion,
};
use pathqa::tfidf::SparseIndex;
use pathqa::{
    build_graph, ingest_corpus, Corpus, Error, Granularity, ParaIdx, ReasoningPath, Result, RetrievalMode,
    RetrieverModel, WikiGraph,
};

#[derive(Parser)]
#[command(
    name = "pathqa",
    version,
    about = "Multi-hop question answering over a hyperlinked paragraph corpus"
)]
struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with `key = value` settings, grouped in the sections of the experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and question set.
    GenSynth {
        /// Output directory; receives corpus.jsonl and questions.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a TF-IDF index over paragraphs, or over articles with --articles.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        articles: bool,
    },
    /// Build the hyperlink graph.
    BuildGraph {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `intro` or `all`: which paragraphs of a linked article a hyperlink reaches.
        #[arg(long, default_value = "intro")]
        granularity: Granularity,
    },
    /// Train the path retriever.
    TrainRetriever {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train the non-recurrent re-ranking scorer instead.
        #[arg(long)]
        no_recurrence: bool,
    },
    /// Train the reader.
    TrainReader {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve reasoning paths for a questions file or a single question.
    Retrieve {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required_unless_present = "question")]
        questions: Option<PathBuf>,
        #[arg(long, conflicts_with = "questions")]
        question: Option<String>,
        /// Retrieval mode, overriding the config: adaptive, greedy, fixed:L, norec.
        #[arg(long)]
        mode: Option<RetrievalMode>,
        /// Output JSONL; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Read retrieved paths and answer.
    Answer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        reader: PathBuf,
        /// Output of `retrieve`.
        #[arg(long)]
        paths: PathBuf,
        /// Answer from the top retrieved path without re-ranking.
        #[arg(long)]
        no_rerank: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score retrieved paths and/or answers against gold questions.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long, required_unless_present = "answers")]
        paths: Option<PathBuf>,
        #[arg(long)]
        answers: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare every configured strategy on a synthetic benchmark.
    Experiment {
        /// Output directory; receives report.json and report.txt.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    /// Paragraph index; built from the corpus when omitted.
    #[arg(long)]
    index: Option<PathBuf>,
}

struct Data {
    corpus: Corpus,
    graph: WikiGraph,
    index: SparseIndex,
}

impl DataArgs {
    fn load(&self, config: &ExperimentConfig) -> Result<Data> {
        let corpus = ingest_corpus(&self.corpus)?;
        let graph = WikiGraph::load(&self.graph)?;
        graph.check_against(&corpus)?;
        let index = match &self.index {
            Some(p) => SparseIndex::load(p)?,
            None => SparseIndex::over_paragraphs(&corpus, config.index)?,
        };
        if index.num_docs() != corpus.len() {
            return Err(Error::Integrity(format!(
                "index covers {} documents but the corpus has {} paragraphs",
                index.num_docs(),
                corpus.len()
            )));
        }
        Ok(Data { corpus, graph, index })
    }
}

/// One line of `retrieve` output.
#[derive(Serialize, Deserialize)]
struct RetrievedRecord {
    qid: String,
    question: String,
    paths: Vec<PathRecord>,
}

#[derive(Serialize, Deserialize)]
struct PathRecord {
    paragraphs: Vec<String>,
    terminated: bool,
    log_score: f64,
}

/// One line of `answer` output.
#[derive(Serialize, Deserialize)]
struct AnswerLine {
    qid: String,
    answer: String,
    answer_type: AnswerType,
    path: Vec<String>,
    path_prob: f64,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.synthetic.seed = s;
        cfg.retriever_train.seed = s;
        cfg.reader_train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

fn ids(corpus: &Corpus, path: &[ParaIdx]) -> Vec<String> {
    path.iter().map(|&p| corpus.id(p).to_string()).collect()
}

fn resolve(corpus: &Corpus, ids: &[String]) -> Result<Vec<ParaIdx>> {
    ids.iter().map(|id| corpus.require(id)).collect()
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenSynth { out } => {
            let data = gen_synthetic(&config.synthetic)?;
            fs::create_dir_all(&out)?;
            data.corpus.write_jsonl(&out.join("corpus.jsonl"))?;
            write_questions(&out.join("questions.jsonl"), &data.questions)?;
            eprintln!(
                "wrote {} paragraphs and {} questions to {}",
                data.corpus.len(),
                data.questions.len(),
                out.display()
            );
        }
        Command::BuildIndex {
            corpus,
            out,
            articles,
        } => {
            let corpus = ingest_corpus(&corpus)?;
            let index = if articles {
                SparseIndex::over_articles(&corpus, config.index)?
            } else {
                SparseIndex::over_paragraphs(&corpus, config.index)?
            };
            index.save(&out)?;
            eprintln!("indexed {} documents", index.num_docs());
        }
        Command::BuildGraph {
            corpus,
            out,
            granularity,
        } => {
            let corpus = ingest_corpus(&corpus)?;
            let (graph, report) = build_graph(&corpus, granularity);
            graph.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::TrainRetriever {
            data,
            questions,
            out,
            no_recurrence,
        } => {
            let d = data.load(&config)?;
            let qs = read_questions(&questions)?;
            let items = retriever_items(&qs, &d.index, &d.corpus, &d.graph, &config.supervision)?;
            let mut model = RetrieverModel::init(config.encoder.clone(), config.seed)?;
            let tc = TrainConfig {
                recurrent: !no_recurrence,
                ..config.retriever_train.clone()
            };
            let report = train_retriever(&mut model, &d.corpus, &items, &tc)?;
            model.to_checkpoint().save(&out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::TrainReader { data, questions, out } => {
            let d = data.load(&config)?;
            let qs = read_questions(&questions)?;
            let examples: Vec<_> = qs
                .par_iter()
                .map(|q| build_reader_examples(q, &d.index, &d.corpus, &d.graph, &config.supervision))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            let mut rc = config.reader.clone();
            rc.yes_no |= declares_yes_no(&qs);
            let mut reader = ReaderParams::init(rc, config.seed)?;
            let report = train_reader(&mut reader, &d.corpus, &examples, &config.reader_train)?;
            reader.to_checkpoint().save(&out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Retrieve {
            data,
            model,
            questions,
            question,
            mode,
            out,
        } => {
            let d = data.load(&config)?;
            let model = RetrieverModel::from_checkpoint(&Checkpoint::load(&model)?)?;
            let qs: Vec<(String, String)> = match (questions, question) {
                (Some(p), _) => read_questions(&p)?
                    .into_iter()
                    .map(|q| (q.qid, q.question))
                    .collect(),
                (None, Some(q)) => vec![("q0".into(), q)],
                (None, None) => return Err(Error::Usage("pass --questions or --question".into())),
            };
            let mut rc = config.retrieval.clone();
            if let Some(m) = mode {
                rc.mode = m;
            }
            let articles = if rc.two_stage {
                Some(SparseIndex::over_articles(&d.corpus, config.index)?)
            } else {
                None
            };
            let ctx = RetrievalContext {
                corpus: &d.corpus,
                graph: &d.graph,
                index: &d.index,
                article_index: articles.as_ref(),
            };
            let as_questions: Vec<TrainingQuestion> = qs
                .iter()
                .map(|(qid, text)| TrainingQuestion {
                    qid: qid.clone(),
                    question: text.clone(),
                    answers: Vec::new(),
                    gold_paras: Vec::new(),
                    answer_bearing: None,
                    answer_type: AnswerType::Span,
                })
                .collect();
            let paths = retrieve_all(&as_questions, &model, &ctx, &rc)?;
            let records: Vec<RetrievedRecord> = qs
                .into_iter()
                .zip(paths)
                .map(|((qid, question), ps)| RetrievedRecord {
                    qid,
                    question,
                    paths: ps
                        .iter()
                        .map(|p| PathRecord {
                            paragraphs: ids(&d.corpus, &p.paragraphs),
                            terminated: p.terminated,
                            log_score: p.log_score,
                        })
                        .collect(),
                })
                .collect();
            emit(out.as_deref(), &to_jsonl(&records)?)?;
        }
        Command::Answer {
            corpus,
            reader,
            paths,
            no_rerank,
            out,
        } => {
            let corpus = ingest_corpus(&corpus)?;
            let reader = ReaderParams::from_checkpoint(&Checkpoint::load(&reader)?)?;
            let records: Vec<RetrievedRecord> = read_jsonl(&paths)?;
            let lines: Vec<AnswerLine> = records
                .par_iter()
                .map(|r| {
                    let ps: Vec<ReasoningPath> = r
                        .paths
                        .iter()
                        .map(|p| {
                            Ok(ReasoningPath {
                                paragraphs: resolve(&corpus, &p.paragraphs)?,
                                terminated: p.terminated,
                                log_score: p.log_score,
                            })
                        })
                        .collect::<Result<_>>()?;
                    let pred = if no_rerank {
                        reader.answer_without_rerank(&corpus, &r.question, &ps)
                    } else {
                        reader.answer(&corpus, &r.question, &ps)
                    };
                    Ok(AnswerLine {
                        qid: r.qid.clone(),
                        answer: pred.answer,
                        answer_type: pred.answer_type,
                        path: ids(&corpus, &pred.path),
                        path_prob: pred.p_path,
                    })
                })
                .collect::<Result<_>>()?;
            emit(out.as_deref(), &to_jsonl(&lines)?)?;
        }
        Command::Evaluate {
            corpus,
            questions,
            paths,
            answers,
            out,
        } => {
            let corpus = ingest_corpus(&corpus)?;
            let gold = read_questions(&questions)?;
            let mut report = serde_json::Map::new();
            if let Some(p) = paths {
                let records: Vec<RetrievedRecord> = read_jsonl(&p)?;
                let preds = records
                    .iter()
                    .map(|r| {
                        let mut paras = Vec::new();
                        let take = match config.metric_paths {
                            MetricPaths::Best => r.paths.len().min(1),
                            MetricPaths::Union => r.paths.len(),
                        };
                        for path in &r.paths[..take] {
                            for p in resolve(&corpus, &path.paragraphs)? {
                                if !paras.contains(&p) {
                                    paras.push(p);
                                }
                            }
                        }
                        Ok(RetrievalPrediction {
                            qid: r.qid.clone(),
                            paragraphs: paras,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let m = eval_retrieval(&preds, &gold, &corpus)?;
                report.insert("retrieval".into(), serde_json::to_value(m)?);
            }
            if let Some(a) = answers {
                let lines: Vec<AnswerLine> = read_jsonl(&a)?;
                let records: Vec<AnswerRecord> = lines
                    .into_iter()
                    .map(|l| AnswerRecord {
                        qid: l.qid,
                        answer: l.answer,
                    })
                    .collect();
                let m = eval_answers(&records, &gold)?;
                report.insert("answers".into(), serde_json::to_value(m)?);
            }
            let text = serde_json::to_string_pretty(&report)? + "\n";
            emit(out.as_deref(), &text)?;
        }
        Command::Experiment { out } => {
            let data = ExperimentData::synthetic(&config)?;
            let outcome = run_experiment(&config, &data, None)?;
            fs::create_dir_all(&out)?;
            let json = serde_json::to_string_pretty(&outcome.report)? + "\n";
            fs::write(out.join("report.json"), json)?;
            let table = outcome.report.to_table();
            fs::write(out.join("report.txt"), &table)?;
            print!("{table}");
            let t = &outcome.timings;
            eprintln!(
                "training {:.1} s (retriever {:.1}, rerank {:.1}, reader {:.1}); evaluation {:.1} s",
                t.train_retriever + t.train_rerank + t.train_reader,
                t.train_retriever,
                t.train_rerank,
                t.train_reader,
                t.evaluate
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
