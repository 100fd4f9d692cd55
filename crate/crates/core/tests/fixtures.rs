//! Hand-worked supervision, loss and training fixtures, graph bookkeeping against a set-based
//! oracle, and the reader/retriever interplay.

mod common;

use std::collections::BTreeSet;
use std::f64::consts::LN_2;

use pathqa::encoder::{EncoderConfig, EncoderMode};
use pathqa::reader::{train_reader, ReaderConfig, ReaderParams, ReaderTrainConfig};
use pathqa::retriever::{retriever_loss, train_retriever, StepNegatives, TrainConfig, TrainItem};
use pathqa::supervision::{
    build_distant_examples, build_reader_negatives, derive_gold_path, mine_negatives, AnswerType, Origin,
    PathLabel, ReaderExample, ReaderTarget, TrainingQuestion,
};
use pathqa::tfidf::IndexConfig;
use pathqa::{
    Corpus, Granularity, ParaIdx, Paragraph, ReasoningPath, RetrieverModel, SparseIndex, TrainingPath,
    WikiGraph,
};
use proptest::prelude::*;

fn para(title: &str, i: u32, text: &str, links: &[&str]) -> Paragraph {
    Paragraph {
        para_id: Paragraph::make_id(title, i),
        article_title: title.into(),
        para_index: i,
        text: text.into(),
        out_links: links.iter().map(|s| s.to_string()).collect(),
        is_introductory: i == 0,
    }
}

/// Adds unrelated filler articles so that fixture words stay rare enough for a positive idf.
fn world(mut paras: Vec<Paragraph>) -> (Corpus, WikiGraph, SparseIndex) {
    for i in 0..8 {
        paras.push(para(&format!("Filler{i}"), 0, "unrelated filler prose", &[]));
    }
    let corpus = Corpus::from_paragraphs(paras).unwrap();
    let (graph, _) = WikiGraph::build(&corpus, Granularity::IntroOnly);
    let index = SparseIndex::over_paragraphs(&corpus, IndexConfig::default()).unwrap();
    (corpus, graph, index)
}

fn span_question(text: &str, answers: &[&str], gold: &[&str]) -> TrainingQuestion {
    TrainingQuestion {
        qid: "q".into(),
        question: text.into(),
        answers: answers.iter().map(|s| s.to_string()).collect(),
        gold_paras: gold.iter().map(|s| s.to_string()).collect(),
        answer_bearing: None,
        answer_type: AnswerType::Span,
    }
}

fn ids<'a>(c: &'a Corpus, path: &[ParaIdx]) -> Vec<&'a str> {
    path.iter().map(|&p| c.id(p)).collect()
}

#[test]
fn gold_path_ordering_cases() {
    let (c, g, _) = world(vec![
        para(
            "Bridge",
            0,
            "Lark Hill is a novel by Ivo Crane of Ostend.",
            &["Crane"],
        ),
        para("Crane", 0, "Ivo Crane lived in Ostend.", &[]),
        para("Solo", 0, "Ostend harbour.", &[]),
    ]);
    let single = span_question("where", &["Ostend"], &["Solo/0"]);
    assert_eq!(ids(&c, &derive_gold_path(&single, &c, &g).unwrap()), ["Solo/0"]);

    // only the second-listed paragraph holds the answer
    let mut q = span_question("where", &["Lark Hill"], &["Crane/0", "Bridge/0"]);
    assert_eq!(
        ids(&c, &derive_gold_path(&q, &c, &g).unwrap()),
        ["Crane/0", "Bridge/0"]
    );

    // both hold "Ostend": the paragraph linking to the other comes first, whatever the listing
    q.answers = vec!["Ostend".into()];
    assert_eq!(
        ids(&c, &derive_gold_path(&q, &c, &g).unwrap()),
        ["Bridge/0", "Crane/0"]
    );
    q.gold_paras.reverse();
    assert_eq!(
        ids(&c, &derive_gold_path(&q, &c, &g).unwrap()),
        ["Bridge/0", "Crane/0"]
    );

    q.answer_bearing = Some("Bridge/0".into());
    assert_eq!(
        ids(&c, &derive_gold_path(&q, &c, &g).unwrap()),
        ["Crane/0", "Bridge/0"]
    );
}

#[test]
fn negative_mining_cases() {
    let (c, g, idx) = world(vec![
        para(
            "Start",
            0,
            "Pell Tower was designed by Oma Reyes.",
            &["Reyes", "Sidebar", "Aside", "Wrong"],
        ),
        para("Reyes", 0, "Oma Reyes was born in Tamsk.", &[]),
        para("Sidebar", 0, "Pell Tower lobby hours.", &[]),
        para("Aside", 0, "A tower of glass.", &[]),
        para("Wrong", 0, "Another designer from Tamsk.", &[]),
        para("Far", 0, "Pell Tower tickets and designer tours.", &[]),
    ]);
    let start = c.require("Start/0").unwrap();
    let reyes = c.require("Reyes/0").unwrap();
    let q = span_question(
        "Where was the designer of Pell Tower born?",
        &["Tamsk"],
        &["Start/0", "Reyes/0"],
    );
    let gold = derive_gold_path(&q, &c, &g).unwrap();
    assert_eq!(gold, [start, reyes]);

    // Start has four out-neighbors: one is gold, one holds the answer, two remain
    let negs = mine_negatives(&q, &gold, &[], &idx, &c, &g, 2);
    let mut linked = vec![c.require("Sidebar/0").unwrap(), c.require("Aside/0").unwrap()];
    linked.sort();
    assert_eq!(negs[1].paragraphs, linked);
    let wide = mine_negatives(&q, &gold, &[], &idx, &c, &g, 50);
    assert_eq!(&wide[1].paragraphs[..2], linked.as_slice());
    assert_eq!(
        wide.iter().map(|n| n.eoe).collect::<Vec<_>>(),
        [true, true, false]
    );

    // step 1 is pure TF-IDF, best first
    let ranked: Vec<ParaIdx> = pathqa::tfidf::top_f(&idx, &q.question, 50)
        .into_iter()
        .map(|(p, _)| p)
        .filter(|p| !gold.contains(p))
        .collect();
    assert_eq!(wide[0].paragraphs, ranked);

    // a single-hop question ignores hyperlinks at every step
    let single = span_question(&q.question, &["Tamsk"], &["Reyes/0"]);
    let negs = mine_negatives(&single, &[reyes], &[], &idx, &c, &g, 50);
    let ranked_single: Vec<ParaIdx> = pathqa::tfidf::top_f(&idx, &q.question, 50)
        .into_iter()
        .map(|(p, _)| p)
        .filter(|&p| p != reyes)
        .collect();
    assert_eq!(negs.len(), 2);
    for n in &negs {
        assert_eq!(n.paragraphs, ranked_single);
    }
}

#[test]
fn distant_example_takes_first_occurrence() {
    let (c, _, idx) = world(vec![
        para("Gold", 0, "Mira Vance wrote Dune Song.", &[]),
        para(
            "Echo",
            0,
            "Dune Song fans met Mira Vance and later Mira Vance again.",
            &[],
        ),
    ]);
    let q = span_question("Who wrote Dune Song?", &["Mira Vance"], &["Gold/0"]);
    let ex = build_distant_examples(&q, &idx, &c, 10).unwrap().unwrap();
    assert_eq!(ids(&c, &ex.path), ["Echo/0"]);
    assert_eq!(ex.origin, Origin::Distant);
    // "dune song fans met mira vance": the first mention starts at word 4
    assert_eq!(ex.target, ReaderTarget::Span { start: 4, end: 5 });
}

#[test]
fn distorted_paths_replace_the_answer_paragraph() {
    let (c, g, idx) = world(vec![
        para("P1", 0, "Bell Rock lighthouse was built by Sam Ort.", &["P2"]),
        para("P2", 0, "Sam Ort came from Leith.", &[]),
        para("X", 0, "Bell Rock lighthouse keepers.", &[]),
    ]);
    let q = span_question(
        "Where did the builder of Bell Rock lighthouse come from?",
        &["Leith"],
        &["P1/0", "P2/0"],
    );
    let gold = derive_gold_path(&q, &c, &g).unwrap();
    let negs = build_reader_negatives(&q, &gold, &idx, &c, 10, 3);
    assert_eq!(negs.len(), 1);
    assert_eq!(ids(&c, &negs[0].path), ["P1/0", "X/0"]);
    assert_eq!(negs[0].label, PathLabel::Distorted);

    // every ranked non-gold paragraph holds the answer: nothing to distort with
    let (c, g, idx) = world(vec![
        para("P1", 0, "Bell Rock lighthouse was built by Sam Ort.", &["P2"]),
        para("P2", 0, "Sam Ort came from Leith.", &[]),
        para("X", 0, "Bell Rock lighthouse keepers from Leith.", &[]),
    ]);
    let gold = derive_gold_path(&q, &c, &g).unwrap();
    assert!(build_reader_negatives(&q, &gold, &idx, &c, 10, 3).is_empty());
}

/// A model whose every logit is exactly zero: the encoder outputs collapse to the zero shift.
fn zero_logit_model() -> RetrieverModel {
    let cfg = EncoderConfig {
        dim: 2,
        bucket_count: 16,
        mode: EncoderMode::QuestionDependent,
        ..EncoderConfig::default()
    };
    let mut m = RetrieverModel::init(cfg, 3).unwrap();
    m.encoder.projection.iter_mut().for_each(|x| *x = 0.0);
    m.encoder.bias.iter_mut().for_each(|x| *x = 0.0);
    m.encoder.shift.iter_mut().for_each(|x| *x = 0.0);
    m.encoder.eoe.iter_mut().for_each(|x| *x = 0.0);
    m.params.b = 0.0;
    m
}

#[test]
fn loss_with_even_odds() {
    let (c, _) = common::graph_fixture(3, &[(0, 1)], None);
    let m = zero_logit_model();
    let path = |eoe_neg: bool| TrainingPath {
        paragraphs: vec![ParaIdx(0)],
        negatives: vec![
            StepNegatives {
                paragraphs: vec![ParaIdx(2)],
                eoe: eoe_neg,
            },
            StepNegatives::default(),
        ],
    };
    // gold and one negative at 0.5 each, then [EOE] at 0.5
    let out = retriever_loss(&m, &c, "node", &[path(false)], true).unwrap();
    assert!((out.loss - 3.0 * LN_2).abs() < 1e-12, "{}", out.loss);
    let out = retriever_loss(&m, &c, "node", &[path(true)], true).unwrap();
    assert!((out.loss - 4.0 * LN_2).abs() < 1e-12, "{}", out.loss);
}

#[test]
fn retriever_fits_one_example() {
    let texts: Vec<String> = [
        "the violin maker of quartz harbor",
        "quartz harbor lies on the glacier river",
        "an orchard of walnut trees",
        "falcon saddle meadow",
        "copper lantern beacon",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let (c, _) = common::graph_fixture(5, &[(0, 1), (0, 2), (1, 3)], Some(&texts));
    let item = TrainItem {
        question: "which river runs by the violin maker's harbor".into(),
        paths: vec![TrainingPath {
            paragraphs: vec![ParaIdx(0), ParaIdx(1)],
            negatives: vec![
                StepNegatives {
                    paragraphs: vec![ParaIdx(3), ParaIdx(4)],
                    eoe: true,
                },
                StepNegatives {
                    paragraphs: vec![ParaIdx(2)],
                    eoe: true,
                },
                StepNegatives {
                    paragraphs: vec![ParaIdx(3)],
                    eoe: false,
                },
            ],
        }],
    };
    let enc = EncoderConfig {
        dim: 16,
        bucket_count: 1 << 10,
        ..EncoderConfig::default()
    };
    let mut m = RetrieverModel::init(enc, 7).unwrap();
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let report = train_retriever(&mut m, &c, std::slice::from_ref(&item), &cfg).unwrap();
    assert_eq!(report.steps, 500);
    assert!(report.final_loss < 0.05, "{report:?}");
    assert!(report.final_loss <= report.initial_loss);
    // the reported loss matches a fresh evaluation
    let again = retriever_loss(&m, &c, &item.question, &item.paths, true)
        .unwrap()
        .loss;
    assert!((again - report.final_loss).abs() < 1e-12);
}

fn reader_world() -> (Corpus, ReaderExample, ReaderExample) {
    let corpus = Corpus::from_paragraphs(vec![
        para(
            "Film",
            0,
            "Kestrel Night is a film directed by Ada Moss.",
            &["Ada", "Other"],
        ),
        para("Ada", 0, "Ada Moss was born in Varna.", &[]),
        para("Other", 0, "Nils Ek was born in Lisbon.", &[]),
    ])
    .unwrap();
    let question = "Where was the director of Kestrel Night born?".to_string();
    let film = corpus.require("Film/0").unwrap();
    let gold = ReaderExample {
        qid: "q".into(),
        question: question.clone(),
        path: vec![film, corpus.require("Ada/0").unwrap()],
        // nine words of Film/0, then "ada moss was born in varna"
        target: ReaderTarget::Span { start: 14, end: 14 },
        label: PathLabel::Gold,
        origin: Origin::Supervised,
    };
    let distorted = ReaderExample {
        path: vec![film, corpus.require("Other/0").unwrap()],
        target: ReaderTarget::Masked,
        label: PathLabel::Distorted,
        ..gold.clone()
    };
    (corpus, gold, distorted)
}

fn small_reader(seed: u64) -> ReaderParams {
    ReaderParams::init(
        ReaderConfig {
            dim: 16,
            bucket_count: 1 << 10,
            ..ReaderConfig::default()
        },
        seed,
    )
    .unwrap()
}

#[test]
fn reader_fits_one_example() {
    let (c, gold, _) = reader_world();
    let mut r = small_reader(5);
    let cfg = ReaderTrainConfig {
        epochs: 500,
        batch_size: 1,
        ..ReaderTrainConfig::default()
    };
    let report = train_reader(&mut r, &c, std::slice::from_ref(&gold), &cfg).unwrap();
    assert_eq!(report.steps, 500);
    assert!(report.final_loss < 0.05, "{report:?}");
    let texts: Vec<&str> = gold.path.iter().map(|&p| c.text(p)).collect();
    assert_eq!(r.read_path(&gold.question, &texts).answer, "Varna");
}

#[test]
fn reader_overrules_retriever_order() {
    let (c, gold, distorted) = reader_world();
    let mut r = small_reader(9);
    let cfg = ReaderTrainConfig {
        epochs: 300,
        batch_size: 2,
        ..ReaderTrainConfig::default()
    };
    train_reader(&mut r, &c, &[gold.clone(), distorted.clone()], &cfg).unwrap();
    // the retriever prefers the distorted path
    let paths = [
        ReasoningPath {
            paragraphs: distorted.path.clone(),
            terminated: true,
            log_score: -1.0,
        },
        ReasoningPath {
            paragraphs: gold.path.clone(),
            terminated: true,
            log_score: -2.0,
        },
    ];
    let pred = r.answer(&c, &gold.question, &paths);
    assert_eq!(pred.path_index, Some(1));
    assert_eq!(pred.answer, "Varna");
    assert!(pred.path_probs[1] > pred.path_probs[0]);
    let plain = r.answer_without_rerank(&c, &gold.question, &paths);
    assert_eq!(plain.path_index, Some(0));
    assert_ne!(plain.answer, "Varna");
}

/// Edges recomputed from the definition with ordered sets.
fn oracle_edges(c: &Corpus, granularity: Granularity) -> BTreeSet<(u32, u32)> {
    let mut e = BTreeSet::new();
    for a in c.paragraphs() {
        for b in c.paragraphs() {
            if a.article_title == b.article_title && a.para_id != b.para_id {
                e.insert((c.require(&a.para_id).unwrap().0, c.require(&b.para_id).unwrap().0));
            }
        }
    }
    for p in c.paragraphs() {
        let src = c.require(&p.para_id).unwrap().0;
        for link in &p.out_links {
            if *link == p.article_title {
                continue;
            }
            let targets: Vec<&Paragraph> = c
                .paragraphs()
                .iter()
                .filter(|q| q.article_title == *link)
                .collect();
            let chosen: Vec<&Paragraph> = match granularity {
                Granularity::AllParagraphs => targets.clone(),
                Granularity::IntroOnly => {
                    let intros: Vec<&Paragraph> =
                        targets.iter().copied().filter(|q| q.is_introductory).collect();
                    if intros.is_empty() {
                        targets
                            .iter()
                            .copied()
                            .min_by_key(|q| q.para_index)
                            .into_iter()
                            .collect()
                    } else {
                        intros
                    }
                }
            };
            for t in chosen {
                e.insert((src, c.require(&t.para_id).unwrap().0));
            }
        }
    }
    e
}

fn random_corpus() -> impl Strategy<Value = Vec<Paragraph>> {
    let article = (
        1usize..4,
        proptest::collection::vec((0usize..8, any::<bool>()), 0..4),
    );
    proptest::collection::vec(article, 1..7).prop_map(|arts| {
        let n = arts.len();
        let mut out = Vec::new();
        for (a, (k, links)) in arts.iter().enumerate() {
            for i in 0..*k {
                // link targets beyond the article count are dangling
                let out_links: Vec<String> = links
                    .iter()
                    .filter(|(_, on_this)| *on_this || i == 0)
                    .map(|(t, _)| format!("A{}", t % (n + 2)))
                    .collect();
                out.push(Paragraph {
                    para_id: Paragraph::make_id(&format!("A{a}"), i as u32),
                    article_title: format!("A{a}"),
                    para_index: i as u32,
                    text: format!("article {a} part {i}"),
                    out_links,
                    is_introductory: i == 0,
                });
            }
        }
        out
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn graph_matches_set_oracle(paras in random_corpus(), intro in any::<bool>()) {
        let c = Corpus::from_paragraphs(paras).unwrap();
        let gran = if intro { Granularity::IntroOnly } else { Granularity::AllParagraphs };
        let (g, report) = WikiGraph::build(&c, gran);
        let expected = oracle_edges(&c, gran);
        let actual: BTreeSet<(u32, u32)> = c
            .indices()
            .flat_map(|p| g.out(p).iter().map(move |q| (p.0, q.0)))
            .collect();
        prop_assert_eq!(&actual, &expected);
        for &(u, v) in &actual {
            if c.get(ParaIdx(u)).article_title == c.get(ParaIdx(v)).article_title {
                prop_assert!(g.has_edge(ParaIdx(v), ParaIdx(u)));
            }
        }
        prop_assert_eq!(g.edge_count(), expected.len());
        prop_assert_eq!(report.total_edges, report.hyperlink_edges + 2 * report.within_doc_pairs);
        let mut a = Vec::new();
        g.write_to(&mut a).unwrap();
        let mut b = Vec::new();
        WikiGraph::build(&c, gran).0.write_to(&mut b).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(WikiGraph::read_from(a.as_slice()).unwrap(), g);
    }
}
