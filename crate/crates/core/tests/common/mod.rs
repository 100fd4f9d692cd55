//! Fixtures and independent oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::{Hash, Hasher};

use pathqa::encoder::{EncoderConfig, EncoderMode};
use pathqa::reader::{ReaderConfig, ReaderParams};
use pathqa::retriever::PathScorer;
use pathqa::retriever::{Candidate, StepNegatives};
use pathqa::supervision::{PathLabel, ReaderTarget};
use pathqa::{Corpus, Granularity, ParaIdx, Paragraph, RetrieverModel, TrainingPath, WikiGraph};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One intro paragraph per node, titled `N0`, `N1`, ...; `edges` are hyperlinks.
pub fn graph_fixture(n: usize, edges: &[(usize, usize)], texts: Option<&[String]>) -> (Corpus, WikiGraph) {
    let names: Vec<String> = (0..n).map(|i| format!("N{i}")).collect();
    let paras = names
        .iter()
        .enumerate()
        .map(|(i, t)| Paragraph {
            para_id: Paragraph::make_id(t, 0),
            article_title: t.clone(),
            para_index: 0,
            text: texts.map_or_else(|| format!("node {i}"), |ts| ts[i].clone()),
            out_links: edges
                .iter()
                .filter(|e| e.0 == i)
                .map(|e| names[e.1].clone())
                .collect(),
            is_introductory: true,
        })
        .collect();
    let corpus = Corpus::from_paragraphs(paras).expect("valid fixture corpus");
    let (graph, _) = WikiGraph::build(&corpus, Granularity::AllParagraphs);
    (corpus, graph)
}

const WORDS: &[&str] = &[
    "river", "castle", "engine", "violin", "harbor", "meadow", "lantern", "copper", "falcon", "glacier",
    "orchard", "quartz", "saddle", "tundra", "velvet", "walnut", "zephyr", "beacon",
];

pub fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len)
        .map(|_| *WORDS.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

// ---------------------------------------------------------------------------------------------
// Finite differences

pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero components from dividing by
/// round-off.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` with respect to `*slot(x)`.
pub fn central_diff<M: Clone>(x: &M, slot: impl Fn(&mut M) -> &mut f64, f: impl Fn(&M) -> f64) -> f64 {
    let mut plus = x.clone();
    *slot(&mut plus) += FD_STEP;
    let mut minus = x.clone();
    *slot(&mut minus) -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheck {
    pub fn record(&mut self, name: String, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel || self.worst.is_empty() {
            self.max_rel = self.max_rel.max(e);
            self.worst = format!("{name}: analytic {analytic:e} numeric {numeric:e}");
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        if other.max_rel >= self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

fn perturb(rng: &mut ChaCha8Rng, v: &mut [f64], center: f64, spread: f64) {
    for x in v {
        *x = center + rng.random_range(-spread..spread);
    }
}

// ---------------------------------------------------------------------------------------------
// Retriever gradient fixture

pub struct RetrieverFixture {
    pub corpus: Corpus,
    pub model: RetrieverModel,
    pub question: String,
    pub paths: Vec<TrainingPath>,
    pub recurrent: bool,
}

/// A small corpus, a randomized `d = 4` model and one or two supervised paths with negatives.
pub fn retriever_fixture(seed: u64) -> RetrieverFixture {
    let mut r = rng(seed);
    let n = 7;
    let texts: Vec<String> = (0..n)
        .map(|_| {
            let len = r.random_range(3..8);
            random_text(&mut r, len)
        })
        .collect();
    let (corpus, _) = graph_fixture(n, &[], Some(&texts));
    let mode = if seed.is_multiple_of(2) {
        EncoderMode::QuestionDependent
    } else {
        EncoderMode::QuestionIndependent
    };
    let enc = EncoderConfig {
        dim: 4,
        bucket_count: 32,
        mode,
        ..EncoderConfig::default()
    };
    let mut model = RetrieverModel::init(enc, seed).expect("valid config");
    perturb(&mut r, &mut model.encoder.bias, 0.0, 0.5);
    perturb(&mut r, &mut model.encoder.gain, 1.0, 0.5);
    perturb(&mut r, &mut model.encoder.shift, 0.0, 0.5);
    perturb(&mut r, &mut model.params.b_r, 0.0, 0.5);
    model.params.alpha = r.random_range(0.5..2.0);
    model.params.b = r.random_range(-0.5..0.5);
    for x in &mut model.encoder.embedding {
        *x *= 10.0;
    }

    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut r);
    let len = r.random_range(1..=3usize);
    let make_path = |r: &mut ChaCha8Rng, gold: &[usize]| {
        let mut negatives = Vec::new();
        for t in 0..=gold.len() {
            let chosen = gold.get(t);
            let paragraphs: Vec<ParaIdx> = (0..n)
                .filter(|i| Some(i) != chosen && r.random_bool(0.5))
                .map(|i| ParaIdx(i as u32))
                .collect();
            negatives.push(StepNegatives {
                paragraphs,
                eoe: t < gold.len() && t > 0,
            });
        }
        TrainingPath {
            paragraphs: gold.iter().map(|&i| ParaIdx(i as u32)).collect(),
            negatives,
        }
    };
    let mut paths = vec![make_path(&mut r, &ids[..len])];
    if seed.is_multiple_of(3) {
        paths.push(make_path(&mut r, &ids[len..len + 2]));
    }
    RetrieverFixture {
        question: random_text(&mut r, 4),
        corpus,
        model,
        paths,
        recurrent: seed % 5 != 4,
    }
}

/// Checks every parameter the loss touches (all dense parameters and every embedding row the
/// fixture uses, plus one row it does not).
pub fn check_retriever_gradients(fx: &RetrieverFixture) -> GradCheck {
    let loss = |m: &RetrieverModel| {
        pathqa::retriever::retriever_loss(m, &fx.corpus, &fx.question, &fx.paths, fx.recurrent)
            .expect("loss")
            .loss
    };
    let out = pathqa::retriever::retriever_loss(&fx.model, &fx.corpus, &fx.question, &fx.paths, fx.recurrent)
        .expect("loss");
    let g = &out.grads;
    let mut check = GradCheck::default();
    let d = fx.model.params.dim;

    macro_rules! dense {
        ($name:literal, $grad:expr, $($field:ident).+) => {
            for i in 0..$grad.len() {
                let num = central_diff(&fx.model, |m| &mut m.$($field).+[i], &loss);
                check.record(format!("{}[{i}]", $name), $grad[i], num);
            }
        };
    }
    dense!("w_r", g.retriever.w_r, params.w_r);
    dense!("b_r", g.retriever.b_r, params.b_r);
    dense!("s", g.retriever.s, params.s);
    dense!("projection", g.encoder.projection, encoder.projection);
    dense!("bias", g.encoder.bias, encoder.bias);
    dense!("gain", g.encoder.gain, encoder.gain);
    dense!("shift", g.encoder.shift, encoder.shift);
    dense!("eoe", g.encoder.eoe, encoder.eoe);
    check.record(
        "alpha".into(),
        g.retriever.alpha,
        central_diff(&fx.model, |m| &mut m.params.alpha, loss),
    );
    check.record(
        "b".into(),
        g.retriever.b,
        central_diff(&fx.model, |m| &mut m.params.b, loss),
    );

    let mut rows: Vec<u32> = g.encoder.embedding.rows.keys().copied().collect();
    let unused = (0..34u32).find(|r| !g.encoder.embedding.rows.contains_key(r));
    rows.extend(unused);
    for row in rows {
        for j in 0..d {
            let idx = row as usize * d + j;
            let analytic = g.encoder.embedding.get(row).map_or(0.0, |v| v[j]);
            let num = central_diff(&fx.model, |m| &mut m.encoder.embedding[idx], loss);
            check.record(format!("embedding[{row}][{j}]"), analytic, num);
        }
    }
    check
}

// ---------------------------------------------------------------------------------------------
// Reader gradient fixture

pub struct ReaderFixture {
    pub reader: ReaderParams,
    pub input: pathqa::reader::ReaderInput,
    pub target: ReaderTarget,
    pub label: PathLabel,
}

pub fn reader_fixture(seed: u64) -> ReaderFixture {
    let mut r = rng(seed ^ 0x5eed);
    let config = ReaderConfig {
        dim: 4,
        bucket_count: 64,
        yes_no: seed.is_multiple_of(2),
        link_feature: true,
        context_features: !seed.is_multiple_of(3),
        ..ReaderConfig::default()
    };
    let mut reader = ReaderParams::init(config, seed).expect("valid config");
    for v in [
        &mut reader.embedding,
        &mut reader.q_proj,
        &mut reader.v_start,
        &mut reader.v_end,
    ] {
        for x in v.iter_mut() {
            *x = r.random_range(-1.0..1.0);
        }
    }
    perturb(&mut r, &mut reader.q_bias, 0.0, 0.5);
    perturb(&mut r, &mut reader.gain, 1.0, 0.5);
    perturb(&mut r, &mut reader.shift, 0.0, 0.5);
    perturb(&mut r, &mut reader.pool_gain, 1.0, 0.5);
    perturb(&mut r, &mut reader.pool_shift, 0.0, 0.5);
    perturb(&mut r, &mut reader.w_path, 0.0, 1.0);
    perturb(&mut r, &mut reader.class_head, 0.0, 1.0);

    let question = random_text(&mut r, 4);
    let paras: Vec<String> = (0..r.random_range(1..=2))
        .map(|_| random_text(&mut r, 5))
        .collect();
    let refs: Vec<&str> = paras.iter().map(String::as_str).collect();
    let input = reader.build_input(&question, &refs);
    let n = input.para_tokens.len();
    let (target, label) = match seed % 4 {
        0 => (ReaderTarget::Yes, PathLabel::Gold),
        1 => (ReaderTarget::Masked, PathLabel::Distorted),
        2 if seed % 8 == 2 => (ReaderTarget::No, PathLabel::Gold),
        _ => {
            let start = r.random_range(0..n);
            let end = (start + r.random_range(0..3)).min(n - 1);
            (ReaderTarget::Span { start, end }, PathLabel::Gold)
        }
    };
    let target = match target {
        ReaderTarget::Yes | ReaderTarget::No if !reader.config.yes_no => {
            ReaderTarget::Span { start: 0, end: 0 }
        }
        t => t,
    };
    ReaderFixture {
        reader,
        input,
        target,
        label,
    }
}

pub fn check_reader_gradients(fx: &ReaderFixture) -> GradCheck {
    let loss = |p: &ReaderParams| p.loss(&fx.input, fx.target, fx.label).expect("loss").0;
    let (_, g) = fx.reader.loss(&fx.input, fx.target, fx.label).expect("loss");
    let d = fx.reader.dim();
    let mut check = GradCheck::default();
    macro_rules! dense {
        ($name:literal, $field:ident) => {
            for i in 0..g.$field.len() {
                let num = central_diff(&fx.reader, |p| &mut p.$field[i], &loss);
                check.record(format!("{}[{i}]", $name), g.$field[i], num);
            }
        };
    }
    dense!("q_proj", q_proj);
    dense!("q_bias", q_bias);
    dense!("gain", gain);
    dense!("shift", shift);
    dense!("pool_gain", pool_gain);
    dense!("pool_shift", pool_shift);
    dense!("v_start", v_start);
    dense!("v_end", v_end);
    dense!("w_path", w_path);
    dense!("class_head", class_head);
    let mut rows: Vec<u32> = g.embedding.rows.keys().copied().collect();
    rows.extend((0..64u32).find(|r| !g.embedding.rows.contains_key(r)));
    for row in rows {
        for j in 0..d {
            let idx = row as usize * d + j;
            let analytic = g.embedding.get(row).map_or(0.0, |v| v[j]);
            let num = central_diff(&fx.reader, |p| &mut p.embedding[idx], loss);
            check.record(format!("embedding[{row}][{j}]"), analytic, num);
        }
    }
    check
}

// ---------------------------------------------------------------------------------------------
// Beam search oracle

/// Scores that depend only on the path so far and the candidate, quantized so ties occur.
/// The state is the path itself, encoded as indices.
pub struct HashScorer {
    pub salt: u64,
}

impl HashScorer {
    fn value(&self, path: &[f64], candidate: Candidate) -> f64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.salt.hash(&mut h);
        for x in path {
            (*x as u64).hash(&mut h);
        }
        candidate.hash(&mut h);
        // logits in {-2, -1.5, ..., 2}
        (h.finish() % 9) as f64 * 0.5 - 2.0
    }
}

impl PathScorer for HashScorer {
    fn initial_state(&mut self) -> pathqa::Result<Vec<f64>> {
        Ok(Vec::new())
    }

    fn logit(&mut self, h: &[f64], candidate: Candidate) -> f64 {
        self.value(h, candidate)
    }

    fn advance(&mut self, h: &[f64], selected: ParaIdx) -> pathqa::Result<Vec<f64>> {
        let mut next = h.to_vec();
        next.push(selected.0 as f64);
        Ok(next)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Every terminated path reachable under the candidate-expansion rules, with its score, sorted
/// best first (ties by path). Written directly from the search rules, without the beam.
#[allow(clippy::too_many_arguments)]
pub fn enumerate_paths(
    scorer: &HashScorer,
    graph: &WikiGraph,
    c1: &[ParaIdx],
    k: usize,
    max_len: usize,
    eoe_in_score: bool,
    log_sigmoid: impl Fn(f64) -> f64 + Copy,
) -> Vec<(Vec<ParaIdx>, f64)> {
    fn go(
        scorer: &HashScorer,
        graph: &WikiGraph,
        path: &mut Vec<ParaIdx>,
        cands: &[ParaIdx],
        score: f64,
        ctx: (usize, usize, bool),
        log_sigmoid: &dyn Fn(f64) -> f64,
        out: &mut Vec<(Vec<ParaIdx>, f64)>,
    ) {
        let (k, max_len, eoe_in_score) = ctx;
        let state: Vec<f64> = path.iter().map(|p| p.0 as f64).collect();
        if !path.is_empty() {
            let z = scorer.value(&state, Candidate::Eoe);
            let f = if eoe_in_score { log_sigmoid(z) } else { 0.0 };
            out.push((path.clone(), score + f));
        }
        if path.len() == max_len {
            return;
        }
        let probs: Vec<(ParaIdx, f64)> = cands
            .iter()
            .map(|&p| (p, sigmoid(scorer.value(&state, Candidate::Paragraph(p)))))
            .collect();
        for &p in cands {
            let z = scorer.value(&state, Candidate::Paragraph(p));
            let on_path: HashSet<ParaIdx> = path.iter().copied().chain([p]).collect();
            let mut next: Vec<ParaIdx> = Vec::new();
            for &n in graph.out(p) {
                if !on_path.contains(&n) && !next.contains(&n) {
                    next.push(n);
                }
            }
            let mut carry: Vec<(ParaIdx, f64)> = probs.iter().copied().filter(|(q, _)| *q != p).collect();
            carry.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (q, _) in carry.into_iter().take(k) {
                if !on_path.contains(&q) && !next.contains(&q) {
                    next.push(q);
                }
            }
            path.push(p);
            go(
                scorer,
                graph,
                path,
                &next,
                score + log_sigmoid(z),
                ctx,
                log_sigmoid,
                out,
            );
            path.pop();
        }
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let c1: Vec<ParaIdx> = c1.iter().copied().filter(|p| seen.insert(*p)).collect();
    go(
        scorer,
        graph,
        &mut Vec::new(),
        &c1,
        0.0,
        (k, max_len, eoe_in_score),
        &log_sigmoid,
        &mut out,
    );
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

pub struct BeamTrial {
    pub graph: WikiGraph,
    pub c1: Vec<ParaIdx>,
    pub k: usize,
    pub max_len: usize,
    pub eoe_in_score: bool,
    pub salt: u64,
}

pub fn beam_trial(seed: u64) -> BeamTrial {
    let mut r = rng(seed);
    let n = r.random_range(2..=8);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a != b && r.random_bool(0.3) {
                edges.push((a, b));
            }
        }
    }
    let (_, graph) = graph_fixture(n, &edges, None);
    let mut all: Vec<ParaIdx> = (0..n).map(|i| ParaIdx(i as u32)).collect();
    all.shuffle(&mut r);
    let c1 = all[..r.random_range(1..=n)].to_vec();
    BeamTrial {
        graph,
        c1,
        k: r.random_range(0..=2),
        max_len: r.random_range(1..=3),
        eoe_in_score: r.random_bool(0.8),
        salt: r.random(),
    }
}

/// Runs one beam/oracle comparison; `Err` describes the first mismatch.
pub fn run_beam_trial(seed: u64) -> Result<usize, String> {
    use pathqa::retriever::search;
    use pathqa::{RetrievalConfig, RetrievalMode};
    let t = beam_trial(seed);
    let scorer = HashScorer { salt: t.salt };
    let expected = enumerate_paths(
        &scorer,
        &t.graph,
        &t.c1,
        t.k,
        t.max_len,
        t.eoe_in_score,
        pathqa::nn::log_sigmoid,
    );
    let config = RetrievalConfig {
        beam: expected.len().max(1),
        k: t.k,
        max_len: t.max_len,
        mode: RetrievalMode::Adaptive,
        eoe_in_score: t.eoe_in_score,
        ..RetrievalConfig::default()
    };
    let mut s = HashScorer { salt: t.salt };
    let got = search(&mut s, &t.graph, &t.c1, &config, None).map_err(|e| e.to_string())?;
    let got: Vec<(Vec<ParaIdx>, f64)> = got
        .paths
        .into_iter()
        .map(|p| (p.paragraphs, p.log_score))
        .collect();
    if got != expected {
        return Err(format!("seed {seed}: beam {got:?} != oracle {expected:?}"));
    }
    Ok(expected.len())
}

// ---------------------------------------------------------------------------------------------
// TF-IDF brute force

const STOP: fn(&str) -> bool = pathqa::text::is_stopword;

fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 2_166_136_261;
    for &b in bytes {
        h ^= u32::from(b);
        h = h.wrapping_mul(16_777_619);
    }
    h
}

/// Hashed unigram+bigram counts straight from raw text.
pub fn brute_counts(text: &str, buckets: u32) -> BTreeMap<u32, u32> {
    let tokens: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !STOP(w))
        .collect();
    let mut feats: Vec<String> = tokens.clone();
    feats.extend(tokens.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    let mut counts = BTreeMap::new();
    for f in feats {
        *counts.entry(fnv1a(f.as_bytes()) & (buckets - 1)).or_insert(0) += 1;
    }
    counts
}

/// `score(q, d)` for every document, recomputed from the raw texts.
pub fn brute_scores(docs: &[String], query: &str, buckets: u32) -> Vec<f64> {
    let counts: Vec<BTreeMap<u32, u32>> = docs.iter().map(|d| brute_counts(d, buckets)).collect();
    let n = docs.len() as f64;
    let mut df: HashMap<u32, u32> = HashMap::new();
    for c in &counts {
        for &f in c.keys() {
            *df.entry(f).or_insert(0) += 1;
        }
    }
    let idf = |f: u32| {
        let nf = f64::from(df.get(&f).copied().unwrap_or(0));
        if nf == 0.0 {
            0.0
        } else {
            ((n - nf + 0.5) / (nf + 0.5)).ln().max(0.0)
        }
    };
    let q = brute_counts(query, buckets);
    counts
        .iter()
        .map(|c| {
            let mut s = 0.0;
            for (&f, &tf) in &q {
                let qw = (1.0 + f64::from(tf)).ln() * idf(f);
                if let Some(&dtf) = c.get(&f) {
                    let dw = (1.0 + f64::from(dtf)).ln() * idf(f);
                    if qw > 0.0 && dw > 0.0 {
                        s += qw * dw;
                    }
                }
            }
            s
        })
        .collect()
}

// ---------------------------------------------------------------------------------------------
// Whole-pipeline artifacts

/// A small end-to-end configuration that exercises every strategy and the reader.
pub fn small_experiment(seed: u64) -> pathqa::harness::ExperimentConfig {
    use pathqa::harness::{ExperimentConfig, SyntheticConfig};
    let mut cfg = ExperimentConfig {
        synthetic: SyntheticConfig {
            num_articles: 120,
            vocabulary_size: 500,
            num_questions: 120,
            seed,
            ..SyntheticConfig::default()
        },
        train_questions: 80,
        encoder: EncoderConfig {
            dim: 16,
            bucket_count: 1 << 12,
            ..EncoderConfig::default()
        },
        reader: ReaderConfig {
            dim: 16,
            bucket_count: 1 << 12,
            ..ReaderConfig::default()
        },
        seed,
        ..ExperimentConfig::default()
    };
    cfg.retriever_train.epochs = 2;
    cfg.retriever_train.seed = seed;
    cfg.reader_train.epochs = 2;
    cfg.reader_train.seed = seed;
    cfg
}

/// Serialized output of every pipeline stage, produced on a pool of `threads` workers.
pub fn pipeline_artifacts(seed: u64, threads: usize) -> BTreeMap<&'static str, Vec<u8>> {
    use pathqa::harness::{run_experiment, ExperimentData};
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    pool.install(|| {
        let cfg = small_experiment(seed);
        let data = ExperimentData::synthetic(&cfg).expect("synthetic data");
        let dir = tempfile::tempdir().expect("tempdir");
        let corpus_path = dir.path().join("corpus.jsonl");
        data.corpus.write_jsonl(&corpus_path).expect("write corpus");
        let questions_path = dir.path().join("questions.jsonl");
        pathqa::supervision::write_questions(&questions_path, &data.eval).expect("write questions");

        let mut out = BTreeMap::new();
        out.insert("corpus", std::fs::read(&corpus_path).expect("read corpus"));
        out.insert(
            "questions",
            std::fs::read(&questions_path).expect("read questions"),
        );
        let mut graph = Vec::new();
        data.graph.write_to(&mut graph).expect("graph bytes");
        out.insert("graph", graph);
        let index = pathqa::SparseIndex::over_paragraphs(&data.corpus, cfg.index).expect("index");
        let mut index_bytes = Vec::new();
        index.write_to(&mut index_bytes).expect("index bytes");
        out.insert("index", index_bytes);

        let outcome = run_experiment(&cfg, &data, None).expect("experiment");
        let models = &outcome.models;
        out.insert("retriever", models.retriever.to_checkpoint().to_bytes());
        out.insert(
            "rerank",
            models
                .rerank
                .as_ref()
                .expect("rerank model")
                .to_checkpoint()
                .to_bytes(),
        );
        out.insert(
            "reader",
            models.reader.as_ref().expect("reader").to_checkpoint().to_bytes(),
        );
        out.insert(
            "report",
            serde_json::to_vec(&outcome.report).expect("report json"),
        );
        out.insert("table", outcome.report.to_table().into_bytes());
        out
    })
}

// ---------------------------------------------------------------------------------------------
// Ten-question metric fixture with hand-computed outcomes

use pathqa::harness::{AnswerRecord, RetrievalPrediction};
use pathqa::supervision::{AnswerType, TrainingQuestion};

pub const TEXTS: [&str; 10] = [
    "Paris is the capital of France.",
    "Alice was born in Paris in October 1922.",
    "Bob founded Acme.",
    "Acme is based in Berlin.",
    "The Nile is a long river.",
    "Carol wrote Dune Road.",
    "Dune Road was released in 1965.",
    "Mount Tor is 2000 metres high.",
    "Dave lives near Mount Tor.",
    "The Russian Civil War began in 1917.",
];

pub struct Case {
    pub gold: &'static [usize],
    pub answers: &'static [&'static str],
    pub kind: AnswerType,
    pub retrieved: &'static [usize],
    pub predicted: &'static str,
    // hand-computed
    pub ar: Option<bool>,
    pub pr: bool,
    pub p_em: bool,
    pub em: f64,
    pub f1: f64,
}

const TWO_THIRDS: f64 = 2.0 / 3.0;

#[rustfmt::skip]
pub const CASES: [Case; 10] = [
    Case { gold: &[1, 0], answers: &["France"], kind: AnswerType::Span, retrieved: &[1, 0], predicted: "France", ar: Some(true), pr: true, p_em: true, em: 1.0, f1: 1.0 },
    Case { gold: &[2, 3], answers: &["Berlin"], kind: AnswerType::Span, retrieved: &[2], predicted: "Acme", ar: Some(false), pr: true, p_em: false, em: 0.0, f1: 0.0 },
    Case { gold: &[4], answers: &["Nile"], kind: AnswerType::Span, retrieved: &[4, 7], predicted: "The Nile", ar: Some(true), pr: true, p_em: true, em: 1.0, f1: 1.0 },
    Case { gold: &[5, 6], answers: &["1965"], kind: AnswerType::Span, retrieved: &[], predicted: "", ar: Some(false), pr: false, p_em: false, em: 0.0, f1: 0.0 },
    Case { gold: &[1], answers: &["1922"], kind: AnswerType::Span, retrieved: &[1], predicted: "October 1922", ar: Some(true), pr: true, p_em: true, em: 0.0, f1: TWO_THIRDS },
    Case { gold: &[8, 7], answers: &["2000 metres"], kind: AnswerType::Span, retrieved: &[7], predicted: "2000", ar: Some(true), pr: true, p_em: false, em: 0.0, f1: TWO_THIRDS },
    Case { gold: &[5, 2], answers: &[], kind: AnswerType::Yes, retrieved: &[5, 2], predicted: "yes", ar: None, pr: true, p_em: true, em: 1.0, f1: 1.0 },
    Case { gold: &[6, 9], answers: &[], kind: AnswerType::No, retrieved: &[9], predicted: "yes", ar: None, pr: true, p_em: false, em: 0.0, f1: 0.0 },
    Case { gold: &[9], answers: &["Russian Civil War"], kind: AnswerType::Span, retrieved: &[0], predicted: "The Russian Civil War", ar: Some(false), pr: false, p_em: false, em: 1.0, f1: 1.0 },
    Case { gold: &[3, 2], answers: &["Bob"], kind: AnswerType::Span, retrieved: &[3, 2, 4], predicted: "bob.", ar: Some(true), pr: true, p_em: true, em: 1.0, f1: 1.0 },
];

pub fn fixture() -> (
    Corpus,
    Vec<TrainingQuestion>,
    Vec<RetrievalPrediction>,
    Vec<AnswerRecord>,
) {
    let texts: Vec<String> = TEXTS.iter().map(|s| s.to_string()).collect();
    let (corpus, _) = graph_fixture(10, &[], Some(&texts));
    let id = |i: usize| corpus.id(ParaIdx(i as u32)).to_string();
    let mut questions = Vec::new();
    let mut retrieval = Vec::new();
    let mut answers = Vec::new();
    for (i, c) in CASES.iter().enumerate() {
        let qid = format!("q{i}");
        questions.push(TrainingQuestion {
            qid: qid.clone(),
            question: format!("question {i}"),
            answers: c.answers.iter().map(|s| s.to_string()).collect(),
            gold_paras: c.gold.iter().map(|&g| id(g)).collect(),
            answer_bearing: None,
            answer_type: c.kind,
        });
        retrieval.push(RetrievalPrediction {
            qid: qid.clone(),
            paragraphs: c.retrieved.iter().map(|&p| ParaIdx(p as u32)).collect(),
        });
        answers.push(AnswerRecord {
            qid,
            answer: c.predicted.into(),
        });
    }
    // predictions arrive in a different order than the gold file
    retrieval.reverse();
    answers.rotate_left(3);
    (corpus, questions, retrieval, answers)
}

// ---------------------------------------------------------------------------------------------
// TF-IDF fixtures

use pathqa::tfidf::IndexConfig;
use pathqa::SparseIndex;

const TFIDF_VOCAB: &[&str] = &[
    "river",
    "castle",
    "engine",
    "violin",
    "harbor",
    "meadow",
    "lantern",
    "copper",
    "the",
    "of",
    "Falcon",
    "glacier's",
    "orchard",
    "quartz",
    "and",
    "naïve",
    "café",
    "x-ray",
    "42",
    "in",
];

pub fn random_docs(seed: u64) -> (Vec<String>, Vec<String>) {
    let mut r = rng(seed);
    let n = r.random_range(1..=100);
    let docs = (0..n)
        .map(|_| {
            let len = r.random_range(0..12);
            (0..len)
                .map(|_| *TFIDF_VOCAB.choose(&mut r).unwrap())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let queries = (0..10)
        .map(|_| {
            let len = r.random_range(1..5);
            (0..len)
                .map(|_| *TFIDF_VOCAB.choose(&mut r).unwrap())
                .collect::<Vec<_>>()
                .join(", ")
        })
        .collect();
    (docs, queries)
}

pub fn tfidf_index(docs: &[String], buckets: u32) -> SparseIndex {
    let ids: Vec<String> = (0..docs.len()).map(|i| format!("d{i:03}")).collect();
    SparseIndex::build(
        ids.iter()
            .map(String::as_str)
            .zip(docs.iter().map(String::as_str)),
        IndexConfig {
            bucket_count: buckets,
            ngrams: 2,
        },
    )
    .unwrap()
}

/// Checks every score and the top-F ranking of one fixture; returns the number of comparisons.
pub fn check_tfidf_fixture(docs: &[String], queries: &[String], buckets: u32) -> usize {
    let idx = tfidf_index(docs, buckets);
    let mut n = 0;
    for q in queries {
        let expected = brute_scores(docs, q, buckets);
        let got = idx.score_all(q);
        for (d, &e) in expected.iter().enumerate() {
            let g = got.get(&(d as u32)).copied().unwrap_or(0.0);
            assert_eq!(g.to_bits(), e.to_bits(), "query {q:?} doc {d}: {g} vs {e}");
            n += 1;
        }
        let mut ranked: Vec<(usize, f64)> = expected
            .iter()
            .copied()
            .enumerate()
            .filter(|x| x.1 > 0.0)
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(5);
        let top: Vec<(usize, f64)> = idx
            .top_f(q, 5)
            .iter()
            .map(|h| (h.doc as usize, h.score))
            .collect();
        assert_eq!(top, ranked);
    }
    n
}

// ---------------------------------------------------------------------------------------------
// Recurrent state norm

/// Runs `steps` recurrent updates with random inputs; returns the worst `| |h| - alpha |`.
pub fn norm_drift(seed: u64, dim: usize, steps: usize) -> f64 {
    let mut r = rng(seed);
    let mut p = pathqa::retriever::RetrieverParams::init(dim, seed).unwrap();
    p.alpha = r.random_range(0.1..10.0);
    for x in &mut p.b_r {
        *x = r.random_range(-1.0..1.0);
    }
    let mut h = p.init_state(None).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..steps {
        let w: Vec<f64> = (0..dim).map(|_| r.random_range(-3.0..3.0)).collect();
        h = p.advance(&h, &w).unwrap();
        let n = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max((n - p.alpha).abs());
    }
    worst
}
