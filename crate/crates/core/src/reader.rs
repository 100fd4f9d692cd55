//! Path reader: scores how likely a reasoning path is to answer the question, classifies the
//! answer type (span / yes / no) and extracts a span from the paragraph words of the path.
//!
//! Input is `question ⊕ [SEP] ⊕ p_1 ⊕ [SEP] ⊕ … ⊕ p_n ⊕ [SEP]` over lowercased words. Each token
//! sums hashed embeddings of its word, previous word and next word, plus reserved rows marking
//! question tokens, paragraph words that occur in the question (`[MATCH]`) and paragraph words
//! that occur in an earlier paragraph of the path (`[LINK]`). With `context_features`, tokens also
//! carry their left bigram, linked tokens the context of their earlier mention, and every token
//! pairs its context with each question word that no paragraph of the path contains. Token
//! representations are `standardize(tanh(emb + Q·q̄ + b_q))` with `q̄` the mean question-token
//! embedding; `u_E` is the standardized mean of the token representations.

use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{take, take_scalar, Checkpoint, NamedTensor};
use crate::corpus::{Corpus, ParaIdx};
use crate::error::{Error, Result};
use crate::nn::{
    self, add_into, add_outer, matvec, matvec_t_acc, scheduled_lr, standardize, standardize_backward, AdamW,
    GradView, OptimConfig, SparseRows, StdCache, PROB_CLIP,
};
use crate::retriever::{ReasoningPath, TrainReport};
use crate::supervision::{AnswerType, PathLabel, ReaderExample, ReaderTarget};
use crate::text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReaderConfig {
    pub dim: usize,
    pub bucket_count: u32,
    /// Longest extractable span, in words.
    pub max_span_len: usize,
    /// Enables the span / yes / no head.
    pub yes_no: bool,
    pub link_feature: bool,
    /// Adds left-bigram context to every token, the context of the earlier mention to linked
    /// tokens, and the neighbors of question-matched tokens.
    pub context_features: bool,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        ReaderConfig {
            dim: 64,
            bucket_count: 1 << 16,
            max_span_len: 30,
            yes_no: false,
            link_feature: true,
            context_features: true,
        }
    }
}

impl ReaderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("reader dimension must be at least 2".into()));
        }
        if !self.bucket_count.is_power_of_two() {
            return Err(Error::Config("reader bucket count must be a power of two".into()));
        }
        if self.max_span_len == 0 {
            return Err(Error::Config("max_span_len must be at least 1".into()));
        }
        Ok(())
    }

    fn rows(&self) -> usize {
        self.bucket_count as usize + 4
    }

    fn sep_row(&self) -> u32 {
        self.bucket_count
    }

    fn match_row(&self) -> u32 {
        self.bucket_count + 1
    }

    fn link_row(&self) -> u32 {
        self.bucket_count + 2
    }

    fn question_row(&self) -> u32 {
        self.bucket_count + 3
    }
}

/// The two words before position `k`, padded with `<s>`.
fn left_context(words: &[String], k: usize) -> String {
    let at = |i: usize| if i <= k { words[k - i].as_str() } else { "<s>" };
    format!("{} {}", at(2), at(1))
}

/// Classes of the answer-type head, in tie-break order.
pub const ANSWER_CLASSES: [AnswerType; 3] = [AnswerType::Span, AnswerType::Yes, AnswerType::No];

/// Tokenized reader input.
#[derive(Debug, Clone, PartialEq)]
pub struct ReaderInput {
    /// Embedding rows per token.
    pub rows: Vec<Vec<u32>>,
    pub n_question: usize,
    /// Token position of every paragraph word, in path order.
    pub para_tokens: Vec<usize>,
    /// `(paragraph, word)` of every paragraph word.
    pub para_words: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderParams {
    pub config: ReaderConfig,
    pub embedding: Vec<f64>,
    pub q_proj: Vec<f64>,
    pub q_bias: Vec<f64>,
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
    pub pool_gain: Vec<f64>,
    pub pool_shift: Vec<f64>,
    pub v_start: Vec<f64>,
    pub v_end: Vec<f64>,
    pub w_path: Vec<f64>,
    /// `3 x dim`, rows in [`ANSWER_CLASSES`] order.
    pub class_head: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderGrads {
    pub embedding: SparseRows,
    pub q_proj: Vec<f64>,
    pub q_bias: Vec<f64>,
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
    pub pool_gain: Vec<f64>,
    pub pool_shift: Vec<f64>,
    pub v_start: Vec<f64>,
    pub v_end: Vec<f64>,
    pub w_path: Vec<f64>,
    pub class_head: Vec<f64>,
}

impl ReaderGrads {
    pub fn zeros(d: usize) -> Self {
        ReaderGrads {
            embedding: SparseRows::new(d),
            q_proj: vec![0.0; d * d],
            q_bias: vec![0.0; d],
            gain: vec![0.0; d],
            shift: vec![0.0; d],
            pool_gain: vec![0.0; d],
            pool_shift: vec![0.0; d],
            v_start: vec![0.0; d],
            v_end: vec![0.0; d],
            w_path: vec![0.0; d],
            class_head: vec![0.0; 3 * d],
        }
    }

    fn dense_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.q_proj,
            &mut self.q_bias,
            &mut self.gain,
            &mut self.shift,
            &mut self.pool_gain,
            &mut self.pool_shift,
            &mut self.v_start,
            &mut self.v_end,
            &mut self.w_path,
            &mut self.class_head,
        ]
    }

    pub fn merge(&mut self, other: &ReaderGrads) {
        self.embedding.merge(&other.embedding);
        let mut o = other.clone();
        for (a, b) in self.dense_mut().into_iter().zip(o.dense_mut()) {
            add_into(a, b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.embedding.scale(c);
        for v in self.dense_mut() {
            v.iter_mut().for_each(|x| *x *= c);
        }
    }
}

/// Cached forward pass.
#[derive(Debug, Clone)]
pub struct ReaderForward {
    emb: Vec<Vec<f64>>,
    qsum: Vec<f64>,
    act: Vec<Vec<f64>>,
    caches: Vec<StdCache>,
    pub reps: Vec<Vec<f64>>,
    pool_cache: StdCache,
    pub u: Vec<f64>,
    pub path_logit: f64,
    /// Over paragraph words.
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
    pub class_logits: [f64; 3],
}

impl ReaderForward {
    pub fn p_path(&self) -> f64 {
        nn::sigmoid(self.path_logit)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn log_softmax_at(z: &[f64], k: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z[k] - lse
}

/// `-max(log softmax(z)_k, log clip)` and its gradient in `z`.
fn softmax_ce(z: &[f64], k: usize) -> (f64, Vec<f64>) {
    let lp = log_softmax_at(z, k);
    if lp < PROB_CLIP.ln() {
        return (-PROB_CLIP.ln(), vec![0.0; z.len()]);
    }
    let mut g = softmax(z);
    g[k] -= 1.0;
    (-lp, g)
}

/// `-max(log sigmoid(±z), log clip)` and its derivative in `z`.
fn sigmoid_ce(z: f64, positive: bool) -> (f64, f64) {
    let zs = if positive { z } else { -z };
    let ls = nn::log_sigmoid(zs);
    if ls < PROB_CLIP.ln() {
        return (-PROB_CLIP.ln(), 0.0);
    }
    let dz = nn::sigmoid(zs) - 1.0;
    (-ls, if positive { dz } else { -dz })
}

/// Best `(i, j, P_start_i * P_end_j)` with `i <= j`, `j - i < max_len` and both words in the same
/// paragraph; ties go to the smallest `i`, then the smallest `j`.
pub fn best_span(
    p_start: &[f64],
    p_end: &[f64],
    para_of: &[usize],
    max_len: usize,
) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..p_start.len() {
        for j in i..p_end.len().min(i + max_len) {
            if para_of[j] != para_of[i] {
                break;
            }
            let s = p_start[i] * p_end[j];
            if best.is_none_or(|b| s > b.2) {
                best = Some((i, j, s));
            }
        }
    }
    best
}

/// Reader output for a single path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathReading {
    pub p_path: f64,
    pub answer_type: AnswerType,
    /// Paragraph-word span, for span answers.
    pub span: Option<(usize, usize)>,
    /// `P_start_i * P_end_j` for spans, the class probability for yes/no.
    pub s_read: f64,
    pub answer: String,
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnswerPrediction {
    /// Set when there were no paths to read.
    pub no_answer: bool,
    /// Index of the chosen path among the inputs.
    pub path_index: Option<usize>,
    pub path: Vec<ParaIdx>,
    pub answer: String,
    pub answer_type: AnswerType,
    pub span: Option<(usize, usize)>,
    pub p_path: f64,
    pub s_read: f64,
    /// Retriever log-score of the chosen path.
    pub s_retr: f64,
    /// `P(E|q)` of every input path, in input order.
    pub path_probs: Vec<f64>,
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
}

impl AnswerPrediction {
    fn none() -> Self {
        AnswerPrediction {
            no_answer: true,
            path_index: None,
            path: Vec::new(),
            answer: String::new(),
            answer_type: AnswerType::Span,
            span: None,
            p_path: 0.0,
            s_read: 0.0,
            s_retr: f64::NEG_INFINITY,
            path_probs: Vec::new(),
            p_start: Vec::new(),
            p_end: Vec::new(),
        }
    }
}

impl ReaderParams {
    pub fn init(config: ReaderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ReaderParams {
            embedding: nn::uniform_vec(&mut rng, config.rows() * d, 0.1),
            q_proj: nn::uniform_vec(&mut rng, d * d, (3.0 / d as f64).sqrt()),
            q_bias: vec![0.0; d],
            gain: vec![1.0; d],
            shift: vec![0.0; d],
            pool_gain: vec![1.0; d],
            pool_shift: vec![0.0; d],
            v_start: nn::uniform_vec(&mut rng, d, 0.1),
            v_end: nn::uniform_vec(&mut rng, d, 0.1),
            w_path: nn::uniform_vec(&mut rng, d, 0.1),
            class_head: nn::uniform_vec(&mut rng, 3 * d, 0.1),
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    fn word_rows(&self, words: &[String], k: usize) -> Vec<u32> {
        let b = self.config.bucket_count;
        let prev = if k == 0 { "<s>" } else { &words[k - 1] };
        let next = words.get(k + 1).map_or("</s>", String::as_str);
        let mut rows = vec![
            text::hash_feature(&format!("w:{}", words[k]), b),
            text::hash_feature(&format!("p:{prev}"), b),
            text::hash_feature(&format!("n:{next}"), b),
        ];
        if self.config.context_features {
            rows.push(text::hash_feature(&format!("b:{}", left_context(words, k)), b));
        }
        rows
    }

    pub fn build_input(&self, question: &str, paragraphs: &[&str]) -> ReaderInput {
        let cfg = &self.config;
        let b = cfg.bucket_count;
        let q_words = text::lower_words(question);
        let q_content: HashSet<String> = text::content_tokens(question).into_iter().collect();
        let mut rows = Vec::new();
        for k in 0..q_words.len() {
            let mut r = self.word_rows(&q_words, k);
            r.push(cfg.question_row());
            rows.push(r);
        }
        rows.push(vec![cfg.sep_row()]);
        let n_question = q_words.len();
        let mut para_tokens = Vec::new();
        let mut para_words = Vec::new();
        let texts: Vec<Vec<String>> = paragraphs.iter().map(|p| text::lower_words(p)).collect();
        // Question content words that never occur in the path, typically the relation words.
        let unmatched: Vec<&String> = if cfg.context_features {
            let present: HashSet<&String> = texts.iter().flatten().collect();
            let mut u: Vec<&String> = q_content.iter().filter(|w| !present.contains(w)).collect();
            u.sort();
            u
        } else {
            Vec::new()
        };
        // content word -> left context of its first occurrence in an earlier paragraph
        let mut earlier: HashMap<String, String> = HashMap::new();
        for (pi, words) in texts.iter().enumerate() {
            for k in 0..words.len() {
                let mut r = self.word_rows(words, k);
                let w = &words[k];
                let ctx = left_context(words, k);
                r.extend(
                    unmatched
                        .iter()
                        .map(|u| text::hash_feature(&format!("x:{u}|{ctx}"), b)),
                );
                if !text::is_stopword(w) {
                    if q_content.contains(w) {
                        r.push(cfg.match_row());
                        if cfg.context_features {
                            let next = words.get(k + 1).map_or("</s>", String::as_str);
                            r.push(text::hash_feature(&format!("mn:{next}"), b));
                        }
                    }
                    if cfg.link_feature {
                        if let Some(anchor) = earlier.get(w) {
                            r.push(cfg.link_row());
                            if cfg.context_features {
                                r.push(text::hash_feature(&format!("l:{anchor}"), b));
                                r.extend(
                                    unmatched
                                        .iter()
                                        .map(|u| text::hash_feature(&format!("y:{u}|{anchor}"), b)),
                                );
                            }
                        }
                    }
                }
                para_tokens.push(rows.len());
                para_words.push((pi, k));
                rows.push(r);
            }
            rows.push(vec![cfg.sep_row()]);
            for (k, w) in words.iter().enumerate() {
                if !text::is_stopword(w) && !earlier.contains_key(w) {
                    earlier.insert(w.clone(), left_context(words, k));
                }
            }
        }
        ReaderInput {
            rows,
            n_question,
            para_tokens,
            para_words,
        }
    }

    pub fn forward(&self, input: &ReaderInput) -> ReaderForward {
        let d = self.dim();
        let emb: Vec<Vec<f64>> = input
            .rows
            .iter()
            .map(|rs| {
                let mut e = vec![0.0; d];
                for &r in rs {
                    let o = r as usize * d;
                    add_into(&mut e, &self.embedding[o..o + d]);
                }
                e
            })
            .collect();
        let mut qsum = vec![0.0; d];
        if input.n_question > 0 {
            for e in &emb[..input.n_question] {
                add_into(&mut qsum, e);
            }
            qsum.iter_mut().for_each(|x| *x /= input.n_question as f64);
        }
        let mut qc = matvec(&self.q_proj, d, d, &qsum);
        add_into(&mut qc, &self.q_bias);
        let mut act = Vec::with_capacity(emb.len());
        let mut caches = Vec::with_capacity(emb.len());
        let mut reps = Vec::with_capacity(emb.len());
        for e in &emb {
            let a: Vec<f64> = e.iter().zip(&qc).map(|(x, c)| (x + c).tanh()).collect();
            let (r, c) = standardize(&a, &self.gain, &self.shift);
            act.push(a);
            caches.push(c);
            reps.push(r);
        }
        let mut mean = vec![0.0; d];
        for r in &reps {
            add_into(&mut mean, r);
        }
        let n = reps.len().max(1) as f64;
        mean.iter_mut().for_each(|x| *x /= n);
        let (u, pool_cache) = standardize(&mean, &self.pool_gain, &self.pool_shift);
        let path_logit = nn::dot(&self.w_path, &u);
        let start_logits = input
            .para_tokens
            .iter()
            .map(|&t| nn::dot(&self.v_start, &reps[t]))
            .collect();
        let end_logits = input
            .para_tokens
            .iter()
            .map(|&t| nn::dot(&self.v_end, &reps[t]))
            .collect();
        let cl = matvec(&self.class_head, 3, d, &u);
        ReaderForward {
            emb,
            qsum,
            act,
            caches,
            reps,
            pool_cache,
            u,
            path_logit,
            start_logits,
            end_logits,
            class_logits: [cl[0], cl[1], cl[2]],
        }
    }

    /// Token representations and the pooled path vector `u_E`.
    pub fn encode_path(&self, question: &str, paragraphs: &[&str]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let f = self.forward(&self.build_input(question, paragraphs));
        (f.reps, f.u)
    }

    /// `P(E|q) = sigmoid(w_n · u_E)`.
    pub fn rerank_prob(&self, question: &str, paragraphs: &[&str]) -> f64 {
        self.forward(&self.build_input(question, paragraphs)).p_path()
    }

    pub fn classify(&self, fwd: &ReaderForward) -> AnswerType {
        if !self.config.yes_no {
            return AnswerType::Span;
        }
        let mut best = 0;
        for k in 1..3 {
            if fwd.class_logits[k] > fwd.class_logits[best] {
                best = k;
            }
        }
        ANSWER_CLASSES[best]
    }

    pub fn classify_answer_type(&self, question: &str, paragraphs: &[&str]) -> AnswerType {
        self.classify(&self.forward(&self.build_input(question, paragraphs)))
    }

    /// `(i, j, S_read)` over paragraph words; `None` when the path has no words.
    pub fn extract_span(&self, question: &str, paragraphs: &[&str]) -> Option<(usize, usize, f64)> {
        let input = self.build_input(question, paragraphs);
        let f = self.forward(&input);
        let para_of: Vec<usize> = input.para_words.iter().map(|w| w.0).collect();
        best_span(
            &softmax(&f.start_logits),
            &softmax(&f.end_logits),
            &para_of,
            self.config.max_span_len,
        )
    }

    pub fn read_path(&self, question: &str, paragraphs: &[&str]) -> PathReading {
        let input = self.build_input(question, paragraphs);
        let f = self.forward(&input);
        let p_path = f.p_path();
        let answer_type = self.classify(&f);
        let p_start = softmax(&f.start_logits);
        let p_end = softmax(&f.end_logits);
        match answer_type {
            AnswerType::Yes | AnswerType::No => {
                let k = if answer_type == AnswerType::Yes { 1 } else { 2 };
                PathReading {
                    p_path,
                    answer_type,
                    span: None,
                    s_read: softmax(&f.class_logits)[k],
                    answer: if k == 1 { "yes" } else { "no" }.to_string(),
                    p_start,
                    p_end,
                }
            }
            AnswerType::Span => {
                let para_of: Vec<usize> = input.para_words.iter().map(|w| w.0).collect();
                let (span, s_read, answer) =
                    match best_span(&p_start, &p_end, &para_of, self.config.max_span_len) {
                        Some((i, j, s)) => {
                            let (pi, wi) = input.para_words[i];
                            let (_, wj) = input.para_words[j];
                            let spans = text::word_spans(paragraphs[pi]);
                            let t = &paragraphs[pi][spans[wi].0..spans[wj].1];
                            (Some((i, j)), s, t.to_string())
                        }
                        None => (None, 0.0, String::new()),
                    };
                PathReading {
                    p_path,
                    answer_type,
                    span,
                    s_read,
                    answer,
                    p_start,
                    p_end,
                }
            }
        }
    }

    fn prediction(
        &self,
        corpus: &Corpus,
        question: &str,
        paths: &[ReasoningPath],
        chosen: usize,
        probs: Vec<f64>,
    ) -> AnswerPrediction {
        let path = &paths[chosen];
        let texts: Vec<&str> = path.paragraphs.iter().map(|&p| corpus.text(p)).collect();
        let r = self.read_path(question, &texts);
        AnswerPrediction {
            no_answer: false,
            path_index: Some(chosen),
            path: path.paragraphs.clone(),
            answer: r.answer,
            answer_type: r.answer_type,
            span: r.span,
            p_path: r.p_path,
            s_read: r.s_read,
            s_retr: path.log_score,
            path_probs: probs,
            p_start: r.p_start,
            p_end: r.p_end,
        }
    }

    /// Answers from the path with the highest `P(E|q)`; ties go to the higher retriever score,
    /// then the smaller path.
    pub fn answer(&self, corpus: &Corpus, question: &str, paths: &[ReasoningPath]) -> AnswerPrediction {
        if paths.is_empty() {
            return AnswerPrediction::none();
        }
        let probs: Vec<f64> = paths
            .iter()
            .map(|p| {
                let texts: Vec<&str> = p.paragraphs.iter().map(|&i| corpus.text(i)).collect();
                self.rerank_prob(question, &texts)
            })
            .collect();
        let mut best = 0;
        for i in 1..paths.len() {
            let ord = probs[i]
                .total_cmp(&probs[best])
                .then(paths[i].log_score.total_cmp(&paths[best].log_score))
                .then(paths[best].paragraphs.cmp(&paths[i].paragraphs));
            if ord.is_gt() {
                best = i;
            }
        }
        self.prediction(corpus, question, paths, best, probs)
    }

    /// Answers from the first path, skipping re-ranking.
    pub fn answer_without_rerank(
        &self,
        corpus: &Corpus,
        question: &str,
        paths: &[ReasoningPath],
    ) -> AnswerPrediction {
        if paths.is_empty() {
            return AnswerPrediction::none();
        }
        let texts: Vec<&str> = paths[0].paragraphs.iter().map(|&i| corpus.text(i)).collect();
        let p = self.rerank_prob(question, &texts);
        self.prediction(corpus, question, paths, 0, vec![p])
    }

    /// Joint re-ranking, span and answer-type loss for one path, with gradients.
    pub fn loss(
        &self,
        input: &ReaderInput,
        target: ReaderTarget,
        label: PathLabel,
    ) -> Result<(f64, ReaderGrads)> {
        let d = self.dim();
        let f = self.forward(input);
        let mut grads = ReaderGrads::zeros(d);
        let mut loss = 0.0;
        let n_tok = f.reps.len();
        let mut g_reps = vec![vec![0.0; d]; n_tok];
        let mut g_u = vec![0.0; d];

        let gold = label == PathLabel::Gold;
        if gold == (target == ReaderTarget::Masked) {
            return Err(Error::Usage(format!(
                "target {target:?} does not fit a {label:?} path"
            )));
        }
        let (l, dz) = sigmoid_ce(f.path_logit, gold);
        loss += l;
        nn::axpy(dz, &self.w_path, &mut g_u);
        nn::axpy(dz, &f.u, &mut grads.w_path);

        let class = match target {
            ReaderTarget::Span { start, end } => {
                let n = input.para_tokens.len();
                if start > end || end >= n {
                    return Err(Error::Usage(format!(
                        "span ({start}, {end}) outside the {n} paragraph words of the path"
                    )));
                }
                for (logits, y, v, gv) in [
                    (&f.start_logits, start, &self.v_start, &mut grads.v_start),
                    (&f.end_logits, end, &self.v_end, &mut grads.v_end),
                ] {
                    let (l, g) = softmax_ce(logits, y);
                    loss += l;
                    for (k, &gk) in g.iter().enumerate() {
                        if gk != 0.0 {
                            let t = input.para_tokens[k];
                            nn::axpy(gk, v, &mut g_reps[t]);
                            nn::axpy(gk, &f.reps[t], gv);
                        }
                    }
                }
                Some(0)
            }
            ReaderTarget::Yes => Some(1),
            ReaderTarget::No => Some(2),
            ReaderTarget::Masked => None,
        };
        if let Some(k) = class {
            if self.config.yes_no {
                let (l, g) = softmax_ce(&f.class_logits, k);
                loss += l;
                matvec_t_acc(&self.class_head, d, &g, &mut g_u);
                add_outer(&mut grads.class_head, d, &g, &f.u);
            } else if k != 0 {
                return Err(Error::Usage("yes/no target needs the answer-type head".into()));
            }
        }

        let g_mean = standardize_backward(
            &f.pool_cache,
            &self.pool_gain,
            &g_u,
            &mut grads.pool_gain,
            &mut grads.pool_shift,
        );
        let inv_n = 1.0 / n_tok.max(1) as f64;
        let mut g_qc = vec![0.0; d];
        let mut g_emb = vec![vec![0.0; d]; n_tok];
        for t in 0..n_tok {
            nn::axpy(inv_n, &g_mean, &mut g_reps[t]);
            let g_act = standardize_backward(
                &f.caches[t],
                &self.gain,
                &g_reps[t],
                &mut grads.gain,
                &mut grads.shift,
            );
            for ((ge, ga), a) in g_emb[t].iter_mut().zip(&g_act).zip(&f.act[t]) {
                *ge = ga * (1.0 - a * a);
            }
            add_into(&mut g_qc, &g_emb[t]);
        }
        add_into(&mut grads.q_bias, &g_qc);
        add_outer(&mut grads.q_proj, d, &g_qc, &f.qsum);
        if input.n_question > 0 {
            let mut g_qsum = vec![0.0; d];
            matvec_t_acc(&self.q_proj, d, &g_qc, &mut g_qsum);
            let s = 1.0 / input.n_question as f64;
            for g in &mut g_emb[..input.n_question] {
                nn::axpy(s, &g_qsum, g);
            }
        }
        for (rs, g) in input.rows.iter().zip(&g_emb) {
            for &r in rs {
                grads.embedding.add(r, 1.0, g);
            }
        }
        debug_assert_eq!(f.emb.len(), n_tok);
        Ok((loss, grads))
    }

    pub fn example_input(&self, corpus: &Corpus, ex: &ReaderExample) -> ReaderInput {
        let texts: Vec<&str> = ex.path.iter().map(|&p| corpus.text(p)).collect();
        self.build_input(&ex.question, &texts)
    }

    pub fn example_loss(&self, corpus: &Corpus, ex: &ReaderExample) -> Result<(f64, ReaderGrads)> {
        self.loss(&self.example_input(corpus, ex), ex.target, ex.label)
    }

    pub fn apply_update(&mut self, opt: &mut AdamW, g: &ReaderGrads, lr: f64) {
        opt.update(
            "reader.embedding",
            &mut self.embedding,
            GradView::Rows(&g.embedding),
            true,
            lr,
        );
        opt.update(
            "reader.q_proj",
            &mut self.q_proj,
            GradView::Dense(&g.q_proj),
            true,
            lr,
        );
        opt.update(
            "reader.q_bias",
            &mut self.q_bias,
            GradView::Dense(&g.q_bias),
            false,
            lr,
        );
        opt.update("reader.gain", &mut self.gain, GradView::Dense(&g.gain), false, lr);
        opt.update(
            "reader.shift",
            &mut self.shift,
            GradView::Dense(&g.shift),
            false,
            lr,
        );
        opt.update(
            "reader.pool_gain",
            &mut self.pool_gain,
            GradView::Dense(&g.pool_gain),
            false,
            lr,
        );
        opt.update(
            "reader.pool_shift",
            &mut self.pool_shift,
            GradView::Dense(&g.pool_shift),
            false,
            lr,
        );
        opt.update(
            "reader.v_start",
            &mut self.v_start,
            GradView::Dense(&g.v_start),
            true,
            lr,
        );
        opt.update(
            "reader.v_end",
            &mut self.v_end,
            GradView::Dense(&g.v_end),
            true,
            lr,
        );
        opt.update(
            "reader.w_path",
            &mut self.w_path,
            GradView::Dense(&g.w_path),
            true,
            lr,
        );
        opt.update(
            "reader.class_head",
            &mut self.class_head,
            GradView::Dense(&g.class_head),
            true,
            lr,
        );
    }

    fn dense(&self) -> [(&'static str, &Vec<f64>, usize); 11] {
        let d = self.dim();
        [
            ("embedding", &self.embedding, self.config.rows()),
            ("q_proj", &self.q_proj, d),
            ("q_bias", &self.q_bias, 0),
            ("gain", &self.gain, 0),
            ("shift", &self.shift, 0),
            ("pool_gain", &self.pool_gain, 0),
            ("pool_shift", &self.pool_shift, 0),
            ("v_start", &self.v_start, 0),
            ("v_end", &self.v_end, 0),
            ("w_path", &self.w_path, 0),
            ("class_head", &self.class_head, 3),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.dense()
            .iter()
            .all(|(_, v, _)| v.iter().all(|x| x.is_finite()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let d = self.dim();
        let mut ck = Checkpoint::new();
        ck.push(NamedTensor::scalar(
            "reader.bucket_count",
            f64::from(c.bucket_count),
        ));
        ck.push(NamedTensor::scalar("reader.max_span_len", c.max_span_len as f64));
        ck.push(NamedTensor::scalar(
            "reader.yes_no",
            f64::from(u8::from(c.yes_no)),
        ));
        ck.push(NamedTensor::scalar(
            "reader.link_feature",
            f64::from(u8::from(c.link_feature)),
        ));
        ck.push(NamedTensor::scalar(
            "reader.context_features",
            f64::from(u8::from(c.context_features)),
        ));
        for (name, v, rows) in self.dense() {
            let dims: Vec<usize> = if rows == 0 { vec![d] } else { vec![rows, d] };
            ck.push(NamedTensor::new(format!("reader.{name}"), &dims, v.clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let s = ck.section("reader.");
        let d = s
            .get("v_start")
            .and_then(|t| t.dims.first().copied())
            .ok_or_else(|| Error::format("checkpoint", "missing tensor reader.v_start"))?
            as usize;
        let config = ReaderConfig {
            dim: d,
            bucket_count: take_scalar(&s, "bucket_count")? as u32,
            max_span_len: take_scalar(&s, "max_span_len")? as usize,
            yes_no: take_scalar(&s, "yes_no")? != 0.0,
            link_feature: take_scalar(&s, "link_feature")? != 0.0,
            context_features: take_scalar(&s, "context_features")? != 0.0,
        };
        config.validate()?;
        let vec_d = |name: &str| take(&s, name, &[d]).map(<[f64]>::to_vec);
        Ok(ReaderParams {
            embedding: take(&s, "embedding", &[config.rows(), d])?.to_vec(),
            q_proj: take(&s, "q_proj", &[d, d])?.to_vec(),
            q_bias: vec_d("q_bias")?,
            gain: vec_d("gain")?,
            shift: vec_d("shift")?,
            pool_gain: vec_d("pool_gain")?,
            pool_shift: vec_d("pool_shift")?,
            v_start: vec_d("v_start")?,
            v_end: vec_d("v_end")?,
            w_path: vec_d("w_path")?,
            class_head: take(&s, "class_head", &[3, d])?.to_vec(),
            config,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReaderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for ReaderTrainConfig {
    fn default() -> Self {
        ReaderTrainConfig {
            epochs: 2,
            batch_size: 120,
            seed: 0,
            optim: OptimConfig::default(),
        }
    }
}

fn batch_loss(
    params: &ReaderParams,
    inputs: &[&(ReaderInput, ReaderTarget, PathLabel)],
) -> Result<(f64, ReaderGrads)> {
    let outs: Vec<(f64, ReaderGrads)> = inputs
        .par_iter()
        .map(|(i, t, l)| params.loss(i, *t, *l))
        .collect::<Result<_>>()?;
    let mut grads = ReaderGrads::zeros(params.dim());
    let mut loss = 0.0;
    for (l, g) in &outs {
        loss += l;
        grads.merge(g);
    }
    Ok((loss, grads))
}

/// Mean per-example loss.
pub fn evaluate_reader_loss(
    params: &ReaderParams,
    corpus: &Corpus,
    examples: &[ReaderExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|e| params.example_loss(corpus, e).map(|o| o.0))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / examples.len() as f64)
}

/// Mini-batch AdamW training over gold, distant and distorted examples.
pub fn train_reader(
    params: &mut ReaderParams,
    corpus: &Corpus,
    examples: &[ReaderExample],
    config: &ReaderTrainConfig,
) -> Result<TrainReport> {
    use rand::seq::SliceRandom;
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be at least 1".into()));
    }
    if examples.is_empty() {
        return Err(Error::Usage("no reader training examples".into()));
    }
    let prepared: Vec<(ReaderInput, ReaderTarget, PathLabel)> = examples
        .iter()
        .map(|e| (params.example_input(corpus, e), e.target, e.label))
        .collect();
    let mean_loss = |p: &ReaderParams| -> Result<f64> {
        let all: Vec<_> = prepared.iter().collect();
        Ok(batch_loss(p, &all)?.0 / prepared.len() as f64)
    };
    let initial_loss = mean_loss(params)?;
    let total = prepared.len().div_ceil(config.batch_size) * config.epochs;
    let mut opt = AdamW::new(config.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (loss, mut grads) = batch_loss(params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "reader loss diverged at epoch {epoch}, step {step}"
                )));
            }
            grads.scale(1.0 / batch.len() as f64);
            epoch_loss += loss;
            opt.begin_step();
            params.apply_update(&mut opt, &grads, scheduled_lr(&config.optim, step, total));
            if !params.is_finite() {
                return Err(Error::Numerical(format!(
                    "reader parameters became non-finite at epoch {epoch}, step {step}"
                )));
            }
            step += 1;
        }
        epoch_losses.push(epoch_loss / prepared.len() as f64);
    }
    Ok(TrainReport {
        initial_loss,
        final_loss: mean_loss(params)?,
        epoch_losses,
        steps: step,
    })
}
