use std::collections::{HashMap, HashSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Candidate, CandidateSet, ReasoningPath, RetrieverModel};
use crate::corpus::{Corpus, ParaIdx, WikiGraph};
use crate::encoder::{EncoderMode, QuestionFeatures};
use crate::error::{Error, Result};
use crate::nn;
use crate::tfidf::{self, SparseIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    /// Beam search; `[EOE]` allowed from step 2 and forced after `max_len` paragraphs.
    Adaptive,
    /// Beam size 1.
    Greedy,
    /// `[EOE]` suppressed until exactly `L` paragraphs are selected, then forced.
    Fixed(usize),
    /// The state stays at `h_1`; each step scores candidates independently.
    NoRecurrence,
    /// `C_1` is a caller-supplied pool and graph expansion stays inside it.
    ClosedPool,
}

impl FromStr for RetrievalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(RetrievalMode::Adaptive),
            "greedy" => Ok(RetrievalMode::Greedy),
            "norec" | "no-recurrence" => Ok(RetrievalMode::NoRecurrence),
            "closed" | "closed-pool" => Ok(RetrievalMode::ClosedPool),
            other => match other.strip_prefix("fixed:") {
                Some(l) => l
                    .parse()
                    .map(RetrievalMode::Fixed)
                    .map_err(|_| Error::Config(format!("bad fixed length in {other:?}"))),
                None => Err(Error::Config(format!("unknown retrieval mode {other:?}"))),
            },
        }
    }
}

impl std::fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RetrievalMode::Adaptive => write!(f, "adaptive"),
            RetrievalMode::Greedy => write!(f, "greedy"),
            RetrievalMode::Fixed(l) => write!(f, "fixed:{l}"),
            RetrievalMode::NoRecurrence => write!(f, "norec"),
            RetrievalMode::ClosedPool => write!(f, "closed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub beam: usize,
    /// Size of the initial TF-IDF candidate set.
    pub f: usize,
    /// Carry-over count: best non-selected candidates kept for the next step.
    pub k: usize,
    /// Maximum number of paragraphs in a path.
    pub max_len: usize,
    pub mode: RetrievalMode,
    /// Whether the `[EOE]` selection probability is a factor of the path score.
    pub eoe_in_score: bool,
    /// Build `C_1` with the article-then-paragraph retrieval instead of flat paragraph TF-IDF.
    pub two_stage: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            beam: 8,
            f: 500,
            k: 1,
            max_len: 3,
            mode: RetrievalMode::Adaptive,
            eoe_in_score: true,
            two_stage: false,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.f == 0 || self.max_len == 0 {
            return Err(Error::Config("beam, f and max_len must be at least 1".into()));
        }
        if let RetrievalMode::Fixed(l) = self.mode {
            if l == 0 || l > self.max_len {
                return Err(Error::Config(format!(
                    "fixed length {l} must be in 1..={}",
                    self.max_len
                )));
            }
        }
        Ok(())
    }

    fn effective_beam(&self) -> usize {
        match self.mode {
            RetrievalMode::Greedy => 1,
            _ => self.beam,
        }
    }

    /// Paragraph cap after which `[EOE]` is forced.
    fn cap(&self) -> usize {
        match self.mode {
            RetrievalMode::Fixed(l) => l,
            _ => self.max_len,
        }
    }

    fn eoe_allowed(&self, step: usize) -> bool {
        match self.mode {
            RetrievalMode::Fixed(l) => step == l + 1,
            _ => step >= 2,
        }
    }
}

/// Scores candidates and advances the recurrent state for one question.
pub trait PathScorer {
    fn initial_state(&mut self) -> Result<Vec<f64>>;
    /// Pre-sigmoid selection score of `candidate` under state `h`.
    fn logit(&mut self, h: &[f64], candidate: Candidate) -> f64;
    fn advance(&mut self, h: &[f64], selected: ParaIdx) -> Result<Vec<f64>>;
}

/// [`PathScorer`] backed by the trained encoder and recurrent head. Candidate encodings are
/// cached per paragraph for the lifetime of the scorer (one question).
pub struct ModelScorer<'a> {
    model: &'a RetrieverModel,
    corpus: &'a Corpus,
    question: String,
    features: QuestionFeatures,
    cache: HashMap<ParaIdx, Vec<f64>>,
    eoe: Vec<f64>,
    pub encoder_calls: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a RetrieverModel, corpus: &'a Corpus, question: &str) -> Self {
        ModelScorer {
            model,
            corpus,
            question: question.to_string(),
            features: model.encoder.question_features(question),
            cache: HashMap::new(),
            eoe: model.encoder.eoe_vector(),
            encoder_calls: 0,
        }
    }

    pub fn encode(&mut self, p: ParaIdx) -> &[f64] {
        let (model, corpus, features) = (self.model, self.corpus, &self.features);
        let calls = &mut self.encoder_calls;
        self.cache.entry(p).or_insert_with(|| {
            *calls += 1;
            model
                .encoder
                .encode(&model.encoder.candidate_input(features, corpus.text(p)))
        })
    }
}

impl PathScorer for ModelScorer<'_> {
    fn initial_state(&mut self) -> Result<Vec<f64>> {
        match self.model.encoder.mode() {
            EncoderMode::QuestionDependent => self.model.params.init_state(None),
            EncoderMode::QuestionIndependent => {
                let wq = self
                    .model
                    .encoder
                    .encode(&self.model.encoder.single_input(&self.question));
                self.model.params.init_state(Some(&wq))
            }
        }
    }

    fn logit(&mut self, h: &[f64], candidate: Candidate) -> f64 {
        let b = self.model.params.b;
        match candidate {
            Candidate::Eoe => nn::dot(&self.eoe, h) + b,
            Candidate::Paragraph(p) => nn::dot(self.encode(p), h) + b,
        }
    }

    fn advance(&mut self, h: &[f64], selected: ParaIdx) -> Result<Vec<f64>> {
        let w = self.encode(selected).to_vec();
        self.model.params.advance(h, &w)
    }
}

/// Builds `C_{t+1}` after `selected` was chosen from `current`: out-neighbors of `selected` (graph
/// order), then the `k` most probable other members of `current` (probability descending, ties by
/// id), then `[EOE]`; anything already on `path` is removed. With `pool`, neighbors are limited
/// to pool members.
pub fn expand_candidates(
    graph: &WikiGraph,
    path: &[ParaIdx],
    current: &CandidateSet,
    selected: ParaIdx,
    probs: &[(ParaIdx, f64)],
    k: usize,
    pool: Option<&HashSet<ParaIdx>>,
) -> CandidateSet {
    let on_path: HashSet<ParaIdx> = path.iter().copied().chain([selected]).collect();
    let mut seen: HashSet<ParaIdx> = HashSet::new();
    let mut next = Vec::new();
    for &n in graph.out(selected) {
        if on_path.contains(&n) || pool.is_some_and(|p| !p.contains(&n)) {
            continue;
        }
        if seen.insert(n) {
            next.push(n);
        }
    }
    let prob_of: HashMap<ParaIdx, f64> = probs.iter().copied().collect();
    let mut carry: Vec<(ParaIdx, f64)> = current
        .paragraphs
        .iter()
        .filter(|&&p| p != selected)
        .map(|&p| (p, prob_of.get(&p).copied().unwrap_or(0.0)))
        .collect();
    carry.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (p, _) in carry.into_iter().take(k) {
        if !on_path.contains(&p) && seen.insert(p) {
            next.push(p);
        }
    }
    CandidateSet {
        step: current.step + 1,
        paragraphs: next,
        includes_eoe: true,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SearchStats {
    pub c1_size: usize,
    /// Paragraph candidates scored at steps >= 2, summed over hypotheses.
    pub later_candidates: usize,
    /// Distinct paragraph encodings computed (filled in by [`beam_search`]).
    pub encoder_calls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutput {
    /// Terminated paths, best first.
    pub paths: Vec<ReasoningPath>,
    pub stats: SearchStats,
}

struct Hyp {
    path: Vec<ParaIdx>,
    state: Vec<f64>,
    log_score: f64,
    terminated: bool,
    cands: CandidateSet,
}

struct Ext {
    parent: usize,
    choice: Candidate,
    path: Vec<ParaIdx>,
    log_score: f64,
    terminated: bool,
}

fn rank(a: (&f64, &[ParaIdx], bool), b: (&f64, &[ParaIdx], bool)) -> std::cmp::Ordering {
    b.0.total_cmp(a.0)
        .then_with(|| a.1.cmp(b.1))
        .then_with(|| a.2.cmp(&b.2))
}

/// Beam search over reasoning paths starting from `c1`. Finalized and open hypotheses compete for
/// the same `B` slots; ties are broken by lexicographic path order.
pub fn search<S: PathScorer>(
    scorer: &mut S,
    graph: &WikiGraph,
    c1: &[ParaIdx],
    config: &RetrievalConfig,
    pool: Option<&HashSet<ParaIdx>>,
) -> Result<SearchOutput> {
    config.validate()?;
    let mut stats = SearchStats::default();
    let mut seen = HashSet::new();
    let c1: Vec<ParaIdx> = c1.iter().copied().filter(|p| seen.insert(*p)).collect();
    stats.c1_size = c1.len();
    if c1.is_empty() {
        return Ok(SearchOutput {
            paths: Vec::new(),
            stats,
        });
    }
    let beam_size = config.effective_beam();
    let cap = config.cap();
    let recurrent = config.mode != RetrievalMode::NoRecurrence;

    let mut beam = vec![Hyp {
        path: Vec::new(),
        state: scorer.initial_state()?,
        log_score: 0.0,
        terminated: false,
        cands: CandidateSet {
            step: 1,
            paragraphs: c1,
            includes_eoe: false,
        },
    }];

    for step in 1..=cap + 1 {
        let forced = step == cap + 1;
        let mut exts: Vec<Ext> = Vec::new();
        let mut parent_probs: Vec<Vec<(ParaIdx, f64)>> = vec![Vec::new(); beam.len()];
        for (i, hyp) in beam.iter().enumerate() {
            if hyp.terminated {
                exts.push(Ext {
                    parent: i,
                    choice: Candidate::Eoe,
                    path: hyp.path.clone(),
                    log_score: hyp.log_score,
                    terminated: true,
                });
                continue;
            }
            if !forced {
                if step >= 2 {
                    stats.later_candidates += hyp.cands.paragraphs.len();
                }
                for &p in &hyp.cands.paragraphs {
                    let z = scorer.logit(&hyp.state, Candidate::Paragraph(p));
                    parent_probs[i].push((p, nn::sigmoid(z)));
                    let mut path = hyp.path.clone();
                    path.push(p);
                    exts.push(Ext {
                        parent: i,
                        choice: Candidate::Paragraph(p),
                        path,
                        log_score: hyp.log_score + nn::log_sigmoid(z),
                        terminated: false,
                    });
                }
            }
            if forced || config.eoe_allowed(step) {
                let z = scorer.logit(&hyp.state, Candidate::Eoe);
                let factor = if config.eoe_in_score {
                    nn::log_sigmoid(z)
                } else {
                    0.0
                };
                exts.push(Ext {
                    parent: i,
                    choice: Candidate::Eoe,
                    path: hyp.path.clone(),
                    log_score: hyp.log_score + factor,
                    terminated: true,
                });
            }
        }

        exts.sort_by(|a, b| {
            rank(
                (&a.log_score, &a.path, a.terminated),
                (&b.log_score, &b.path, b.terminated),
            )
        });
        let mut keys = HashSet::new();
        exts.retain(|e| keys.insert((e.path.clone(), e.terminated)));
        exts.truncate(beam_size);

        let mut next = Vec::with_capacity(exts.len());
        for e in exts {
            let parent = &beam[e.parent];
            let hyp = match e.choice {
                Candidate::Paragraph(p) if !e.terminated => {
                    let state = if recurrent {
                        scorer.advance(&parent.state, p)?
                    } else {
                        parent.state.clone()
                    };
                    let cands = expand_candidates(
                        graph,
                        &parent.path,
                        &parent.cands,
                        p,
                        &parent_probs[e.parent],
                        config.k,
                        pool,
                    );
                    Hyp {
                        path: e.path,
                        state,
                        log_score: e.log_score,
                        terminated: false,
                        cands,
                    }
                }
                _ => Hyp {
                    path: e.path,
                    state: Vec::new(),
                    log_score: e.log_score,
                    terminated: true,
                    cands: CandidateSet {
                        step: step + 1,
                        paragraphs: Vec::new(),
                        includes_eoe: false,
                    },
                },
            };
            next.push(hyp);
        }
        beam = next;
        if beam.iter().all(|h| h.terminated) {
            break;
        }
    }

    let paths = beam
        .into_iter()
        .filter(|h| h.terminated && !h.path.is_empty())
        .map(|h| ReasoningPath {
            paragraphs: h.path,
            terminated: true,
            log_score: h.log_score,
        })
        .collect();
    Ok(SearchOutput { paths, stats })
}

/// Immutable retrieval resources over one corpus.
#[derive(Clone, Copy)]
pub struct RetrievalContext<'a> {
    pub corpus: &'a Corpus,
    pub graph: &'a WikiGraph,
    pub index: &'a SparseIndex,
    /// Article-level index, required when `two_stage` is set.
    pub article_index: Option<&'a SparseIndex>,
}

impl RetrievalContext<'_> {
    /// The initial candidate set for a question.
    pub fn initial_candidates(&self, question: &str, config: &RetrievalConfig) -> Result<Vec<ParaIdx>> {
        if config.two_stage {
            let articles = self
                .article_index
                .ok_or_else(|| Error::Usage("two-stage retrieval needs an article index".into()))?;
            Ok(tfidf::two_stage_top_f(articles, self.corpus, question, config.f)?
                .into_iter()
                .map(|(p, _)| p)
                .collect())
        } else {
            Ok(tfidf::top_f(self.index, question, config.f)
                .into_iter()
                .map(|(p, _)| p)
                .collect())
        }
    }
}

/// Retrieves the top reasoning paths for one question. In [`RetrievalMode::ClosedPool`], `pool`
/// replaces the TF-IDF candidates and bounds graph expansion.
pub fn beam_search(
    question: &str,
    model: &RetrieverModel,
    ctx: &RetrievalContext<'_>,
    config: &RetrievalConfig,
    pool: Option<&[ParaIdx]>,
) -> Result<SearchOutput> {
    config.validate()?;
    let (c1, pool_set) = match (config.mode, pool) {
        (RetrievalMode::ClosedPool, Some(pool)) => {
            (pool.to_vec(), Some(pool.iter().copied().collect::<HashSet<_>>()))
        }
        (RetrievalMode::ClosedPool, None) => {
            return Err(Error::Usage(
                "closed-pool retrieval needs a candidate pool".into(),
            ))
        }
        _ => (ctx.initial_candidates(question, config)?, None),
    };
    let mut scorer = ModelScorer::new(model, ctx.corpus, question);
    let mut out = search(&mut scorer, ctx.graph, &c1, config, pool_set.as_ref())?;
    out.stats.encoder_calls = scorer.encoder_calls;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Granularity, Paragraph};

    fn graph(n: usize, edges: &[(usize, usize)]) -> (Corpus, WikiGraph) {
        let names: Vec<String> = (0..n).map(|i| format!("N{i}")).collect();
        let paras = names
            .iter()
            .enumerate()
            .map(|(i, t)| Paragraph {
                para_id: Paragraph::make_id(t, 0),
                article_title: t.clone(),
                para_index: 0,
                text: format!("text {i}"),
                out_links: edges
                    .iter()
                    .filter(|e| e.0 == i)
                    .map(|e| names[e.1].clone())
                    .collect(),
                is_introductory: true,
            })
            .collect();
        let c = Corpus::from_paragraphs(paras).unwrap();
        let (g, _) = WikiGraph::build(&c, Granularity::AllParagraphs);
        (c, g)
    }

    #[test]
    fn expansion_example() {
        // A -> {B, C}; C1 = {A, D}
        let (_, g) = graph(4, &[(0, 1), (0, 2)]);
        let c1 = CandidateSet {
            step: 1,
            paragraphs: vec![ParaIdx(0), ParaIdx(3)],
            includes_eoe: false,
        };
        let probs = [(ParaIdx(0), 0.9), (ParaIdx(3), 0.2)];
        let c2 = expand_candidates(&g, &[], &c1, ParaIdx(0), &probs, 1, None);
        assert_eq!(c2.paragraphs, vec![ParaIdx(1), ParaIdx(2), ParaIdx(3)]);
        assert!(c2.includes_eoe);
        assert_eq!(c2.step, 2);

        let none = expand_candidates(&g, &[], &c1, ParaIdx(3), &probs, 0, None);
        assert!(none.paragraphs.is_empty() && none.includes_eoe);

        let on_path = expand_candidates(&g, &[ParaIdx(1)], &c1, ParaIdx(0), &probs, 1, None);
        assert_eq!(on_path.paragraphs, vec![ParaIdx(2), ParaIdx(3)]);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "fixed:2".parse::<RetrievalMode>().unwrap(),
            RetrievalMode::Fixed(2)
        );
        assert_eq!(
            "norec".parse::<RetrievalMode>().unwrap(),
            RetrievalMode::NoRecurrence
        );
        assert!("fixed:x".parse::<RetrievalMode>().is_err());
        let cfg = RetrievalConfig {
            mode: RetrievalMode::Fixed(4),
            ..RetrievalConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
