//! Synthetic hyperlinked corpus with 1-hop, 2-hop bridge and yes/no comparison questions.
//!
//! Articles are entities (countries, cities, people, companies, films) named with invented
//! words, each with a templated introductory paragraph holding its hyperlinks and a second
//! paragraph that repeats the name. Bridge questions are phrased with words that occur in no
//! paragraph, so the answer paragraph shares no content term with the question.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Granularity, ParaIdx, Paragraph, WikiGraph};
use crate::error::{Error, Result};
use crate::supervision::{AnswerType, TrainingQuestion};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HopMix {
    pub one_hop: f64,
    pub two_hop: f64,
    pub comparison: f64,
}

impl Default for HopMix {
    fn default() -> Self {
        HopMix {
            one_hop: 0.0,
            two_hop: 1.0,
            comparison: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_articles: usize,
    pub paragraphs_per_article: usize,
    /// Number of distinct invented words available for entity names.
    pub vocabulary_size: usize,
    pub num_questions: usize,
    pub hop_mix: HopMix,
    /// Phrase bridge questions with paragraph vocabulary instead of disjoint wording.
    pub bridge_overlap: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_articles: 1000,
            paragraphs_per_article: 2,
            vocabulary_size: 2000,
            num_questions: 1000,
            hop_mix: HopMix::default(),
            bridge_overlap: false,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.hop_mix;
        if [m.one_hop, m.two_hop, m.comparison]
            .iter()
            .any(|&x| !(0.0..=1.0).contains(&x))
            || (m.one_hop + m.two_hop + m.comparison - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(
                "hop_mix fractions must be in [0, 1] and sum to 1".into(),
            ));
        }
        if self.num_articles < 20 || self.paragraphs_per_article == 0 || self.num_questions == 0 {
            return Err(Error::Config(
                "need at least 20 articles, 1 paragraph per article and 1 question".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub corpus: Corpus,
    pub graph: WikiGraph,
    pub questions: Vec<TrainingQuestion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    Country,
    City,
    Person,
    Company,
    Film,
}

#[derive(Debug, Clone)]
struct Entity {
    kind: Kind,
    name: String,
    /// Linked entities by slot: city -> [country]; person -> [city, company];
    /// company -> [city, founder]; film -> [director, studio].
    links: Vec<usize>,
    /// Entities named in the intro without a link: a city's companies, a company's films.
    mentions: Vec<usize>,
    /// People who work for a company, named in its second paragraph.
    staff: Vec<usize>,
    year: u32,
    number: u32,
    word: &'static str,
}

const REGIONS: &[&str] = &["northern", "southern", "eastern", "western", "central", "coastal"];
const CRAFTS: &[&str] = &["pottery", "weaving", "glass", "silver", "textile", "woodcarving"];
const OCCUPATIONS: &[&str] = &[
    "painter",
    "chemist",
    "architect",
    "sculptor",
    "novelist",
    "engineer",
    "poet",
    "violinist",
    "astronomer",
    "botanist",
];
const PRODUCTS: &[&str] = &[
    "machinery",
    "furniture",
    "textiles",
    "instruments",
    "ceramics",
    "lamps",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mer", "vi", "dan", "sor", "tel", "ru", "bal", "nex", "qui", "zar", "fen", "hol", "pri",
    "gus", "wen", "tor", "mal", "iv", "osk", "ulm", "yra", "dre", "bex", "cor", "sim", "vag",
];

/// Words used by bridge and comparison question templates; none may occur in a paragraph.
const QUESTION_WORDS: &[&str] = &[
    "hometown",
    "filmmaker",
    "profession",
    "formed",
    "originator",
    "nation",
    "contains",
    "birthplace",
    "settled",
    "headcount",
    "containing",
    "come",
    "earlier",
    "pursue",
];

fn invent_vocabulary(rng: &mut ChaCha8Rng, size: usize, reserved: &HashSet<String>) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(size);
    let mut attempts = 0usize;
    while out.len() < size {
        attempts += 1;
        if attempts > size * 50 + 1000 {
            return Err(Error::Config(format!("cannot invent {size} distinct name words")));
        }
        let n = rng.random_range(2..=3);
        let w: String = (0..n)
            .map(|_| *SYLLABLES.choose(rng).expect("non-empty"))
            .collect();
        if reserved.contains(&w) || text::is_stopword(&w) || !seen.insert(w.clone()) {
            continue;
        }
        let mut c = w.chars();
        let first = c.next().expect("non-empty").to_uppercase().collect::<String>();
        out.push(first + c.as_str());
    }
    Ok(out)
}

fn template_words() -> HashSet<String> {
    let fixed = "its productions include home staff includes is a sovereign state in the region has population of million people culture known for \
        its traditions and annual festivals city located was founded river port several markets near \
        old quarter who born later worked spent many years teaching students writing essays about \
        company headquartered it established by employs hundred workers sells across film directed \
        produced released received mixed reviews from critics shown at";
    fixed
        .split_whitespace()
        .chain(REGIONS.iter().copied())
        .chain(CRAFTS.iter().copied())
        .chain(OCCUPATIONS.iter().copied())
        .chain(PRODUCTS.iter().copied())
        .chain(QUESTION_WORDS.iter().copied())
        .map(str::to_string)
        .collect()
}

struct World {
    entities: Vec<Entity>,
    by_kind: HashMap<Kind, Vec<usize>>,
}

impl World {
    fn intro(&self, e: &Entity) -> String {
        let n = |i: usize| self.entities[e.links[i]].name.as_str();
        match e.kind {
            Kind::Country => format!(
                "{} is a sovereign state in the {} region. {} has a population of {} million people.",
                e.name, e.word, e.name, e.number
            ),
            Kind::City => format!(
                "{} is a city located in {}. The city was founded in {}.{}",
                e.name,
                n(0),
                e.year,
                self.listing(" It is home to {}.", &e.mentions)
            ),
            Kind::Person => format!(
                "{} is a {} who was born in {}. {} later worked for {}.",
                e.name,
                e.word,
                n(0),
                e.name,
                n(1)
            ),
            Kind::Company => format!(
                "{} is a company headquartered in {}. It was established in {} by {}.{}",
                e.name,
                n(0),
                e.year,
                n(1),
                self.listing(" Its productions include {}.", &e.mentions)
            ),
            Kind::Film => format!(
                "{} is a film directed by {}. It was produced by {} and released in {}.",
                e.name,
                n(0),
                n(1),
                e.year
            ),
        }
    }

    /// `template` with `{}` replaced by the names of `ids`, or nothing when `ids` is empty.
    fn listing(&self, template: &str, ids: &[usize]) -> String {
        if ids.is_empty() {
            return String::new();
        }
        let names: Vec<&str> = ids.iter().map(|&i| self.entities[i].name.as_str()).collect();
        template.replace("{}", &names.join(" and "))
    }

    fn filler(&self, e: &Entity, k: usize) -> String {
        let craft = CRAFTS[(e.number as usize + k) % CRAFTS.len()];
        match e.kind {
            Kind::Country => format!(
                "The culture of {} is known for its {} traditions and annual festivals.",
                e.name, craft
            ),
            Kind::City => format!(
                "{} has a river port and several {} markets near the old quarter.",
                e.name, craft
            ),
            Kind::Person => format!(
                "{} spent many years teaching students and writing essays about {}.",
                e.name, craft
            ),
            Kind::Company => format!(
                "{} employs several hundred workers and sells {} across the region.{}",
                e.name,
                PRODUCTS[e.number as usize % PRODUCTS.len()],
                if k == 1 {
                    self.listing(" Its staff includes {}.", &e.staff)
                } else {
                    String::new()
                }
            ),
            Kind::Film => format!(
                "{} received mixed reviews from critics and was shown at several festivals.",
                e.name
            ),
        }
    }

    fn pick(&self, kind: Kind, rng: &mut ChaCha8Rng) -> usize {
        *self.by_kind[&kind].choose(rng).expect("every kind has entities")
    }
}

fn build_world(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<World> {
    let n = cfg.num_articles;
    let counts = [
        (Kind::Country, (n * 4 / 100).max(2)),
        (Kind::City, (n * 20 / 100).max(4)),
        (Kind::Company, (n * 16 / 100).max(3)),
        (Kind::Film, (n * 30 / 100).max(5)),
    ];
    let fixed: usize = counts.iter().map(|c| c.1).sum();
    if fixed >= n {
        return Err(Error::Config("too few articles for the entity mix".into()));
    }
    let counts: Vec<(Kind, usize)> = counts.into_iter().chain([(Kind::Person, n - fixed)]).collect();
    let words_needed: usize = counts
        .iter()
        .map(|&(k, c)| {
            c * if matches!(k, Kind::Person | Kind::Film) {
                2
            } else {
                1
            }
        })
        .sum();
    if cfg.vocabulary_size < words_needed {
        return Err(Error::Config(format!(
            "vocabulary of {} words cannot give {} articles distinct names; need {words_needed}",
            cfg.vocabulary_size, n
        )));
    }
    let mut vocab = invent_vocabulary(rng, cfg.vocabulary_size, &template_words())?.into_iter();
    let mut entities = Vec::with_capacity(n);
    let mut by_kind: HashMap<Kind, Vec<usize>> = HashMap::new();
    for &(kind, c) in &counts {
        for _ in 0..c {
            let words = if matches!(kind, Kind::Person | Kind::Film) {
                2
            } else {
                1
            };
            let name = (0..words)
                .map(|_| vocab.next().expect("vocabulary size checked"))
                .collect::<Vec<_>>()
                .join(" ");
            let word = match kind {
                Kind::Country => *REGIONS.choose(rng).expect("non-empty"),
                Kind::Person => *OCCUPATIONS.choose(rng).expect("non-empty"),
                _ => "",
            };
            by_kind.entry(kind).or_default().push(entities.len());
            entities.push(Entity {
                kind,
                name,
                links: Vec::new(),
                mentions: Vec::new(),
                staff: Vec::new(),
                year: rng.random_range(1800..2000),
                number: rng.random_range(2..90),
                word,
            });
        }
    }
    let mut world = World { entities, by_kind };
    for i in 0..world.entities.len() {
        let links = match world.entities[i].kind {
            Kind::Country => vec![],
            Kind::City => vec![world.pick(Kind::Country, rng)],
            Kind::Person => vec![world.pick(Kind::City, rng), world.pick(Kind::Company, rng)],
            Kind::Company => vec![world.pick(Kind::City, rng), world.pick(Kind::Person, rng)],
            Kind::Film => vec![world.pick(Kind::Person, rng), world.pick(Kind::Company, rng)],
        };
        match world.entities[i].kind {
            Kind::Film => world.entities[links[1]].mentions.push(i),
            Kind::Company => world.entities[links[0]].mentions.push(i),
            Kind::Person => world.entities[links[1]].staff.push(i),
            _ => {}
        }
        world.entities[i].links = links;
    }
    Ok(world)
}

fn build_corpus(world: &World, cfg: &SyntheticConfig) -> Result<Corpus> {
    let mut paras = Vec::new();
    for e in &world.entities {
        for k in 0..cfg.paragraphs_per_article {
            let (text, links) = if k == 0 {
                (
                    world.intro(e),
                    e.links.iter().map(|&l| world.entities[l].name.clone()).collect(),
                )
            } else {
                (world.filler(e, k), Vec::new())
            };
            paras.push(Paragraph {
                para_id: Paragraph::make_id(&e.name, k as u32),
                article_title: e.name.clone(),
                para_index: k as u32,
                text,
                out_links: links,
                is_introductory: k == 0,
            });
        }
    }
    Corpus::from_paragraphs(paras)
}

/// One question template: entity kind asked about, the link slot followed for bridge questions
/// (`None` for 1-hop), and how to phrase and answer it.
struct Template {
    kind: Kind,
    hop: Option<usize>,
    answer: fn(&World, usize) -> String,
    disjoint: &'static str,
    overlapping: &'static str,
}

fn answer_city(w: &World, e: usize) -> String {
    w.entities[w.entities[e].links[0]].name.clone()
}
fn answer_word(w: &World, e: usize) -> String {
    w.entities[e].word.to_string()
}
fn answer_year(w: &World, e: usize) -> String {
    w.entities[e].year.to_string()
}
fn answer_number(w: &World, e: usize) -> String {
    w.entities[e].number.to_string()
}
fn answer_link0(w: &World, e: usize) -> String {
    w.entities[w.entities[e].links[0]].name.clone()
}
fn answer_link1(w: &World, e: usize) -> String {
    w.entities[w.entities[e].links[1]].name.clone()
}

const BRIDGE: &[Template] = &[
    Template {
        kind: Kind::Film,
        hop: Some(0),
        answer: answer_city,
        disjoint: "What is the hometown of the filmmaker of {}?",
        overlapping: "In which city was the person who directed {} born?",
    },
    Template {
        kind: Kind::Film,
        hop: Some(0),
        answer: answer_word,
        disjoint: "What profession does the filmmaker of {} pursue?",
        overlapping: "What kind of worker is the person who directed {}?",
    },
    Template {
        kind: Kind::Company,
        hop: Some(1),
        answer: answer_city,
        disjoint: "What is the hometown of the originator of {}?",
        overlapping: "In which city was the person who established {} born?",
    },
    Template {
        kind: Kind::Company,
        hop: Some(1),
        answer: answer_word,
        disjoint: "What profession does the originator of {} pursue?",
        overlapping: "What kind of worker established {}?",
    },
    Template {
        kind: Kind::Person,
        hop: Some(0),
        answer: answer_link0,
        disjoint: "Which nation contains the birthplace of {}?",
        overlapping: "In which state is the city where {} was born located?",
    },
    Template {
        kind: Kind::Person,
        hop: Some(0),
        answer: answer_year,
        disjoint: "When was the birthplace of {} settled?",
        overlapping: "When was the city where {} was born founded?",
    },
    Template {
        kind: Kind::City,
        hop: Some(0),
        answer: answer_number,
        disjoint: "What is the headcount of the nation containing {}?",
        overlapping: "How many million people live in the state where {} is located?",
    },
];

const ONE_HOP: &[Template] = &[
    Template {
        kind: Kind::Film,
        hop: None,
        answer: answer_link0,
        disjoint: "Who is the filmmaker of {}?",
        overlapping: "Who directed {}?",
    },
    Template {
        kind: Kind::Person,
        hop: None,
        answer: answer_link0,
        disjoint: "What is the hometown of {}?",
        overlapping: "In which city was {} born?",
    },
    Template {
        kind: Kind::Person,
        hop: None,
        answer: answer_word,
        disjoint: "What profession does {} pursue?",
        overlapping: "What kind of worker is {}?",
    },
    Template {
        kind: Kind::City,
        hop: None,
        answer: answer_link0,
        disjoint: "Which nation contains {}?",
        overlapping: "In which state is {} located?",
    },
    Template {
        kind: Kind::Company,
        hop: None,
        answer: answer_year,
        disjoint: "When was {} formed?",
        overlapping: "When was {} established?",
    },
    Template {
        kind: Kind::Company,
        hop: None,
        answer: answer_link1,
        disjoint: "Who is the originator of {}?",
        overlapping: "Who established {}?",
    },
];

/// Lookup structures for the exhaustive validity check.
pub struct QuestionChecker<'a> {
    corpus: &'a Corpus,
    graph: &'a WikiGraph,
    tokens: Vec<HashSet<String>>,
    postings: HashMap<String, Vec<ParaIdx>>,
}

impl<'a> QuestionChecker<'a> {
    pub fn new(corpus: &'a Corpus, graph: &'a WikiGraph) -> Self {
        let tokens: Vec<HashSet<String>> = corpus
            .indices()
            .map(|p| text::content_tokens(corpus.text(p)).into_iter().collect())
            .collect();
        let mut postings: HashMap<String, Vec<ParaIdx>> = HashMap::new();
        for (i, ts) in tokens.iter().enumerate() {
            for t in ts {
                postings.entry(t.clone()).or_default().push(ParaIdx(i as u32));
            }
        }
        QuestionChecker {
            corpus,
            graph,
            tokens,
            postings,
        }
    }

    /// Paragraphs containing every question content term that occurs anywhere in the corpus.
    fn anchors(&self, question: &str) -> Vec<ParaIdx> {
        let terms: BTreeSet<String> = text::content_tokens(question)
            .into_iter()
            .filter(|t| self.postings.contains_key(t))
            .collect();
        let Some(first) = terms.iter().next() else {
            return Vec::new();
        };
        self.postings[first]
            .iter()
            .copied()
            .filter(|&p| terms.iter().all(|t| self.tokens[p.index()].contains(t)))
            .collect()
    }

    fn answered(&self, q: &TrainingQuestion, p: ParaIdx) -> bool {
        q.answered_by(self.corpus.text(p))
    }

    /// Every path the question admits: for 1-hop, anchor paragraphs holding the answer; for
    /// 2-hop, anchor-to-neighbor edges whose target alone holds the answer.
    pub fn answer_paths(&self, q: &TrainingQuestion) -> Vec<Vec<ParaIdx>> {
        let anchors = self.anchors(&q.question);
        let mut out = Vec::new();
        for &a in &anchors {
            if self.answered(q, a) {
                out.push(vec![a]);
            }
        }
        if q.gold_paras.len() == 2 {
            for &a in &anchors {
                if self.answered(q, a) {
                    continue;
                }
                for &b in self.graph.out(a) {
                    if self.answered(q, b) {
                        out.push(vec![a, b]);
                    }
                }
            }
        }
        out
    }

    /// Checks that a span question is answerable by exactly its gold path.
    pub fn check(&self, q: &TrainingQuestion) -> Result<()> {
        if q.answer_type != AnswerType::Span {
            return Ok(());
        }
        let gold: Vec<ParaIdx> = q.gold_indices(self.corpus)?;
        let paths = self.answer_paths(q);
        if paths.len() != 1 || paths[0] != gold {
            return Err(Error::Integrity(format!(
                "question {} admits {} answer paths, expected exactly its gold path",
                q.qid,
                paths.len()
            )));
        }
        Ok(())
    }

    /// Content terms shared by the question and a paragraph.
    pub fn overlap(&self, question: &str, p: ParaIdx) -> Vec<String> {
        let mut v: Vec<String> = text::content_tokens(question)
            .into_iter()
            .filter(|t| self.tokens[p.index()].contains(t))
            .collect();
        v.sort();
        v.dedup();
        v
    }
}

fn intro_id(world: &World, e: usize) -> String {
    Paragraph::make_id(&world.entities[e].name, 0)
}

fn make_span_question(world: &World, t: &Template, e: usize, overlap: bool) -> TrainingQuestion {
    let name = &world.entities[e].name;
    let phrase = if overlap { t.overlapping } else { t.disjoint };
    let question = phrase.replace("{}", name);
    let (gold, answer) = match t.hop {
        None => (vec![intro_id(world, e)], (t.answer)(world, e)),
        Some(slot) => {
            let b = world.entities[e].links[slot];
            (vec![intro_id(world, e), intro_id(world, b)], (t.answer)(world, b))
        }
    };
    TrainingQuestion {
        qid: String::new(),
        question,
        answers: vec![answer],
        answer_bearing: gold.last().cloned(),
        gold_paras: gold,
        answer_type: AnswerType::Span,
    }
}

fn make_comparison(world: &World, a: usize, b: usize) -> Option<TrainingQuestion> {
    let (ya, yb) = (world.entities[a].year, world.entities[b].year);
    if ya == yb {
        return None;
    }
    Some(TrainingQuestion {
        qid: String::new(),
        question: format!(
            "Did {} come out earlier than {}?",
            world.entities[a].name, world.entities[b].name
        ),
        answers: Vec::new(),
        gold_paras: vec![intro_id(world, a), intro_id(world, b)],
        answer_bearing: None,
        answer_type: if ya < yb { AnswerType::Yes } else { AnswerType::No },
    })
}

/// Generates a corpus and questions. Fails when the configuration cannot yield enough valid
/// questions.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = build_world(cfg, &mut rng)?;
    let corpus = build_corpus(&world, cfg)?;
    let (graph, _) = WikiGraph::build(&corpus, Granularity::IntroOnly);
    let checker = QuestionChecker::new(&corpus, &graph);

    let n = cfg.num_questions;
    let n_two = (cfg.hop_mix.two_hop * n as f64).round() as usize;
    let n_cmp = ((cfg.hop_mix.comparison * n as f64).round() as usize).min(n - n_two.min(n));
    let n_one = n - n_two.min(n) - n_cmp;
    let mut plan: Vec<u8> = std::iter::repeat_n(1u8, n_one)
        .chain(std::iter::repeat_n(2u8, n_two.min(n)))
        .chain(std::iter::repeat_n(3u8, n_cmp))
        .collect();
    plan.shuffle(&mut rng);

    let mut used: HashSet<String> = HashSet::new();
    let mut questions = Vec::with_capacity(n);
    let max_attempts = 200 * n + 1000;
    let mut attempts = 0;
    for kind in plan {
        loop {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::Config(format!(
                    "could only generate {} of {n} valid questions",
                    questions.len()
                )));
            }
            let q = match kind {
                3 => {
                    let a = world.pick(Kind::Film, &mut rng);
                    let b = world.pick(Kind::Film, &mut rng);
                    if a == b {
                        continue;
                    }
                    match make_comparison(&world, a, b) {
                        Some(q) => q,
                        None => continue,
                    }
                }
                _ => {
                    let pool = if kind == 1 { ONE_HOP } else { BRIDGE };
                    let t = pool.choose(&mut rng).expect("non-empty");
                    let e = world.pick(t.kind, &mut rng);
                    let q = make_span_question(&world, t, e, cfg.bridge_overlap);
                    if checker.check(&q).is_err() {
                        continue;
                    }
                    if kind == 2 && !cfg.bridge_overlap {
                        let ans = corpus.require(&q.gold_paras[1])?;
                        if !checker.overlap(&q.question, ans).is_empty() {
                            continue;
                        }
                    }
                    q
                }
            };
            if !used.insert(q.question.clone()) {
                continue;
            }
            questions.push(q);
            break;
        }
    }
    for (i, q) in questions.iter_mut().enumerate() {
        q.qid = format!("q{i:05}");
    }
    Ok(SyntheticData {
        corpus,
        graph,
        questions,
    })
}
