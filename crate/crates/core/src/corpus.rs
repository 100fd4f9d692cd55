//! Paragraph corpus ingestion and the hyperlink graph over it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Dense index of a paragraph inside a [`Corpus`]; indices follow ascending `para_id` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParaIdx(pub u32);

impl ParaIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ParaIdx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// One retrieval unit. Serialized as one line of the corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paragraph {
    #[serde(rename = "id")]
    pub para_id: String,
    #[serde(rename = "title")]
    pub article_title: String,
    #[serde(rename = "para_idx")]
    pub para_index: u32,
    pub text: String,
    #[serde(rename = "links")]
    pub out_links: Vec<String>,
    #[serde(rename = "is_intro")]
    pub is_introductory: bool,
}

impl Paragraph {
    pub fn make_id(title: &str, para_index: u32) -> String {
        format!("{title}/{para_index}")
    }
}

fn nfc(s: &str) -> String {
    s.nfc().collect()
}

/// An immutable, validated set of paragraphs grouped into articles.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    paragraphs: Vec<Paragraph>,
    by_id: HashMap<String, ParaIdx>,
    articles: BTreeMap<String, Vec<ParaIdx>>,
    dangling: Vec<(ParaIdx, String)>,
}

impl Corpus {
    /// Validates and indexes paragraphs. Titles, ids and link targets are NFC-normalized.
    pub fn from_paragraphs(paragraphs: Vec<Paragraph>) -> Result<Self> {
        let mut paragraphs: Vec<Paragraph> = paragraphs
            .into_iter()
            .map(|mut p| {
                p.para_id = nfc(&p.para_id);
                p.article_title = nfc(&p.article_title);
                p.out_links = p.out_links.iter().map(|l| nfc(l)).collect();
                p
            })
            .collect();
        paragraphs.sort_by(|a, b| a.para_id.cmp(&b.para_id));
        for pair in paragraphs.windows(2) {
            if pair[0].para_id == pair[1].para_id {
                return Err(Error::Integrity(format!(
                    "duplicate paragraph id {:?}",
                    pair[0].para_id
                )));
            }
        }
        if paragraphs.len() > u32::MAX as usize {
            return Err(Error::Integrity("corpus exceeds 2^32 paragraphs".into()));
        }

        let mut by_id = HashMap::with_capacity(paragraphs.len());
        let mut articles: BTreeMap<String, Vec<ParaIdx>> = BTreeMap::new();
        for (i, p) in paragraphs.iter().enumerate() {
            if p.text.is_empty() {
                return Err(Error::Integrity(format!(
                    "paragraph {:?} has empty text",
                    p.para_id
                )));
            }
            let expected = Paragraph::make_id(&p.article_title, p.para_index);
            if p.para_id != expected {
                return Err(Error::Integrity(format!(
                    "paragraph id {:?} does not match <title>/<para_idx> = {expected:?}",
                    p.para_id
                )));
            }
            let idx = ParaIdx(i as u32);
            by_id.insert(p.para_id.clone(), idx);
            articles.entry(p.article_title.clone()).or_default().push(idx);
        }
        for (title, members) in articles.iter_mut() {
            members.sort_by_key(|&i| paragraphs[i.index()].para_index);
            for (expected, &m) in members.iter().enumerate() {
                if paragraphs[m.index()].para_index as usize != expected {
                    return Err(Error::Integrity(format!(
                        "article {title:?}: paragraph indices are not contiguous from 0"
                    )));
                }
            }
        }

        let mut dangling = Vec::new();
        for (i, p) in paragraphs.iter().enumerate() {
            for link in &p.out_links {
                if !articles.contains_key(link) {
                    dangling.push((ParaIdx(i as u32), link.clone()));
                }
            }
        }

        Ok(Corpus {
            paragraphs,
            by_id,
            articles,
            dangling,
        })
    }

    pub fn len(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.is_empty()
    }

    pub fn paragraphs(&self) -> &[Paragraph] {
        &self.paragraphs
    }

    pub fn get(&self, idx: ParaIdx) -> &Paragraph {
        &self.paragraphs[idx.index()]
    }

    pub fn text(&self, idx: ParaIdx) -> &str {
        &self.paragraphs[idx.index()].text
    }

    pub fn id(&self, idx: ParaIdx) -> &str {
        &self.paragraphs[idx.index()].para_id
    }

    pub fn lookup(&self, para_id: &str) -> Option<ParaIdx> {
        self.by_id.get(para_id).copied()
    }

    pub fn require(&self, para_id: &str) -> Result<ParaIdx> {
        self.lookup(para_id)
            .ok_or_else(|| Error::UnknownId(para_id.to_string()))
    }

    pub fn indices(&self) -> impl Iterator<Item = ParaIdx> + '_ {
        (0..self.paragraphs.len() as u32).map(ParaIdx)
    }

    /// Articles in title order, each with its paragraphs in `para_index` order.
    pub fn articles(&self) -> &BTreeMap<String, Vec<ParaIdx>> {
        &self.articles
    }

    pub fn article(&self, title: &str) -> Option<&[ParaIdx]> {
        self.articles.get(title).map(Vec::as_slice)
    }

    /// Out-links whose target article is not in the corpus, as `(source, title)`.
    pub fn dangling_links(&self) -> &[(ParaIdx, String)] {
        &self.dangling
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.paragraphs)
    }
}

/// Reads a corpus file: one JSON paragraph per line. Blank lines are ignored.
pub fn ingest_corpus(path: &Path) -> Result<Corpus> {
    let paragraphs: Vec<Paragraph> = read_jsonl(path)?;
    Corpus::from_paragraphs(paragraphs)
}

/// Reads one JSON record per non-empty line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Which paragraphs of a linked article a hyperlink resolves to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    IntroOnly,
    AllParagraphs,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intro" | "intro-only" => Ok(Granularity::IntroOnly),
            "all" | "all-paragraphs" => Ok(Granularity::AllParagraphs),
            other => Err(Error::Config(format!("unknown granularity {other:?}"))),
        }
    }
}

/// Edge bookkeeping produced alongside a graph.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GraphBuildReport {
    /// Distinct hyperlink edges that are neither self-edges nor within one article.
    pub hyperlink_edges: usize,
    /// Unordered pairs of paragraphs sharing an article; each contributes two directed edges.
    pub within_doc_pairs: usize,
    pub dangling_links: usize,
    pub total_edges: usize,
}

/// Directed adjacency over corpus paragraphs: hyperlink edges plus symmetric within-article
/// edges. Node `i` is the corpus paragraph with `ParaIdx(i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WikiGraph {
    ids: Vec<String>,
    adjacency: Vec<Vec<ParaIdx>>,
}

impl WikiGraph {
    pub fn build(corpus: &Corpus, granularity: Granularity) -> (WikiGraph, GraphBuildReport) {
        let n = corpus.len();
        let mut adj: Vec<BTreeSet<ParaIdx>> = vec![BTreeSet::new(); n];
        let mut report = GraphBuildReport::default();

        for members in corpus.articles().values() {
            let k = members.len();
            report.within_doc_pairs += k * (k.saturating_sub(1)) / 2;
            for &u in members {
                for &v in members {
                    if u != v {
                        adj[u.index()].insert(v);
                    }
                }
            }
        }

        for src in corpus.indices() {
            let p = corpus.get(src);
            for link in &p.out_links {
                let Some(targets) = corpus.article(link) else {
                    report.dangling_links += 1;
                    continue;
                };
                let same_article = *link == p.article_title;
                let resolved: Vec<ParaIdx> = match granularity {
                    Granularity::AllParagraphs => targets.to_vec(),
                    Granularity::IntroOnly => {
                        let intros: Vec<ParaIdx> = targets
                            .iter()
                            .copied()
                            .filter(|&t| corpus.get(t).is_introductory)
                            .collect();
                        if intros.is_empty() {
                            targets[..1].to_vec()
                        } else {
                            intros
                        }
                    }
                };
                for dst in resolved {
                    if dst == src || same_article {
                        continue;
                    }
                    if adj[src.index()].insert(dst) {
                        report.hyperlink_edges += 1;
                    }
                }
            }
        }

        let adjacency: Vec<Vec<ParaIdx>> = adj.into_iter().map(|s| s.into_iter().collect()).collect();
        report.total_edges = adjacency.iter().map(Vec::len).sum();
        let ids = corpus.paragraphs().iter().map(|p| p.para_id.clone()).collect();
        (WikiGraph { ids, adjacency }, report)
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    pub fn id(&self, idx: ParaIdx) -> &str {
        &self.ids[idx.index()]
    }

    /// Sorted out-neighbors of a node.
    pub fn out(&self, idx: ParaIdx) -> &[ParaIdx] {
        &self.adjacency[idx.index()]
    }

    pub fn has_edge(&self, from: ParaIdx, to: ParaIdx) -> bool {
        self.adjacency[from.index()].binary_search(&to).is_ok()
    }

    /// Sorted out-neighbor ids of `para_id`.
    pub fn neighbors(&self, para_id: &str) -> Result<Vec<&str>> {
        let idx = self
            .ids
            .binary_search_by(|probe| probe.as_str().cmp(para_id))
            .map_err(|_| Error::UnknownId(para_id.to_string()))?;
        Ok(self.adjacency[idx]
            .iter()
            .map(|&n| self.ids[n.index()].as_str())
            .collect())
    }

    /// Fails unless the graph's node table is exactly the corpus' paragraph ids.
    pub fn check_against(&self, corpus: &Corpus) -> Result<()> {
        if self.ids.len() != corpus.len()
            || self
                .ids
                .iter()
                .zip(corpus.paragraphs())
                .any(|(a, p)| *a != p.para_id)
        {
            return Err(Error::Integrity(
                "graph node table does not match the corpus".into(),
            ));
        }
        Ok(())
    }

    const MAGIC: &'static [u8; 5] = b"HGRF1";

    /// `HGRF1`, u64 node count, then per node: u32 id length, id bytes, u32 neighbor count,
    /// u32 neighbor node indices. Little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for (id, nbrs) in self.ids.iter().zip(&self.adjacency) {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            w.write_all(&(nbrs.len() as u32).to_le_bytes())?;
            for n in nbrs {
                w.write_all(&n.0.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::format("graph", "bad magic"));
        }
        let n = read_u64(&mut r)? as usize;
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        let mut adjacency = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let id = String::from_utf8(buf).map_err(|e| Error::format("graph", e.to_string()))?;
            let deg = read_u32(&mut r)? as usize;
            let mut nbrs = Vec::with_capacity(deg);
            for _ in 0..deg {
                nbrs.push(ParaIdx(read_u32(&mut r)?));
            }
            ids.push(id);
            adjacency.push(nbrs);
        }
        for (i, nbrs) in adjacency.iter().enumerate() {
            if nbrs.windows(2).any(|w| w[0] >= w[1]) || nbrs.iter().any(|x| x.index() >= n || x.index() == i)
            {
                return Err(Error::format("graph", format!("invalid adjacency for node {i}")));
            }
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format("graph", "node ids not strictly ascending"));
        }
        Ok(WikiGraph { ids, adjacency })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

pub fn build_graph(corpus: &Corpus, granularity: Granularity) -> (WikiGraph, GraphBuildReport) {
    WikiGraph::build(corpus, granularity)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
