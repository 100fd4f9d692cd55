//! Hashed unigram/bigram TF-IDF index used for the initial candidate set and negative mining.
//!
//! `weight(f, d) = ln(1 + tf(f, d)) * idf(f)` with
//! `idf(f) = max(0, ln((N - N_f + 0.5) / (N_f + 0.5)))`. Queries are vectorized the same way and
//! scored by dot product, summed in ascending feature order.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_f64, read_u32, read_u64, Corpus, ParaIdx};
use crate::error::{Error, Result};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    pub bucket_count: u32,
    /// 1 = unigrams only, 2 = unigrams + bigrams.
    pub ngrams: u32,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            bucket_count: 1 << 24,
            ngrams: 2,
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.bucket_count.is_power_of_two() {
            return Err(Error::Config(format!(
                "bucket count {} is not a power of two",
                self.bucket_count
            )));
        }
        if !(1..=2).contains(&self.ngrams) {
            return Err(Error::Config(format!(
                "ngrams must be 1 or 2, got {}",
                self.ngrams
            )));
        }
        Ok(())
    }
}

/// A scored document from [`SparseIndex::top_f`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub doc: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseIndex {
    config: IndexConfig,
    doc_ids: Vec<String>,
    /// Sorted by feature id.
    doc_freq: Vec<(u32, u64)>,
    row_ptr: Vec<u64>,
    cols: Vec<u32>,
    weights: Vec<f64>,
    idf: HashMap<u32, f64>,
    postings: HashMap<u32, Vec<(u32, f64)>>,
}

pub fn idf(num_docs: u64, doc_freq: u64) -> f64 {
    let n = num_docs as f64;
    let nf = doc_freq as f64;
    ((n - nf + 0.5) / (nf + 0.5)).ln().max(0.0)
}

fn term_counts(text: &str, config: &IndexConfig) -> BTreeMap<u32, u32> {
    let tokens = text::content_tokens(text);
    let mut counts = BTreeMap::new();
    for f in text::hashed_ngrams(&tokens, config.ngrams, config.bucket_count) {
        *counts.entry(f).or_insert(0u32) += 1;
    }
    counts
}

impl SparseIndex {
    /// Indexes `(doc_id, text)` pairs. Document order is preserved.
    pub fn build<'a, I>(docs: I, config: IndexConfig) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        config.validate()?;
        let mut doc_ids = Vec::new();
        let mut counts = Vec::new();
        let mut df: BTreeMap<u32, u64> = BTreeMap::new();
        for (id, body) in docs {
            let c = term_counts(body, &config);
            for &f in c.keys() {
                *df.entry(f).or_insert(0) += 1;
            }
            doc_ids.push(id.to_string());
            counts.push(c);
        }
        if doc_ids.is_empty() {
            return Err(Error::Config("cannot index an empty document set".into()));
        }
        let n = doc_ids.len() as u64;
        let idf_map: HashMap<u32, f64> = df.iter().map(|(&f, &d)| (f, idf(n, d))).collect();

        let mut row_ptr = Vec::with_capacity(doc_ids.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0u64);
        for c in &counts {
            for (&f, &tf) in c {
                let w = (1.0 + f64::from(tf)).ln() * idf_map[&f];
                if w > 0.0 {
                    cols.push(f);
                    weights.push(w);
                }
            }
            row_ptr.push(cols.len() as u64);
        }
        Ok(Self::assemble(
            config,
            doc_ids,
            df.into_iter().collect(),
            row_ptr,
            cols,
            weights,
        ))
    }

    fn assemble(
        config: IndexConfig,
        doc_ids: Vec<String>,
        doc_freq: Vec<(u32, u64)>,
        row_ptr: Vec<u64>,
        cols: Vec<u32>,
        weights: Vec<f64>,
    ) -> Self {
        let n = doc_ids.len() as u64;
        let idf_map = doc_freq.iter().map(|&(f, d)| (f, idf(n, d))).collect();
        let mut postings: HashMap<u32, Vec<(u32, f64)>> = HashMap::new();
        for doc in 0..doc_ids.len() {
            let (lo, hi) = (row_ptr[doc] as usize, row_ptr[doc + 1] as usize);
            for k in lo..hi {
                postings
                    .entry(cols[k])
                    .or_default()
                    .push((doc as u32, weights[k]));
            }
        }
        SparseIndex {
            config,
            doc_ids,
            doc_freq,
            row_ptr,
            cols,
            weights,
            idf: idf_map,
            postings,
        }
    }

    /// One document per paragraph, in corpus order, so `Hit::doc` is a [`ParaIdx`].
    pub fn over_paragraphs(corpus: &Corpus, config: IndexConfig) -> Result<Self> {
        Self::build(
            corpus
                .paragraphs()
                .iter()
                .map(|p| (p.para_id.as_str(), p.text.as_str())),
            config,
        )
    }

    /// One document per article (paragraph texts joined by newlines), in title order.
    pub fn over_articles(corpus: &Corpus, config: IndexConfig) -> Result<Self> {
        let texts: Vec<(String, String)> = corpus
            .articles()
            .iter()
            .map(|(title, members)| {
                let body = members
                    .iter()
                    .map(|&m| corpus.text(m))
                    .collect::<Vec<_>>()
                    .join("\n");
                (title.clone(), body)
            })
            .collect();
        Self::build(texts.iter().map(|(a, b)| (a.as_str(), b.as_str())), config)
    }

    pub fn config(&self) -> IndexConfig {
        self.config
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_id(&self, doc: u32) -> &str {
        &self.doc_ids[doc as usize]
    }

    pub fn doc_freq(&self, feature: u32) -> u64 {
        self.doc_freq
            .binary_search_by_key(&feature, |&(f, _)| f)
            .map(|i| self.doc_freq[i].1)
            .unwrap_or(0)
    }

    /// Stored sparse vector of one document, ascending by feature id.
    pub fn doc_vector(&self, doc: u32) -> impl Iterator<Item = (u32, f64)> + '_ {
        let (lo, hi) = (
            self.row_ptr[doc as usize] as usize,
            self.row_ptr[doc as usize + 1] as usize,
        );
        self.cols[lo..hi]
            .iter()
            .copied()
            .zip(self.weights[lo..hi].iter().copied())
    }

    /// Query vector with the document weighting; zero-weight features dropped.
    pub fn vectorize(&self, query: &str) -> Vec<(u32, f64)> {
        term_counts(query, &self.config)
            .into_iter()
            .filter_map(|(f, tf)| {
                let w = (1.0 + f64::from(tf)).ln() * self.idf.get(&f).copied().unwrap_or(0.0);
                (w > 0.0).then_some((f, w))
            })
            .collect()
    }

    /// All documents with a positive score.
    pub fn score_all(&self, query: &str) -> HashMap<u32, f64> {
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for (f, qw) in self.vectorize(query) {
            if let Some(list) = self.postings.get(&f) {
                for &(doc, dw) in list {
                    *acc.entry(doc).or_insert(0.0) += qw * dw;
                }
            }
        }
        acc.retain(|_, s| *s > 0.0);
        acc
    }

    /// Top-`f` documents by score, ties broken by ascending document id. Zero scores are never
    /// returned.
    pub fn top_f(&self, query: &str, f: usize) -> Vec<Hit> {
        let mut hits: Vec<Hit> = self
            .score_all(query)
            .into_iter()
            .map(|(doc, score)| Hit { doc, score })
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| self.doc_ids[a.doc as usize].cmp(&self.doc_ids[b.doc as usize]))
        });
        hits.truncate(f);
        hits
    }

    const MAGIC: &'static [u8; 5] = b"TFIX1";

    /// `TFIX1`, u32 bucket count, u32 ngram order, u64 N, doc table (u32 length + UTF-8 id),
    /// u64 df entry count + (u32 feature, u64 df) pairs, u64 row pointers (N + 1), u32 feature
    /// ids and f64 weights (nnz each). Little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&self.config.bucket_count.to_le_bytes())?;
        w.write_all(&self.config.ngrams.to_le_bytes())?;
        w.write_all(&(self.doc_ids.len() as u64).to_le_bytes())?;
        for id in &self.doc_ids {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        w.write_all(&(self.doc_freq.len() as u64).to_le_bytes())?;
        for &(f, d) in &self.doc_freq {
            w.write_all(&f.to_le_bytes())?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &p in &self.row_ptr {
            w.write_all(&p.to_le_bytes())?;
        }
        for &c in &self.cols {
            w.write_all(&c.to_le_bytes())?;
        }
        for &x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::format("index", m);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let config = IndexConfig {
            bucket_count: read_u32(&mut r)?,
            ngrams: read_u32(&mut r)?,
        };
        config.validate()?;
        let n = read_u64(&mut r)? as usize;
        let mut doc_ids = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            doc_ids.push(String::from_utf8(buf).map_err(|e| bad(&e.to_string()))?);
        }
        let df_len = read_u64(&mut r)? as usize;
        let mut doc_freq = Vec::with_capacity(df_len.min(1 << 24));
        for _ in 0..df_len {
            let f = read_u32(&mut r)?;
            let d = read_u64(&mut r)?;
            if f >= config.bucket_count || d > n as u64 {
                return Err(bad("document frequency entry out of range"));
            }
            doc_freq.push((f, d));
        }
        if doc_freq.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(bad("document frequencies not sorted"));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            row_ptr.push(read_u64(&mut r)?);
        }
        if row_ptr[0] != 0 || row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(bad("row pointers not monotone"));
        }
        let nnz = row_ptr[n] as usize;
        let mut cols = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            cols.push(read_u32(&mut r)?);
        }
        let mut weights = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let w = read_f64(&mut r)?;
            if !w.is_finite() || w < 0.0 {
                return Err(bad("weight not finite and non-negative"));
            }
            weights.push(w);
        }
        Ok(Self::assemble(config, doc_ids, doc_freq, row_ptr, cols, weights))
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

    /// Fails unless the document table is the corpus' paragraph ids in order.
    pub fn check_paragraph_index(&self, corpus: &Corpus) -> Result<()> {
        if self.doc_ids.len() != corpus.len()
            || self
                .doc_ids
                .iter()
                .zip(corpus.paragraphs())
                .any(|(a, p)| *a != p.para_id)
        {
            return Err(Error::Integrity(
                "index document table does not match the corpus".into(),
            ));
        }
        Ok(())
    }
}

/// Paragraph-level top-`f` over a paragraph index built with [`SparseIndex::over_paragraphs`].
pub fn top_f(index: &SparseIndex, query: &str, f: usize) -> Vec<(ParaIdx, f64)> {
    index
        .top_f(query, f)
        .into_iter()
        .map(|h| (ParaIdx(h.doc), h.score))
        .collect()
}

/// Number of articles pooled by [`two_stage_top_f`].
pub const TWO_STAGE_ARTICLES: usize = 50;

/// Retrieves the top articles, then ranks every paragraph of those articles with a TF-IDF index
/// built over the pooled paragraphs alone. Pooled paragraphs with zero local score are kept (ranked
/// last), so a paragraph can be reached through its article even when its own text misses the
/// query.
pub fn two_stage_top_f(
    article_index: &SparseIndex,
    corpus: &Corpus,
    query: &str,
    f: usize,
) -> Result<Vec<(ParaIdx, f64)>> {
    let articles = article_index.top_f(query, TWO_STAGE_ARTICLES);
    let pool: Vec<ParaIdx> = articles
        .iter()
        .filter_map(|h| corpus.article(article_index.doc_id(h.doc)))
        .flat_map(|members| members.iter().copied())
        .collect();
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let local = SparseIndex::build(
        pool.iter().map(|&p| (corpus.id(p), corpus.text(p))),
        article_index.config(),
    )?;
    let scores = local.score_all(query);
    let mut ranked: Vec<(ParaIdx, f64)> = pool
        .iter()
        .enumerate()
        .map(|(k, &p)| (p, scores.get(&(k as u32)).copied().unwrap_or(0.0)))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| corpus.id(a.0).cmp(corpus.id(b.0)))
    });
    ranked.truncate(f);
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(texts: &[&str]) -> SparseIndex {
        let ids: Vec<String> = (0..texts.len()).map(|i| format!("d{i}")).collect();
        SparseIndex::build(
            ids.iter().map(String::as_str).zip(texts.iter().copied()),
            IndexConfig {
                bucket_count: 1 << 20,
                ngrams: 2,
            },
        )
        .unwrap()
    }

    #[test]
    fn hand_computed_weight() {
        let idx = small(&["alpha beta", "beta gamma", "gamma delta"]);
        let f = text::hash_feature("alpha", 1 << 20);
        let expected_idf = (2.5f64 / 1.5).ln();
        assert!((expected_idf - 0.5108).abs() < 1e-4);
        let w = idx.doc_vector(0).find(|&(g, _)| g == f).unwrap().1;
        assert!((w - 2f64.ln() * expected_idf).abs() < 1e-12);
        assert!((w - 0.3541).abs() < 1e-4);
        let hits = idx.top_f("alpha", 5);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].doc, 0);
        assert!((hits[0].score - 0.1254).abs() < 1e-4);
    }

    #[test]
    fn ubiquitous_term_has_zero_weight() {
        let idx = small(&["common x", "common y", "common z"]);
        let f = text::hash_feature("common", 1 << 20);
        assert!(idx.doc_vector(0).all(|(g, _)| g != f));
        assert!(idx.top_f("common", 3).is_empty());
    }

    #[test]
    fn empty_document_and_empty_query() {
        let idx = small(&["the of and", "alpha", "beta"]);
        assert_eq!(idx.doc_vector(0).count(), 0);
        assert!(idx.top_f("", 3).is_empty());
        assert!(idx.top_f("unseen words", 3).is_empty());
    }

    #[test]
    fn ties_break_by_doc_id() {
        let idx = small(&["zeta", "alpha", "alpha", "other", "more"]);
        let hits = idx.top_f("alpha", 3);
        assert_eq!(hits.iter().map(|h| h.doc).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(hits[0].score, hits[1].score);
    }

    #[test]
    fn bucket_count_must_be_power_of_two() {
        let r = SparseIndex::build(
            [("a", "x")],
            IndexConfig {
                bucket_count: 1000,
                ngrams: 2,
            },
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let idx = small(&["alpha beta", "beta gamma delta", "gamma"]);
        let mut a = Vec::new();
        idx.write_to(&mut a).unwrap();
        let back = SparseIndex::read_from(a.as_slice()).unwrap();
        assert_eq!(back, idx);
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);
    }
}
