//! Shared fixtures for the retrieval benchmarks.

use pathqa::encoder::EncoderConfig;
use pathqa::harness::{gen_synthetic, SyntheticConfig};
use pathqa::retriever::RetrievalContext;
use pathqa::supervision::TrainingQuestion;
use pathqa::tfidf::IndexConfig;
use pathqa::{Corpus, RetrieverModel, SparseIndex, WikiGraph};

/// A synthetic corpus with its graph, paragraph index and an untrained retriever. Search cost
/// depends on graph shape and beam settings, not on how well the model is trained.
pub struct Setup {
    pub corpus: Corpus,
    pub graph: WikiGraph,
    pub index: SparseIndex,
    pub model: RetrieverModel,
    pub questions: Vec<TrainingQuestion>,
}

impl Setup {
    pub fn synthetic(num_articles: usize, dim: usize) -> Setup {
        let data = gen_synthetic(&SyntheticConfig {
            num_articles,
            vocabulary_size: 2 * num_articles,
            num_questions: 50,
            ..SyntheticConfig::default()
        })
        .expect("synthetic data");
        let index = SparseIndex::over_paragraphs(&data.corpus, IndexConfig::default()).expect("index");
        let encoder = EncoderConfig {
            dim,
            ..EncoderConfig::default()
        };
        Setup {
            model: RetrieverModel::init(encoder, 0).expect("model"),
            corpus: data.corpus,
            graph: data.graph,
            index,
            questions: data.questions,
        }
    }

    pub fn context(&self) -> RetrievalContext<'_> {
        RetrievalContext {
            corpus: &self.corpus,
            graph: &self.graph,
            index: &self.index,
            article_index: None,
        }
    }
}
