//! Multi-hop open-domain question answering over a hyperlinked paragraph corpus: a recurrent
//! retriever that scores reasoning paths over the link graph, and a reader that re-ranks the
//! retrieved paths and extracts an answer span.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod nn;
pub mod reader;
pub mod retriever;
pub mod supervision;
pub mod text;
pub mod tfidf;

pub use corpus::{build_graph, ingest_corpus, Corpus, Granularity, ParaIdx, Paragraph, WikiGraph};
pub use error::{Error, Result};
pub use retriever::{ReasoningPath, RetrievalConfig, RetrievalMode, RetrieverModel, TrainingPath};
pub use tfidf::SparseIndex;
