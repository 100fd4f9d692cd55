//! Synthetic data, metrics, baselines and experiment orchestration.

pub mod baselines;
pub mod experiment;
pub mod metrics;
pub mod synth;

pub use experiment::{
    run_experiment, ExperimentConfig, ExperimentData, ExperimentOutcome, ExperimentReport, MetricPaths,
    Models, Strategy,
};
pub use metrics::{
    eval_answers, eval_retrieval, AnswerMetrics, AnswerRecord, RetrievalMetrics, RetrievalPrediction,
};
pub use synth::{gen_synthetic, HopMix, QuestionChecker, SyntheticConfig, SyntheticData};
