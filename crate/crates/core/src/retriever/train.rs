use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{retriever_loss, ModelGrads, RetrieverModel, TrainingPath};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::nn::{scheduled_lr, AdamW, OptimConfig};

/// One training question with its supervised paths (gold, plus any augmented ones).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainItem {
    pub question: String,
    pub paths: Vec<TrainingPath>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `false` trains the non-recurrent re-ranking baseline.
    pub recurrent: bool,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed: 0,
            recurrent: true,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.optim.lr.is_nan() || self.optim.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean per-question loss over the training set before the first update.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

fn batch_grads(
    model: &RetrieverModel,
    corpus: &Corpus,
    batch: &[&TrainItem],
    recurrent: bool,
) -> Result<(f64, ModelGrads)> {
    let outs: Vec<_> = batch
        .par_iter()
        .map(|it| retriever_loss(model, corpus, &it.question, &it.paths, recurrent))
        .collect::<Result<_>>()?;
    // reduce in index order so the sum does not depend on scheduling
    let mut grads = ModelGrads::zeros(model);
    let mut loss = 0.0;
    for o in &outs {
        loss += o.loss;
        grads.merge(&o.grads);
    }
    grads.scale(1.0 / batch.len() as f64);
    Ok((loss, grads))
}

/// Mean per-question loss.
pub fn evaluate_loss(
    model: &RetrieverModel,
    corpus: &Corpus,
    items: &[TrainItem],
    recurrent: bool,
) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let losses: Vec<f64> = items
        .par_iter()
        .map(|it| retriever_loss(model, corpus, &it.question, &it.paths, recurrent).map(|o| o.loss))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / items.len() as f64)
}

/// Mini-batch AdamW training. Results are identical for any rayon thread count.
pub fn train_retriever(
    model: &mut RetrieverModel,
    corpus: &Corpus,
    items: &[TrainItem],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::Usage("no training examples".into()));
    }
    for it in items {
        for p in &it.paths {
            p.validate()?;
        }
    }
    let initial_loss = evaluate_loss(model, corpus, items, config.recurrent)?;
    let batches_per_epoch = items.len().div_ceil(config.batch_size);
    let total = batches_per_epoch * config.epochs;
    let mut opt = AdamW::new(config.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let (loss, grads) = batch_grads(model, corpus, &batch, config.recurrent)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training loss diverged at epoch {epoch}, step {step}"
                )));
            }
            epoch_loss += loss;
            opt.begin_step();
            model.apply_update(&mut opt, &grads, scheduled_lr(&config.optim, step, total));
            if !model.is_finite() {
                return Err(Error::Numerical(format!(
                    "parameters became non-finite at epoch {epoch}, step {step}"
                )));
            }
            step += 1;
        }
        epoch_losses.push(epoch_loss / items.len() as f64);
    }
    let final_loss = evaluate_loss(model, corpus, items, config.recurrent)?;
    Ok(TrainReport {
        initial_loss,
        final_loss,
        epoch_losses,
        steps: step,
    })
}
