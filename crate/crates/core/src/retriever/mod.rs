//! Graph-based recurrent retriever: normalized-RNN state, independent sigmoid scoring of each
//! candidate, candidate-set expansion over the hyperlink graph, beam search with an
//! end-of-evidence symbol, the binary cross-entropy training loss and the training loop.

mod beam;
mod loss;
mod train;

pub use beam::{
    beam_search, expand_candidates, search, ModelScorer, PathScorer, RetrievalConfig, RetrievalContext,
    RetrievalMode, SearchOutput, SearchStats,
};
pub use loss::{retriever_loss, LossOutput};
pub use train::{evaluate_loss, train_retriever, TrainConfig, TrainItem, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{take, take_scalar, Checkpoint, NamedTensor};
use crate::corpus::{Corpus, ParaIdx};
use crate::encoder::{EncoderGrads, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::{self, add_into, add_outer, matvec, matvec_t_acc, AdamW, GradView};

/// Below this norm an RNN pre-activation (or the initial state vector) cannot be normalized.
pub const STATE_NORM_GUARD: f64 = 1e-12;

/// A step choice: a paragraph or the end-of-evidence symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Candidate {
    Paragraph(ParaIdx),
    Eoe,
}

/// Learned symbols of the recurrent retriever.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverParams {
    pub dim: usize,
    /// `dim x 2*dim`, row-major; multiplies `[h; w]`.
    pub w_r: Vec<f64>,
    pub b_r: Vec<f64>,
    pub alpha: f64,
    /// Global initial state.
    pub s: Vec<f64>,
    /// Scalar bias of the selection probability.
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverGrads {
    pub w_r: Vec<f64>,
    pub b_r: Vec<f64>,
    pub alpha: f64,
    pub s: Vec<f64>,
    pub b: f64,
}

impl RetrieverGrads {
    pub fn zeros(dim: usize) -> Self {
        RetrieverGrads {
            w_r: vec![0.0; 2 * dim * dim],
            b_r: vec![0.0; dim],
            alpha: 0.0,
            s: vec![0.0; dim],
            b: 0.0,
        }
    }

    pub fn merge(&mut self, other: &RetrieverGrads) {
        add_into(&mut self.w_r, &other.w_r);
        add_into(&mut self.b_r, &other.b_r);
        self.alpha += other.alpha;
        add_into(&mut self.s, &other.s);
        self.b += other.b;
    }

    pub fn scale(&mut self, c: f64) {
        for v in [&mut self.w_r, &mut self.b_r, &mut self.s] {
            v.iter_mut().for_each(|x| *x *= c);
        }
        self.alpha *= c;
        self.b *= c;
    }
}

/// Cached forward state of one normalized RNN step.
#[derive(Debug, Clone)]
pub struct AdvanceTrace {
    input: Vec<f64>,
    unit: Vec<f64>,
    norm: f64,
}

impl RetrieverParams {
    /// `W_r` uniform with fan-in scaling, zero `b_r`, `alpha = 1`, `s` uniform in (-0.1, 0.1),
    /// `b = 0`.
    pub fn init(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("retriever dimension must be at least 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_r = nn::uniform_vec(&mut rng, 2 * dim * dim, (3.0 / (2 * dim) as f64).sqrt());
        let mut s = nn::uniform_vec(&mut rng, dim, 0.1);
        while nn::norm(&s) < 1e-3 {
            s = nn::uniform_vec(&mut rng, dim, 0.1);
        }
        Ok(RetrieverParams {
            dim,
            w_r,
            b_r: vec![0.0; dim],
            alpha: 1.0,
            s,
            b: 0.0,
        })
    }

    /// `alpha * s / |s|`, the state before any question conditioning.
    pub fn base_state(&self) -> Result<Vec<f64>> {
        let n = nn::norm(&self.s);
        if n < STATE_NORM_GUARD {
            return Err(Error::Numerical("initial state vector s has zero norm".into()));
        }
        Ok(self.s.iter().map(|x| self.alpha * x / n).collect())
    }

    /// `h_1`: the base state, advanced once with the question vector in the
    /// question-independent variant.
    pub fn init_state(&self, question_vector: Option<&[f64]>) -> Result<Vec<f64>> {
        let base = self.base_state()?;
        match question_vector {
            None => Ok(base),
            Some(wq) => self.advance(&base, wq),
        }
    }

    pub fn step_logit(&self, h: &[f64], w: &[f64]) -> f64 {
        nn::dot(w, h) + self.b
    }

    /// `sigmoid(w . h + b)`.
    pub fn step_prob(&self, h: &[f64], w: &[f64]) -> f64 {
        nn::sigmoid(self.step_logit(h, w))
    }

    pub fn advance(&self, h: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        Ok(self.advance_traced(h, w)?.0)
    }

    /// `a = W_r [h; w] + b_r`, `h' = alpha * a / |a|`.
    pub fn advance_traced(&self, h: &[f64], w: &[f64]) -> Result<(Vec<f64>, AdvanceTrace)> {
        let d = self.dim;
        let input: Vec<f64> = h.iter().chain(w).copied().collect();
        let mut a = matvec(&self.w_r, d, 2 * d, &input);
        add_into(&mut a, &self.b_r);
        let n = nn::norm(&a);
        if n.is_nan() || n < STATE_NORM_GUARD {
            return Err(Error::Numerical(format!(
                "RNN pre-activation norm {n:e} below guard {STATE_NORM_GUARD:e}"
            )));
        }
        let unit: Vec<f64> = a.iter().map(|x| x / n).collect();
        let out = unit.iter().map(|u| self.alpha * u).collect();
        Ok((out, AdvanceTrace { input, unit, norm: n }))
    }

    /// Back-propagates `dL/dh'` through one step; returns `(dL/dh, dL/dw)`.
    pub fn advance_backward(
        &self,
        trace: &AdvanceTrace,
        g_out: &[f64],
        grads: &mut RetrieverGrads,
    ) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let proj = nn::dot(g_out, &trace.unit);
        grads.alpha += proj;
        let g_a: Vec<f64> = g_out
            .iter()
            .zip(&trace.unit)
            .map(|(g, u)| self.alpha * (g - u * proj) / trace.norm)
            .collect();
        add_outer(&mut grads.w_r, 2 * d, &g_a, &trace.input);
        add_into(&mut grads.b_r, &g_a);
        let mut g_in = vec![0.0; 2 * d];
        matvec_t_acc(&self.w_r, 2 * d, &g_a, &mut g_in);
        let g_w = g_in.split_off(d);
        (g_in, g_w)
    }

    /// Back-propagates `dL/d(base state)` into `alpha` and `s`.
    pub fn base_state_backward(&self, g: &[f64], grads: &mut RetrieverGrads) {
        let n = nn::norm(&self.s);
        let unit: Vec<f64> = self.s.iter().map(|x| x / n).collect();
        let proj = nn::dot(g, &unit);
        grads.alpha += proj;
        for ((gs, gi), u) in grads.s.iter_mut().zip(g).zip(&unit) {
            *gs += self.alpha * (gi - u * proj) / n;
        }
    }

    pub fn apply_update(&mut self, opt: &mut AdamW, grads: &RetrieverGrads, lr: f64) {
        opt.update(
            "retriever.w_r",
            &mut self.w_r,
            GradView::Dense(&grads.w_r),
            true,
            lr,
        );
        opt.update(
            "retriever.b_r",
            &mut self.b_r,
            GradView::Dense(&grads.b_r),
            false,
            lr,
        );
        let mut alpha = [self.alpha];
        opt.update(
            "retriever.alpha",
            &mut alpha,
            GradView::Dense(&[grads.alpha]),
            false,
            lr,
        );
        // alpha is a norm; keep it positive
        self.alpha = alpha[0].max(1e-3);
        opt.update("retriever.s", &mut self.s, GradView::Dense(&grads.s), true, lr);
        let mut b = [self.b];
        opt.update("retriever.b", &mut b, GradView::Dense(&[grads.b]), false, lr);
        self.b = b[0];
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite()
            && self.b.is_finite()
            && [&self.w_r, &self.b_r, &self.s]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let d = self.dim;
        vec![
            NamedTensor::new("retriever.w_r", &[d, 2 * d], self.w_r.clone()),
            NamedTensor::new("retriever.b_r", &[d], self.b_r.clone()),
            NamedTensor::scalar("retriever.alpha", self.alpha),
            NamedTensor::new("retriever.s", &[d], self.s.clone()),
            NamedTensor::scalar("retriever.b", self.b),
        ]
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let sec = ck.section("retriever.");
        let dim = sec
            .get("b_r")
            .and_then(|t| t.dims.first().copied())
            .ok_or_else(|| Error::format("checkpoint", "missing tensor retriever.b_r"))?
            as usize;
        let alpha = take_scalar(&sec, "alpha")?;
        if alpha.is_nan() || alpha <= 0.0 {
            return Err(Error::format("checkpoint", "retriever.alpha must be positive"));
        }
        Ok(RetrieverParams {
            dim,
            w_r: take(&sec, "w_r", &[dim, 2 * dim])?.to_vec(),
            b_r: take(&sec, "b_r", &[dim])?.to_vec(),
            alpha,
            s: take(&sec, "s", &[dim])?.to_vec(),
            b: take_scalar(&sec, "b")?,
        })
    }
}

/// Encoder plus recurrent head: everything needed to score reasoning paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverModel {
    pub encoder: EncoderParams,
    pub params: RetrieverParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: EncoderGrads,
    pub retriever: RetrieverGrads,
}

impl ModelGrads {
    pub fn zeros(model: &RetrieverModel) -> Self {
        ModelGrads {
            encoder: EncoderGrads::zeros(&model.encoder.config),
            retriever: RetrieverGrads::zeros(model.params.dim),
        }
    }

    pub fn merge(&mut self, other: &ModelGrads) {
        self.encoder.merge(&other.encoder);
        self.retriever.merge(&other.retriever);
    }

    pub fn scale(&mut self, c: f64) {
        self.encoder.scale(c);
        self.retriever.scale(c);
    }
}

impl RetrieverModel {
    pub fn init(encoder: crate::encoder::EncoderConfig, seed: u64) -> Result<Self> {
        let dim = encoder.dim;
        Ok(RetrieverModel {
            encoder: EncoderParams::init(encoder, seed)?,
            params: RetrieverParams::init(dim, seed.wrapping_add(0x9e37_79b9))?,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.extend(self.encoder.to_tensors());
        ck.extend(self.params.to_tensors());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let encoder = EncoderParams::from_checkpoint(ck)?;
        let params = RetrieverParams::from_checkpoint(ck)?;
        if encoder.dim() != params.dim {
            return Err(Error::format(
                "checkpoint",
                "encoder and retriever dimensions differ",
            ));
        }
        Ok(RetrieverModel { encoder, params })
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.params.is_finite()
    }

    pub fn apply_update(&mut self, opt: &mut AdamW, grads: &ModelGrads, lr: f64) {
        self.encoder.apply_update(opt, &grads.encoder, lr);
        self.params.apply_update(opt, &grads.retriever, lr);
    }
}

/// An ordered paragraph sequence with its cumulative log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningPath {
    pub paragraphs: Vec<ParaIdx>,
    /// Whether `[EOE]` was selected.
    pub terminated: bool,
    pub log_score: f64,
}

impl ReasoningPath {
    pub fn ids<'a>(&self, corpus: &'a Corpus) -> Vec<&'a str> {
        self.paragraphs.iter().map(|&p| corpus.id(p)).collect()
    }
}

/// Paragraphs eligible at step `step` (1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub step: usize,
    pub paragraphs: Vec<ParaIdx>,
    pub includes_eoe: bool,
}

/// Negatives scored at one training step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepNegatives {
    pub paragraphs: Vec<ParaIdx>,
    pub eoe: bool,
}

/// A supervised path (without the trailing `[EOE]`, which is implicit) and its per-step
/// negatives; `negatives.len() == paragraphs.len() + 1`, the last entry belonging to the `[EOE]`
/// step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPath {
    pub paragraphs: Vec<ParaIdx>,
    pub negatives: Vec<StepNegatives>,
}

impl TrainingPath {
    pub fn validate(&self) -> Result<()> {
        if self.paragraphs.is_empty() {
            return Err(Error::Usage("training path has no paragraphs".into()));
        }
        if self.negatives.len() != self.paragraphs.len() + 1 {
            return Err(Error::Usage(format!(
                "training path of {} paragraphs needs {} negative sets, got {}",
                self.paragraphs.len(),
                self.paragraphs.len() + 1,
                self.negatives.len()
            )));
        }
        for (t, neg) in self.negatives.iter().enumerate() {
            if let Some(&gold) = self.paragraphs.get(t) {
                if neg.paragraphs.contains(&gold) {
                    return Err(Error::Usage(format!(
                        "step {} negatives contain the gold paragraph",
                        t + 1
                    )));
                }
            } else if neg.eoe {
                return Err(Error::Usage(
                    "[EOE] cannot be a negative at the [EOE] step".into(),
                ));
            }
        }
        Ok(())
    }

    /// Steps as `(gold choice, negatives)`, the final step choosing `[EOE]`.
    pub fn steps(&self) -> impl Iterator<Item = (Candidate, &StepNegatives)> {
        self.paragraphs
            .iter()
            .map(|&p| Candidate::Paragraph(p))
            .chain(std::iter::once(Candidate::Eoe))
            .zip(&self.negatives)
    }
}
