//! Reference candidate encoder: a trainable hashed-feature model that maps a (question,
//! paragraph) pair to a `d`-vector.
//!
//! Forward pass: hashed unigram/bigram features of `question ⊕ [SEP] ⊕ paragraph` (plus one
//! `[MATCH]` feature per paragraph token that also occurs in the question) are mean-pooled from an
//! embedding table, projected, squashed with `tanh` and standardized across dimensions. The
//! `[EOE]` vector goes through the same standardization so its norm matches candidate vectors.

use std::collections::{BTreeMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{take, take_scalar, Checkpoint, NamedTensor};
use crate::corpus::ParaIdx;
use crate::error::{Error, Result};
use crate::nn::{
    self, add_into, add_outer, matvec, matvec_t_acc, standardize, standardize_backward, AdamW, GradView,
    SparseRows, StdCache,
};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    QuestionDependent,
    QuestionIndependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub bucket_count: u32,
    pub ngrams: u32,
    /// Content tokens kept per side (question, paragraph).
    pub max_tokens: usize,
    pub match_feature: bool,
    pub mode: EncoderMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            bucket_count: 1 << 16,
            ngrams: 2,
            max_tokens: 256,
            match_feature: true,
            mode: EncoderMode::QuestionDependent,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("encoder dimension must be at least 2".into()));
        }
        if !self.bucket_count.is_power_of_two() {
            return Err(Error::Config(
                "encoder bucket count must be a power of two".into(),
            ));
        }
        Ok(())
    }

    fn rows(&self) -> usize {
        self.bucket_count as usize + 2
    }

    fn sep_row(&self) -> u32 {
        self.bucket_count
    }

    fn match_row(&self) -> u32 {
        self.bucket_count + 1
    }
}

/// Pooling weights over embedding rows: `(row, count / total)`, ascending by row.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub features: Vec<(u32, f64)>,
}

impl EncoderInput {
    fn from_rows(rows: impl IntoIterator<Item = u32>) -> Self {
        let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
        let mut total = 0u32;
        for r in rows {
            *counts.entry(r).or_insert(0) += 1;
            total += 1;
        }
        let total = f64::from(total.max(1));
        EncoderInput {
            features: counts
                .into_iter()
                .map(|(r, c)| (r, f64::from(c) / total))
                .collect(),
        }
    }
}

/// Pre-tokenized question side of a pair encoding.
#[derive(Debug, Clone)]
pub struct QuestionFeatures {
    rows: Vec<u32>,
    tokens: HashSet<String>,
}

/// Which encoded vector a tape slot holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EncodeKey {
    Question,
    Paragraph(ParaIdx),
    Eoe,
}

/// Cached forward state for [`EncoderParams::backward`].
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    input: Option<EncoderInput>,
    pooled: Vec<f64>,
    act: Vec<f64>,
    std: StdCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// `(bucket_count + 2) x dim`; the two extra rows are `[SEP]` and `[MATCH]`.
    pub embedding: Vec<f64>,
    /// `dim x dim`, row-major.
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
    pub eoe: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub embedding: SparseRows,
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
    pub eoe: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.dim;
        EncoderGrads {
            embedding: SparseRows::new(d),
            projection: vec![0.0; d * d],
            bias: vec![0.0; d],
            gain: vec![0.0; d],
            shift: vec![0.0; d],
            eoe: vec![0.0; d],
        }
    }

    pub fn merge(&mut self, other: &EncoderGrads) {
        self.embedding.merge(&other.embedding);
        add_into(&mut self.projection, &other.projection);
        add_into(&mut self.bias, &other.bias);
        add_into(&mut self.gain, &other.gain);
        add_into(&mut self.shift, &other.shift);
        add_into(&mut self.eoe, &other.eoe);
    }

    pub fn scale(&mut self, c: f64) {
        self.embedding.scale(c);
        for v in [
            &mut self.projection,
            &mut self.bias,
            &mut self.gain,
            &mut self.shift,
            &mut self.eoe,
        ] {
            v.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.embedding.rows.values().flatten().all(|&x| x == 0.0)
            && [&self.projection, &self.bias, &self.gain, &self.shift, &self.eoe]
                .iter()
                .all(|v| v.iter().all(|&x| x == 0.0))
    }
}

impl EncoderParams {
    /// Seeded initialization: embeddings and `[EOE]` uniform in (-0.1, 0.1), projection uniform
    /// with fan-in scaling, zero bias, unit gain, zero shift.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let embedding = nn::uniform_vec(&mut rng, config.rows() * d, 0.1);
        let projection = nn::uniform_vec(&mut rng, d * d, (3.0 / d as f64).sqrt());
        let eoe = nn::uniform_vec(&mut rng, d, 0.1);
        Ok(EncoderParams {
            config,
            embedding,
            projection,
            bias: vec![0.0; d],
            gain: vec![1.0; d],
            shift: vec![0.0; d],
            eoe,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn mode(&self) -> EncoderMode {
        self.config.mode
    }

    fn hashed(&self, tokens: &[String]) -> Vec<u32> {
        text::hashed_ngrams(tokens, self.config.ngrams, self.config.bucket_count)
    }

    fn truncated_tokens(&self, s: &str) -> Vec<String> {
        let mut t = text::content_tokens(s);
        t.truncate(self.config.max_tokens);
        t
    }

    pub fn question_features(&self, question: &str) -> QuestionFeatures {
        let tokens = self.truncated_tokens(question);
        QuestionFeatures {
            rows: self.hashed(&tokens),
            tokens: tokens.into_iter().collect(),
        }
    }

    /// `question ⊕ [SEP] ⊕ paragraph` features.
    pub fn pair_input(&self, q: &QuestionFeatures, paragraph: &str) -> EncoderInput {
        let p_tokens = self.truncated_tokens(paragraph);
        let matches = if self.config.match_feature {
            p_tokens.iter().filter(|t| q.tokens.contains(*t)).count()
        } else {
            0
        };
        let rows = q
            .rows
            .iter()
            .copied()
            .chain(std::iter::once(self.config.sep_row()))
            .chain(self.hashed(&p_tokens))
            .chain(std::iter::repeat_n(self.config.match_row(), matches));
        EncoderInput::from_rows(rows)
    }

    /// `text ⊕ [SEP]` features, used by the question-independent variant.
    pub fn single_input(&self, s: &str) -> EncoderInput {
        let tokens = self.truncated_tokens(s);
        EncoderInput::from_rows(
            self.hashed(&tokens)
                .into_iter()
                .chain(std::iter::once(self.config.sep_row())),
        )
    }

    /// Input for a retrieval candidate under the configured mode.
    pub fn candidate_input(&self, q: &QuestionFeatures, paragraph: &str) -> EncoderInput {
        match self.config.mode {
            EncoderMode::QuestionDependent => self.pair_input(q, paragraph),
            EncoderMode::QuestionIndependent => self.single_input(paragraph),
        }
    }

    pub fn forward(&self, input: &EncoderInput) -> (Vec<f64>, EncoderTrace) {
        let d = self.dim();
        let mut pooled = vec![0.0; d];
        for &(row, w) in &input.features {
            let r = row as usize * d;
            nn::axpy(w, &self.embedding[r..r + d], &mut pooled);
        }
        let mut act = matvec(&self.projection, d, d, &pooled);
        for (a, b) in act.iter_mut().zip(&self.bias) {
            *a = (*a + b).tanh();
        }
        let (out, std) = standardize(&act, &self.gain, &self.shift);
        (
            out,
            EncoderTrace {
                input: Some(input.clone()),
                pooled,
                act,
                std,
            },
        )
    }

    pub fn encode(&self, input: &EncoderInput) -> Vec<f64> {
        self.forward(input).0
    }

    fn require_mode(&self, mode: EncoderMode, op: &str) -> Result<()> {
        if self.config.mode != mode {
            return Err(Error::Usage(format!(
                "{op} requires a {mode:?} encoder, this one is {:?}",
                self.config.mode
            )));
        }
        Ok(())
    }

    pub fn encode_pair(&self, question: &str, paragraph: &str) -> Result<Vec<f64>> {
        self.require_mode(EncoderMode::QuestionDependent, "encode_pair")?;
        Ok(self.encode(&self.pair_input(&self.question_features(question), paragraph)))
    }

    pub fn encode_paragraph(&self, paragraph: &str) -> Result<Vec<f64>> {
        self.require_mode(EncoderMode::QuestionIndependent, "encode_paragraph")?;
        Ok(self.encode(&self.single_input(paragraph)))
    }

    pub fn encode_question(&self, question: &str) -> Result<Vec<f64>> {
        self.require_mode(EncoderMode::QuestionIndependent, "encode_question")?;
        Ok(self.encode(&self.single_input(question)))
    }

    /// The `[EOE]` vector after the output standardization.
    pub fn eoe_vector(&self) -> Vec<f64> {
        self.eoe_forward().0
    }

    pub fn eoe_forward(&self) -> (Vec<f64>, EncoderTrace) {
        let (out, std) = standardize(&self.eoe, &self.gain, &self.shift);
        (
            out,
            EncoderTrace {
                input: None,
                pooled: Vec::new(),
                act: self.eoe.clone(),
                std,
            },
        )
    }

    /// Accumulates `dL/dparams` given `dL/d(output)` for one cached forward pass (candidate or
    /// `[EOE]`).
    pub fn backward(&self, trace: &EncoderTrace, upstream: &[f64], grads: &mut EncoderGrads) {
        let d = self.dim();
        let g_act = standardize_backward(
            &trace.std,
            &self.gain,
            upstream,
            &mut grads.gain,
            &mut grads.shift,
        );
        let Some(input) = &trace.input else {
            add_into(&mut grads.eoe, &g_act);
            return;
        };
        let g_pre: Vec<f64> = g_act
            .iter()
            .zip(&trace.act)
            .map(|(g, t)| g * (1.0 - t * t))
            .collect();
        if g_pre.iter().all(|&x| x == 0.0) {
            return;
        }
        add_outer(&mut grads.projection, d, &g_pre, &trace.pooled);
        add_into(&mut grads.bias, &g_pre);
        let mut g_pooled = vec![0.0; d];
        matvec_t_acc(&self.projection, d, &g_pre, &mut g_pooled);
        for &(row, w) in &input.features {
            grads.embedding.add(row, w, &g_pooled);
        }
    }

    pub fn apply_update(&mut self, opt: &mut AdamW, grads: &EncoderGrads, lr: f64) {
        opt.update(
            "encoder.embedding",
            &mut self.embedding,
            GradView::Rows(&grads.embedding),
            true,
            lr,
        );
        opt.update(
            "encoder.projection",
            &mut self.projection,
            GradView::Dense(&grads.projection),
            true,
            lr,
        );
        opt.update(
            "encoder.bias",
            &mut self.bias,
            GradView::Dense(&grads.bias),
            false,
            lr,
        );
        opt.update(
            "encoder.gain",
            &mut self.gain,
            GradView::Dense(&grads.gain),
            false,
            lr,
        );
        opt.update(
            "encoder.shift",
            &mut self.shift,
            GradView::Dense(&grads.shift),
            false,
            lr,
        );
        opt.update(
            "encoder.eoe",
            &mut self.eoe,
            GradView::Dense(&grads.eoe),
            true,
            lr,
        );
    }

    pub fn is_finite(&self) -> bool {
        [
            &self.embedding,
            &self.projection,
            &self.bias,
            &self.gain,
            &self.shift,
            &self.eoe,
        ]
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let d = self.dim();
        let c = &self.config;
        vec![
            NamedTensor::scalar("encoder.bucket_count", f64::from(c.bucket_count)),
            NamedTensor::scalar("encoder.ngrams", f64::from(c.ngrams)),
            NamedTensor::scalar("encoder.max_tokens", c.max_tokens as f64),
            NamedTensor::scalar("encoder.match_feature", f64::from(u8::from(c.match_feature))),
            NamedTensor::scalar(
                "encoder.question_independent",
                f64::from(u8::from(c.mode == EncoderMode::QuestionIndependent)),
            ),
            NamedTensor::new("encoder.embedding", &[c.rows(), d], self.embedding.clone()),
            NamedTensor::new("encoder.projection", &[d, d], self.projection.clone()),
            NamedTensor::new("encoder.bias", &[d], self.bias.clone()),
            NamedTensor::new("encoder.gain", &[d], self.gain.clone()),
            NamedTensor::new("encoder.shift", &[d], self.shift.clone()),
            NamedTensor::new("encoder.eoe", &[d], self.eoe.clone()),
        ]
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let s = ck.section("encoder.");
        let bucket_count = take_scalar(&s, "bucket_count")? as u32;
        let emb = s
            .get("embedding")
            .ok_or_else(|| Error::format("checkpoint", "missing tensor embedding"))?;
        let dim = *emb.dims.get(1).unwrap_or(&0) as usize;
        let config = EncoderConfig {
            dim,
            bucket_count,
            ngrams: take_scalar(&s, "ngrams")? as u32,
            max_tokens: take_scalar(&s, "max_tokens")? as usize,
            match_feature: take_scalar(&s, "match_feature")? != 0.0,
            mode: if take_scalar(&s, "question_independent")? != 0.0 {
                EncoderMode::QuestionIndependent
            } else {
                EncoderMode::QuestionDependent
            },
        };
        config.validate()?;
        let d = dim;
        Ok(EncoderParams {
            embedding: take(&s, "embedding", &[config.rows(), d])?.to_vec(),
            projection: take(&s, "projection", &[d, d])?.to_vec(),
            bias: take(&s, "bias", &[d])?.to_vec(),
            gain: take(&s, "gain", &[d])?.to_vec(),
            shift: take(&s, "shift", &[d])?.to_vec(),
            eoe: take(&s, "eoe", &[d])?.to_vec(),
            config,
        })
    }
}

/// Per-question cache of forward passes with upstream-gradient accumulation, so each distinct
/// input is encoded (and back-propagated) once.
#[derive(Debug, Default)]
pub struct EncoderTape {
    slots: BTreeMap<EncodeKey, TapeSlot>,
}

#[derive(Debug)]
struct TapeSlot {
    output: Vec<f64>,
    trace: EncoderTrace,
    upstream: Vec<f64>,
}

impl EncoderTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Encodes on first use; `make_input` is only called on a miss. `[EOE]` ignores it.
    pub fn encode(
        &mut self,
        params: &EncoderParams,
        key: EncodeKey,
        make_input: impl FnOnce() -> EncoderInput,
    ) -> &[f64] {
        let slot = self.slots.entry(key).or_insert_with(|| {
            let (output, trace) = match key {
                EncodeKey::Eoe => params.eoe_forward(),
                _ => params.forward(&make_input()),
            };
            TapeSlot {
                upstream: vec![0.0; output.len()],
                output,
                trace,
            }
        });
        &slot.output
    }

    pub fn get(&self, key: EncodeKey) -> Option<&[f64]> {
        self.slots.get(&key).map(|s| s.output.as_slice())
    }

    /// Number of distinct forward passes run.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Adds `scale * g` to the upstream gradient of a cached output.
    pub fn accumulate(&mut self, key: EncodeKey, scale: f64, g: &[f64]) -> Result<()> {
        let slot = self
            .slots
            .get_mut(&key)
            .ok_or_else(|| Error::Usage(format!("no cached forward pass for {key:?}; encode it first")))?;
        nn::axpy(scale, g, &mut slot.upstream);
        Ok(())
    }

    /// Back-propagates every accumulated upstream gradient, in key order.
    pub fn backward(&self, params: &EncoderParams, grads: &mut EncoderGrads) {
        for slot in self.slots.values() {
            if slot.upstream.iter().any(|&x| x != 0.0) {
                params.backward(&slot.trace, &slot.upstream, grads);
            }
        }
    }
}
