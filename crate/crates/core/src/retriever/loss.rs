use super::{Candidate, ModelGrads, RetrieverModel, TrainingPath};
use crate::corpus::Corpus;
use crate::encoder::{EncodeKey, EncoderMode, EncoderTape};
use crate::error::Result;
use crate::nn::{self, PROB_CLIP};

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ModelGrads,
    /// Distinct encoder forward passes used.
    pub encodings: usize,
}

fn key_of(c: Candidate) -> EncodeKey {
    match c {
        Candidate::Paragraph(p) => EncodeKey::Paragraph(p),
        Candidate::Eoe => EncodeKey::Eoe,
    }
}

/// `-log max(sigmoid(s * z), clip)` and its derivative in `z`, for `s = +1` (positive) or `-1`.
fn bce_term(z: f64, positive: bool) -> (f64, f64) {
    let zs = if positive { z } else { -z };
    let ls = nn::log_sigmoid(zs);
    let floor = PROB_CLIP.ln();
    if ls < floor {
        return (-floor, 0.0);
    }
    let dz = -(1.0 - nn::sigmoid(zs));
    (-ls, if positive { dz } else { -dz })
}

/// Binary cross-entropy over one or more supervised paths of a question, teacher-forced along
/// each gold path, with gradients for every encoder and retriever parameter.
///
/// With `recurrent == false` the state stays at `h_1` for every step.
pub fn retriever_loss(
    model: &RetrieverModel,
    corpus: &Corpus,
    question: &str,
    paths: &[TrainingPath],
    recurrent: bool,
) -> Result<LossOutput> {
    let enc = &model.encoder;
    let params = &model.params;
    let d = params.dim;
    let qf = enc.question_features(question);
    let mut tape = EncoderTape::new();
    let mut grads = ModelGrads::zeros(model);
    let mut loss = 0.0;

    let base = params.base_state()?;
    let init = match enc.mode() {
        EncoderMode::QuestionDependent => None,
        EncoderMode::QuestionIndependent => {
            let wq = tape
                .encode(enc, EncodeKey::Question, || enc.single_input(question))
                .to_vec();
            Some(params.advance_traced(&base, &wq)?)
        }
    };
    let h1 = init.as_ref().map_or_else(|| base.clone(), |(h, _)| h.clone());

    for path in paths {
        path.validate()?;
        let steps: Vec<_> = path.steps().collect();
        let mut states = vec![h1.clone()];
        let mut traces = Vec::new();
        for (t, (gold, _)) in steps.iter().enumerate() {
            let Candidate::Paragraph(p) = *gold else { break };
            if t + 1 == steps.len() {
                break;
            }
            let w = tape
                .encode(enc, EncodeKey::Paragraph(p), || {
                    enc.candidate_input(&qf, corpus.text(p))
                })
                .to_vec();
            if recurrent {
                let (h, tr) = params.advance_traced(&states[t], &w)?;
                states.push(h);
                traces.push(tr);
            } else {
                states.push(h1.clone());
            }
        }

        let mut g_states = vec![vec![0.0; d]; states.len()];
        for (t, (gold, negs)) in steps.iter().enumerate() {
            let h = &states[t];
            let scored = std::iter::once((*gold, true))
                .chain(negs.paragraphs.iter().map(|&p| (Candidate::Paragraph(p), false)))
                .chain(negs.eoe.then_some((Candidate::Eoe, false)));
            for (c, positive) in scored {
                let key = key_of(c);
                let w = tape
                    .encode(enc, key, || match c {
                        Candidate::Paragraph(p) => enc.candidate_input(&qf, corpus.text(p)),
                        Candidate::Eoe => unreachable!("the tape builds [EOE] itself"),
                    })
                    .to_vec();
                let z = nn::dot(&w, h) + params.b;
                let (l, dz) = bce_term(z, positive);
                loss += l;
                if dz != 0.0 {
                    grads.retriever.b += dz;
                    nn::axpy(dz, &w, &mut g_states[t]);
                    tape.accumulate(key, dz, h)?;
                }
            }
        }

        let mut g_h1 = vec![0.0; d];
        if recurrent {
            for t in (1..states.len()).rev() {
                let g_next = std::mem::take(&mut g_states[t]);
                let (g_h, g_w) = params.advance_backward(&traces[t - 1], &g_next, &mut grads.retriever);
                nn::add_into(&mut g_states[t - 1], &g_h);
                if let (Candidate::Paragraph(p), _) = steps[t - 1] {
                    tape.accumulate(EncodeKey::Paragraph(p), 1.0, &g_w)?;
                }
            }
            nn::add_into(&mut g_h1, &g_states[0]);
        } else {
            for g in &g_states {
                nn::add_into(&mut g_h1, g);
            }
        }

        match &init {
            None => params.base_state_backward(&g_h1, &mut grads.retriever),
            Some((_, tr)) => {
                let (g_base, g_wq) = params.advance_backward(tr, &g_h1, &mut grads.retriever);
                params.base_state_backward(&g_base, &mut grads.retriever);
                tape.accumulate(EncodeKey::Question, 1.0, &g_wq)?;
            }
        }
    }

    tape.backward(enc, &mut grads.encoder);
    Ok(LossOutput {
        loss,
        grads,
        encodings: tape.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_matches_definition() {
        let (l, dz) = bce_term(0.3, true);
        assert!((l + nn::sigmoid(0.3).ln()).abs() < 1e-12);
        assert!((dz - (nn::sigmoid(0.3) - 1.0)).abs() < 1e-12);
        let (l, dz) = bce_term(0.3, false);
        assert!((l + (1.0 - nn::sigmoid(0.3)).ln()).abs() < 1e-12);
        assert!((dz - nn::sigmoid(0.3)).abs() < 1e-12);
    }

    #[test]
    fn clipped_probability_has_zero_gradient() {
        let (l, dz) = bce_term(-100.0, true);
        assert!((l - 1e12f64.ln()).abs() < 1e-9);
        assert_eq!(dz, 0.0);
    }
}
