//! Greedy and beam decoding over any next-token scorer.

use std::cmp::Ordering;

use super::vocab::{TokenSequence, BOS, EOS};
use crate::error::{Error, Result};

/// Incremental next-token scorer.
pub trait StepModel {
    type State: Clone;

    fn start(&self) -> Result<Self::State>;

    /// Consumes `token` and returns unnormalised logits over the vocabulary.
    fn step(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub tokens: TokenSequence,
    /// True when `max_new` tokens were produced without an `eos`.
    pub truncated: bool,
    /// Sum of log-probabilities of the generated tokens.
    pub log_prob: f64,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

/// Appends the arg-max token until `eos` or `max_new` generated tokens.
pub fn generate_greedy<M: StepModel>(model: &M, max_new: usize) -> Result<Generated> {
    let mut state = model.start()?;
    let mut ids = vec![BOS];
    let mut log_prob = 0.0;
    let mut token = BOS;
    for _ in 0..max_new {
        let logits = model.step(&mut state, token)?;
        let next = argmax(&logits);
        log_prob += log_softmax(&logits)[next];
        token = next as u32;
        ids.push(token);
        if token == EOS {
            return Ok(Generated {
                tokens: TokenSequence(ids),
                truncated: false,
                log_prob,
            });
        }
    }
    Ok(Generated {
        tokens: TokenSequence(ids),
        truncated: true,
        log_prob,
    })
}

#[derive(Clone)]
struct Hypothesis<S> {
    state: S,
    ids: Vec<u32>,
    log_prob: f64,
}

fn normalised(log_prob: f64, generated: usize, alpha: f64) -> f64 {
    log_prob / (generated.max(1) as f64).powf(alpha)
}

/// Length-normalised beam search (`score = log p / len^alpha`).
///
/// The beam shrinks by one whenever a hypothesis emits `eos`, so at most
/// `beam` hypotheses are ever completed and `beam = 1` reproduces greedy
/// decoding exactly.
pub fn generate_beam<M: StepModel>(model: &M, beam: usize, max_new: usize, alpha: f64) -> Result<Generated> {
    if beam == 0 {
        return Err(Error::BeamWidth);
    }
    let mut alive = vec![Hypothesis {
        state: model.start()?,
        ids: vec![BOS],
        log_prob: 0.0,
    }];
    let mut finished: Vec<(Hypothesis<M::State>, bool)> = Vec::new();

    for _ in 0..max_new {
        let width = beam - finished.len();
        if width == 0 || alive.is_empty() {
            break;
        }
        let mut expanded = Vec::with_capacity(alive.len());
        // (cumulative log-prob, raw logit, hypothesis, token)
        let mut candidates: Vec<(f64, f64, usize, u32)> = Vec::new();
        for (h, hyp) in alive.iter().enumerate() {
            let mut state = hyp.state.clone();
            let last = *hyp.ids.last().expect("hypotheses are never empty");
            let logits = model.step(&mut state, last)?;
            let lp = log_softmax(&logits);
            candidates.extend(
                lp.iter()
                    .zip(&logits)
                    .enumerate()
                    .map(|(v, (&l, &raw))| (hyp.log_prob + l, raw, h, v as u32)),
            );
            expanded.push(state);
        }
        // Rounding can merge distinct log-probs; the raw logit keeps the
        // ordering greedy decoding would use.
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        let mut next = Vec::with_capacity(width);
        for &(score, _, h, v) in candidates.iter().take(width) {
            let mut ids = alive[h].ids.clone();
            ids.push(v);
            let hyp = Hypothesis {
                state: expanded[h].clone(),
                ids,
                log_prob: score,
            };
            if v == EOS {
                finished.push((hyp, false));
            } else {
                next.push(hyp);
            }
        }
        alive = next;
    }
    finished.extend(alive.into_iter().map(|h| (h, true)));

    let mut best: Option<(f64, &(Hypothesis<M::State>, bool))> = None;
    for entry in &finished {
        let score = normalised(entry.0.log_prob, entry.0.ids.len() - 1, alpha);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, entry));
        }
    }
    let (_, (hyp, truncated)) = best.expect("at least one hypothesis survives");
    Ok(Generated {
        tokens: TokenSequence(hyp.ids.clone()),
        truncated: *truncated,
        log_prob: hyp.log_prob,
    })
}
