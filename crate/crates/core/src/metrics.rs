//! Corpus BLEU, ROUGE-L and exact-match METEOR over tokenized text.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::tokenize;
use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;

/// Column names in table order.
pub const COLUMNS: [&str; 6] = ["bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "meteor-exact"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    #[serde(rename = "meteor-exact")]
    pub meteor: f64,
    pub size: usize,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 6] {
        [self.bleu_1, self.bleu_2, self.bleu_3, self.bleu_4, self.rouge_l, self.meteor]
    }

    /// Scores tokenized candidates against line-aligned references.
    pub fn compute(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<Self> {
        let b = bleu(candidates, references, 4)?;
        Ok(Self {
            bleu_1: b[0],
            bleu_2: b[1],
            bleu_3: b[2],
            bleu_4: b[3],
            rouge_l: rouge_l(candidates, references)?,
            meteor: meteor_exact(candidates, references)?,
            size: candidates.len(),
        })
    }

    pub fn from_texts<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<Self> {
        let tok = |xs: &[S]| xs.iter().map(|s| tokenize(s.as_ref())).collect::<Vec<_>>();
        Self::compute(&tok(candidates), &tok(references))
    }
}

fn check(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and total candidate n-grams for one pair.
fn clipped(candidate: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let refs = ngram_counts(reference, n);
    let cands = ngram_counts(candidate, n);
    let matched = cands
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Corpus BLEU-1..`max_n` without smoothing. An order with no candidate
/// n-grams has precision 0.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> Result<Vec<f64>> {
    check(candidates, references)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_n {
            let (m, t) = clipped(c, r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let bp = brevity_penalty(c_len, r_len);
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        if matched[n] == 0 || total[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        out.push(if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() });
    }
    Ok(out)
}

/// Sentence BLEU with add-one smoothing on orders that have no match.
pub fn sentence_bleu_smoothed(candidate: &[String], reference: &[String], max_n: usize) -> f64 {
    let bp = brevity_penalty(candidate.len(), reference.len());
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (m, t) = clipped(candidate, reference, n);
        let p = if m == 0 { 1.0 / (t as f64 + 1.0) } else { m as f64 / t as f64 };
        log_sum += p.ln();
    }
    bp * (log_sum / max_n as f64).exp()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_pair(candidate: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean per-pair ROUGE-L F-measure.
pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check(candidates, references)?;
    let sum: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l_pair(c, r)).sum();
    Ok(sum / candidates.len() as f64)
}

/// Exact-match unigram alignment of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

/// Aligns candidate tokens left to right, each to an unused identical
/// reference token. A token that can continue the current chunk does so;
/// otherwise it takes the leftmost free match.
pub fn align(candidate: &[String], reference: &[String]) -> Alignment {
    let mut used = vec![false; reference.len()];
    let mut prev: Option<usize> = None;
    let (mut matches, mut chunks) = (0, 0);
    for tok in candidate {
        let continues = prev
            .map(|p| p + 1)
            .filter(|&j| j < reference.len() && !used[j] && &reference[j] == tok);
        let pick = continues.or_else(|| (0..reference.len()).find(|&j| !used[j] && &reference[j] == tok));
        match pick {
            Some(j) => {
                if continues.is_none() {
                    chunks += 1;
                }
                used[j] = true;
                matches += 1;
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    Alignment { matches, chunks }
}

pub fn meteor_pair(candidate: &[String], reference: &[String]) -> f64 {
    let Alignment { matches, chunks } = align(candidate, reference);
    if matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / candidate.len() as f64;
    let r = matches as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    f_mean * (1.0 - penalty)
}

/// Mean per-pair METEOR restricted to exact matches.
pub fn meteor_exact(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check(candidates, references)?;
    let sum: f64 = candidates.iter().zip(references).map(|(c, r)| meteor_pair(c, r)).sum();
    Ok(sum / candidates.len() as f64)
}
