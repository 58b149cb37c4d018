//! Synthetic anatomy-world corpus, feature files, tokenizer and splits.

mod io;
mod synth;

pub use io::{
    load_dataset, load_features, read_reports, save_dataset, write_features, write_reports, FeatureManifest,
    ReportRecord, FEATURES_BLOB, FEATURES_MANIFEST, REPORTS_FILE,
};
pub use synth::{synth_generate, Example, Finding, SynthConfig, FINDING_KINDS, NORMAL_TEMPLATE};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::captioning::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};

/// Lowercases and splits on whitespace, with every ASCII punctuation
/// character becoming a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() || c.is_ascii_punctuation() {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if c.is_ascii_punctuation() {
                tokens.push(c.to_string());
            }
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Canonical text form: tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

pub fn detokenize(vocab: &Vocabulary, seq: &TokenSequence) -> String {
    vocab.decode(seq.ids())
}

/// Train/validation/test partition of example indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and cuts it by `ratios`. Each part keeps
/// ascending index order.
pub fn split(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !r.is_finite() || *r < 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(Split { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(
            tokenize("No pneumothorax, or pleural effusion."),
            ["no", "pneumothorax", ",", "or", "pleural", "effusion", "."]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(normalize("  Mild   opacity.\n"), "mild opacity .");
    }

    #[test]
    fn split_sizes() {
        let s = split(100, (0.7, 0.1, 0.2), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, split(100, (0.7, 0.1, 0.2), 3).unwrap());
    }

    #[test]
    fn split_all_train_and_bad_ratios() {
        let s = split(9, (1.0, 0.0, 0.0), 0).unwrap();
        assert_eq!(s.train.len(), 9);
        assert!(s.val.is_empty() && s.test.is_empty());
        assert!(split(9, (0.5, 0.4, 0.2), 0).is_err());
        assert!(split(9, (1.2, -0.2, 0.0), 0).is_err());
    }
}
