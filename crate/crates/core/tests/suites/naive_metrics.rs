//! Template sentences and a deliberately naive BLEU / ROUGE-L oracle.

#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::Rng;

const SUBJECTS: [&str; 6] = ["the heart", "the left lung", "the right lung", "the mediastinum", "a nodule", "the effusion"];
const VERBS: [&str; 4] = ["is", "appears", "remains", "is not"];
const STATES: [&str; 6] = ["normal", "enlarged", "clear", "stable", "small", "unchanged"];
const TAILS: [&str; 5] = ["", "in the left lung", "since the prior study", "and the heart is normal", "without effusion"];

pub fn sentence(r: &mut impl Rng) -> String {
    let mut s = format!(
        "{} {} {}",
        SUBJECTS.choose(r).unwrap(),
        VERBS.choose(r).unwrap(),
        STATES.choose(r).unwrap()
    );
    let tail = TAILS.choose(r).unwrap();
    if !tail.is_empty() {
        s = format!("{s} {tail}");
    }
    s + " ."
}

pub fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return vec![];
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

/// Matches each candidate n-gram to a distinct unused reference n-gram.
pub fn clipped(c: &[String], r: &[String], n: usize) -> (usize, usize) {
    let cands = ngrams(c, n);
    let mut refs: Vec<Option<Vec<String>>> = ngrams(r, n).into_iter().map(Some).collect();
    let mut matched = 0;
    for g in &cands {
        if let Some(slot) = refs.iter_mut().find(|s| s.as_ref() == Some(g)) {
            *slot = None;
            matched += 1;
        }
    }
    (matched, cands.len())
}

pub fn bleu(cs: &[Vec<String>], rs: &[Vec<String>], n: usize) -> f64 {
    let c: usize = cs.iter().map(Vec::len).sum();
    let r: usize = rs.iter().map(Vec::len).sum();
    let mut product = 1.0;
    for k in 1..=n {
        let (mut m, mut tot) = (0, 0);
        for (a, b) in cs.iter().zip(rs) {
            let (x, y) = clipped(a, b, k);
            m += x;
            tot += y;
        }
        if m == 0 {
            return 0.0;
        }
        product *= m as f64 / tot as f64;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * product.powf(1.0 / n as f64)
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|x| it.any(|y| y == *x))
}

/// Longest common subsequence by trying every subset of the candidate.
pub fn lcs(c: &[String], r: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << c.len()) {
        let picked: Vec<&String> = (0..c.len()).filter(|i| mask >> i & 1 == 1).map(|i| &c[i]).collect();
        if picked.len() > best && is_subsequence(&picked, r) {
            best = picked.len();
        }
    }
    best
}

pub fn rouge(cs: &[Vec<String>], rs: &[Vec<String>], beta: f64) -> f64 {
    let mut total = 0.0;
    for (c, r) in cs.iter().zip(rs) {
        let l = lcs(c, r) as f64;
        if l > 0.0 {
            let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
            total += (1.0 + beta * beta) * p * rec / (rec + beta * beta * p);
        }
    }
    total / cs.len() as f64
}
