mod common;
#[path = "suites/naive_metrics.rs"]
mod naive;

use agfnet_core::data::tokenize;
use agfnet_core::metrics::{align, bleu, meteor_exact, meteor_pair, rouge_l, Alignment, MetricReport, ROUGE_BETA};
use common::rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn t(s: &str) -> Vec<String> {
    tokenize(s)
}

#[test]
fn agrees_with_naive_reference_on_random_template_pairs() {
    let mut r = rng(11);
    let pairs: Vec<(Vec<String>, Vec<String>)> = (0..50).map(|_| (t(&naive::sentence(&mut r)), t(&naive::sentence(&mut r)))).collect();
    for (c, rf) in &pairs {
        let ours = bleu(std::slice::from_ref(c), std::slice::from_ref(rf), 4).unwrap();
        for n in 1..=4 {
            let expected = naive::bleu(std::slice::from_ref(c), std::slice::from_ref(rf), n);
            assert!((ours[n - 1] - expected).abs() < 1e-9, "{c:?} {rf:?} n={n}");
        }
        let rouge = rouge_l(std::slice::from_ref(c), std::slice::from_ref(rf)).unwrap();
        assert!((rouge - naive::rouge(std::slice::from_ref(c), std::slice::from_ref(rf), ROUGE_BETA)).abs() < 1e-9);
    }
    let (cs, rs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let ours = bleu(&cs, &rs, 4).unwrap();
    for n in 1..=4 {
        assert!((ours[n - 1] - naive::bleu(&cs, &rs, n)).abs() < 1e-9);
    }
    assert!((rouge_l(&cs, &rs).unwrap() - naive::rouge(&cs, &rs, ROUGE_BETA)).abs() < 1e-9);
}

#[test]
fn hand_derived_examples() {
    let c = t("the the the the the the the");
    let r = t("the cat is on the mat");
    assert_eq!(naive::clipped(&c, &r, 1), (2, 7));
    let b = bleu(&[c], &[r], 1).unwrap();
    assert!((b[0] - 2.0 / 7.0).abs() < 1e-15);

    let (c, r) = (t("a b c d"), t("a c b d"));
    let rouge = rouge_l(&[c.clone()], &[r.clone()]).unwrap();
    assert_eq!(naive::lcs(&c, &r), 3);
    assert!((rouge - 0.75).abs() < 1e-15);

    let (c, r) = (t("the cat sat"), t("the cat slept"));
    assert_eq!(align(&c, &r), Alignment { matches: 2, chunks: 1 });
    let f_mean = 10.0 * (2.0 / 3.0) * (2.0 / 3.0) / (2.0 / 3.0 + 9.0 * 2.0 / 3.0);
    assert!((meteor_pair(&c, &r) - f_mean * (1.0 - 0.5 / 8.0)).abs() < 1e-15);

    let c = t("the heart is normal .");
    assert!((meteor_pair(&c, &c) - (1.0 - 0.5 / 125.0)).abs() < 1e-15);
    assert_eq!(meteor_pair(&t("a b"), &t("c d")), 0.0);
}

#[test]
fn meteor_chunks_follow_reference_order() {
    assert_eq!(align(&t("c d a b"), &t("a b c d")), Alignment { matches: 4, chunks: 2 });
    assert_eq!(align(&t("a x b"), &t("a b")), Alignment { matches: 2, chunks: 2 });
    assert_eq!(align(&t("a a"), &t("a")), Alignment { matches: 1, chunks: 1 });
}

#[test]
fn bleu_can_rise_with_the_order_without_smoothing() {
    let b = bleu(&[t("a a a c a")], &[t("b b c a c")], 2).unwrap();
    assert!((b[0] - 0.4).abs() < 1e-15);
    assert!((b[1] - 0.2f64.sqrt()).abs() < 1e-15);
    assert!(b[1] > b[0]);
}

#[test]
fn empty_and_mismatched_corpora_are_errors() {
    let none: Vec<Vec<String>> = vec![];
    assert!(bleu(&none, &none, 4).is_err());
    assert!(rouge_l(&none, &none).is_err());
    assert!(meteor_exact(&none, &none).is_err());
    assert!(MetricReport::from_texts(&["a b"], &["a", "b"]).is_err());
}

fn corpus(seed: u64, n: usize) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let mut r = rng(seed);
    (0..n).map(|_| (t(&naive::sentence(&mut r)), t(&naive::sentence(&mut r)))).unzip()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_lie_in_the_unit_interval(seed in 0u64..100_000, n in 1usize..12) {
        let (cs, rs) = corpus(seed, n);
        let report = MetricReport::compute(&cs, &rs).unwrap();
        prop_assert!(report.values().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(report.size, n);
    }

    #[test]
    fn identical_corpora_score_one(seed in 0u64..100_000, n in 1usize..12) {
        let (cs, _) = corpus(seed, n);
        let report = MetricReport::compute(&cs, &cs).unwrap();
        prop_assert_eq!(&report.values()[..5], &[1.0; 5]);
        prop_assert!(report.meteor > 0.99 && report.meteor < 1.0);
    }

    #[test]
    fn pair_order_does_not_matter(seed in 0u64..100_000, n in 2usize..12) {
        let (cs, rs) = corpus(seed, n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng(seed + 1));
        let pc: Vec<_> = idx.iter().map(|&i| cs[i].clone()).collect();
        let pr: Vec<_> = idx.iter().map(|&i| rs[i].clone()).collect();
        let (a, b) = (MetricReport::compute(&cs, &rs).unwrap(), MetricReport::compute(&pc, &pr).unwrap());
        prop_assert_eq!(bleu(&cs, &rs, 4).unwrap(), bleu(&pc, &pr, 4).unwrap());
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_falls_with_the_order_when_precisions_fall(seed in 0u64..100_000, n in 1usize..8) {
        let (cs, rs) = corpus(seed, n);
        let precisions: Vec<f64> = (1..=4)
            .map(|k| {
                let (m, tot) = cs.iter().zip(&rs).map(|(c, r)| naive::clipped(c, r, k)).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
                m as f64 / tot as f64
            })
            .collect();
        let b = bleu(&cs, &rs, 4).unwrap();
        if precisions.windows(2).all(|w| w[0] >= w[1]) {
            prop_assert!(b.windows(2).all(|w| w[0] >= w[1] - 1e-15), "{b:?}");
        }
    }

    #[test]
    fn bleu_falls_with_the_order_on_slices_of_the_reference(seed in 0u64..100_000, n in 1usize..8) {
        let (_, rs) = corpus(seed, n);
        let mut r = rng(seed);
        let cs: Vec<Vec<String>> = rs
            .iter()
            .map(|x| {
                let start = r.random_range(0..x.len());
                let len = r.random_range(1..=x.len() - start);
                x[start..start + len].to_vec()
            })
            .collect();
        let b = bleu(&cs, &rs, 4).unwrap();
        prop_assert!(b.windows(2).all(|w| w[0] >= w[1]), "{b:?}");
    }
}
