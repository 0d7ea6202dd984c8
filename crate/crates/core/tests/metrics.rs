use std::collections::BTreeSet;

use ipt_core::metrics::*;
use ipt_core::template::InstructionResponsePair;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sort-and-merge multiset intersection, written independently of the crate.
fn oracle_f1(a: &str, b: &str) -> f64 {
    let norm = |s: &str| {
        let mut t: Vec<String> = s
            .to_lowercase()
            .chars()
            .filter(|c| !c.is_ascii_punctuation())
            .collect::<String>()
            .split_whitespace()
            .map(String::from)
            .collect();
        t.sort();
        t
    };
    let (x, y) = (norm(a), norm(b));
    if x.is_empty() || y.is_empty() {
        return if x.len() == y.len() { 1.0 } else { 0.0 };
    }
    let (mut i, mut j, mut common) = (0, 0, 0usize);
    while i < x.len() && j < y.len() {
        match x[i].cmp(&y[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / x.len() as f64;
    let r = common as f64 / y.len() as f64;
    2.0 * p * r / (p + r)
}

fn best_matching(scores: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
    if row == scores.len() {
        return 0.0;
    }
    let mut best = best_matching(scores, row + 1, used);
    for j in 0..used.len() {
        if !used[j] {
            used[j] = true;
            best = best.max(scores[row][j] + best_matching(scores, row + 1, used));
            used[j] = false;
        }
    }
    best
}

fn exhaustive_quality(pred: &[InstructionResponsePair], gold: &[InstructionResponsePair]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let scores: Vec<Vec<f64>> = pred
        .iter()
        .map(|p| gold.iter().map(|g| oracle_f1(&p.flatten(), &g.flatten())).collect())
        .collect();
    best_matching(&scores, 0, &mut vec![false; gold.len()]) / pred.len().max(gold.len()) as f64
}

#[test]
fn hand_cases() {
    assert!((token_f1("the cat sat", "cat sat down") - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(token_f1("Paris.", "paris"), 1.0);
    assert_eq!(token_f1("red blue", "green"), 0.0);
    assert!((token_f1("a b c d", "a b") - 2.0 / 3.0).abs() < 1e-12);
    assert!((token_f1("x x y", "x y y z") - 4.0 / 7.0).abs() < 1e-12);
}

#[test]
fn greedy_matching_equals_optimal_on_noisy_copies() {
    let vocab: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for instance in 0..50 {
        let n_gold = rng.gen_range(1..=4);
        let gold: Vec<InstructionResponsePair> = (0..n_gold)
            .map(|_| {
                let words: Vec<&str> = (0..6).map(|_| vocab[rng.gen_range(0..vocab.len())].as_str()).collect();
                InstructionResponsePair::free_form(words[..4].join(" "), words[4..].join(" "))
            })
            .collect();
        let n_pred = rng.gen_range(0..=4);
        let mut pred: Vec<InstructionResponsePair> = (0..n_pred)
            .map(|k| {
                let base = &gold[k % n_gold];
                let mut words: Vec<String> = base.flatten().split(' ').map(String::from).collect();
                let edits = rng.gen_range(0..3);
                for _ in 0..edits {
                    let at = rng.gen_range(0..words.len());
                    words[at] = vocab[rng.gen_range(0..vocab.len())].clone();
                }
                InstructionResponsePair::free_form(words[..4].join(" "), words[4..].join(" "))
            })
            .collect();
        pred.shuffle(&mut rng);
        let greedy = pair_set_quality(&pred, &gold);
        let optimal = exhaustive_quality(&pred, &gold);
        assert!((greedy - optimal).abs() < 1e-12, "instance {instance}: {greedy} vs {optimal}");
    }
}

fn row(text: &[&str], instr: &[&str]) -> DomainLabelSet {
    let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    DomainLabelSet { doc_id: String::new(), text_domains: set(text), instruction_domains: set(instr) }
}

#[test]
fn domain_fixture_matches_spreadsheet() {
    // (text, instructions, coverage, overlap) with coverage/overlap worked out by hand.
    let sheet: Vec<(DomainLabelSet, Option<f64>, f64)> = vec![
        (row(&["A"], &["A"]), Some(1.0), 1.0),
        (row(&["A", "B"], &["A"]), Some(0.5), 0.5),
        (row(&["A", "B"], &["A", "C"]), Some(0.5), 1.0 / 3.0),
        (row(&["A"], &["B"]), Some(0.0), 0.0),
        (row(&["A", "B", "C"], &["A", "B", "C"]), Some(1.0), 1.0),
        (row(&["A", "B", "C"], &["A"]), Some(1.0 / 3.0), 1.0 / 3.0),
        (row(&["A"], &["A", "B", "C"]), Some(1.0), 1.0 / 3.0),
        (row(&["A", "B"], &["C", "D"]), Some(0.0), 0.0),
        (row(&["A", "B", "C", "D"], &["A", "B"]), Some(0.5), 0.5),
        (row(&["A", "B", "C", "D"], &["A", "E"]), Some(0.25), 0.2),
        (row(&[], &["A"]), None, 0.0),
        (row(&["A"], &[]), Some(0.0), 0.0),
        (row(&["A", "B"], &["B", "A"]), Some(1.0), 1.0),
        (row(&["A", "B", "C"], &["B", "C", "D"]), Some(2.0 / 3.0), 0.5),
        (row(&["A"], &["A", "B"]), Some(1.0), 0.5),
        (row(&["A", "B"], &["B"]), Some(0.5), 0.5),
        (row(&["A", "B", "C"], &["D"]), Some(0.0), 0.0),
        (row(&["A", "B", "C", "D", "E"], &["A", "B", "C"]), Some(0.6), 0.6),
        (row(&["A", "B"], &["A", "B", "C", "D"]), Some(1.0), 0.5),
        (row(&["A", "C"], &["C"]), Some(0.5), 0.5),
    ];
    for (i, (r, cov, ov)) in sheet.iter().enumerate() {
        assert_eq!(domain_coverage(r).ok(), *cov, "row {i}");
        assert!((domain_overlap(r).unwrap() - ov).abs() < 1e-9, "row {i}");
    }
    let rows: Vec<DomainLabelSet> = sheet.into_iter().map(|(r, _, _)| r).collect();
    let report = domain_report(&rows);
    assert!((report.coverage.unwrap() - 10.35 / 19.0).abs() < 1e-9);
    assert!((report.overlap.unwrap() - 0.415).abs() < 1e-9);
    assert!((report.coverage_multidomain.unwrap() - 0.525).abs() < 1e-9);
    assert_eq!(report.rows_without_text_domains, 1);
    let json = serde_json::to_value(&report).unwrap();
    for key in ["coverage", "coverage_multidomain", "overlap"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert!(serde_json::to_value(domain_report(&[row(&["A"], &["A"])])).unwrap()["coverage_multidomain"].is_null());
}

fn pair_strategy() -> impl Strategy<Value = InstructionResponsePair> {
    ("[a-d]{1,3}( [a-d]{1,3}){0,3}", "[a-d]{1,3}( [a-d]{1,3}){0,2}")
        .prop_map(|(i, r)| InstructionResponsePair::free_form(i, r))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn f1_symmetric_bounded_and_matches_oracle(a in "[a-e ,.A-E]{0,24}", b in "[a-e ,.A-E]{0,24}") {
        let ab = token_f1(&a, &b);
        prop_assert_eq!(ab, token_f1(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - oracle_f1(&a, &b)).abs() < 1e-12);
        let mut x = normalize_tokens(&a, F1Options::default());
        let mut y = normalize_tokens(&b, F1Options::default());
        x.sort();
        y.sort();
        prop_assert_eq!(ab == 1.0, x == y);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pair_quality_ignores_order(
        pred in prop::collection::vec(pair_strategy(), 0..5),
        gold in prop::collection::vec(pair_strategy(), 0..5),
        seed in any::<u64>(),
    ) {
        let base = pair_set_quality(&pred, &gold);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut p2, mut g2) = (pred.clone(), gold.clone());
        p2.shuffle(&mut rng);
        g2.shuffle(&mut rng);
        prop_assert_eq!(base, pair_set_quality(&p2, &g2));
        prop_assert!((0.0..=1.0).contains(&base));
    }
}
