//! Intrinsic evaluation arithmetic: token F1, response accuracy, pair-set
//! quality, helpfulness prompts and domain coverage/overlap.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::assembly::TemplateEntry;
use crate::error::{Error, Result};
use crate::template::InstructionResponsePair;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct F1Options {
    /// Drop `a`, `an`, `the` after normalization.
    pub remove_articles: bool,
}

/// Lowercases, strips ASCII punctuation and splits on whitespace.
pub fn normalize_tokens(text: &str, opts: F1Options) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| !(opts.remove_articles && matches!(*t, "a" | "an" | "the")))
        .map(str::to_string)
        .collect()
}

pub fn token_f1(pred: &str, gold: &str) -> f64 {
    token_f1_with(pred, gold, F1Options::default())
}

/// F1 over token multisets: `2 * common / (|pred| + |gold|)`, which equals
/// the harmonic mean of precision and recall.
pub fn token_f1_with(pred: &str, gold: &str, opts: F1Options) -> f64 {
    let p = normalize_tokens(pred, opts);
    let g = normalize_tokens(gold, opts);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()).filter(|c| **c > 0) {
            *c -= 1;
            common += 1;
        }
    }
    2.0 * common as f64 / (p.len() + g.len()) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub count: usize,
}

impl EvalReport {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let count = scores.len();
        let mean = if count == 0 { 0.0 } else { scores.iter().sum::<f64>() / count as f64 };
        EvalReport { scores, mean, count }
    }

    /// Mean as a percentage with one decimal, e.g. `70.0`.
    pub fn percent(&self) -> String {
        format!("{:.1}", self.mean * 100.0)
    }
}

pub fn response_accuracy<P: AsRef<str>, G: AsRef<str>>(items: &[(P, G)]) -> EvalReport {
    EvalReport::from_scores(items.iter().map(|(p, g)| token_f1(p.as_ref(), g.as_ref())).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairQualityMode {
    /// One-to-one greedy matching of pairs by F1.
    #[default]
    Matching,
    /// F1 between the concatenations of all pairs on each side.
    Concatenated,
}

pub fn pair_set_quality(pred: &[InstructionResponsePair], gold: &[InstructionResponsePair]) -> f64 {
    pair_set_quality_with(pred, gold, PairQualityMode::Matching)
}

pub fn pair_set_quality_with(
    pred: &[InstructionResponsePair],
    gold: &[InstructionResponsePair],
    mode: PairQualityMode,
) -> f64 {
    let pred: Vec<String> = pred.iter().map(InstructionResponsePair::flatten).collect();
    let gold: Vec<String> = gold.iter().map(InstructionResponsePair::flatten).collect();
    match mode {
        PairQualityMode::Matching => greedy_match_score(&pred, &gold),
        PairQualityMode::Concatenated => {
            if pred.is_empty() && gold.is_empty() {
                return 1.0;
            }
            token_f1(&pred.join(" "), &gold.join(" "))
        }
    }
}

/// Repeatedly matches the highest-F1 remaining (pred, gold) pair. Ties are
/// broken on the texts themselves so the result does not depend on input
/// order. Returns matched F1 mass over the larger side's size.
pub fn greedy_match_score(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let mut cells: Vec<(f64, usize, usize)> = Vec::with_capacity(pred.len() * gold.len());
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            cells.push((token_f1(p, g), i, j));
        }
    }
    cells.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| pred[a.1].cmp(&pred[b.1]))
            .then_with(|| gold[a.2].cmp(&gold[b.2]))
    });
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gold.len()];
    let mut total = 0.0;
    for (f1, i, j) in cells {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            total += f1;
        }
    }
    total / pred.len().max(gold.len()) as f64
}

/// Prompt for judging whether synthesized pairs help answer a held-out
/// instruction: the text with its pairs, then the instruction. With no
/// pairs it is just the text followed by the instruction.
pub fn build_helpfulness_prompt(
    text: &str,
    pairs: &[InstructionResponsePair],
    test_instruction: &str,
    entry: &TemplateEntry,
    joiner: &str,
) -> String {
    let context = if pairs.is_empty() {
        text.to_string()
    } else {
        crate::assembly::fill(&entry.concat, &[("text", text), ("pairs", &entry.render_pairs(pairs))])
    };
    format!("{context}{joiner}{}", entry.render_question(test_instruction))
}

/// Pairs of a different document, for the random-pairs baseline.
pub fn random_context_pairs<'a>(
    pair_sets: &'a [Vec<InstructionResponsePair>],
    own: usize,
    seed: u64,
) -> Option<&'a [InstructionResponsePair]> {
    use rand::{Rng, SeedableRng};
    if pair_sets.len() < 2 {
        return None;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ own as u64);
    let mut other = rng.gen_range(0..pair_sets.len() - 1);
    if other >= own {
        other += 1;
    }
    Some(&pair_sets[other])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainLabelSet {
    pub doc_id: String,
    #[serde(default)]
    pub text_domains: BTreeSet<String>,
    #[serde(default)]
    pub instruction_domains: BTreeSet<String>,
}

/// Share of the text's domains that the instructions also cover.
pub fn domain_coverage(d: &DomainLabelSet) -> Result<f64> {
    if d.text_domains.is_empty() {
        return Err(Error::EmptyTextDomains);
    }
    let shared = d.text_domains.intersection(&d.instruction_domains).count();
    Ok(shared as f64 / d.text_domains.len() as f64)
}

/// Jaccard similarity of the two domain sets.
pub fn domain_overlap(d: &DomainLabelSet) -> Result<f64> {
    let union = d.text_domains.union(&d.instruction_domains).count();
    if union == 0 {
        return Err(Error::EmptyUnion);
    }
    let shared = d.text_domains.intersection(&d.instruction_domains).count();
    Ok(shared as f64 / union as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean coverage over rows whose text has at least two domains; `None`
/// when there are no such rows.
pub fn coverage_multidomain_mean(rows: &[DomainLabelSet]) -> Option<f64> {
    mean(
        rows.iter()
            .filter(|r| r.text_domains.len() >= 2)
            .filter_map(|r| domain_coverage(r).ok()),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub rows: usize,
    /// Mean coverage over rows with a non-empty text domain set.
    pub coverage: Option<f64>,
    pub coverage_multidomain: Option<f64>,
    /// Mean overlap over rows with a non-empty union.
    pub overlap: Option<f64>,
    pub rows_without_text_domains: usize,
}

pub fn domain_report(rows: &[DomainLabelSet]) -> DomainReport {
    DomainReport {
        rows: rows.len(),
        coverage: mean(rows.iter().filter_map(|r| domain_coverage(r).ok())),
        coverage_multidomain: coverage_multidomain_mean(rows),
        overlap: mean(rows.iter().filter_map(|r| domain_overlap(r).ok())),
        rows_without_text_domains: rows.iter().filter(|r| r.text_domains.is_empty()).count(),
    }
}
