//! Seeded generators shared by integration tests.
#![allow(dead_code)]

use rand::Rng;

use ipt_core::template::{InstructionResponsePair, PairFormat, SynthesisExample};

const PUNCT: &[&str] = &[",", ".", "!", "?", ";", ":", "(x)", "—", "'s", "é", "42", "3.5%"];

pub fn word(rng: &mut impl Rng) -> String {
    if rng.gen_ratio(1, 12) {
        return PUNCT[rng.gen_range(0..PUNCT.len())].to_string();
    }
    let len = rng.gen_range(1..9);
    let mut w: String = (0..len).map(|_| char::from(b'a' + rng.gen_range(0..26))).collect();
    if rng.gen_ratio(1, 6) {
        w = w[..1].to_uppercase() + &w[1..];
    }
    w
}

pub fn phrase(rng: &mut impl Rng, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| word(rng)).collect::<Vec<_>>().join(" ")
}

/// Text with occasional paragraph and line breaks inside.
pub fn text(rng: &mut impl Rng, min: usize, max: usize) -> String {
    let mut out = phrase(rng, min.max(1), max.max(1));
    for _ in 0..rng.gen_range(0..3) {
        let sep = if rng.gen_bool(0.5) { "\n\n" } else { "\n" };
        out = format!("{out}{sep}{}", phrase(rng, 1, 12));
    }
    out
}

pub fn pair(rng: &mut impl Rng, format: PairFormat) -> InstructionResponsePair {
    let mut instruction = phrase(rng, 1, 12);
    if rng.gen_ratio(1, 5) {
        instruction = format!("{instruction}\n{}", phrase(rng, 1, 6));
    }
    let response = phrase(rng, 1, 8);
    let base = if format.is_multiple_choice() {
        let options = (0..rng.gen_range(2..6)).map(|_| phrase(rng, 1, 4)).collect();
        InstructionResponsePair::multiple_choice(instruction, options, response)
    } else {
        InstructionResponsePair::free_form(instruction, response)
    };
    if format.is_cot() {
        base.with_cot(text(rng, 2, 20))
    } else {
        base
    }
}

pub fn example(rng: &mut impl Rng) -> SynthesisExample {
    let n = if rng.gen_ratio(1, 20) { 0 } else { rng.gen_range(1..6) };
    let pairs = (0..n)
        .map(|_| {
            let format = PairFormat::ALL[rng.gen_range(0..4)];
            pair(rng, format)
        })
        .collect();
    SynthesisExample::new(text(rng, 3, 80), pairs)
}
