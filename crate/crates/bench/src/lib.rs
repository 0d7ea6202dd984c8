//! Synthetic inputs shared by the benchmarks and the throughput checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ipt_core::contam::TrainingDoc;
use ipt_core::template::{InstructionResponsePair, SynthesisExample};

const WORDS: &[&str] = &[
    "river", "delta", "protein", "market", "contract", "signal", "orbit", "enzyme", "ledger", "court", "cell",
    "storm", "yield", "vector", "glacier", "tariff", "neuron", "bond", "statute", "crystal", "harbor", "index",
];

pub fn sentence(rng: &mut impl Rng, words: usize) -> String {
    (0..words).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// Documents of roughly `doc_bytes` each until `total_bytes` is reached.
pub fn training_docs(total_bytes: usize, doc_bytes: usize, seed: u64) -> Vec<TrainingDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let mut size = 0;
    while size < total_bytes {
        let mut text = String::with_capacity(doc_bytes + 16);
        while text.len() < doc_bytes {
            text.push_str(WORDS[rng.gen_range(0..WORDS.len())]);
            text.push(' ');
        }
        size += text.len();
        docs.push(TrainingDoc { id: format!("t{}", docs.len()), text });
    }
    docs
}

pub fn examples(n: usize, seed: u64) -> Vec<SynthesisExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let words = rng.gen_range(20..200);
            let text = sentence(&mut rng, words);
            let pairs = (0..rng.gen_range(1..5))
                .map(|_| InstructionResponsePair::free_form(sentence(&mut rng, 6) + "?", sentence(&mut rng, 3)))
                .collect();
            SynthesisExample::new(text, pairs).with_ids(format!("ex{i}"), "bench")
        })
        .collect()
}
