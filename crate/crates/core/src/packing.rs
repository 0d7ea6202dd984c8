//! Few-shot tuning sequences for the synthesizer.
//!
//! Examples from one dataset are shuffled and concatenated greedily until
//! the next example would push the sequence past the token budget. Loss is
//! computed only on the pair blocks, which the emitted segments mark.

use std::cmp::Reverse;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::template::{render_example_segments, Rendered, Segment, SegmentKind, SentinelConfig, SynthesisExample};

/// Approximate tokenizer interface. Implementations must return 0 for the
/// empty string and satisfy `count(a + b) <= count(a) + count(b) + slack()`.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;

    fn slack(&self) -> usize {
        0
    }
}

/// Whitespace word count scaled by a rational factor and rounded up.
///
/// The default factor is 1.3 tokens per word. It is only a rough stand-in
/// for a subword tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhitespaceCounter {
    pub numerator: usize,
    pub denominator: usize,
}

impl WhitespaceCounter {
    pub const fn new(numerator: usize, denominator: usize) -> Self {
        WhitespaceCounter {
            numerator,
            denominator,
        }
    }

    /// One token per whitespace-delimited word.
    pub const fn words() -> Self {
        WhitespaceCounter::new(1, 1)
    }
}

impl Default for WhitespaceCounter {
    fn default() -> Self {
        WhitespaceCounter::new(13, 10)
    }
}

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        let words = text.split_whitespace().count();
        (words * self.numerator).div_ceil(self.denominator)
    }
}

impl<T: TokenCounter + ?Sized> TokenCounter for &T {
    fn count(&self, text: &str) -> usize {
        (**self).count(text)
    }

    fn slack(&self) -> usize {
        (**self).slack()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub text: String,
    pub segments: Vec<Segment>,
    pub source_ids: Vec<String>,
    pub token_count: usize,
}

impl PackedSequence {
    /// Checks that the segments tile the text exactly.
    pub fn segments_tile(&self) -> bool {
        let mut at = 0;
        for seg in &self.segments {
            if seg.start != at || seg.end <= seg.start {
                return false;
            }
            at = seg.end;
        }
        at == self.text.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub source_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PackOutcome {
    pub sequences: Vec<PackedSequence>,
    pub skipped: Vec<SkipRecord>,
}

/// Keeps at most `cap` examples, preferring those with more pairs. Ties go to
/// the smaller source id.
pub fn select_tuning_subset(dataset: &[SynthesisExample], cap: usize) -> Vec<SynthesisExample> {
    let mut ranked: Vec<&SynthesisExample> = dataset.iter().collect();
    ranked.sort_by(|a, b| {
        (Reverse(a.pairs.len()), &a.source_id).cmp(&(Reverse(b.pairs.len()), &b.source_id))
    });
    ranked.into_iter().take(cap).cloned().collect()
}

struct Builder {
    rendered: Rendered,
    source_ids: Vec<String>,
    token_count: usize,
}

impl Builder {
    fn finish(self) -> PackedSequence {
        PackedSequence {
            text: self.rendered.text,
            segments: self.rendered.segments,
            source_ids: self.source_ids,
            token_count: self.token_count,
        }
    }
}

pub fn pack_tuning_sequences(
    dataset: &[SynthesisExample],
    max_len: usize,
    counter: &dyn TokenCounter,
    cfg: &SentinelConfig,
    seed: u64,
) -> Result<PackOutcome> {
    if max_len == 0 {
        return Err(Error::ZeroBudget);
    }
    if let Some(first) = dataset.first() {
        if let Some(other) = dataset.iter().find(|e| e.dataset_id != first.dataset_id) {
            return Err(Error::MixedDatasets(first.dataset_id.clone(), other.dataset_id.clone()));
        }
    }

    let mut order: Vec<&SynthesisExample> = dataset.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut out = PackOutcome::default();
    let mut current: Option<Builder> = None;
    for ex in order {
        let rendered = match render_example_segments(ex, cfg) {
            Ok(r) => r,
            Err(e) => {
                out.skipped.push(SkipRecord {
                    source_id: ex.source_id.clone(),
                    reason: format!("unrenderable: {e}"),
                });
                continue;
            }
        };
        let alone = counter.count(&rendered.text);
        if alone > max_len {
            out.skipped.push(SkipRecord {
                source_id: ex.source_id.clone(),
                reason: format!("ExampleTooLong: {alone} tokens > {max_len}"),
            });
            continue;
        }
        if let Some(b) = current.as_mut() {
            let joined = counter.count(&format!("{}{}", b.rendered.text, rendered.text));
            if joined <= max_len {
                b.rendered.append(&rendered);
                b.source_ids.push(ex.source_id.clone());
                b.token_count = joined;
                continue;
            }
            out.sequences.extend(current.take().map(Builder::finish));
        }
        current = Some(Builder {
            rendered,
            source_ids: vec![ex.source_id.clone()],
            token_count: alone,
        });
    }
    out.sequences.extend(current.map(Builder::finish));

    for seq in &out.sequences {
        let recount = counter.count(&seq.text);
        assert!(
            recount <= max_len && seq.segments_tile(),
            "packed sequence violates its budget or tiling"
        );
    }
    Ok(out)
}

/// Byte spans on which tuning loss is computed: the pair blocks.
pub fn loss_mask(seq: &PackedSequence) -> Vec<(usize, usize)> {
    seq.segments
        .iter()
        .filter(|s| s.kind == SegmentKind::Pairs)
        .map(|s| (s.start, s.end))
        .collect()
}
