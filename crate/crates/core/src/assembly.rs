//! M-shot instruction-augmented documents.
//!
//! A chain of `M` (text, pairs) examples becomes one pre-training document.
//! One template entry is drawn per document and applied to every shot so the
//! pattern stays consistent across shots.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::packing::{TokenCounter, WhitespaceCounter};
use crate::template::{InstructionResponsePair, SynthesisExample};

const DEFAULT_POOL: &str = include_str!("../assets/default_templates.json");

fn default_separator() -> String {
    "\n\n".into()
}

fn default_cot() -> String {
    "Let's think first: {cot} So the answer is ".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionsFormat {
    pub header: String,
    /// Line template with an `{option}` slot and an optional `{label}` slot
    /// (a, b, c, ...).
    pub item: String,
}

impl Default for OptionsFormat {
    fn default() -> Self {
        OptionsFormat {
            header: "Options:\n".into(),
            item: "- {option}\n".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateEntry {
    pub id: String,
    /// Joins a text with its rendered pairs: `{text}` and `{pairs}`.
    pub concat: String,
    /// One pair: `{instruction}`, `{options}`, `{cot}`, `{response}`.
    pub pair: String,
    #[serde(default)]
    pub options: OptionsFormat,
    /// Rationale prefix placed in the `{cot}` slot for CoT pairs.
    #[serde(default = "default_cot")]
    pub cot: String,
    #[serde(default = "default_separator")]
    pub pair_separator: String,
}

impl TemplateEntry {
    pub fn new(id: impl Into<String>, concat: impl Into<String>, pair: impl Into<String>) -> Self {
        TemplateEntry {
            id: id.into(),
            concat: concat.into(),
            pair: pair.into(),
            options: OptionsFormat::default(),
            cot: default_cot(),
            pair_separator: default_separator(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, &[&'static str]); 4] = [
            (&self.concat, &["text", "pairs"]),
            (&self.pair, &["instruction", "options", "cot", "response"]),
            (&self.options.item, &["option"]),
            (&self.cot, &["cot"]),
        ];
        for (template, slots) in checks {
            for &slot in slots {
                if template.matches(&format!("{{{slot}}}")).count() != 1 {
                    return Err(Error::TemplateSlotMissing {
                        id: self.id.clone(),
                        slot,
                    });
                }
            }
        }
        Ok(())
    }

    fn render_options(&self, options: &[String]) -> String {
        if options.is_empty() {
            return String::new();
        }
        let mut out = self.options.header.clone();
        for (i, opt) in options.iter().enumerate() {
            out.push_str(&fill(&self.options.item, &[("label", &option_label(i)), ("option", opt)]));
        }
        out
    }

    pub fn render_pair(&self, pair: &InstructionResponsePair) -> String {
        let cot = pair
            .cot
            .as_deref()
            .map(|c| fill(&self.cot, &[("cot", c)]))
            .unwrap_or_default();
        fill(
            &self.pair,
            &[
                ("instruction", &pair.instruction),
                ("options", &self.render_options(&pair.options)),
                ("cot", &cot),
                ("response", &pair.response),
            ],
        )
    }

    pub fn render_pairs(&self, pairs: &[InstructionResponsePair]) -> String {
        pairs
            .iter()
            .map(|p| self.render_pair(p))
            .collect::<Vec<_>>()
            .join(&self.pair_separator)
    }

    pub fn render_shot(&self, example: &SynthesisExample) -> String {
        fill(&self.concat, &[("text", &example.text), ("pairs", &self.render_pairs(&example.pairs))])
    }

    /// The question part of a pair with nothing after the answer cue, used to
    /// pose a held-out instruction.
    pub fn render_question(&self, instruction: &str) -> String {
        let open = InstructionResponsePair::free_form(instruction, "");
        self.render_pair(&open).trim_end().to_string()
    }
}

/// `a`, `b`, ..., `z`, then `27`, `28`, ...
fn option_label(i: usize) -> String {
    if i < 26 {
        char::from(b'a' + i as u8).to_string()
    } else {
        (i + 1).to_string()
    }
}

/// Substitutes `{name}` slots in one left-to-right pass, so slot-like text
/// inside the values is left alone.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            values.iter().find(|(k, _)| *k == name).map(|(_, v)| (*v, close))
        });
        match hit {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplatePool {
    pub entries: Vec<TemplateEntry>,
    #[serde(default = "default_separator")]
    pub shot_separator: String,
}

impl TemplatePool {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::MalformedTemplate {
                index: 0,
                reason: "pool has no entries".into(),
            });
        }
        for (index, entry) in self.entries.iter().enumerate() {
            entry.validate().map_err(|e| Error::MalformedTemplate {
                index,
                reason: e.to_string(),
            })?;
            if self.entries[..index].iter().any(|e| e.id == entry.id) {
                return Err(Error::MalformedTemplate {
                    index,
                    reason: format!("duplicate id {:?}", entry.id),
                });
            }
        }
        Ok(())
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let pool: TemplatePool = serde_json::from_str(raw).map_err(|e| Error::MalformedTemplate {
            index: 0,
            reason: e.to_string(),
        })?;
        pool.validate()?;
        Ok(pool)
    }

    /// The built-in pool shipped with the crate.
    pub fn builtin() -> Self {
        TemplatePool::from_json(DEFAULT_POOL).expect("built-in template pool is valid")
    }

    pub fn get(&self, id: &str) -> Option<&TemplateEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

pub fn load_template_pool(path: &Path) -> Result<TemplatePool> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TemplatePool::from_json(&raw)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedDocument {
    pub text: String,
    pub shots: usize,
    pub source_ids: Vec<String>,
    pub template_ids: Vec<String>,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentMeta {
    pub shots: usize,
    pub source_ids: Vec<String>,
    pub template_id: String,
}

/// Output line of the assembled corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledLine {
    pub text: String,
    pub meta: DocumentMeta,
}

impl From<&AugmentedDocument> for AssembledLine {
    fn from(doc: &AugmentedDocument) -> Self {
        AssembledLine {
            text: doc.text.clone(),
            meta: DocumentMeta {
                shots: doc.shots,
                source_ids: doc.source_ids.clone(),
                template_id: doc.template_ids.first().cloned().unwrap_or_default(),
            },
        }
    }
}

/// Index of the template used for a document, drawn from the seed and the
/// document's source ids.
pub fn choose_template(pool_len: usize, source_ids: &[&str], seed: u64) -> usize {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for id in source_ids {
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into()).gen_range(0..pool_len)
}

pub fn assemble_mshot(chain: &[&SynthesisExample], pool: &TemplatePool, seed: u64) -> Result<AugmentedDocument> {
    assemble_mshot_with(chain, pool, seed, &WhitespaceCounter::default())
}

pub fn assemble_mshot_with(
    chain: &[&SynthesisExample],
    pool: &TemplatePool,
    seed: u64,
    counter: &dyn TokenCounter,
) -> Result<AugmentedDocument> {
    if chain.is_empty() {
        return Err(Error::EmptyChain);
    }
    if let Some(index) = chain.iter().position(|ex| ex.pairs.is_empty()) {
        return Err(Error::ChainWithoutPairs { index });
    }
    if pool.entries.is_empty() {
        return Err(Error::MalformedTemplate {
            index: 0,
            reason: "pool has no entries".into(),
        });
    }
    let source_ids: Vec<&str> = chain.iter().map(|e| e.source_id.as_str()).collect();
    let entry = &pool.entries[choose_template(pool.entries.len(), &source_ids, seed)];
    entry.validate()?;
    let text = chain
        .iter()
        .map(|ex| entry.render_shot(ex))
        .collect::<Vec<_>>()
        .join(&pool.shot_separator);
    Ok(AugmentedDocument {
        token_count: counter.count(&text),
        text,
        shots: chain.len(),
        source_ids: source_ids.iter().map(|s| s.to_string()).collect(),
        template_ids: vec![entry.id.clone(); chain.len()],
    })
}
