//! Multi-round instruction synthesis.
//!
//! The selected documents are split into `M` rounds. Round 0 is synthesized
//! from the bare text. In round `m > 0` every document is anchored to one
//! successful example of round `m - 1`; that example's own history plus the
//! example itself are rendered in front of the new text, so the synthesizer
//! sees `m` prior (text, pairs) examples and continues the pattern.
//!
//! Each finished round is persisted before the next one starts, which makes
//! a run resumable from any round boundary.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{CompletionBackend, CompletionRequest, RetryPolicy};
use crate::error::{Error, Result};
use crate::hashing::{sha256_file, sha256_json, write_atomic};
use crate::jsonl;
use crate::packing::TokenCounter;
use crate::template::{parse_pairs, render_example, render_open_stub, SentinelConfig, SynthesisExample};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub num_rounds: usize,
    /// Document ids per round, disjoint, in processing order.
    pub partitions: Vec<Vec<String>>,
    pub seed: u64,
}

impl RoundPlan {
    pub fn doc_count(&self) -> usize {
        self.partitions.iter().map(Vec::len).sum()
    }
}

fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut out = items.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Number of documents converted for a given fraction, rounded down with a
/// small tolerance so that e.g. `0.2 * 10` yields 2.
pub fn converted_count(total: usize, fraction: f64) -> usize {
    ((total as f64 * fraction) + 1e-9).floor().min(total as f64) as usize
}

/// Picks which documents enter synthesis. Both halves keep corpus order.
pub fn select_fraction(doc_ids: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let k = converted_count(doc_ids.len(), fraction);
    let mut idx: Vec<usize> = (0..doc_ids.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = vec![false; doc_ids.len()];
    for &i in &idx[..k] {
        chosen[i] = true;
    }
    let (mut sel, mut rest) = (Vec::with_capacity(k), Vec::with_capacity(doc_ids.len() - k));
    for (id, c) in doc_ids.iter().zip(chosen) {
        if c {
            sel.push(id.clone());
        } else {
            rest.push(id.clone());
        }
    }
    (sel, rest)
}

/// Near-equal split of `total` items over `rounds`; earlier rounds take the
/// remainder.
pub fn partition_sizes(total: usize, rounds: usize) -> Vec<usize> {
    let (base, extra) = (total / rounds, total % rounds);
    (0..rounds).map(|r| base + usize::from(r < extra)).collect()
}

/// Shuffles the documents and splits them into `num_rounds` partitions whose
/// sizes differ by at most one; earlier rounds take the remainder.
pub fn plan_rounds(doc_ids: &[String], num_rounds: usize, seed: u64) -> Result<RoundPlan> {
    if num_rounds == 0 || doc_ids.len() < num_rounds {
        return Err(Error::InsufficientDocuments {
            docs: doc_ids.len(),
            rounds: num_rounds,
        });
    }
    let order = shuffled(doc_ids, seed);
    let mut partitions = Vec::with_capacity(num_rounds);
    let mut at = 0;
    for size in partition_sizes(order.len(), num_rounds) {
        partitions.push(order[at..at + size].to_vec());
        at += size;
    }
    Ok(RoundPlan {
        num_rounds,
        partitions,
        seed,
    })
}

/// Prior examples prepended to one document's synthesis prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChainState {
    pub history: Vec<SynthesisExample>,
}

/// One persisted synthesis result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainedExample {
    pub doc_id: String,
    pub round: usize,
    /// Doc ids of the history this example was conditioned on, oldest first.
    pub history: Vec<String>,
    pub example: SynthesisExample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub doc_id: String,
    pub round: usize,
    pub prompt: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthesisIssueKind {
    EmptySynthesis,
    BackendError,
    PromptTooLong,
    ParseIssue,
    MissingDocument,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisIssue {
    pub doc_id: String,
    pub round: usize,
    pub kind: SynthesisIssueKind,
    pub detail: String,
}

/// Successful examples of every completed round.
#[derive(Debug, Clone, Default)]
pub struct ChainStore {
    rounds: Vec<Vec<ChainedExample>>,
    index: HashMap<String, (usize, usize)>,
}

impl ChainStore {
    pub fn completed_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn round(&self, r: usize) -> &[ChainedExample] {
        self.rounds.get(r).map_or(&[], Vec::as_slice)
    }

    pub fn get(&self, doc_id: &str) -> Option<&ChainedExample> {
        self.index.get(doc_id).map(|&(r, i)| &self.rounds[r][i])
    }

    pub fn push_round(&mut self, records: Vec<ChainedExample>) {
        let r = self.rounds.len();
        for (i, rec) in records.iter().enumerate() {
            self.index.insert(rec.doc_id.clone(), (r, i));
        }
        self.rounds.push(records);
    }

    pub fn iter(&self) -> impl Iterator<Item = &ChainedExample> {
        self.rounds.iter().flatten()
    }

    /// History examples followed by the record itself.
    pub fn full_chain<'a>(&'a self, rec: &'a ChainedExample) -> Vec<&'a SynthesisExample> {
        rec.history
            .iter()
            .filter_map(|id| self.get(id).map(|r| &r.example))
            .chain(std::iter::once(&rec.example))
            .collect()
    }

    /// Chains ending in an example that no later example was anchored to.
    /// These are the units that become M-shot documents.
    pub fn leaf_chains(&self) -> Vec<Vec<&SynthesisExample>> {
        let anchors: std::collections::HashSet<&str> = self
            .iter()
            .filter_map(|r| r.history.last().map(String::as_str))
            .collect();
        self.iter()
            .filter(|r| !anchors.contains(r.doc_id.as_str()))
            .map(|r| self.full_chain(r))
            .collect()
    }
}

/// Assigns each document of `round_idx` a history drawn from the previous
/// round's successful outputs. The prior examples are shuffled with the seed
/// and then dealt round-robin, so each anchors `|current| / |prior|`
/// documents (give or take one).
pub fn assign_chains(
    plan: &RoundPlan,
    round_idx: usize,
    store: &ChainStore,
    seed: u64,
) -> Result<Vec<(String, ChainState)>> {
    let current = plan.partitions.get(round_idx).ok_or(Error::RoundOutOfRange {
        round: round_idx,
        rounds: plan.num_rounds,
    })?;
    if round_idx == 0 {
        return Ok(current.iter().map(|d| (d.clone(), ChainState::default())).collect());
    }
    let prior: Vec<&ChainedExample> = store.round(round_idx - 1).iter().collect();
    if prior.is_empty() {
        return Err(Error::NoPriorOutputs { round: round_idx });
    }
    let prior = shuffled(&prior, seed ^ (round_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    Ok(current
        .iter()
        .enumerate()
        .map(|(i, doc)| {
            let anchor = prior[i % prior.len()];
            let history = store.full_chain(anchor).into_iter().cloned().collect();
            (doc.clone(), ChainState { history })
        })
        .collect())
}

/// Renders the history followed by the open stub for `current_text`. Whole
/// history entries are dropped oldest-first until the prompt fits `budget`.
pub fn build_inference_prompt(
    state: &ChainState,
    current_text: &str,
    cfg: &SentinelConfig,
    budget: usize,
    counter: &dyn TokenCounter,
) -> Result<String> {
    let stub = render_open_stub(current_text, cfg)?;
    let stub_tokens = counter.count(&stub);
    if stub_tokens > budget {
        return Err(Error::PromptTooLong {
            tokens: stub_tokens,
            budget,
        });
    }
    let rendered = state
        .history
        .iter()
        .map(|ex| render_example(ex, cfg))
        .collect::<Result<Vec<_>>>()?;
    for skip in 0..=rendered.len() {
        let prompt = format!("{}{}", rendered[skip..].concat(), stub);
        if counter.count(&prompt) <= budget {
            return Ok(prompt);
        }
    }
    unreachable!("the bare stub fits the budget")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSettings {
    pub sentinels: SentinelConfig,
    pub max_new_tokens: usize,
    /// Token budget for the prompt alone.
    pub prompt_budget: usize,
    pub temperature: f64,
    pub in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        SynthesisSettings {
            sentinels: SentinelConfig::default(),
            max_new_tokens: 700,
            prompt_budget: 4096 - 700,
            temperature: 0.0,
            in_flight: 16,
            retry: RetryPolicy::default(),
        }
    }
}

impl SynthesisSettings {
    /// Fields that influence generated content; used to detect stale state.
    fn content_key(&self) -> serde_json::Value {
        serde_json::json!({
            "sentinels": self.sentinels,
            "max_new_tokens": self.max_new_tokens,
            "prompt_budget": self.prompt_budget,
            "temperature": self.temperature,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundOutput {
    pub examples: Vec<ChainedExample>,
    pub prompts: Vec<PromptRecord>,
    pub issues: Vec<SynthesisIssue>,
}

enum DocOutcome {
    Done(ChainedExample, PromptRecord, Vec<SynthesisIssue>),
    Failed(Option<PromptRecord>, Vec<SynthesisIssue>),
}

#[allow(clippy::too_many_arguments)]
fn synthesize_doc(
    doc_id: &str,
    round: usize,
    state: &ChainState,
    history_ids: Vec<String>,
    corpus: &HashMap<String, String>,
    backend: &dyn CompletionBackend,
    settings: &SynthesisSettings,
    counter: &dyn TokenCounter,
) -> DocOutcome {
    let issue = |kind, detail: String| SynthesisIssue {
        doc_id: doc_id.to_string(),
        round,
        kind,
        detail,
    };
    let Some(text) = corpus.get(doc_id) else {
        return DocOutcome::Failed(None, vec![issue(SynthesisIssueKind::MissingDocument, "not in corpus".into())]);
    };
    let prompt = match build_inference_prompt(state, text, &settings.sentinels, settings.prompt_budget, counter) {
        Ok(p) => p,
        Err(e) => return DocOutcome::Failed(None, vec![issue(SynthesisIssueKind::PromptTooLong, e.to_string())]),
    };
    let kept = prompt.matches(settings.sentinels.example_open.as_str()).count() - 1;
    let history_ids = history_ids[history_ids.len() - kept..].to_vec();
    let record = PromptRecord {
        doc_id: doc_id.to_string(),
        round,
        prompt,
    };
    let req = CompletionRequest {
        prompt: record.prompt.clone(),
        max_tokens: settings.max_new_tokens,
        stop: vec![settings.sentinels.example_close.clone()],
        temperature: settings.temperature,
    };
    let generated = match settings.retry.run(backend, &req) {
        (Ok(g), _) => g,
        (Err(e), attempts) => {
            return DocOutcome::Failed(
                Some(record),
                vec![issue(SynthesisIssueKind::BackendError, format!("{e} after {attempts} attempts"))],
            )
        }
    };
    let (pairs, parse_issues) = parse_pairs(&generated, &settings.sentinels);
    let mut issues: Vec<SynthesisIssue> = parse_issues
        .into_iter()
        .map(|p| issue(SynthesisIssueKind::ParseIssue, p.to_string()))
        .collect();
    if pairs.is_empty() {
        issues.push(issue(SynthesisIssueKind::EmptySynthesis, "no pairs parsed".into()));
        return DocOutcome::Failed(Some(record), issues);
    }
    let example = ChainedExample {
        doc_id: doc_id.to_string(),
        round,
        history: history_ids,
        example: SynthesisExample::new(text.clone(), pairs).with_ids(doc_id, "synthesized"),
    };
    DocOutcome::Done(example, record, issues)
}

/// Runs one round over `plan.partitions[round_idx]` with at most
/// `settings.in_flight` backend calls outstanding. Results come back in
/// partition order whatever the completion order was. Per-document failures
/// become issues; the round itself only fails on precondition errors.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_round(
    plan: &RoundPlan,
    round_idx: usize,
    corpus: &HashMap<String, String>,
    store: &ChainStore,
    backend: &dyn CompletionBackend,
    settings: &SynthesisSettings,
    counter: &dyn TokenCounter,
) -> Result<RoundOutput> {
    if store.completed_rounds() != round_idx {
        return Err(Error::RoundOutOfRange {
            round: round_idx,
            rounds: store.completed_rounds(),
        });
    }
    let chains = assign_chains(plan, round_idx, store, plan.seed)?;
    let history_ids: Vec<Vec<String>> = chains
        .iter()
        .map(|(_, state)| state.history.iter().map(|e| e.source_id.clone()).collect())
        .collect();

    let slots: Vec<Mutex<Option<DocOutcome>>> = chains.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = settings.in_flight.max(1).min(chains.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((doc_id, state)) = chains.get(i) else { break };
                let outcome = synthesize_doc(
                    doc_id,
                    round_idx,
                    state,
                    history_ids[i].clone(),
                    corpus,
                    backend,
                    settings,
                    counter,
                );
                *slots[i].lock().expect("slot lock") = Some(outcome);
            });
        }
    });

    let mut out = RoundOutput::default();
    for slot in slots {
        match slot.into_inner().expect("slot lock").expect("every slot filled") {
            DocOutcome::Done(ex, prompt, issues) => {
                out.examples.push(ex);
                out.prompts.push(prompt);
                out.issues.extend(issues);
            }
            DocOutcome::Failed(prompt, issues) => {
                out.prompts.extend(prompt);
                out.issues.extend(issues);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PlanFile {
    plan: RoundPlan,
    config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RoundDone {
    examples: String,
    prompts: String,
    issues: String,
}

/// Append-only on-disk store of a synthesis run:
///
/// ```text
/// plan.json                 plan and hash of everything affecting content
/// round-{m}.jsonl           successful ChainedExamples in partition order
/// round-{m}.prompts.jsonl   prompts sent to the backend
/// round-{m}.issues.jsonl    per-document problems
/// round-{m}.done            content hashes; written last
/// ```
pub struct SynthesisRun<'a> {
    pub dir: PathBuf,
    pub plan: RoundPlan,
    pub settings: &'a SynthesisSettings,
    pub backend: &'a dyn CompletionBackend,
    /// Identifies the backend in the state hash, e.g. its URL.
    pub backend_id: String,
    pub counter: &'a dyn TokenCounter,
}

impl SynthesisRun<'_> {
    fn round_path(&self, round: usize, suffix: &str) -> PathBuf {
        self.dir.join(format!("round-{round}{suffix}"))
    }

    fn config_hash(&self) -> Result<String> {
        sha256_json(&serde_json::json!({
            "plan": self.plan,
            "settings": self.settings.content_key(),
            "backend": self.backend_id,
        }))
    }

    /// Prepares the directory. State left by a run with a different plan or
    /// configuration is discarded.
    fn open(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let plan_path = self.dir.join("plan.json");
        let want = PlanFile {
            plan: self.plan.clone(),
            config_hash: self.config_hash()?,
        };
        let current: Option<PlanFile> = std::fs::read(&plan_path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        if current.as_ref() != Some(&want) {
            self.clear_rounds()?;
            write_atomic(&plan_path, &serde_json::to_vec_pretty(&want)?)?;
        }
        Ok(())
    }

    fn clear_rounds(&self) -> Result<()> {
        let entries = std::fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        for entry in entries.flatten() {
            let name = entry.file_name();
            if name.to_string_lossy().starts_with("round-") {
                std::fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
            }
        }
        Ok(())
    }

    fn load_round(&self, round: usize) -> Result<Option<Vec<ChainedExample>>> {
        let done_path = self.round_path(round, ".done");
        let Ok(bytes) = std::fs::read(&done_path) else {
            return Ok(None);
        };
        let done: RoundDone = serde_json::from_slice(&bytes)?;
        let paths = [
            (self.round_path(round, ".jsonl"), &done.examples),
            (self.round_path(round, ".prompts.jsonl"), &done.prompts),
            (self.round_path(round, ".issues.jsonl"), &done.issues),
        ];
        for (path, want) in &paths {
            if !path.exists() || &sha256_file(path)? != *want {
                return Ok(None);
            }
        }
        jsonl::read(&paths[0].0).map(Some)
    }

    fn persist_round(&self, round: usize, out: &RoundOutput) -> Result<()> {
        let write = |suffix: &str, body: Vec<u8>| -> Result<String> {
            let path = self.round_path(round, suffix);
            write_atomic(&path, &body)?;
            sha256_file(&path)
        };
        let mut ex_buf = Vec::new();
        jsonl::write_to(&mut ex_buf, &out.examples).map_err(|e| Error::io(&self.dir, e))?;
        let mut pr_buf = Vec::new();
        jsonl::write_to(&mut pr_buf, &out.prompts).map_err(|e| Error::io(&self.dir, e))?;
        let mut is_buf = Vec::new();
        jsonl::write_to(&mut is_buf, &out.issues).map_err(|e| Error::io(&self.dir, e))?;
        let done = RoundDone {
            examples: write(".jsonl", ex_buf)?,
            prompts: write(".prompts.jsonl", pr_buf)?,
            issues: write(".issues.jsonl", is_buf)?,
        };
        write_atomic(&self.round_path(round, ".done"), &serde_json::to_vec_pretty(&done)?)
    }

    /// Runs (or resumes) rounds `0..=until` (all rounds when `None`) and
    /// returns the store of completed rounds.
    pub fn run(&self, corpus: &HashMap<String, String>, until: Option<usize>) -> Result<ChainStore> {
        self.open()?;
        let last = until.map_or(self.plan.num_rounds, |u| (u + 1).min(self.plan.num_rounds));
        let mut store = ChainStore::default();
        let mut resumed = true;
        for round in 0..last {
            if resumed {
                if let Some(records) = self.load_round(round)? {
                    store.push_round(records);
                    continue;
                }
                resumed = false;
            }
            let out = synthesize_round(&self.plan, round, corpus, &store, self.backend, self.settings, self.counter)?;
            self.persist_round(round, &out)?;
            store.push_round(out.examples);
        }
        Ok(store)
    }

    pub fn prompts(&self, round: usize) -> Result<Vec<PromptRecord>> {
        jsonl::read(&self.round_path(round, ".prompts.jsonl"))
    }

    pub fn issues(&self, round: usize) -> Result<Vec<SynthesisIssue>> {
        jsonl::read(&self.round_path(round, ".issues.jsonl"))
    }
}

/// Reads every completed round of a store directory without running anything.
pub fn load_store(dir: &Path) -> Result<ChainStore> {
    let mut store = ChainStore::default();
    for round in 0.. {
        let path = dir.join(format!("round-{round}.jsonl"));
        if !dir.join(format!("round-{round}.done")).exists() {
            break;
        }
        store.push_round(jsonl::read(&path)?);
    }
    Ok(store)
}
