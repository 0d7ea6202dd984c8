//! Substring-match contamination between evaluation sets and training
//! streams. A rolling-hash index over strided windows filters candidates;
//! every reported hit is confirmed by an exact comparison, so the indexed
//! answer equals a plain substring scan.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Lowercase and collapse every whitespace run to one space.
pub fn normalize_for_contam(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = true;
            continue;
        }
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        out.extend(c.to_lowercase());
    }
    if pending_space && !out.is_empty() {
        out.push(' ');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContamMode {
    /// `k` sampled probes per example.
    Fast,
    /// Stride 1 and every window of every example.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContamConfig {
    pub substring_len: usize,
    /// Index stride; forced to 1 in exhaustive mode.
    pub stride: usize,
    pub samples_per_example: usize,
    pub mode: ContamMode,
    pub seed: u64,
}

impl Default for ContamConfig {
    fn default() -> Self {
        ContamConfig { substring_len: 50, stride: 25, samples_per_example: 3, mode: ContamMode::Fast, seed: 0 }
    }
}

impl ContamConfig {
    pub fn exhaustive(substring_len: usize) -> Self {
        ContamConfig { substring_len, stride: 1, mode: ContamMode::Exhaustive, ..Default::default() }
    }

    pub fn effective_stride(&self) -> usize {
        match self.mode {
            ContamMode::Exhaustive => 1,
            ContamMode::Fast => self.stride,
        }
    }

    pub fn probe_len(&self) -> usize {
        self.substring_len + self.effective_stride() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let (l, s) = (self.substring_len, self.effective_stride());
        if l < 16 {
            return Err(Error::InvalidContamConfig(format!("substring length {l} is below 16")));
        }
        if s == 0 || s > l {
            return Err(Error::InvalidContamConfig(format!("stride {s} must be in 1..={l}")));
        }
        if self.samples_per_example == 0 {
            return Err(Error::InvalidContamConfig("samples per example must be at least 1".into()));
        }
        Ok(())
    }
}

const MOD: u64 = (1 << 61) - 1;
const BASE: u64 = 1_000_003;

fn mulmod(a: u64, b: u64) -> u64 {
    let p = a as u128 * b as u128;
    let r = (p & MOD as u128) as u64 + (p >> 61) as u64;
    if r >= MOD {
        r - MOD
    } else {
        r
    }
}

/// Rolling hashes of every `len`-char window, paired with the window's byte
/// offset.
fn window_hashes(text: &str, len: usize) -> Vec<(u64, usize)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    if chars.len() < len || len == 0 {
        return Vec::new();
    }
    let mut top = 1u64;
    for _ in 1..len {
        top = mulmod(top, BASE);
    }
    let mut h = 0u64;
    for &(_, c) in &chars[..len] {
        h = (mulmod(h, BASE) + c as u64) % MOD;
    }
    let mut out = Vec::with_capacity(chars.len() - len + 1);
    out.push((h, 0));
    for i in len..chars.len() {
        let outgoing = mulmod(chars[i - len].1 as u64, top);
        h = (h + MOD - outgoing) % MOD;
        h = (mulmod(h, BASE) + chars[i].1 as u64) % MOD;
        out.push((h, chars[i - len + 1].0));
    }
    out
}

#[derive(Default)]
struct FingerprintHasher(u64);

impl Hasher for FingerprintHasher {
    fn finish(&self) -> u64 {
        self.0
    }
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0 ^ b as u64).wrapping_mul(0x100000001b3);
        }
    }
    fn write_u64(&mut self, x: u64) {
        self.0 = x.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }
}

type FingerprintMap = HashMap<u64, u32, BuildHasherDefault<FingerprintHasher>>;

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct Posting {
    doc: u32,
    offset: u32,
    next: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingDoc {
    pub id: String,
    pub text: String,
}

/// Fingerprints of every `stride`-aligned window (in chars) of the
/// normalized training documents, with postings back to the documents.
pub struct SubstringIndex {
    window: usize,
    stride: usize,
    heads: FingerprintMap,
    postings: Vec<Posting>,
    docs: Vec<TrainingDoc>,
}

impl SubstringIndex {
    /// Documents are normalized here; callers pass raw text.
    pub fn build(docs: impl IntoIterator<Item = TrainingDoc>, window: usize, stride: usize) -> Result<Self> {
        if window < 16 || stride == 0 || stride > window {
            return Err(Error::InvalidContamConfig(format!(
                "window {window} / stride {stride} out of range"
            )));
        }
        let docs: Vec<TrainingDoc> = docs
            .into_iter()
            .map(|d| TrainingDoc { text: normalize_for_contam(&d.text), id: d.id })
            .collect();
        if docs.len() >= NONE as usize {
            return Err(Error::InvalidContamConfig("too many training documents".into()));
        }
        let per_doc: Vec<Vec<(u64, u32)>> = docs
            .par_iter()
            .map(|d| {
                window_hashes(&d.text, window)
                    .into_iter()
                    .step_by(stride)
                    .map(|(h, off)| (h, off as u32))
                    .collect()
            })
            .collect();
        let total: usize = per_doc.iter().map(Vec::len).sum();
        let mut heads = FingerprintMap::with_capacity_and_hasher(total, Default::default());
        let mut postings = Vec::with_capacity(total);
        for (doc, windows) in per_doc.into_iter().enumerate() {
            for (h, offset) in windows {
                let slot = heads.entry(h).or_insert(NONE);
                postings.push(Posting { doc: doc as u32, offset, next: *slot });
                *slot = (postings.len() - 1) as u32;
            }
        }
        Ok(SubstringIndex { window, stride, heads, postings, docs })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn docs(&self) -> &[TrainingDoc] {
        &self.docs
    }

    pub fn is_empty(&self) -> bool {
        self.postings.is_empty()
    }

    /// Whether a window fingerprint is present; `window_text` is normalized.
    pub fn contains_window(&self, window_text: &str) -> bool {
        window_hashes(window_text, self.window)
            .first()
            .is_some_and(|(h, _)| self.locate_window(*h, window_text).is_some())
    }

    fn locate_window(&self, h: u64, needle: &str) -> Option<(u32, usize)> {
        self.postings_for(h).find_map(|p| {
            let off = p.offset as usize;
            let doc = &self.docs[p.doc as usize].text;
            doc.get(off..off + needle.len()).filter(|s| *s == needle).map(|_| (p.doc, off))
        })
    }

    fn postings_for(&self, h: u64) -> impl Iterator<Item = Posting> + '_ {
        let mut cur = self.heads.get(&h).copied().unwrap_or(NONE);
        std::iter::from_fn(move || {
            if cur == NONE {
                return None;
            }
            let p = self.postings[cur as usize];
            cur = p.next;
            Some(p)
        })
    }

    /// Exact search for `probe`, a normalized string of at least
    /// `window + stride - 1` chars. `hashes` are the probe's first `stride`
    /// window fingerprints with their byte offsets inside the probe.
    fn confirm(&self, probe: &str, hashes: &[(u64, usize)]) -> Option<(u32, usize)> {
        for &(h, rel) in hashes.iter().take(self.stride) {
            for p in self.postings_for(h) {
                let Some(start) = (p.offset as usize).checked_sub(rel) else { continue };
                let doc = &self.docs[p.doc as usize].text;
                if doc.get(start..start + probe.len()) == Some(probe) {
                    return Some((p.doc, start));
                }
            }
        }
        None
    }

    fn scan(&self, needle: &str) -> Option<(u32, usize)> {
        self.docs
            .iter()
            .enumerate()
            .find_map(|(i, d)| d.text.find(needle).map(|off| (i as u32, off)))
    }

    /// Locates a normalized needle in the training text, using the index when
    /// the needle is long enough for the stride guarantee and a scan otherwise.
    pub fn find(&self, needle: &str) -> Option<(u32, usize)> {
        if needle.is_empty() {
            return None;
        }
        let hashes = window_hashes(needle, self.window);
        if hashes.len() >= self.stride {
            self.confirm(needle, &hashes[..self.stride])
        } else {
            self.scan(needle)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub doc_id: String,
    /// Byte offset of the match in the normalized training document.
    pub offset: usize,
    /// The matched normalized text.
    pub probe: String,
}

/// Char ranges (start, len) of the probes checked for one normalized example.
pub fn probe_ranges(example_chars: usize, cfg: &ContamConfig, key: &str) -> Vec<(usize, usize)> {
    let probe = cfg.probe_len();
    if example_chars == 0 {
        return Vec::new();
    }
    if example_chars <= probe {
        return vec![(0, example_chars)];
    }
    let starts = example_chars - probe + 1;
    match cfg.mode {
        ContamMode::Exhaustive => (0..starts).map(|s| (s, probe)).collect(),
        ContamMode::Fast => {
            let digest = Sha256::new()
                .chain_update(cfg.seed.to_le_bytes())
                .chain_update(key.as_bytes())
                .finalize();
            let mut rng = ChaCha8Rng::from_seed(digest.into());
            let mut picked = sample(&mut rng, starts, cfg.samples_per_example.min(starts)).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|s| (s, probe)).collect()
        }
    }
}

/// Returns evidence of the first probe found verbatim in the index.
pub fn check_example(example_text: &str, key: &str, index: &SubstringIndex, cfg: &ContamConfig) -> Option<Evidence> {
    let norm = normalize_for_contam(example_text);
    let bounds: Vec<usize> = norm.char_indices().map(|(i, _)| i).chain([norm.len()]).collect();
    let char_len = bounds.len() - 1;
    let ranges = probe_ranges(char_len, cfg, key);
    let hashes = window_hashes(&norm, index.window);
    ranges.into_iter().find_map(|(start, len)| {
        let probe = &norm[bounds[start]..bounds[start + len]];
        let found = if len >= index.window + index.stride - 1 {
            let base = bounds[start];
            let local: Vec<(u64, usize)> =
                hashes[start..start + index.stride].iter().map(|&(h, off)| (h, off - base)).collect();
            index.confirm(probe, &local)
        } else {
            index.scan(probe)
        };
        found.map(|(doc, offset)| Evidence {
            doc_id: index.docs[doc as usize].id.clone(),
            offset,
            probe: probe.to_string(),
        })
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSet {
    pub dataset_id: String,
    pub examples: Vec<EvalExample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetContamination {
    pub dataset_id: String,
    pub total_examples: usize,
    pub contaminated: usize,
    pub contaminated_ids: Vec<String>,
    pub evidence: Vec<Evidence>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamContamination {
    pub stream_id: String,
    pub documents: usize,
    pub per_dataset: Vec<DatasetContamination>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub substring_len: usize,
    pub stride: usize,
    pub samples_per_example: usize,
    pub mode: ContamMode,
    pub seed: u64,
    pub normalization: Vec<String>,
    pub assumptions: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub dataset_id: String,
    pub total_examples: usize,
    pub raw: usize,
    pub augmented: usize,
    /// Contamination attributable to synthesized pairs: augmented minus raw.
    pub synthesized: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub config: ReportConfig,
    pub streams: Vec<StreamContamination>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub delta: Vec<DeltaRow>,
}

impl ContaminationReport {
    pub fn stream(&self, stream_id: &str) -> Option<&StreamContamination> {
        self.streams.iter().find(|s| s.stream_id == stream_id)
    }

    /// Per-dataset differencing between a raw and an augmented stream that
    /// were checked against the same evaluation sets.
    pub fn difference(&self, raw: &str, augmented: &str) -> Option<Vec<DeltaRow>> {
        let (r, a) = (self.stream(raw)?, self.stream(augmented)?);
        let rows = r
            .per_dataset
            .iter()
            .zip(&a.per_dataset)
            .map(|(r, a)| DeltaRow {
                dataset_id: r.dataset_id.clone(),
                total_examples: r.total_examples,
                raw: r.contaminated,
                augmented: a.contaminated,
                synthesized: a.contaminated as i64 - r.contaminated as i64,
            })
            .collect();
        Some(rows)
    }
}

pub fn check_set(set: &EvalSet, index: &SubstringIndex, cfg: &ContamConfig) -> DatasetContamination {
    let hits: Vec<Option<Evidence>> = set
        .examples
        .par_iter()
        .map(|ex| check_example(&ex.text, &ex.id, index, cfg))
        .collect();
    let mut out = DatasetContamination {
        dataset_id: set.dataset_id.clone(),
        total_examples: set.examples.len(),
        contaminated: 0,
        contaminated_ids: Vec::new(),
        evidence: Vec::new(),
    };
    for (ex, hit) in set.examples.iter().zip(hits) {
        if let Some(ev) = hit {
            out.contaminated_ids.push(ex.id.clone());
            out.evidence.push(ev);
        }
    }
    out.contaminated = out.contaminated_ids.len();
    out
}

/// Checks every evaluation set against every training stream.
pub fn contamination_report(
    eval_sets: &[EvalSet],
    streams: Vec<(String, Vec<TrainingDoc>)>,
    cfg: &ContamConfig,
) -> Result<ContaminationReport> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(streams.len());
    for (stream_id, docs) in streams {
        let index = SubstringIndex::build(docs, cfg.substring_len, cfg.effective_stride())?;
        let per_dataset = eval_sets.iter().map(|set| check_set(set, &index, cfg)).collect();
        out.push(StreamContamination { stream_id, documents: index.docs.len(), per_dataset });
    }
    Ok(ContaminationReport {
        config: ReportConfig {
            substring_len: cfg.substring_len,
            stride: cfg.effective_stride(),
            samples_per_example: cfg.samples_per_example,
            mode: cfg.mode,
            seed: cfg.seed,
            normalization: vec!["lowercase".into(), "collapse_whitespace".into()],
            assumptions: "substring length, stride and probe count are tool defaults, not calibrated \
                          thresholds; fast mode samples probes and may miss matches"
                .into(),
        },
        streams: out,
        delta: Vec::new(),
    })
}

fn stream_err(path: &Path, reason: impl ToString) -> Error {
    Error::StreamUnreadable { path: path.to_path_buf(), reason: reason.to_string() }
}

fn read_text_lines(path: &Path) -> Result<Vec<(String, String)>> {
    let reader = crate::jsonl::open_reader(path).map_err(|e| stream_err(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufRead::lines(reader).enumerate() {
        let line = line.map_err(|e| stream_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| stream_err(path, format!("line {}: {e}", n + 1)))?;
        let text = value
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| stream_err(path, format!("line {}: missing string field \"text\"", n + 1)))?;
        let id = match value.get("id") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(v) if !v.is_null() => v.to_string(),
            _ => format!("{}", n + 1),
        };
        out.push((id, text.to_string()));
    }
    Ok(out)
}

/// Reads a JSONL training stream; each line needs a `text` field, `id` is
/// optional (line number otherwise).
pub fn load_training_stream(path: &Path) -> Result<Vec<TrainingDoc>> {
    Ok(read_text_lines(path)?.into_iter().map(|(id, text)| TrainingDoc { id, text }).collect())
}

/// Reads an evaluation set; the dataset id is the file stem.
pub fn load_eval_set(path: &Path) -> Result<EvalSet> {
    let dataset_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "-".into());
    let examples = read_text_lines(path)?.into_iter().map(|(id, text)| EvalExample { id, text }).collect();
    Ok(EvalSet { dataset_id, examples })
}
