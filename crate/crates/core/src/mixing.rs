//! Seeded mixing of document streams with per-source repeat factors.
//!
//! Each input line is emitted `floor(repeat)` times plus once more with
//! probability `frac(repeat)`. Every emission gets a random 64-bit sort key
//! and the output is the emissions ordered by key, which is a uniform
//! shuffle of the multiset. When the buffered emissions exceed the memory
//! limit, sorted runs are spilled to temp files and merged at the end; the
//! output does not depend on the limit.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hashing::hex;
use crate::jsonl;

/// A positive rational repeat factor, written in JSON as a number (`4`,
/// `2.5`) or a fraction string (`"5/2"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Repeat {
    num: u64,
    den: u64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Repeat {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidMixSpec(format!("repeat must be positive, got {num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(Repeat {
            num: num / g,
            den: den / g,
        })
    }

    pub fn whole(n: u64) -> Result<Self> {
        Repeat::new(n, 1)
    }

    pub fn floor(self) -> u64 {
        self.num / self.den
    }

    /// Fractional part as `(numerator, denominator)`.
    pub fn residual(self) -> (u64, u64) {
        (self.num % self.den, self.den)
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    fn parse_decimal(s: &str) -> Result<Self> {
        let bad = || Error::InvalidMixSpec(format!("bad repeat {s:?}"));
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 9 || int.is_empty() && frac.is_empty() {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        Repeat::new(int * den + frac, den)
    }
}

impl std::str::FromStr for Repeat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.split_once('/') {
            Some((n, d)) => {
                let bad = || Error::InvalidMixSpec(format!("bad repeat {s:?}"));
                Repeat::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?)
            }
            None => Repeat::parse_decimal(s),
        }
    }
}

impl fmt::Display for Repeat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl Serialize for Repeat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Repeat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(serde_json::Number),
            Str(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Num(n) => n.to_string(),
            Raw::Str(s) => s,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceRole {
    Augmented,
    Raw,
    TuningData,
    GeneralInstructions,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSource {
    pub stream_id: String,
    pub path: PathBuf,
    pub repeat: Repeat,
    pub role: SourceRole,
}

pub const DEFAULT_MEMORY_LIMIT: usize = 256 << 20;

fn default_memory_limit() -> usize {
    DEFAULT_MEMORY_LIMIT
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSpec {
    pub sources: Vec<MixSource>,
    pub seed: u64,
    /// Bytes of buffered lines before a sorted run is spilled to disk.
    #[serde(default = "default_memory_limit")]
    pub memory_limit: usize,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::InvalidMixSpec("no sources".into()));
        }
        for (i, s) in self.sources.iter().enumerate() {
            if self.sources[..i].iter().any(|o| o.stream_id == s.stream_id) {
                return Err(Error::InvalidMixSpec(format!("duplicate stream_id {:?}", s.stream_id)));
            }
        }
        Ok(())
    }

    /// Loads a spec; relative source paths are resolved against the spec's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: MixSpec = serde_json::from_str(&raw)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for s in &mut spec.sources {
            if s.path.is_relative() && !jsonl::is_stdio(&s.path) {
                s.path = base.join(&s.path);
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCount {
    pub stream_id: String,
    pub role: SourceRole,
    pub repeat: Repeat,
    pub input_docs: u64,
    pub emitted: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixManifest {
    pub seed: u64,
    pub sources: Vec<SourceCount>,
    pub total: u64,
    pub spilled_runs: usize,
    pub output_sha256: String,
}

struct Emission {
    key: u64,
    seq: u64,
    line: String,
}

struct Shuffler {
    buffer: Vec<Emission>,
    buffered_bytes: usize,
    limit: usize,
    runs: Vec<tempfile::NamedTempFile>,
}

impl Shuffler {
    fn push(&mut self, e: Emission) -> Result<()> {
        self.buffered_bytes += e.line.len() + 24;
        self.buffer.push(e);
        if self.buffered_bytes > self.limit {
            self.spill()?;
        }
        Ok(())
    }

    fn spill(&mut self) -> Result<()> {
        self.buffer.sort_unstable_by_key(|e| (e.key, e.seq));
        let file = tempfile::NamedTempFile::new().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let mut w = BufWriter::new(file.as_file());
        for e in self.buffer.drain(..) {
            write_record(&mut w, &e).map_err(|err| Error::io(file.path(), err))?;
        }
        w.flush().map_err(|err| Error::io(file.path(), err))?;
        drop(w);
        self.runs.push(file);
        self.buffered_bytes = 0;
        Ok(())
    }

    fn finish(mut self, out: &mut dyn Write, hasher: &mut Sha256) -> std::io::Result<(u64, usize)> {
        let mut emit = |line: &str, out: &mut dyn Write| -> std::io::Result<()> {
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")
        };
        let mut n = 0;
        if self.runs.is_empty() {
            self.buffer.sort_unstable_by_key(|e| (e.key, e.seq));
            for e in &self.buffer {
                emit(&e.line, out)?;
                n += 1;
            }
            return Ok((n, 0));
        }
        if !self.buffer.is_empty() {
            self.spill().map_err(std::io::Error::other)?;
        }
        let mut readers = self
            .runs
            .iter()
            .map(|f| f.reopen().map(BufReader::new))
            .collect::<std::io::Result<Vec<_>>>()?;
        let mut heads: Vec<Option<Emission>> = Vec::with_capacity(readers.len());
        let mut heap = BinaryHeap::new();
        for (i, r) in readers.iter_mut().enumerate() {
            let head = read_record(r)?;
            if let Some(e) = &head {
                heap.push(Reverse((e.key, e.seq, i)));
            }
            heads.push(head);
        }
        while let Some(Reverse((_, _, i))) = heap.pop() {
            let e = heads[i].take().expect("heap entry has a head");
            emit(&e.line, out)?;
            n += 1;
            heads[i] = read_record(&mut readers[i])?;
            if let Some(next) = &heads[i] {
                heap.push(Reverse((next.key, next.seq, i)));
            }
        }
        Ok((n, self.runs.len()))
    }
}

fn write_record(w: &mut impl Write, e: &Emission) -> std::io::Result<()> {
    w.write_all(&e.key.to_le_bytes())?;
    w.write_all(&e.seq.to_le_bytes())?;
    w.write_all(&(e.line.len() as u64).to_le_bytes())?;
    w.write_all(e.line.as_bytes())
}

fn read_record(r: &mut impl Read) -> std::io::Result<Option<Emission>> {
    let mut word = [0u8; 8];
    match r.read_exact(&mut word) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let key = u64::from_le_bytes(word);
    r.read_exact(&mut word)?;
    let seq = u64::from_le_bytes(word);
    r.read_exact(&mut word)?;
    let mut buf = vec![0; u64::from_le_bytes(word) as usize];
    r.read_exact(&mut buf)?;
    let line = String::from_utf8(buf).map_err(std::io::Error::other)?;
    Ok(Some(Emission { key, seq, line }))
}

/// Mixes the sources of `spec` into `out` and returns the manifest.
pub fn mix_to(spec: &MixSpec, out: &mut dyn Write) -> Result<MixManifest> {
    spec.validate()?;
    let mut residual_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut key_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    key_rng.set_stream(1);

    let mut shuffler = Shuffler {
        buffer: Vec::new(),
        buffered_bytes: 0,
        limit: spec.memory_limit.max(1),
        runs: Vec::new(),
    };
    let mut counts = Vec::with_capacity(spec.sources.len());
    let mut seq = 0u64;
    for src in &spec.sources {
        let unreadable = |reason: String| Error::SourceUnreadable {
            stream_id: src.stream_id.clone(),
            reason,
        };
        let reader = jsonl::open_reader(&src.path).map_err(|e| unreadable(e.to_string()))?;
        let (whole, (rnum, rden)) = (src.repeat.floor(), src.repeat.residual());
        let mut count = SourceCount {
            stream_id: src.stream_id.clone(),
            role: src.role,
            repeat: src.repeat,
            input_docs: 0,
            emitted: 0,
        };
        for line in reader.lines() {
            let line = line.map_err(|e| unreadable(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            count.input_docs += 1;
            let extra = rnum > 0 && residual_rng.gen_range(0..rden) < rnum;
            let copies = whole + u64::from(extra);
            for _ in 0..copies {
                shuffler.push(Emission {
                    key: key_rng.next_u64(),
                    seq,
                    line: line.clone(),
                })?;
                seq += 1;
            }
            count.emitted += copies;
        }
        counts.push(count);
    }

    let mut hasher = Sha256::new();
    let (total, spilled_runs) = shuffler
        .finish(out, &mut hasher)
        .map_err(|e| Error::io("<mix output>", e))?;
    debug_assert_eq!(total, counts.iter().map(|c| c.emitted).sum::<u64>());
    Ok(MixManifest {
        seed: spec.seed,
        sources: counts,
        total,
        spilled_runs,
        output_sha256: hex(&hasher.finalize()),
    })
}

/// Mixes into `out_path` and writes the manifest next to it as
/// `<out>.manifest.json` (`mix.manifest.json` when writing to stdout).
pub fn mix(spec: &MixSpec, out_path: &Path) -> Result<MixManifest> {
    let mut w = jsonl::open_writer(out_path)?;
    let manifest = mix_to(spec, &mut w)?;
    w.flush().map_err(|e| Error::io(out_path, e))?;
    let manifest_path = manifest_path_for(out_path);
    std::fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn manifest_path_for(out_path: &Path) -> PathBuf {
    if jsonl::is_stdio(out_path) {
        return PathBuf::from("mix.manifest.json");
    }
    let mut name = out_path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out_path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeat_parsing() {
        assert_eq!("4".parse::<Repeat>().unwrap(), Repeat::whole(4).unwrap());
        assert_eq!("2.5".parse::<Repeat>().unwrap(), Repeat::new(5, 2).unwrap());
        assert_eq!("5/2".parse::<Repeat>().unwrap(), Repeat::new(5, 2).unwrap());
        assert_eq!(".25".parse::<Repeat>().unwrap(), Repeat::new(1, 4).unwrap());
        assert!("0".parse::<Repeat>().is_err());
        assert!("-1".parse::<Repeat>().is_err());
        assert!("x".parse::<Repeat>().is_err());
        let r: Repeat = serde_json::from_str("2.5").unwrap();
        assert_eq!((r.floor(), r.residual()), (2, (1, 2)));
        assert_eq!(serde_json::to_string(&r).unwrap(), "\"5/2\"");
    }

    #[test]
    fn duplicate_stream_ids_rejected() {
        let src = MixSource {
            stream_id: "a".into(),
            path: "x".into(),
            repeat: Repeat::whole(1).unwrap(),
            role: SourceRole::Raw,
        };
        let spec = MixSpec {
            sources: vec![src.clone(), src],
            seed: 0,
            memory_limit: 10,
        };
        assert!(matches!(spec.validate(), Err(Error::InvalidMixSpec(_))));
    }

    #[test]
    fn manifest_path_sits_beside_output() {
        assert_eq!(manifest_path_for(Path::new("/tmp/o/mixed.jsonl")), PathBuf::from("/tmp/o/mixed.jsonl.manifest.json"));
    }
}
