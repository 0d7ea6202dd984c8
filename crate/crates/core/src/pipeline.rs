//! End-to-end driver: plan → synthesize → assemble → mix, with a manifest of
//! content hashes so unchanged stages are skipped on re-runs.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_mshot_with, load_template_pool, AssembledLine, TemplatePool};
use crate::backend::open_backend;
use crate::config::PipelineConfig;
use crate::corpus::{load_corpus, RawDocument};
use crate::error::{Error, Result};
use crate::hashing::{sha256_file, sha256_json, write_atomic};
use crate::jsonl;
use crate::mixing::{self, MixSource, MixSpec, SourceRole};
use crate::synthesis::{plan_rounds, select_fraction, RoundPlan, SynthesisRun};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PLAN_FILE: &str = "plan.json";
pub const SYNTHESIS_DIR: &str = "synthesis";
pub const AUGMENTED_FILE: &str = "augmented.jsonl";
pub const RAW_FILE: &str = "raw.jsonl";
pub const MIXED_FILE: &str = "mixed.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the output directory for stage outputs.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Hash of everything the stage's output depends on.
    pub key: String,
    pub outputs: Vec<FileHash>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub effective_config: PipelineConfig,
    pub inputs: Vec<FileHash>,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineOptions {
    /// Stop once this synthesis round (0-based) is persisted.
    pub stop_after_round: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStatus {
    Complete,
    Stopped { completed_rounds: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineOutcome {
    pub status: PipelineStatus,
    pub manifest: PipelineManifest,
    pub skipped: Vec<String>,
    pub augmented_docs: usize,
    pub raw_docs: usize,
    pub synthesis_issues: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlanOutput {
    plan: RoundPlan,
    passthrough: Vec<String>,
}

struct Driver<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    previous: Option<PipelineManifest>,
    stages: Vec<StageRecord>,
    skipped: Vec<String>,
}

impl Driver<'_> {
    fn hash_outputs(&self, rel: &[PathBuf]) -> Result<Vec<FileHash>> {
        rel.iter()
            .map(|p| Ok(FileHash { path: p.clone(), sha256: sha256_file(&self.out.join(p))? }))
            .collect()
    }

    /// The recorded outputs of `name` if its key matches and every output
    /// still hashes to the recorded value.
    fn reusable(&self, name: &str, key: &str) -> Option<StageRecord> {
        let prev = self.previous.as_ref()?.stages.iter().find(|s| s.name == name && s.key == key)?;
        let intact = prev.outputs.iter().all(|o| {
            let path = self.out.join(&o.path);
            path.is_file() && sha256_file(&path).is_ok_and(|h| h == o.sha256)
        });
        intact.then(|| prev.clone())
    }

    fn stage(
        &mut self,
        name: &'static str,
        key: String,
        run: impl FnOnce(&Self) -> Result<Vec<PathBuf>>,
    ) -> Result<&StageRecord> {
        let record = match self.reusable(name, &key) {
            Some(rec) => {
                self.skipped.push(name.to_string());
                rec
            }
            None => {
                let outputs = run(self).map_err(|e| e.in_stage(name))?;
                StageRecord { name: name.into(), key, outputs: self.hash_outputs(&outputs).map_err(|e| e.in_stage(name))? }
            }
        };
        self.stages.push(record);
        Ok(self.stages.last().expect("just pushed"))
    }
}

fn key_of(value: serde_json::Value) -> Result<String> {
    sha256_json(&value)
}

fn load_pool(cfg: &PipelineConfig) -> Result<TemplatePool> {
    match &cfg.template_pool {
        Some(p) => load_template_pool(p),
        None => Ok(TemplatePool::builtin()),
    }
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    run_pipeline_with(cfg, PipelineOptions::default())
}

pub fn run_pipeline_with(cfg: &PipelineConfig, opts: PipelineOptions) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest_path = out.join(MANIFEST_FILE);
    let previous = std::fs::read(&manifest_path).ok().and_then(|b| serde_json::from_slice(&b).ok());

    let mut inputs = vec![FileHash { path: cfg.corpus.clone(), sha256: sha256_file(&cfg.corpus)? }];
    for p in cfg.template_pool.iter().chain(&cfg.mix_spec) {
        inputs.push(FileHash { path: p.clone(), sha256: sha256_file(p)? });
    }
    let corpus: Vec<RawDocument> = load_corpus(&cfg.corpus).map_err(|e| e.in_stage("plan"))?;
    let mut d = Driver { cfg, out: out.clone(), previous, stages: Vec::new(), skipped: Vec::new() };

    // plan
    let key = key_of(serde_json::json!({
        "corpus": inputs[0].sha256, "rounds": cfg.num_rounds, "fraction": cfg.fraction, "seed": cfg.seed,
    }))?;
    d.stage("plan", key, |d| {
        let ids: Vec<String> = corpus.iter().map(|doc| doc.id.clone()).collect();
        let (selected, passthrough) = select_fraction(&ids, d.cfg.fraction, d.cfg.seed);
        let plan = plan_rounds(&selected, d.cfg.num_rounds, d.cfg.seed)?;
        write_atomic(&d.out.join(PLAN_FILE), &serde_json::to_vec_pretty(&PlanOutput { plan, passthrough })?)?;
        Ok(vec![PathBuf::from(PLAN_FILE)])
    })?;
    let plan_out: PlanOutput = serde_json::from_slice(
        &std::fs::read(out.join(PLAN_FILE)).map_err(|e| Error::io(out.join(PLAN_FILE), e))?,
    )?;

    // synthesize
    let settings = cfg.synthesis_settings();
    let counter = cfg.token_counter.counter();
    let synth_dir = out.join(SYNTHESIS_DIR);
    let key = key_of(serde_json::json!({
        "plan": d.stages[0].outputs,
        "settings": settings,
        "backend": cfg.backend.url,
        "counter": cfg.token_counter,
    }))?;
    let texts: HashMap<String, String> = corpus.iter().map(|doc| (doc.id.clone(), doc.text.clone())).collect();
    let rounds = plan_out.plan.num_rounds;
    if let Some(stop) = opts.stop_after_round.filter(|&r| r + 1 < rounds) {
        if d.reusable("synthesize", &key).is_none() {
            let backend = open_backend(&cfg.backend.url, &cfg.sentinels, cfg.backend.timeout()).map_err(|e| e.in_stage("synthesize"))?;
            let run = SynthesisRun {
                dir: synth_dir,
                plan: plan_out.plan.clone(),
                settings: &settings,
                backend: backend.as_ref(),
                backend_id: cfg.backend.url.clone(),
                counter: &counter,
            };
            let store = run.run(&texts, Some(stop)).map_err(|e| e.in_stage("synthesize"))?;
            let manifest = PipelineManifest { effective_config: cfg.clone(), inputs, stages: d.stages };
            return Ok(PipelineOutcome {
                status: PipelineStatus::Stopped { completed_rounds: store.completed_rounds() },
                manifest,
                skipped: d.skipped,
                augmented_docs: 0,
                raw_docs: 0,
                synthesis_issues: 0,
            });
        }
    }
    d.stage("synthesize", key, |d| {
        let backend = open_backend(&d.cfg.backend.url, &d.cfg.sentinels, d.cfg.backend.timeout())?;
        let run = SynthesisRun {
            dir: synth_dir.clone(),
            plan: plan_out.plan.clone(),
            settings: &settings,
            backend: backend.as_ref(),
            backend_id: d.cfg.backend.url.clone(),
            counter: &counter,
        };
        run.run(&texts, None)?;
        let mut files = Vec::new();
        for r in 0..rounds {
            for suffix in [".jsonl", ".prompts.jsonl", ".issues.jsonl"] {
                files.push(Path::new(SYNTHESIS_DIR).join(format!("round-{r}{suffix}")));
            }
        }
        Ok(files)
    })?;
    let store = crate::synthesis::load_store(&out.join(SYNTHESIS_DIR)).map_err(|e| e.in_stage("assemble"))?;
    let mut synthesis_issues = 0;
    for r in 0..rounds {
        let path = out.join(SYNTHESIS_DIR).join(format!("round-{r}.issues.jsonl"));
        synthesis_issues += jsonl::read_to_string(&path).map(|s| s.lines().count()).unwrap_or(0);
    }

    // assemble
    let pool = load_pool(cfg).map_err(|e| e.in_stage("assemble"))?;
    let key = key_of(serde_json::json!({
        "synthesis": d.stages[1].outputs,
        "plan": d.stages[0].outputs,
        "pool": pool,
        "seed": cfg.seed,
        "counter": cfg.token_counter,
    }))?;
    let mut augmented_docs = 0;
    let mut raw_docs = 0;
    d.stage("assemble", key, |d| {
        let mut lines = Vec::new();
        let mut covered = HashSet::new();
        for chain in store.leaf_chains() {
            let doc = assemble_mshot_with(&chain, &pool, d.cfg.seed, &counter)?;
            covered.extend(doc.source_ids.iter().cloned());
            lines.push(AssembledLine::from(&doc));
        }
        // Documents outside the converted fraction, plus converted ones for
        // which synthesis produced nothing, stay raw.
        let raw: Vec<&RawDocument> = corpus.iter().filter(|doc| !covered.contains(&doc.id)).collect();
        jsonl::write(&d.out.join(AUGMENTED_FILE), &lines)?;
        jsonl::write(&d.out.join(RAW_FILE), &raw)?;
        Ok(vec![PathBuf::from(AUGMENTED_FILE), PathBuf::from(RAW_FILE)])
    })?;
    for (file, count) in [(AUGMENTED_FILE, &mut augmented_docs), (RAW_FILE, &mut raw_docs)] {
        *count = jsonl::read_to_string(&out.join(file)).map_err(|e| e.in_stage("assemble"))?.lines().count();
    }

    // mix
    let extra = match &cfg.mix_spec {
        Some(p) => Some(MixSpec::load(p).map_err(|e| e.in_stage("mix"))?),
        None => None,
    };
    let mut sources = vec![
        MixSource {
            stream_id: "augmented".into(),
            path: out.join(AUGMENTED_FILE),
            repeat: cfg.augmented_repeat,
            role: SourceRole::Augmented,
        },
        MixSource { stream_id: "raw".into(), path: out.join(RAW_FILE), repeat: cfg.raw_repeat, role: SourceRole::Raw },
    ];
    let mut memory_limit = mixing::DEFAULT_MEMORY_LIMIT;
    if let Some(extra) = &extra {
        sources.extend(extra.sources.iter().cloned());
        memory_limit = extra.memory_limit;
    }
    let spec = MixSpec { sources, seed: cfg.seed, memory_limit };
    let key = key_of(serde_json::json!({
        "assemble": d.stages[2].outputs,
        "inputs": inputs,
        "augmented_repeat": cfg.augmented_repeat,
        "raw_repeat": cfg.raw_repeat,
        "seed": cfg.seed,
    }))?;
    d.stage("mix", key, |d| {
        let out_path = d.out.join(MIXED_FILE);
        mixing::mix(&spec, &out_path)?;
        let manifest_name = mixing::manifest_path_for(&out_path);
        let rel = manifest_name.file_name().map(PathBuf::from).unwrap_or_default();
        Ok(vec![PathBuf::from(MIXED_FILE), rel])
    })?;

    let manifest = PipelineManifest { effective_config: cfg.clone(), inputs, stages: d.stages };
    write_atomic(&manifest_path, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(PipelineOutcome {
        status: PipelineStatus::Complete,
        manifest,
        skipped: d.skipped,
        augmented_docs,
        raw_docs,
        synthesis_issues,
    })
}
