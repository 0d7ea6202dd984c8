use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use ipt_core::backend::{BackendError, CompletionBackend, CompletionRequest, RetryPolicy, StubBackend, StubMode};
use ipt_core::packing::{TokenCounter, WhitespaceCounter};
use ipt_core::synthesis::*;
use ipt_core::template::{render_example, InstructionResponsePair, SentinelConfig, SynthesisExample};
use ipt_core::Error;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("d{i}")).collect()
}

fn corpus(n: usize) -> HashMap<String, String> {
    ids(n)
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, format!("document number {i} talks about topic{i} and more words")))
        .collect()
}

fn settings() -> SynthesisSettings {
    SynthesisSettings {
        retry: RetryPolicy::none(),
        ..SynthesisSettings::default()
    }
}

#[test]
fn plan_sizes() {
    let p = plan_rounds(&ids(9), 3, 1).unwrap();
    assert_eq!(p.partitions.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3]);
    let p = plan_rounds(&ids(10), 3, 1).unwrap();
    assert_eq!(p.partitions.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 3]);
    let mut all: Vec<String> = p.partitions.concat();
    all.sort();
    let mut want = ids(10);
    want.sort();
    assert_eq!(all, want);
    assert_eq!(plan_rounds(&ids(10), 3, 1).unwrap(), p);
    assert!(matches!(plan_rounds(&ids(2), 3, 1), Err(Error::InsufficientDocuments { .. })));
    assert!(matches!(plan_rounds(&ids(2), 0, 1), Err(Error::InsufficientDocuments { .. })));
}

#[test]
fn conversion_fraction_then_two_rounds() {
    let selected = converted_count(200_000_000, 0.2);
    assert_eq!(selected, 40_000_000);
    assert_eq!(partition_sizes(selected, 2), vec![20_000_000, 20_000_000]);
    assert_eq!(converted_count(10, 0.2), 2);
    assert_eq!(converted_count(10, 1.0), 10);

    let (sel, rest) = select_fraction(&ids(10), 0.2, 3);
    assert_eq!((sel.len(), rest.len()), (2, 8));
    assert!(sel.iter().all(|s| !rest.contains(s)));
}

#[test]
fn prompt_layouts() {
    let cfg = SentinelConfig::default();
    let counter = WhitespaceCounter::default();
    let empty = ChainState::default();
    assert_eq!(
        build_inference_prompt(&empty, "T", &cfg, 100, &counter).unwrap(),
        "<s> <CON> T </CON>\n\n"
    );

    let prior = SynthesisExample::new("P", vec![InstructionResponsePair::free_form("I", "R")]);
    let one = ChainState {
        history: vec![prior.clone()],
    };
    assert_eq!(
        build_inference_prompt(&one, "T", &cfg, 100, &counter).unwrap(),
        "<s> <CON> P </CON>\n\n<QUE> I <ANS> R </END> </s><s> <CON> T </CON>\n\n"
    );
}

#[test]
fn oldest_history_is_evicted_first() {
    let cfg = SentinelConfig::default();
    let counter = WhitespaceCounter::words();
    let long = SynthesisExample::new(
        "many many many many many many many many many many words",
        vec![InstructionResponsePair::free_form("I", "R")],
    );
    let short = SynthesisExample::new("short", vec![InstructionResponsePair::free_form("J", "S")]);
    let state = ChainState {
        history: vec![long, short.clone()],
    };
    let stub_tokens = counter.count("<s> <CON> T </CON>\n\n");
    let short_tokens = counter.count(&render_example(&short, &cfg).unwrap());
    let budget = stub_tokens + short_tokens;
    let prompt = build_inference_prompt(&state, "T", &cfg, budget, &counter).unwrap();
    assert_eq!(prompt, format!("{}<s> <CON> T </CON>\n\n", render_example(&short, &cfg).unwrap()));

    assert!(matches!(
        build_inference_prompt(&state, "T", &cfg, stub_tokens - 1, &counter),
        Err(Error::PromptTooLong { .. })
    ));
}

fn run_round0(backend: &dyn CompletionBackend, n: usize) -> RoundOutput {
    let plan = plan_rounds(&ids(n), 1, 5).unwrap();
    synthesize_round(
        &plan,
        0,
        &corpus(n),
        &ChainStore::default(),
        backend,
        &settings(),
        &WhitespaceCounter::default(),
    )
    .unwrap()
}

#[test]
fn fixed_stub_yields_its_pairs_for_every_document() {
    let fixed = StubBackend::new(
        StubMode::Fixed("<QUE> Q <ANS> A </END>\n\n<QUE> Q2 <ANS> A2 </END> </s>".into()),
        SentinelConfig::default(),
    );
    let out = run_round0(&fixed, 3);
    assert_eq!(out.examples.len(), 3);
    for ex in &out.examples {
        assert_eq!(
            ex.example.pairs,
            vec![
                InstructionResponsePair::free_form("Q", "A"),
                InstructionResponsePair::free_form("Q2", "A2")
            ]
        );
        assert!(ex.history.is_empty());
    }
    assert!(out.issues.is_empty());
}

/// Emits garbage for prompts mentioning `topic1`, valid pairs otherwise.
struct GarbageFor(&'static str);

impl CompletionBackend for GarbageFor {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        if req.prompt.contains(self.0) {
            Ok("nothing useful".into())
        } else {
            Ok("<QUE> Q <ANS> A </END> ".into())
        }
    }
}

#[test]
fn garbage_generation_becomes_an_issue() {
    let out = run_round0(&GarbageFor("topic1 "), 3);
    assert_eq!(out.examples.len(), 2);
    let empty: Vec<_> = out
        .issues
        .iter()
        .filter(|i| i.kind == SynthesisIssueKind::EmptySynthesis)
        .collect();
    assert_eq!(empty.len(), 1);
    assert_eq!(empty[0].doc_id, "d1");
}

struct AlwaysDown(AtomicUsize);

impl CompletionBackend for AlwaysDown {
    fn complete(&self, _: &CompletionRequest) -> Result<String, BackendError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Err(BackendError::Transport("connection refused".into()))
    }
}

#[test]
fn transport_failures_are_retried_then_reported() {
    let backend = AlwaysDown(AtomicUsize::new(0));
    let plan = plan_rounds(&ids(2), 1, 0).unwrap();
    let s = SynthesisSettings {
        retry: RetryPolicy { backoff_ms: vec![0, 0, 0] },
        ..settings()
    };
    let out = synthesize_round(&plan, 0, &corpus(2), &ChainStore::default(), &backend, &s, &WhitespaceCounter::default()).unwrap();
    assert!(out.examples.is_empty());
    assert_eq!(out.issues.len(), 2);
    assert!(out.issues.iter().all(|i| i.kind == SynthesisIssueKind::BackendError));
    assert_eq!(backend.0.load(Ordering::SeqCst), 8);
}

/// Answers out of order to check that results keep partition order.
struct Jittery;

impl CompletionBackend for Jittery {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let delay = req.prompt.len() % 7;
        std::thread::sleep(Duration::from_millis(delay as u64));
        StubBackend::echo(2, 0).complete(req)
    }
}

#[test]
fn output_order_follows_partition_order() {
    let plan = plan_rounds(&ids(40), 1, 9).unwrap();
    let s = SynthesisSettings {
        in_flight: 8,
        ..settings()
    };
    let out = synthesize_round(&plan, 0, &corpus(40), &ChainStore::default(), &Jittery, &s, &WhitespaceCounter::default()).unwrap();
    let got: Vec<&str> = out.examples.iter().map(|e| e.doc_id.as_str()).collect();
    let want: Vec<&str> = plan.partitions[0].iter().map(String::as_str).collect();
    assert_eq!(got, want);
}

fn record(doc: &str, round: usize, history: &[&str]) -> ChainedExample {
    ChainedExample {
        doc_id: doc.into(),
        round,
        history: history.iter().map(|s| s.to_string()).collect(),
        example: SynthesisExample::new(format!("text of {doc}"), vec![InstructionResponsePair::free_form("q", "a")])
            .with_ids(doc, "synthesized"),
    }
}

#[test]
fn chain_assignment_round_robin() {
    let plan = RoundPlan {
        num_rounds: 2,
        partitions: vec![ids(3), vec!["x".into(), "y".into(), "z".into()]],
        seed: 4,
    };
    let mut store = ChainStore::default();
    store.push_round(ids(3).iter().map(|d| record(d, 0, &[])).collect());
    let chains = assign_chains(&plan, 1, &store, 4).unwrap();
    let mut anchors: Vec<String> = chains.iter().map(|(_, c)| c.history[0].source_id.clone()).collect();
    anchors.sort();
    assert_eq!(anchors, ids(3));

    let plan = RoundPlan {
        num_rounds: 2,
        partitions: vec![ids(2), vec!["w".into(), "x".into(), "y".into(), "z".into()]],
        seed: 4,
    };
    let mut store = ChainStore::default();
    store.push_round(ids(2).iter().map(|d| record(d, 0, &[])).collect());
    let chains = assign_chains(&plan, 1, &store, 4).unwrap();
    let mut uses: HashMap<String, usize> = HashMap::new();
    for (_, c) in &chains {
        *uses.entry(c.history[0].source_id.clone()).or_default() += 1;
    }
    assert_eq!(uses.values().copied().collect::<Vec<_>>(), vec![2, 2]);

    let empty_store = {
        let mut s = ChainStore::default();
        s.push_round(Vec::new());
        s
    };
    assert!(matches!(
        assign_chains(&plan, 1, &empty_store, 4),
        Err(Error::NoPriorOutputs { round: 1 })
    ));
}

#[test]
fn round_two_histories_are_ordered() {
    let plan = RoundPlan {
        num_rounds: 3,
        partitions: vec![vec!["a".into()], vec!["b".into()], vec!["c".into()]],
        seed: 0,
    };
    let mut store = ChainStore::default();
    store.push_round(vec![record("a", 0, &[])]);
    store.push_round(vec![record("b", 1, &["a"])]);
    let chains = assign_chains(&plan, 2, &store, 0).unwrap();
    let history: Vec<&str> = chains[0].1.history.iter().map(|e| e.source_id.as_str()).collect();
    assert_eq!(history, vec!["a", "b"]);
}

fn stub_run<'a>(
    dir: &std::path::Path,
    plan: RoundPlan,
    settings: &'a SynthesisSettings,
    stub: &'a StubBackend,
    counter: &'a WhitespaceCounter,
) -> SynthesisRun<'a> {
    SynthesisRun {
        dir: dir.to_path_buf(),
        plan,
        settings,
        backend: stub,
        backend_id: "stub:echo".into(),
        counter,
    }
}

#[test]
fn two_round_prompts_contain_one_prior_example() {
    let tmp = tempfile::tempdir().unwrap();
    let s = settings();
    let stub = StubBackend::echo(3, 0);
    let counter = WhitespaceCounter::default();
    let run = stub_run(tmp.path(), plan_rounds(&ids(4), 2, 11).unwrap(), &s, &stub, &counter);
    let store = run.run(&corpus(4), None).unwrap();
    assert_eq!(store.completed_rounds(), 2);

    let round0: Vec<String> = store
        .round(0)
        .iter()
        .map(|r| render_example(&r.example, &s.sentinels).unwrap())
        .collect();
    let prompts = run.prompts(1).unwrap();
    assert_eq!(prompts.len(), 2);
    for p in prompts {
        assert_eq!(p.prompt.matches("<s>").count(), 2);
        let hits = round0.iter().filter(|r| p.prompt.starts_with(r.as_str())).count();
        assert_eq!(hits, 1);
    }
    // Every stored pair block re-renders and re-parses to itself.
    for rec in store.iter() {
        let text = render_example(&rec.example, &s.sentinels).unwrap();
        let back = ipt_core::template::parse_example(&text, &s.sentinels).unwrap();
        assert_eq!(back.pairs, rec.example.pairs);
    }
    // 3 pairs per successful document.
    assert_eq!(store.iter().map(|r| r.example.pairs.len()).sum::<usize>(), 3 * 4);
}

fn read_dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .flatten()
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn resume_after_first_round_matches_uninterrupted_run() {
    let s = settings();
    let stub = StubBackend::echo(2, 7);
    let counter = WhitespaceCounter::default();
    let plan = plan_rounds(&ids(12), 3, 2).unwrap();

    let whole = tempfile::tempdir().unwrap();
    stub_run(whole.path(), plan.clone(), &s, &stub, &counter).run(&corpus(12), None).unwrap();

    let split = tempfile::tempdir().unwrap();
    let run = stub_run(split.path(), plan.clone(), &s, &stub, &counter);
    let partial = run.run(&corpus(12), Some(0)).unwrap();
    assert_eq!(partial.completed_rounds(), 1);
    assert!(!split.path().join("round-1.done").exists());
    let resumed = run.run(&corpus(12), None).unwrap();
    assert_eq!(resumed.completed_rounds(), 3);

    assert_eq!(read_dir_bytes(whole.path()), read_dir_bytes(split.path()));
    assert_eq!(load_store(split.path()).unwrap().completed_rounds(), 3);
}

#[test]
fn changed_settings_invalidate_stored_rounds() {
    let tmp = tempfile::tempdir().unwrap();
    let counter = WhitespaceCounter::default();
    let plan = plan_rounds(&ids(4), 2, 2).unwrap();
    let s = settings();
    let first = StubBackend::echo(2, 1);
    stub_run(tmp.path(), plan.clone(), &s, &first, &counter).run(&corpus(4), None).unwrap();
    let before = std::fs::read(tmp.path().join("round-0.jsonl")).unwrap();

    let s2 = SynthesisSettings {
        max_new_tokens: 10,
        ..settings()
    };
    let second = StubBackend::echo(1, 1);
    stub_run(tmp.path(), plan, &s2, &second, &counter).run(&corpus(4), None).unwrap();
    let after = std::fs::read(tmp.path().join("round-0.jsonl")).unwrap();
    assert_ne!(before, after);
}
