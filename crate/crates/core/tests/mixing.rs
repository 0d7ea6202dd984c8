use std::path::Path;

use ipt_core::mixing::*;

fn write_source(dir: &Path, name: &str, n: usize) -> std::path::PathBuf {
    let path = dir.join(name);
    let lines: Vec<String> = (0..n).map(|i| format!("{{\"id\":\"{name}-{i}\",\"text\":\"doc {i}\"}}")).collect();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

fn source(stream_id: &str, path: std::path::PathBuf, repeat: &str) -> MixSource {
    MixSource { stream_id: stream_id.into(), path, repeat: repeat.parse().unwrap(), role: SourceRole::Augmented }
}

fn run(spec: &MixSpec) -> (String, MixManifest) {
    let mut out = Vec::new();
    let manifest = mix_to(spec, &mut out).unwrap();
    (String::from_utf8(out).unwrap(), manifest)
}

#[test]
fn integer_repeat_emits_r_times_n() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_source(dir.path(), "aug", 10);
    let spec = MixSpec { sources: vec![source("aug", path, "4")], seed: 1, memory_limit: 1 << 20 };
    let (out, manifest) = run(&spec);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 40);
    assert_eq!(manifest.total, 40);
    for i in 0..10 {
        let needle = format!("\"aug-{i}\"");
        assert_eq!(lines.iter().filter(|l| l.contains(&needle)).count(), 4);
    }
}

#[test]
fn repeat_one_is_a_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_source(dir.path(), "raw", 50);
    let input = std::fs::read_to_string(&path).unwrap();
    let spec = MixSpec { sources: vec![source("raw", path, "1")], seed: 9, memory_limit: 1 << 20 };
    let (out, _) = run(&spec);
    let mut a: Vec<&str> = input.lines().collect();
    let mut b: Vec<&str> = out.lines().collect();
    assert_ne!(a, b);
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

#[test]
fn output_is_independent_of_spilling_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let raw = write_source(dir.path(), "raw", 100);
    let aug = write_source(dir.path(), "aug", 10);
    let mk = |limit| MixSpec {
        sources: vec![source("raw", raw.clone(), "1"), source("aug", aug.clone(), "5/2")],
        seed: 42,
        memory_limit: limit,
    };
    let (in_memory, m1) = run(&mk(1 << 20));
    let (spilled, m2) = run(&mk(200));
    assert_eq!(m1.spilled_runs, 0);
    assert!(m2.spilled_runs > 1);
    assert_eq!(in_memory, spilled);
    assert_eq!(m1.output_sha256, m2.output_sha256);
    assert_eq!(run(&mk(1 << 20)).0, in_memory);
}

#[test]
fn fractional_repeat_counts_are_pinned() {
    let dir = tempfile::tempdir().unwrap();
    let raw = write_source(dir.path(), "raw", 100);
    let aug = write_source(dir.path(), "aug", 10);
    let spec = MixSpec {
        sources: vec![source("raw", raw, "1"), source("aug", aug, "5/2")],
        seed: 42,
        memory_limit: 1 << 20,
    };
    let (_, manifest) = run(&spec);
    let emitted: Vec<u64> = manifest.sources.iter().map(|s| s.emitted).collect();
    assert_eq!(emitted, vec![100, 24]);

    let many = write_source(dir.path(), "many", 1000);
    let spec = MixSpec { sources: vec![source("many", many, "0.25")], seed: 7, memory_limit: 1 << 20 };
    assert_eq!(run(&spec).1.total, 242);
}
