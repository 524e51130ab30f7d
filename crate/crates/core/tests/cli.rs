use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use segfree::cli::run;
use segfree::eval::EmbeddingSet;
use segfree::sampler::SampleTrace;
use segfree::tensor::Tensor;
use segfree::Rng;

const TINY: &[&str] = &["--width", "8", "--mlp-hidden", "8", "--text-dim", "8", "--layers", "1"];

fn sfge(args: &[&str]) -> i32 {
    run(std::iter::once("sfge").chain(args.iter().copied()))
}

/// Train a tiny model into `dir` and return its checkpoint path.
fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let ck = dir.join("tiny.sfge");
    let out = dir.join("train");
    let mut args = vec!["train", "--out-dir", out.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()];
    args.extend_from_slice(&["--train-steps", "30", "--dataset-size", "40", "--batch", "2"]);
    args.extend_from_slice(TINY);
    assert_eq!(sfge(&args), 0);
    assert!(out.join("loss.csv").exists());
    assert!(out.join("config.resolved.txt").exists());
    ck
}

fn read_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn sample_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    let out = dir.path().join("sample");
    let args = [
        "sample",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--prompt",
        "a red square left of a blue circle",
        "--mode",
        "segfree",
        "--w",
        "7.5",
        "--wbar",
        "2.5",
        "--a",
        "10",
        "--ts",
        "10",
        "--seed",
        "0",
    ];
    assert_eq!(sfge(&args), 0);
    let first = read_dir(&out);
    for name in ["sample.pgm", "sample.sfge", "trace.jsonl", "semantic_l0.pgm", "config.resolved.txt"] {
        assert!(first.iter().any(|(n, _)| n == name), "missing {name}");
    }
    let trace = SampleTrace::read_jsonl(&fs::read_to_string(out.join("trace.jsonl")).unwrap()).unwrap();
    assert_eq!(trace.steps.len(), 20);
    assert_eq!(trace.steps.iter().filter(|s| s.mode.to_string() == "cfg").count(), 11);
    assert_eq!(sfge(&args), 0);
    assert_eq!(read_dir(&out), first);
}

#[test]
fn full_switch_delay_matches_classifier_free_images() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    let out = dir.path().join("cmp");
    let args = ["compare", "--checkpoint", ck.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--prompt", "a green cross", "--ts", "20"];
    assert_eq!(sfge(&args), 0);
    for suffix in ["sample.pgm", "sample.sfge", "trace.jsonl"] {
        let cf = fs::read(out.join(format!("cfg_{suffix}"))).unwrap();
        let sf = fs::read(out.join(format!("segfree_{suffix}"))).unwrap();
        assert_eq!(cf, sf, "{suffix}");
    }
    assert!(fs::read_to_string(out.join("compare.txt")).unwrap().contains("segfree"));
}

#[test]
fn subset_selects_three_bands_of_fifty() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.tsv");
    let mut rng = Rng::new(3, 0);
    let lines: String = (0..5000).map(|i| format!("prompt number {i}\t{}\n", rng.uniform())).collect();
    fs::write(&corpus, lines).unwrap();
    let out = dir.path().join("subset");
    assert_eq!(sfge(&["subset", "--corpus", corpus.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]), 0);
    let csv = fs::read_to_string(out.join("subset.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(csv.lines().next().unwrap(), "band,rank,prompt,score");
    assert_eq!(rows.len(), 150);
    for band in ["90", "50", "10"] {
        assert_eq!(rows.iter().filter(|r| r.split(',').next() == Some(band)).count(), 50, "band {band}");
    }
}

#[test]
fn frechet_and_curve_commands() {
    let dir = tempfile::tempdir().unwrap();
    let a = EmbeddingSet::unlabelled(Rng::new(1, 0).randn::<f64>(&[60, 3])).unwrap();
    let shifted: Vec<f64> = a.data().data().iter().map(|v| v + 1.0).collect();
    let b = EmbeddingSet::unlabelled(Tensor::new(vec![60, 3], shifted).unwrap()).unwrap();
    let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    a.write_csv(fs::File::create(&pa).unwrap()).unwrap();
    b.write_csv(fs::File::create(&pb).unwrap()).unwrap();
    let out = dir.path().join("f");
    assert_eq!(sfge(&["frechet", pa.to_str().unwrap(), pb.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]), 0);
    let d: f64 = fs::read_to_string(out.join("frechet.txt")).unwrap().trim().parse().unwrap();
    assert!((d - 3.0).abs() < 1e-8, "{d}");

    let out = dir.path().join("c");
    let args = ["curve", "--corpus-size", "400", "--sizes", "20,200", "--trials", "3", "--out-dir", out.to_str().unwrap()];
    assert_eq!(sfge(&args), 0);
    let csv = fs::read_to_string(out.join("curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn bench_and_attention_dump() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    let out = dir.path().join("b");
    let base = ["--checkpoint", ck.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--prompt", "a red square above a green circle"];
    let mut bench = vec!["bench", "--repeats", "5"];
    bench.extend_from_slice(&base);
    assert_eq!(sfge(&bench), 0);
    let text = fs::read_to_string(out.join("bench.txt")).unwrap();
    assert!(text.contains("cfg_passes,2") && text.contains("segfree_passes,2"), "{text}");

    let mut dump = vec!["dump-attn", "--dump-step", "5"];
    dump.extend_from_slice(&base);
    assert_eq!(sfge(&dump), 0);
    // BOS plus seven words.
    for tok in 0..8 {
        assert!(out.join(format!("attn_l0_tok{tok}.pgm")).exists(), "token {tok}");
    }
    assert!(out.join("semantic_override_l0.pgm").exists());
    assert!(fs::read(out.join("attn_l0_tok1.pgm")).unwrap().starts_with(b"P5\n"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_sfge");
    let status = |args: &[&str]| Command::new(exe).args(args).current_dir(dir.path()).status().unwrap().code();
    assert_eq!(status(&["no-such-command"]), Some(1));
    assert_eq!(status(&["sample", "--w=-1"]), Some(1));
    let missing = dir.path().join("absent.sfge");
    assert_eq!(status(&["sample", "--checkpoint", missing.to_str().unwrap(), "--prompt", "a red square"]), Some(2));
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "unknown_key = 3\n").unwrap();
    assert_eq!(status(&["sample", "--config", bad.to_str().unwrap()]), Some(1));
}
