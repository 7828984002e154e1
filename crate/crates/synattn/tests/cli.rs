//! End-to-end checks of the `synattn` binary: exit codes and the
//! `inspect` report format.

use std::path::PathBuf;
use std::process::Command;

use synattn::cli::inspect_report;
use synattn::conllu::{parse_conllu, Vocab};
use synattn::train::featurize;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_synattn"))
}

const CHAIN: &str = "\
# sent_id = chain-3
1\ta\t_\tNOUN\t_\t_\t0\troot\t_\t_
2\tb\t_\tNOUN\t_\t_\t1\tdep\t_\t_
3\tc\t_\tNOUN\t_\t_\t2\tdep\t_\t_
";

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_is_data_error() {
    let out = bin()
        .args(["inspect", "--input", "/nonexistent/corpus.conllu"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty(), "expected a diagnostic on stderr");
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn inspect_chain_matches_library_report() {
    let dir = tempfile::tempdir().unwrap();
    let path: PathBuf = dir.path().join("chain.conllu");
    std::fs::write(&path, CHAIN).unwrap();
    let out = bin()
        .args(["inspect", "--input", path.to_str().unwrap(), "--delta", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();

    // Oracle: build the same report through the library.
    let sentences = parse_conllu(CHAIN).unwrap();
    let vocab = Vocab::from_corpus(sentences[0].words.iter().map(|w| w.as_str()));
    let f = featurize(&sentences[0], &vocab).unwrap();
    let expected = inspect_report("chain-3", &f.dist, 1, &f.depths.depths);
    assert_eq!(stdout, expected);

    assert!(stdout.starts_with("# chain-3\n"));
    assert!(stdout.contains("-inf"), "delta=1 mask should close some pairs");
}

#[test]
fn grad_check_prints_small_error_and_exits_zero() {
    let out = bin().arg("grad-check").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let err: f64 = stdout
        .split_whitespace()
        .rev()
        .find_map(|tok| tok.parse().ok())
        .expect("grad-check should print a numeric error");
    assert!(err < 1e-4, "max relative error {} (limit 1e-4)", err);
}

#[test]
fn preprocess_then_train_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("task.conllu");
    let batch = dir.path().join("task.bin");
    let ckpt = dir.path().join("model.bin");

    let out = bin()
        .args([
            "make-task",
            "--kind",
            "structure",
            "--seed",
            "3",
            "--size",
            "20",
            "--output",
            corpus.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));

    let out = bin()
        .args([
            "preprocess",
            "--input",
            corpus.to_str().unwrap(),
            "--output",
            batch.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));

    let out = bin()
        .args([
            "train",
            "--input",
            batch.to_str().unwrap(),
            "--output",
            ckpt.to_str().unwrap(),
            "--steps",
            "5",
            "--batch-size",
            "4",
            "--gat-layers",
            "1",
            "--gat-heads",
            "1",
            "--d-g",
            "8",
            "--n-layers",
            "1",
            "--n-heads",
            "1",
            "--d-model",
            "16",
            "--d-k",
            "8",
            "--d-v",
            "8",
            "--syntax-layers",
            "0",
            "--syntax-heads",
            "0",
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let header = std::fs::read(&ckpt).unwrap();
    assert_eq!(&header[..8], b"SYNATTN1");
    assert!(ckpt.with_extension("bin.log.jsonl").exists() || {
        // log path is `<output>.log.jsonl`
        dir.path().join("model.bin.log.jsonl").exists()
    });
    assert!(dir.path().join("model.bin.config.json").exists());
}
